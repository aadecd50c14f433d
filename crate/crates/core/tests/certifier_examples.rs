use fpcert_core::certifier::{layer_coeffs, overflow_check_layer, radii, Certifier, DotConstants, Mode, OverflowCondition, Verdict};
use fpcert_core::exact::{default_rel_tol, dyadic_up, rat_int, sqrt_up, Dyadic, Rat};
use fpcert_core::exec::{fp_forward, quantize_f64, FpValue};
use fpcert_core::format::error_constants;
use fpcert_core::network::{Activation, LayerSpec};
use fpcert_core::{FpFormat, Network};

const F32: FpFormat = FpFormat::FLOAT32;
const F16: FpFormat = FpFormat::FLOAT16;

fn rat(v: f64) -> Rat {
    Rat::from_float(v).unwrap()
}

fn net(fmt: FpFormat, layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>) -> Network {
    let last = layers.len() - 1;
    let specs = layers
        .into_iter()
        .enumerate()
        .map(|(l, (w, b))| LayerSpec::new(w, b, if l == last { Activation::Identity } else { Activation::Relu }))
        .collect();
    Network::new(fmt, specs, 12).unwrap()
}

fn close(a: &Rat, b: &Rat, rel: &Rat) -> bool {
    let d = if a > b { a - b } else { b - a };
    d <= b * rel
}

#[test]
fn radii_examples() {
    let zero = net(F32, vec![(vec![vec![0.0; 3]; 2], vec![0.0; 2]), (vec![vec![0.0; 2]; 2], vec![0.0; 2])]);
    let r = radii(&zero, &rat(1.5), &rat(0.25));
    assert_eq!(r[0].to_rat(), rat(1.75));
    assert!(r[1].is_zero());

    let id = net(F32, vec![(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0; 2]), (vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0; 2])]);
    let r = radii(&id, &rat(3.0), &rat(0.5));
    assert!(r[1] >= r[0]);
    assert!(close(&r[1].to_rat(), &rat(3.5), &(default_rel_tol() * rat_int(64))));

    // spec_up 2, bias norm 1: r_1 = 2 * 0.3 + 1
    let two = net(F32, vec![(vec![vec![2.0], vec![0.0]], vec![1.0, 0.0]), (vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0; 2])]);
    let eps = "3/10".parse::<Rat>().unwrap();
    let r = radii(&two, &rat_int(0), &eps);
    assert!(r[0].to_rat() >= eps);
    let want = "8/5".parse::<Rat>().unwrap();
    assert!(r[1].to_rat() >= want);
    assert!(close(&r[1].to_rat(), &want, &(default_rel_tol() * rat_int(64))));
}

#[test]
fn overflow_check_examples() {
    let zero = net(F16, vec![(vec![vec![0.0; 2]; 2], vec![0.0; 2])]);
    let dot = DotConstants::new(2, &F16).unwrap();
    let rec = overflow_check_layer(&zero.layers()[0], 1, &dot, &Dyadic::from_i64(1000), &Dyadic::from_i64(5), &F16).unwrap();
    assert!(rec.s.is_zero() && rec.m.is_zero());
    assert_eq!(rec.dot_bound, dot.a_dot_fwd);

    let big = net(F16, vec![(vec![vec![300.0], vec![1.0]], vec![0.0; 2])]);
    let dot = DotConstants::new(1, &F16).unwrap();
    let fail = overflow_check_layer(&big.layers()[0], 1, &dot, &Dyadic::from_i64(200), &Dyadic::from_i64(100), &F16).unwrap_err();
    assert_eq!(fail.condition, OverflowCondition::MaxEntry);
    assert_eq!(fail.lhs, Dyadic::from_i64(90_000));
    assert_eq!(fail.excess(), Dyadic::from_i64(90_000 - 65_504));

    let mnist_like = net(F32, vec![(vec![vec![(10.0f32 / 28.0) as f64; 784]; 4], vec![0.5; 4])]);
    let dot = DotConstants::new(784, &F32).unwrap();
    let rec = overflow_check_layer(&mnist_like.layers()[0], 1, &dot, &Dyadic::from_i64(1000), &Dyadic::zero(), &F32).unwrap();
    assert!(rec.dot_bound.to_f64_approx() < 1e5);
}

#[test]
fn dot_constants_dominate_exact_values() {
    for fmt in [F16, FpFormat::BFLOAT16, F32, FpFormat::FLOAT64] {
        for n in [1u64, 2, 7, 128, 784, 3072] {
            let d = DotConstants::new(n, &fmt).unwrap();
            let e = error_constants(n, &fmt).unwrap();
            for (up, exact) in [(&d.gamma, &e.gamma_n), (&d.a_dot, &e.a_dot_n), (&d.a_dot_fwd, &e.a_dot_fwd_n), (&d.kappa, &e.kappa_n)] {
                assert!(&up.to_rat() >= exact);
                assert!(close(&up.to_rat(), exact, &Rat::new(1.into(), num_bigint::BigInt::from(1) << 180)));
            }
        }
    }
}

#[test]
fn layer_coeff_examples() {
    let zero = net(F32, vec![(vec![vec![0.0; 3]; 4], vec![0.0; 4]), (vec![vec![0.0; 4]; 2], vec![0.0; 2])]);
    let c = layer_coeffs(&zero.layers()[0], &F32).unwrap();
    let e = error_constants(3, &F32).unwrap();
    assert!(c.alpha.is_zero() && c.beta_slope.is_zero());
    let want = (rat_int(1) + F32.u()) * &e.a_dot_n * rat_int(2);
    assert!(c.beta_const.to_rat() >= want);
    assert!(close(&c.beta_const.to_rat(), &want, &(default_rel_tol() * rat_int(4))));

    let id = net(F32, vec![(vec![vec![1.0]], vec![0.0]), (vec![vec![1.0], vec![-1.0]], vec![0.0; 2])]);
    let c = layer_coeffs(&id.layers()[0], &F32).unwrap();
    let want = rat_int(1) + &error_constants(1, &F32).unwrap().kappa_n;
    assert!(c.alpha.to_rat() >= want);
    assert!(close(&c.alpha.to_rat(), &want, &(default_rel_tol() * rat_int(64))));
    let r = Dyadic::from_i64(3);
    assert!(c.beta(&(&r + &r)) >= c.beta(&r));
}

#[test]
fn pair_coeff_examples() {
    let zero = net(F32, vec![(vec![vec![0.0; 2]; 2], vec![0.0; 2])]);
    let cert = Certifier::new(&zero, &F32, None).unwrap();
    let pc = cert.pair_coeffs(0, 1).unwrap();
    assert!(pc.alpha.is_zero() && pc.beta_slope.is_zero());
    let want = rat_int(2) * (rat_int(1) + F32.u()) * &error_constants(2, &F32).unwrap().a_dot_n;
    assert!(pc.beta_const.to_rat() >= want);

    let same = net(F32, vec![(vec![vec![1.0, -2.0]; 2], vec![0.0; 2])]);
    let cert = Certifier::new(&same, &F32, None).unwrap();
    let pc = cert.pair_coeffs(1, 0).unwrap();
    assert_eq!(pc.alpha, pc.beta_slope);

    let unit = net(F32, vec![(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0; 2])]);
    let cert = Certifier::new(&unit, &F32, None).unwrap();
    let pc = cert.pair_coeffs(0, 1).unwrap();
    let root2 = sqrt_up(&rat_int(2), &default_rel_tol()).unwrap();
    let want = &root2 * (rat_int(1) + &error_constants(2, &F32).unwrap().kappa_n);
    assert!(pc.alpha.to_rat() >= want);
    assert!(close(&pc.alpha.to_rat(), &want, &(default_rel_tol() * rat_int(16))));
    assert!(cert.pair_coeffs(1, 1).is_err());
}

#[test]
fn propagate_examples() {
    let zero = net(F32, vec![(vec![vec![0.0; 2]; 3], vec![0.0; 3]), (vec![vec![0.0; 3]; 2], vec![0.0; 2])]);
    let cert = Certifier::new(&zero, &F32, None).unwrap();
    let x = vec![FpValue::ZERO; 2];
    let s = cert.propagate(&x, &rat_int(0)).unwrap().unwrap();
    assert!(s.radii.iter().all(Dyadic::is_zero));
    assert_eq!(s.devs[1], cert.layer_coeffs(0).beta_const);
    assert_eq!(s.overflow_cert.len(), 2);

    let two = net(
        F32,
        vec![(vec![vec![1.0, -0.5], vec![0.25, 2.0]], vec![0.5, -1.0]), (vec![vec![1.0, 3.0], vec![-2.0, 1.0]], vec![0.0, 0.5])],
    );
    let cert = Certifier::new(&two, &F32, None).unwrap();
    let x = quantize_f64(&[0.3, -0.7], &F32).unwrap();
    let s = cert.propagate(&x, &rat(0.1)).unwrap().unwrap();
    let (c1, c2) = (cert.layer_coeffs(0), cert.pair_coeffs(0, 1).unwrap());
    assert_eq!(s.devs[1], c1.beta(&s.radii[0]));
    let pair = cert.pair_error(&c2, &s);
    assert_eq!(pair, &(&c2.alpha * &c1.beta(&s.radii[0])) + &c2.beta(&s.radii[1]));
    assert!(cert.propagate(&x, &rat(-0.1)).is_err());
    assert!(cert.propagate(&x[..1], &rat(0.1)).is_err());
}

#[test]
fn error_term_examples() {
    let zero = net(F32, vec![(vec![vec![0.0; 2]; 2], vec![0.0; 2])]);
    let cert = Certifier::new(&zero, &F32, None).unwrap();
    let x = quantize_f64(&[1.0, 2.0], &F32).unwrap();
    let (ec, eb) = cert.error_terms(&x, &rat(0.3), 0, 1).unwrap();
    assert_eq!(ec, eb);
    assert_eq!(ec, cert.pair_coeffs(0, 1).unwrap().beta_const);
}

#[test]
fn overflowing_float16_layer_is_rejected_and_really_overflows() {
    let big = net(F16, vec![(vec![vec![65504.0, 65504.0], vec![0.0, 0.0]], vec![0.0; 2])]);
    let x = quantize_f64(&[2.0, 2.0], &F16).unwrap();
    let c = Certifier::new(&big, &F16, None).unwrap().certify(&x, &rat(0.01), Mode::Standard).unwrap();
    assert_eq!(c.verdict, Verdict::OverflowRisk);
    assert_eq!(c.overflow.unwrap().layer, 1);
    assert!(fp_forward(&big, &x, &F16).unwrap().overflowed);
}

#[test]
fn slack_arithmetic_decides_the_verdict() {
    // margin 1, Lipschitz 1 and tiny error terms: slack near 1 - eps
    let net1 = net(FpFormat::FLOAT64, vec![(vec![vec![0.5], vec![-0.5]], vec![0.0; 2])]);
    let cert = Certifier::new(&net1, &FpFormat::FLOAT64, None).unwrap();
    let x = quantize_f64(&[1.0], &FpFormat::FLOAT64).unwrap();
    let c = cert.certify(&x, &rat(0.3), Mode::Standard).unwrap();
    assert_eq!(c.verdict, Verdict::Certified);
    let s = c.slack_min().unwrap();
    assert!(s < &rat(0.7) && s > &rat(0.69));
    let c = cert.certify(&x, &rat(1.0), Mode::Standard).unwrap();
    assert_eq!(c.verdict, Verdict::NotCertified);

    // float16 with huge error terms relative to a tiny margin: vacuous
    let tiny = net(F16, vec![(vec![vec![1.0; 64], vec![1.0; 63].into_iter().chain([0.0]).collect()], vec![0.0; 2])]);
    let x = quantize_f64(&[0.01; 64], &F16).unwrap();
    let c = Certifier::new(&tiny, &F16, None).unwrap().certify(&x, &rat(1e-6), Mode::Standard).unwrap();
    assert_eq!(c.verdict, Verdict::Vacuous);
}

#[test]
fn hybrid_format_must_be_more_precise() {
    let n = net(F32, vec![(vec![vec![1.0], vec![2.0]], vec![0.0; 2])]);
    assert!(Certifier::new(&n, &F32, Some(&F16)).is_err());
    assert!(Certifier::new(&n, &F32, Some(&F32)).is_err());
    assert!(Certifier::new(&n, &F32, Some(&FpFormat::FLOAT64)).is_ok());
    let x = quantize_f64(&[0.5], &F32).unwrap();
    assert!(Certifier::new(&n, &F32, None).unwrap().certify(&x, &rat(0.1), Mode::Hybrid).is_err());
}

#[test]
fn dyadic_rounding_is_upward() {
    let q = "1/3".parse::<Rat>().unwrap();
    let d = dyadic_up(&q, 40);
    assert!(d.to_rat() >= q);
    assert!(d.to_rat() - &q < Rat::new(1.into(), num_bigint::BigInt::from(1) << 40));
}
