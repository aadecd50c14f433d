use fpcert_core::certifier::{closed_form_devs, real_arith_certify, Certifier, Mode, Verdict};
use fpcert_core::exact::{default_rel_tol, Dyadic, Rat};
use fpcert_core::exec::{classify, fp_forward, FpValue};
use fpcert_core::synth::{random_input, random_network, sample_ball, SampleKind};
use fpcert_core::{FpFormat, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rat(v: f64) -> Rat {
    Rat::from_float(v).unwrap()
}

fn random_net(rng: &mut ChaCha8Rng, fmt: &FpFormat) -> Network {
    let depth = rng.gen_range(2..=4);
    let dims: Vec<usize> = (0..=depth).map(|l| if l == depth { rng.gen_range(2..=5) } else { rng.gen_range(2..=16) }).collect();
    random_network(rng, &dims, 2.0, 0.5, fmt, 8).unwrap()
}

#[test]
fn deviation_bounds_hold_on_sampled_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for fmt in [FpFormat::FLOAT16, FpFormat::FLOAT32] {
        for _ in 0..6 {
            let net = random_net(&mut rng, &fmt);
            let cert = Certifier::new(&net, &fmt, None).unwrap();
            let x = random_input(&mut rng, net.n_in(), -1.0, 1.0, &fmt);
            for eps in [0.0, 1e-3, 0.1] {
                let Ok(state) = cert.propagate(&x, &rat(eps)).unwrap() else { continue };
                for _ in 0..100 {
                    let xp = if eps == 0.0 { x.clone() } else { sample_ball(&mut rng, &x, eps, &fmt, SampleKind::Uniform, None) };
                    let tr = fp_forward(&net, &xp, &fmt).unwrap();
                    assert!(!tr.overflowed);
                    for l in 0..net.depth() {
                        let dev = tr.deviation_up(l, &default_rel_tol()).unwrap();
                        // deviation_up rounds up; the bound must still dominate it
                        assert!(dev <= state.devs[l].to_rat(), "layer {l}: {dev} > {}", state.devs[l]);
                    }
                }
            }
        }
    }
}

#[test]
fn recursion_matches_closed_form_and_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let fmt = FpFormat::FLOAT32;
        let net = random_net(&mut rng, &fmt);
        let cert = Certifier::new(&net, &fmt, None).unwrap();
        let x = random_input(&mut rng, net.n_in(), -1.0, 1.0, &fmt);
        let mut prev: Option<(Vec<Dyadic>, Vec<Dyadic>)> = None;
        for eps in [0.0, 1e-3, 0.05, 0.1, 1.0] {
            let s = cert.propagate(&x, &rat(eps)).unwrap().unwrap();
            assert_eq!(closed_form_devs(&cert, &s.radii), s.devs);
            if let Some((r, d)) = &prev {
                assert!(r.iter().zip(&s.radii).all(|(a, b)| a <= b));
                assert!(d.iter().zip(&s.devs).all(|(a, b)| a <= b));
            }
            prev = Some((s.radii, s.devs));
        }
        let (e0c, e0b) = cert.error_terms(&x, &Rat::from_integer(0.into()), 0, 1).unwrap();
        assert_eq!(e0c, e0b);
        let (ec, eb) = cert.error_terms(&x, &rat(0.3), 0, 1).unwrap();
        assert_eq!(ec, e0c);
        assert!(eb >= ec);
    }
}

#[test]
fn certified_points_keep_their_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fmt = FpFormat::FLOAT32;
    let mut certified = 0;
    for _ in 0..40 {
        let net = random_net(&mut rng, &fmt);
        let cert = Certifier::new(&net, &fmt, Some(&FpFormat::FLOAT64)).unwrap();
        let x = random_input(&mut rng, net.n_in(), -1.0, 1.0, &fmt);
        let class = classify(&net, &x, &fmt).unwrap();
        for mode in [Mode::Standard, Mode::Hybrid] {
            let eps = 0.01;
            let c = cert.certify(&x, &rat(eps), mode).unwrap();
            if c.verdict != Verdict::Certified {
                continue;
            }
            certified += 1;
            assert_eq!(c.predicted, Some(class));
            for k in 0..300 {
                let kind = [SampleKind::Uniform, SampleKind::Directed, SampleKind::Axis][k % 3];
                let xp = sample_ball(&mut rng, &x, eps, &fmt, kind, None);
                assert_eq!(classify(&net, &xp, &fmt).unwrap(), class);
            }
        }
    }
    assert!(certified > 0, "no instance certified; the test exercises nothing");
}

#[test]
fn fp_certificate_implies_real_certificate_for_small_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fmt = FpFormat::FLOAT64;
    for _ in 0..20 {
        let net = random_net(&mut rng, &fmt);
        let x = random_input(&mut rng, net.n_in(), -1.0, 1.0, &fmt);
        let eps = rat(0.01);
        let fp = Certifier::new(&net, &fmt, None).unwrap().certify(&x, &eps, Mode::Standard).unwrap();
        let real = real_arith_certify(&net, &x, &eps).unwrap();
        if fp.verdict == Verdict::Certified {
            assert!(real.certified);
        }
    }
}

#[test]
fn measured_deviation_is_within_the_float32_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fmt = FpFormat::FLOAT32;
    for _ in 0..10 {
        let net = random_net(&mut rng, &fmt);
        let x: Vec<FpValue> = random_input(&mut rng, net.n_in(), -1.0, 1.0, &fmt);
        let cert = Certifier::new(&net, &fmt, None).unwrap();
        let s = cert.propagate(&x, &Rat::from_integer(0.into())).unwrap().unwrap();
        let m = fpcert_core::exec::measured_deviation(&net, &x, &fmt, &FpFormat::FLOAT64, &default_rel_tol()).unwrap();
        assert!(m <= s.devs.last().unwrap().to_rat());
    }
}
