//! Random networks, inputs and ball samples for tests, demos and the
//! acceptance suite.

use rand::Rng;

use crate::error::Result;
use crate::exact::{Dyadic, Rat};
use crate::exec::{fp_round_dyadic, quantize_f64, FpValue};
use crate::format::FpFormat;
use crate::network::{Activation, LayerSpec, Network};

/// Dense network with layer sizes `dims` (input first), weights uniform in
/// `[-w_scale, w_scale]` and biases uniform in `[-b_scale, b_scale]`, all
/// rounded to `fmt`.
pub fn random_network<R: Rng>(rng: &mut R, dims: &[usize], w_scale: f64, b_scale: f64, fmt: &FpFormat, gram_iters: u32) -> Result<Network> {
    let specs = random_specs(rng, dims, w_scale, b_scale, fmt);
    Network::new(*fmt, specs, gram_iters)
}

pub fn random_specs<R: Rng>(rng: &mut R, dims: &[usize], w_scale: f64, b_scale: f64, fmt: &FpFormat) -> Vec<LayerSpec> {
    let last = dims.len() - 2;
    (0..dims.len() - 1)
        .map(|l| {
            let (n, m) = (dims[l], dims[l + 1]);
            let mut draw = |s: f64| if s == 0.0 { 0.0 } else { round_f64(rng.gen_range(-s..=s), fmt) };
            let weights = (0..m).map(|_| (0..n).map(|_| draw(w_scale)).collect()).collect();
            let bias = (0..m).map(|_| draw(b_scale)).collect();
            let act = if l == last { Activation::Identity } else { Activation::Relu };
            LayerSpec::new(weights, bias, act)
        })
        .collect()
}

/// Round a binary64 value to `fmt`.
pub fn round_f64(v: f64, fmt: &FpFormat) -> f64 {
    fp_round_dyadic(&Dyadic::from_f64(v).expect("finite"), fmt).value()
}

/// Input with entries uniform in `[lo, hi]`, rounded to `fmt`.
pub fn random_input<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64, fmt: &FpFormat) -> Vec<FpValue> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..=hi)).collect();
    quantize_f64(&raw, fmt).expect("inputs in range")
}

/// Exact squared distance.
pub fn dist_sq(a: &[FpValue], b: &[FpValue]) -> Rat {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.to_dyadic().unwrap() - y.to_dyadic().unwrap()).square())
        .sum::<Dyadic>()
        .to_rat()
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// How a perturbation is drawn from the ball.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    /// Uniform in the ball.
    Uniform,
    /// On (just inside) the sphere along `dir`.
    Directed,
    /// Along a single coordinate axis, at full radius.
    Axis,
}

/// Point of `B(x, eps)` whose entries are members of `fmt`; rejection keeps
/// the exact distance within `eps`. `dir` is used by [`SampleKind::Directed`].
pub fn sample_ball<R: Rng>(rng: &mut R, x: &[FpValue], eps: f64, fmt: &FpFormat, kind: SampleKind, dir: Option<&[f64]>) -> Vec<FpValue> {
    let n = x.len();
    let eps_sq = Rat::from_float(eps).expect("finite eps").pow(2);
    let mut shrink = 1.0;
    loop {
        let (v, radius) = match kind {
            SampleKind::Uniform => {
                let v: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();
                let r = eps * rng.gen::<f64>().powf(1.0 / n as f64);
                (v, r)
            }
            SampleKind::Directed => {
                let v = match dir {
                    Some(d) => d.iter().map(|&t| t + 0.05 * gaussian(rng) * norm(d) / (n as f64).sqrt()).collect(),
                    None => (0..n).map(|_| gaussian(rng)).collect(),
                };
                (v, eps)
            }
            SampleKind::Axis => {
                let mut v = vec![0.0; n];
                v[rng.gen_range(0..n)] = if rng.gen() { 1.0 } else { -1.0 };
                (v, eps)
            }
        };
        let len = norm(&v);
        if len == 0.0 {
            continue;
        }
        let scale = radius * shrink / len;
        let raw: Vec<f64> = x.iter().zip(&v).map(|(a, d)| a.value() + d * scale).collect();
        let Ok(q) = quantize_f64(&raw, fmt) else { continue };
        if dist_sq(&q, x) <= eps_sq {
            return q;
        }
        shrink *= 0.999;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|t| t * t).sum::<f64>().sqrt()
}
