//! Search for inputs that the classical real-arithmetic certifier accepts
//! but floating-point execution refutes, and the compensating-bias model
//! that makes such inputs plentiful.
//!
//! The search itself runs on binary64 and is only a heuristic; every point
//! it returns is quantized to the target format and re-checked exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certifier::real_arith_certify;
use crate::error::{Error, Result};
use crate::exact::{dyadic_up, l2_norm_up, Dyadic, Rat};
use crate::exec::{classify, fp_round_dyadic, quantize_f64, FpValue};
use crate::format::FpFormat;
use crate::network::{Activation, Network};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub max_deepfool_iters: u32,
    pub overshoot: f64,
    pub bisection_iters: u32,
    pub expansion_iters: u32,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { max_deepfool_iters: 200, overshoot: 0.02, bisection_iters: 64, expansion_iters: 48 }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_deepfool_iters == 0 || self.bisection_iters == 0 || self.expansion_iters == 0 {
            return Err(Error::Config("search iteration counts must be positive".into()));
        }
        if !(self.overshoot > 0.0 && self.overshoot.is_finite()) {
            return Err(Error::Config("overshoot must be positive".into()));
        }
        Ok(())
    }
}

/// `x0` is certified by the real-arithmetic check at radius `eps`, yet
/// `x1`, within `eps` of it, is classified differently in floating point.
#[derive(Clone, Debug, PartialEq)]
pub struct CexTriple {
    pub x0: Vec<FpValue>,
    pub x1: Vec<FpValue>,
    pub eps: Rat,
    pub class0: usize,
    pub class1: usize,
}

/// Binary64 forward pass returning every layer's post-activation values.
fn forward_f64(net: &Network, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut acts = vec![x.to_vec()];
    for (l, layer) in net.layers().iter().enumerate() {
        let z = acts.last().unwrap();
        let w = layer.weights_f64();
        let n = layer.n_in();
        let out: Vec<f64> = layer
            .bias_f64()
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let s = w[i * n..(i + 1) * n].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + b;
                match layer.activation() {
                    Activation::Relu => s.max(0.0),
                    Activation::Identity => s,
                }
            })
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Overflow { layer: l + 1 });
        }
        acts.push(out);
    }
    Ok(acts)
}

fn backward(net: &Network, acts: &[Vec<f64>], mut g: Vec<f64>) -> Vec<f64> {
    let layers = net.layers();
    for l in (0..layers.len() - 1).rev() {
        // g is the gradient with respect to the output of layer l
        for (gi, a) in g.iter_mut().zip(&acts[l + 1]) {
            if *a <= 0.0 {
                *gi = 0.0;
            }
        }
        let w = layers[l].weights_f64();
        let n = layers[l].n_in();
        let mut prev = vec![0.0; n];
        for (i, gi) in g.iter().enumerate() {
            if *gi != 0.0 {
                for (p, wv) in prev.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                    *p += gi * wv;
                }
            }
        }
        g = prev;
    }
    g
}

fn last_row_diff(net: &Network, i_star: usize, j: usize) -> Vec<f64> {
    let last = net.layers().last().unwrap();
    let (w, n) = (last.weights_f64(), last.n_in());
    (0..n).map(|k| w[i_star * n + k] - w[j * n + k]).collect()
}

/// Gradient of `y_{i*} - y_j` at `x`, computed in binary64 with the ReLU
/// derivative at 0 taken as 0.
pub fn gradient_margin(net: &Network, x: &[f64], i_star: usize, j: usize) -> Result<Vec<f64>> {
    let k = net.n_out();
    if i_star >= k || j >= k || i_star == j {
        return Err(Error::Argument(format!("invalid class pair ({i_star}, {j})")));
    }
    if x.len() != net.n_in() {
        return Err(Error::Structural(format!("input has {} entries, network expects {}", x.len(), net.n_in())));
    }
    let acts = forward_f64(net, x)?;
    Ok(backward(net, &acts, last_row_diff(net, i_star, j)))
}

fn to_f64(x: &[FpValue]) -> Vec<f64> {
    x.iter().map(|v| v.value()).collect()
}

/// DeepFool: repeated linearised minimal-norm steps towards the nearest
/// competing class, each candidate quantized to `fmt` and classified there.
pub fn find_flip(net: &Network, x_nat: &[FpValue], fmt: &FpFormat, cfg: &SearchConfig) -> Result<Option<Vec<FpValue>>> {
    let c0 = classify(net, x_nat, fmt)?;
    let x0 = to_f64(x_nat);
    let mut total = vec![0.0; x0.len()];
    let mut x = x0.clone();
    for _ in 0..cfg.max_deepfool_iters {
        let acts = forward_f64(net, &x)?;
        let y = acts.last().unwrap();
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        for j in (0..y.len()).filter(|&j| j != c0) {
            // gradient of y_j - y_c0
            let w = backward(net, &acts, last_row_diff(net, j, c0));
            let norm_sq: f64 = w.iter().map(|v| v * v).sum();
            if norm_sq == 0.0 {
                continue;
            }
            let f = y[j] - y[c0];
            let dist = f.abs() / norm_sq.sqrt();
            if best.as_ref().is_none_or(|b| dist < b.0) {
                best = Some((dist, (f.abs() + 1e-12) / norm_sq, w));
            }
        }
        let Some((_, scale, w)) = best else { return Ok(None) };
        for (t, wv) in total.iter_mut().zip(&w) {
            *t += scale * wv;
        }
        x = x0.iter().zip(&total).map(|(a, t)| a + (1.0 + cfg.overshoot) * t).collect();
        let Ok(q) = quantize_f64(&x, fmt) else { return Ok(None) };
        match classify(net, &q, fmt) {
            Ok(c) if c != c0 => return Ok(Some(q)),
            Ok(_) => {}
            Err(Error::Overflow { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Exact upper bound on `||a - b||_2`, rounded up to a binary64 value.
pub fn distance_up(a: &[FpValue], b: &[FpValue], rel_tol: &Rat) -> Rat {
    let d: Vec<Dyadic> = a.iter().zip(b).map(|(x, y)| x.to_dyadic().unwrap() - y.to_dyadic().unwrap()).collect();
    let up = l2_norm_up(&d, rel_tol);
    if up == Rat::from_integer(0.into()) {
        return up;
    }
    dyadic_up(&up, 52).to_rat()
}

struct Segment<'a> {
    net: &'a Network,
    fmt: &'a FpFormat,
    a: Vec<f64>,
    d: Vec<f64>,
}

impl<'a> Segment<'a> {
    fn new(net: &'a Network, fmt: &'a FpFormat, from: &[FpValue], to: &[FpValue]) -> Self {
        let a = to_f64(from);
        let d = to_f64(to).iter().zip(&a).map(|(t, a)| t - a).collect();
        Segment { net, fmt, a, d }
    }

    fn point(&self, t: f64) -> Option<Vec<FpValue>> {
        let raw: Vec<f64> = self.a.iter().zip(&self.d).map(|(a, d)| a + t * d).collect();
        quantize_f64(&raw, self.fmt).ok()
    }

    fn class(&self, t: f64) -> Result<Option<(Vec<FpValue>, usize)>> {
        let Some(p) = self.point(t) else { return Ok(None) };
        match classify(self.net, &p, self.fmt) {
            Ok(c) => Ok(Some((p, c))),
            Err(Error::Overflow { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Accept `(x0, x1)` when the real check certifies `x0` for its own
/// floating-point class at radius `||x0 - x1||`.
fn qualifies(net: &Network, x0: &[FpValue], c0: usize, x1: &[FpValue]) -> Result<Option<Rat>> {
    let eps = distance_up(x0, x1, net.rel_tol());
    if eps == Rat::from_integer(0.into()) {
        return Ok(None);
    }
    let real = real_arith_certify(net, x0, &eps)?;
    Ok((real.certified && real.predicted == c0).then_some(eps))
}

/// Two quantized points on `[x_nat, x_t]` on either side of the
/// floating-point decision boundary, with their segment parameters.
pub struct Straddle {
    pub near: Vec<FpValue>,
    pub far: Vec<FpValue>,
    pub t_near: f64,
    pub t_far: f64,
}

/// Bisect the segment `[x_nat, x_t]` for `cfg.bisection_iters` steps; `near`
/// keeps the class of `x_nat`.
pub fn bisect_boundary(net: &Network, x_nat: &[FpValue], x_t: &[FpValue], fmt: &FpFormat, cfg: &SearchConfig) -> Result<Straddle> {
    if x_nat == x_t {
        return Err(Error::Argument("the two endpoints coincide".into()));
    }
    let c0 = classify(net, x_nat, fmt)?;
    if classify(net, x_t, fmt)? == c0 {
        return Err(Error::Argument("the endpoints are classified alike".into()));
    }
    let seg = Segment::new(net, fmt, x_nat, x_t);
    let mut s = Straddle { near: x_nat.to_vec(), far: x_t.to_vec(), t_near: 0.0, t_far: 1.0 };
    for _ in 0..cfg.bisection_iters {
        let mid = 0.5 * (s.t_near + s.t_far);
        if mid <= s.t_near.min(s.t_far) || mid >= s.t_near.max(s.t_far) {
            break;
        }
        let Some((p, c)) = seg.class(mid)? else { break };
        if c == c0 {
            (s.t_near, s.near) = (mid, p);
        } else {
            (s.t_far, s.far) = (mid, p);
        }
    }
    Ok(s)
}

/// Bisect to the floating-point decision boundary, then orient the two
/// straddling points so the first is certified by the real-arithmetic
/// check. Also returns the segment parameters of `x0` and `x1`.
pub fn boundary_pair(
    net: &Network,
    x_nat: &[FpValue],
    x_t: &[FpValue],
    fmt: &FpFormat,
    cfg: &SearchConfig,
) -> Result<Option<(CexTriple, f64, f64)>> {
    let s = bisect_boundary(net, x_nat, x_t, fmt, cfg)?;
    let c0 = classify(net, &s.near, fmt)?;
    let c1 = classify(net, &s.far, fmt)?;
    if let Some(eps) = qualifies(net, &s.near, c0, &s.far)? {
        return Ok(Some((CexTriple { x0: s.near, x1: s.far, eps, class0: c0, class1: c1 }, s.t_near, s.t_far)));
    }
    if let Some(eps) = qualifies(net, &s.far, c1, &s.near)? {
        return Ok(Some((CexTriple { x0: s.far, x1: s.near, eps, class0: c1, class1: c0 }, s.t_far, s.t_near)));
    }
    Ok(None)
}

/// Push `x0` away from `x1` along the line through both for as long as it
/// keeps its class and its real-arithmetic certificate at the growing
/// radius. `t0` and `t1` locate the two points on the segment that produced
/// them.
#[allow(clippy::too_many_arguments)]
pub fn expand(
    net: &Network,
    x_nat: &[FpValue],
    x_t: &[FpValue],
    pair: CexTriple,
    t0: f64,
    t1: f64,
    fmt: &FpFormat,
    cfg: &SearchConfig,
) -> Result<CexTriple> {
    let seg = Segment::new(net, fmt, x_nat, x_t);
    let dir = if t0 < t1 { -1.0 } else { 1.0 };
    let try_at = |s: f64| -> Result<Option<CexTriple>> {
        let Some((p, c)) = seg.class(t0 + dir * s)? else { return Ok(None) };
        if c != pair.class0 {
            return Ok(None);
        }
        Ok(qualifies(net, &p, c, &pair.x1)?.map(|eps| CexTriple { x0: p, eps, ..pair.clone() }))
    };
    let mut best = pair.clone();
    let mut good = 0.0;
    let mut bad = None;
    let mut step = (t1 - t0).abs().max(f64::MIN_POSITIVE);
    let mut iters = 0;
    while iters < cfg.expansion_iters {
        iters += 1;
        match try_at(step)? {
            Some(t) => {
                good = step;
                if t.eps > best.eps {
                    best = t;
                }
                step *= 2.0;
            }
            None => {
                bad = Some(step);
                break;
            }
        }
    }
    if let Some(mut bad) = bad {
        while iters < cfg.expansion_iters {
            iters += 1;
            let mid = 0.5 * (good + bad);
            if mid <= good || mid >= bad {
                break;
            }
            match try_at(mid)? {
                Some(t) => {
                    good = mid;
                    if t.eps > best.eps {
                        best = t;
                    }
                }
                None => bad = mid,
            }
        }
    }
    Ok(best)
}

/// Re-check every defining property of a triple from scratch.
pub fn verify_triple(net: &Network, fmt: &FpFormat, t: &CexTriple) -> Result<()> {
    let fail = |m: &str| Err(Error::SearchFailure(format!("triple rejected: {m}")));
    if distance_up(&t.x0, &t.x1, net.rel_tol()) > t.eps {
        return fail("points are farther apart than eps");
    }
    let c0 = classify(net, &t.x0, fmt)?;
    let c1 = classify(net, &t.x1, fmt)?;
    if c0 != t.class0 || c1 != t.class1 || c0 == c1 {
        return fail("classes do not differ as recorded");
    }
    if !real_arith_certify(net, &t.x0, &t.eps)?.certified {
        return fail("x0 is not certified in real arithmetic");
    }
    Ok(())
}

/// Full pipeline from one natural input: flip, bisect, expand, verify.
/// Returns the triple with the radius found before expansion.
pub fn search_from(net: &Network, x_nat: &[FpValue], fmt: &FpFormat, cfg: &SearchConfig) -> Result<Option<(CexTriple, Rat)>> {
    let Some(x_t) = find_flip(net, x_nat, fmt, cfg)? else { return Ok(None) };
    let Some((pair, t0, t1)) = boundary_pair(net, x_nat, &x_t, fmt, cfg)? else { return Ok(None) };
    let eps_init = pair.eps.clone();
    let t = expand(net, x_nat, &x_t, pair, t0, t1, fmt, cfg)?;
    verify_triple(net, fmt, &t)?;
    Ok(Some((t, eps_init)))
}

/// A triple together with where the search started.
#[derive(Clone, Debug)]
pub struct Found {
    pub start: usize,
    pub triple: CexTriple,
    pub eps_init: Rat,
}

/// Search from every starting point in parallel and keep the first `n`
/// successes in start order.
pub fn search_many(net: &Network, starts: &[Vec<FpValue>], fmt: &FpFormat, cfg: &SearchConfig, n: usize) -> Result<Vec<Found>> {
    cfg.validate()?;
    let results: Vec<Result<Option<Found>>> = starts
        .par_iter()
        .enumerate()
        .map(|(start, x)| Ok(search_from(net, x, fmt, cfg)?.map(|(triple, eps_init)| Found { start, triple, eps_init })))
        .collect();
    let mut out = Vec::new();
    for r in results {
        if let Some(f) = r? {
            out.push(f);
            if out.len() == n {
                break;
            }
        }
    }
    Ok(out)
}

/// Copy of `net` whose penultimate layer carries bias `B` on every unit and
/// whose output bias cancels it: `b_L = fl(-W_L (B 1))`. Other biases are
/// zeroed and the weights are untouched.
pub fn inject_bias_adversary(net: &Network, b: &Rat) -> Result<Network> {
    let depth = net.depth();
    if depth < 2 {
        return Err(Error::Argument("the bias construction needs at least two layers".into()));
    }
    let fmt = net.format();
    let bd = Dyadic::try_from_rat(b)
        .filter(|d| fmt.contains_dyadic(d))
        .ok_or_else(|| Error::NotRepresentable { value: crate::exact::rat_to_string(b), format: fmt.to_string() })?;
    let bf = bd.to_f64_exact().expect("member of a binary64-sized format");
    let mut biases: Vec<Vec<f64>> = net.layers().iter().map(|l| vec![0.0; l.n_out()]).collect();
    biases[depth - 2] = vec![bf; net.layers()[depth - 2].n_out()];
    let last = net.layers().last().unwrap();
    for (i, slot) in biases[depth - 1].iter_mut().enumerate() {
        let row: Dyadic = last.weights().row(i).iter().map(|w| w * &bd).sum();
        let v = fp_round_dyadic(&-row, fmt);
        if !v.is_finite() {
            return Err(Error::Overflow { layer: depth });
        }
        *slot = v.value();
    }
    let mut out = net.with_biases(biases)?;
    out.set_metadata("adversarial_bias", crate::exact::rat_to_string(b));
    Ok(out)
}
