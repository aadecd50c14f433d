//! Overflow certificates, deviation bounds and the floating-point-aware
//! margin certificate.
//!
//! All bound arithmetic is exact. Every constant of the error model is a
//! dyadic rational, as is every norm bound, so the recursions run on
//! [`Dyadic`] values and never pay for gcd reductions. The only non-dyadic
//! input is the user's `eps`; it enters the radii through `r_0`, which is
//! rounded up to a dyadic 160 bits below its leading bit, and it enters the
//! final inequality exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{dyadic_up, l2_norm_up, rat_int, sqrt_up, Dyadic, Rat};
use crate::exec::{argmax_exact, argmax_fp, exact_forward, fp_outputs, measured_deviation, FpValue};
use crate::format::{gamma_dyadic, FpFormat};
use crate::network::{Activation, Layer, Network};

/// Precision, in bits below the leading bit, used when a radius is rounded up
/// to a dyadic.
const RADIUS_BITS: u32 = 160;

/// Significant bits kept when an error-model constant is rounded up.
const CONST_BITS: u64 = 192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Standard,
    Hybrid,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" => Ok(Mode::Standard),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(Error::Config(format!("unknown certification mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Certified,
    NotCertified,
    OverflowRisk,
    Vacuous,
}

/// Error-model constants of one dot-product length, each rounded up to
/// [`CONST_BITS`] significant bits. The exact values (see
/// [`crate::format::error_constants`]) have `p n`-bit denominators, which
/// would make every later product grow by thousands of bits.
#[derive(Clone, Debug)]
pub struct DotConstants {
    pub n: u64,
    pub gamma: Dyadic,
    pub a_dot: Dyadic,
    pub a_dot_fwd: Dyadic,
    pub kappa: Dyadic,
}

impl DotConstants {
    pub fn new(n: u64, fmt: &FpFormat) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("dot-product length must be at least 1".into()));
        }
        let one = Dyadic::one();
        let u = fmt.u_dyadic();
        let a_mul = Dyadic::pow2(fmt.emin as i64 - fmt.p as i64);
        let gamma = gamma_dyadic(n, fmt);
        let gamma_prev = gamma_dyadic(n - 1, fmt);
        let n_d = Dyadic::from_i64(n as i64);
        let a_dot = &(&(&one + &gamma) * &n_d) * &a_mul;
        let a_dot_fwd = &(&(&one + &gamma_prev) * &n_d) * &a_mul;
        let kappa = &gamma + &(&u * &(&one + &gamma));
        let up = |d: Dyadic| d.ceil_to_bits(CONST_BITS);
        Ok(DotConstants { n, gamma: up(gamma), a_dot: up(a_dot), a_dot_fwd: up(a_dot_fwd), kappa: up(kappa) })
    }
}

/// Overflow certificate for one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverflowRecord {
    /// 1-based layer index.
    pub layer: usize,
    pub s: Dyadic,
    pub m: Dyadic,
    /// `S (1 + gamma_n) + a_dot_fwd(n)`, a bound on every rounded row product.
    pub dot_bound: Dyadic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowCondition {
    /// `M_l < F_max` failed.
    MaxEntry,
    /// `S_l (1 + gamma_n) + a_dot_fwd + ||b||_inf < F_max` failed.
    DotProduct,
}

/// Which inequality failed at which layer, and the offending left-hand side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverflowFailure {
    pub layer: usize,
    pub condition: OverflowCondition,
    pub lhs: Dyadic,
    pub f_max: Dyadic,
}

impl OverflowFailure {
    pub fn excess(&self) -> Dyadic {
        &self.lhs - &self.f_max
    }
}

/// Radii and deviation bounds for one `(x, eps)`.
#[derive(Clone, Debug)]
pub struct DeviationState {
    pub center: Vec<FpValue>,
    pub eps: Rat,
    /// `r_0, ..., r_{L-1}`.
    pub radii: Vec<Dyadic>,
    /// `D_0, ..., D_{L-1}`.
    pub devs: Vec<Dyadic>,
    /// One record per layer `1..=L`.
    pub overflow_cert: Vec<OverflowRecord>,
}

/// `alpha` and the affine map `beta(r) = slope r + constant`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCoeffs {
    pub alpha: Dyadic,
    pub beta_slope: Dyadic,
    pub beta_const: Dyadic,
}

impl LayerCoeffs {
    pub fn beta(&self, r: &Dyadic) -> Dyadic {
        &(&self.beta_slope * r) + &self.beta_const
    }
}

/// Final-layer coefficients for one ordered class pair.
pub type PairCoeffs = LayerCoeffs;

/// Bound data for one competing class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassBound {
    pub j: usize,
    /// `y_hat_{i*} - y_hat_j`, exact.
    pub margin_hat: Rat,
    pub lipschitz: Rat,
    /// Centre error term actually used (the hybrid one in hybrid mode).
    pub e_ctr: Dyadic,
    pub e_ball: Dyadic,
    /// Standard centre term, kept for comparison in hybrid mode.
    pub e_ctr_standard: Dyadic,
    pub slack: Rat,
}

#[derive(Clone, Debug)]
pub struct Certificate {
    pub verdict: Verdict,
    pub mode: Mode,
    /// FP-predicted class `i*`; `None` only when the overflow check failed.
    pub predicted: Option<usize>,
    pub eps: Rat,
    pub classes: Vec<ClassBound>,
    /// `max_j (E_ctr + E_ball)`.
    pub degradation: Option<Dyadic>,
    pub overflow: Option<OverflowFailure>,
    /// Hybrid mode fell back to the standard centre term because the
    /// high-precision overflow check failed.
    pub hybrid_fallback: bool,
}

impl Certificate {
    pub fn slack_min(&self) -> Option<&Rat> {
        self.classes.iter().map(|c| &c.slack).min()
    }
}

/// Real-arithmetic verdict of the classical check `m_j(x) > L_j eps`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RealCertificate {
    pub certified: bool,
    pub predicted: usize,
    /// `min_j (m_j - L_j eps)`.
    pub slack_min: Rat,
}

struct LayerConsts {
    dot: DotConstants,
    coeffs: LayerCoeffs,
}

/// Everything that depends on `(network, format)` but not on the input.
pub struct Certifier<'a> {
    net: &'a Network,
    fmt: FpFormat,
    layers: Vec<LayerConsts>,
    f_max: Dyadic,
    hi: Option<Box<Certifier<'a>>>,
}

fn norm_dyadic(q: &Rat) -> Dyadic {
    dyadic_up(q, RADIUS_BITS)
}

fn layer_consts(layer: &Layer, fmt: &FpFormat) -> Result<LayerConsts> {
    let dot = DotConstants::new(layer.n_in() as u64, fmt)?;
    let coeffs = layer_coeffs_with(layer, &dot, fmt)?;
    Ok(LayerConsts { dot, coeffs })
}

fn layer_coeffs_with(layer: &Layer, dot: &DotConstants, fmt: &FpFormat) -> Result<LayerCoeffs> {
    let n = layer.norms();
    let u = fmt.u_dyadic();
    let one = Dyadic::one();
    let spec = norm_dyadic(&n.spec_up);
    let abs_spec = norm_dyadic(&n.abs_spec_up);
    let sqrt_m = norm_dyadic(&sqrt_up(&rat_int(layer.n_out() as i64), &crate::exact::default_rel_tol())?);
    let lip = match layer.activation() {
        Activation::Relu | Activation::Identity => one.clone(),
    };
    let alpha = &lip * &(&spec + &(&dot.kappa * &abs_spec));
    let beta_slope = &lip * &(&dot.kappa * &abs_spec);
    let beta_const = &lip
        * &(&(&u * &norm_dyadic(&n.bias_l2_up)) + &(&(&(&one + &u) * &dot.a_dot) * &sqrt_m));
    Ok(LayerCoeffs { alpha, beta_slope, beta_const })
}

/// `alpha_l` and `beta_l` for one hidden layer in `fmt`.
pub fn layer_coeffs(layer: &Layer, fmt: &FpFormat) -> Result<LayerCoeffs> {
    let dot = DotConstants::new(layer.n_in() as u64, fmt)?;
    layer_coeffs_with(layer, &dot, fmt)
}

/// Check both overflow inequalities for `layer` given the previous radius
/// and deviation bound.
pub fn overflow_check_layer(
    layer: &Layer,
    index: usize,
    dot: &DotConstants,
    r_prev: &Dyadic,
    d_prev: &Dyadic,
    fmt: &FpFormat,
) -> std::result::Result<OverflowRecord, OverflowFailure> {
    let n = layer.norms();
    let f_max = fmt.f_max_dyadic();
    let reach = r_prev + d_prev;
    let s = &norm_dyadic(&n.max_row_l2_up) * &reach;
    let m = &norm_dyadic(&n.max_row_linf) * &reach;
    if m >= f_max {
        return Err(OverflowFailure { layer: index, condition: OverflowCondition::MaxEntry, lhs: m, f_max });
    }
    let dot_bound = &(&s * &(&Dyadic::one() + &dot.gamma)) + &dot.a_dot_fwd;
    let lhs = &dot_bound + &norm_dyadic(&n.bias_linf);
    if lhs >= f_max {
        return Err(OverflowFailure { layer: index, condition: OverflowCondition::DotProduct, lhs, f_max });
    }
    Ok(OverflowRecord { layer: index, s, m, dot_bound })
}

impl<'a> Certifier<'a> {
    /// Precompute the constants for `net` executed in `fmt`; `hi` enables
    /// hybrid certification against that format.
    pub fn new(net: &'a Network, fmt: &FpFormat, hi: Option<&FpFormat>) -> Result<Self> {
        if !net.executable_in(fmt) {
            return Err(Error::Config(format!(
                "network weights stored in {} are not members of {fmt}; cast the network first",
                net.format()
            )));
        }
        let layers = net.layers().iter().map(|l| layer_consts(l, fmt)).collect::<Result<Vec<_>>>()?;
        let hi = match hi {
            Some(h) => {
                if h.p <= fmt.p {
                    return Err(Error::Config(format!("hybrid format {h} must have a smaller unit roundoff than {fmt}")));
                }
                Some(Box::new(Certifier::new(net, h, None)?))
            }
            None => None,
        };
        Ok(Certifier { net, fmt: *fmt, layers, f_max: fmt.f_max_dyadic(), hi })
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    pub fn format(&self) -> &FpFormat {
        &self.fmt
    }

    pub fn f_max(&self) -> &Dyadic {
        &self.f_max
    }

    pub fn dot_constants(&self, layer: usize) -> &DotConstants {
        &self.layers[layer].dot
    }

    pub fn layer_coeffs(&self, layer: usize) -> &LayerCoeffs {
        &self.layers[layer].coeffs
    }

    /// `r_0 = x_norm_up + eps` (rounded up to a dyadic) through `r_{L-1}`.
    pub fn radii(&self, x_norm_up: &Rat, eps: &Rat) -> Vec<Dyadic> {
        radii(self.net, x_norm_up, eps)
    }

    /// Interleaved overflow certification and deviation recursion.
    pub fn propagate(&self, x: &[FpValue], eps: &Rat) -> Result<std::result::Result<DeviationState, OverflowFailure>> {
        if eps < &Rat::from_integer(0.into()) {
            return Err(Error::Argument("eps must be nonnegative".into()));
        }
        let x_norm = self.input_norm(x)?;
        let radii = self.radii(&x_norm, eps);
        let depth = self.layers.len();
        let mut devs = vec![Dyadic::zero()];
        let mut cert = Vec::with_capacity(depth);
        for l in 0..depth {
            let layer = &self.net.layers()[l];
            let (r_prev, d_prev) = (&radii[l], &devs[l]);
            match overflow_check_layer(layer, l + 1, &self.layers[l].dot, r_prev, d_prev, &self.fmt) {
                Ok(rec) => cert.push(rec),
                Err(f) => return Ok(Err(f)),
            }
            if l + 1 < depth {
                let c = &self.layers[l].coeffs;
                devs.push(&(&c.alpha * d_prev) + &c.beta(r_prev));
            }
        }
        Ok(Ok(DeviationState { center: x.to_vec(), eps: eps.clone(), radii, devs, overflow_cert: cert }))
    }

    fn input_norm(&self, x: &[FpValue]) -> Result<Rat> {
        if x.len() != self.net.n_in() {
            return Err(Error::Structural(format!("input has {} entries, network expects {}", x.len(), self.net.n_in())));
        }
        let xs: Vec<Dyadic> = x
            .iter()
            .map(|v| {
                if self.fmt.contains(v.value()) {
                    Ok(v.to_dyadic().unwrap())
                } else {
                    Err(Error::NotRepresentable { value: format!("{v:?}"), format: self.fmt.to_string() })
                }
            })
            .collect::<Result<_>>()?;
        Ok(l2_norm_up(&xs, self.net.rel_tol()))
    }

    /// `alpha_L` and `beta_L` for the pair `(i_star, j)`.
    pub fn pair_coeffs(&self, i_star: usize, j: usize) -> Result<PairCoeffs> {
        let p = self.net.pair_norms(i_star, j)?;
        let dot = &self.layers.last().unwrap().dot;
        let u = self.fmt.u_dyadic();
        let sum_abs = norm_dyadic(&p.sum_abs_row_l2_up);
        let alpha = &norm_dyadic(&p.diff_row_l2_up) + &(&dot.kappa * &sum_abs);
        let beta_slope = &dot.kappa * &sum_abs;
        let two_a = &Dyadic::from_i64(2) * &(&(&Dyadic::one() + &u) * &dot.a_dot);
        let beta_const = &(&u * &norm_dyadic(&p.bias_abs_sum)) + &two_a;
        Ok(LayerCoeffs { alpha, beta_slope, beta_const })
    }

    /// `alpha_L D_{L-1} + beta_L(r_{L-1})` for a propagated state.
    pub fn pair_error(&self, pc: &PairCoeffs, state: &DeviationState) -> Dyadic {
        let last = state.radii.len() - 1;
        &(&pc.alpha * &state.devs[last]) + &pc.beta(&state.radii[last])
    }

    /// `(E_ctr, E_ball)` for the pair `(i_star, j)`.
    pub fn error_terms(&self, x: &[FpValue], eps: &Rat, i_star: usize, j: usize) -> Result<(Dyadic, Dyadic)> {
        let pc = self.pair_coeffs(i_star, j)?;
        let ball = self.propagate(x, eps)?.map_err(|f| Error::Overflow { layer: f.layer })?;
        let ctr = self.propagate(x, &Rat::from_integer(0.into()))?.map_err(|f| Error::Overflow { layer: f.layer })?;
        Ok((self.pair_error(&pc, &ctr), self.pair_error(&pc, &ball)))
    }

    /// `D_hybrid = ||z_hat_{L-1} - z_hat^hi_{L-1}|| + D^hi_{L-1}(x, 0)`, or
    /// `None` when the high-precision overflow check fails.
    pub fn hybrid_deviation(&self, x: &[FpValue]) -> Result<Option<Dyadic>> {
        let hi = self.hi.as_ref().ok_or_else(|| Error::Config("no hybrid format configured".into()))?;
        let state = match hi.propagate(x, &Rat::from_integer(0.into()))? {
            Ok(s) => s,
            Err(_) => return Ok(None),
        };
        let measured = measured_deviation(self.net, x, &self.fmt, &hi.fmt, self.net.rel_tol())?;
        let d_hi = state.devs.last().unwrap();
        Ok(Some(&norm_dyadic(&measured) + d_hi))
    }

    /// The floating-point robustness certificate at `(x, eps)`.
    pub fn certify(&self, x: &[FpValue], eps: &Rat, mode: Mode) -> Result<Certificate> {
        let ball = self.propagate(x, eps)?;
        let ball = match ball {
            Ok(s) => s,
            Err(f) => {
                return Ok(Certificate {
                    verdict: Verdict::OverflowRisk,
                    mode,
                    predicted: None,
                    eps: eps.clone(),
                    classes: Vec::new(),
                    degradation: None,
                    overflow: Some(f),
                    hybrid_fallback: false,
                })
            }
        };
        let ctr = self
            .propagate(x, &Rat::from_integer(0.into()))?
            .expect("the centre state is dominated by the ball state");
        let out = fp_outputs(self.net, x, &self.fmt)?;
        let i_star = argmax_fp(&out);

        let (d_hybrid, fallback) = match mode {
            Mode::Standard => (None, false),
            Mode::Hybrid => match self.hybrid_deviation(x)? {
                Some(d) => (Some(d), false),
                None => (None, true),
            },
        };
        let last = ctr.radii.len() - 1;
        let y_i = out[i_star].to_dyadic().expect("finite output");
        let mut classes = Vec::with_capacity(out.len() - 1);
        for (j, y) in out.iter().enumerate() {
            if j == i_star {
                continue;
            }
            let pc = self.pair_coeffs(i_star, j)?;
            let e_ctr_standard = self.pair_error(&pc, &ctr);
            let e_ball = self.pair_error(&pc, &ball);
            let e_ctr = match &d_hybrid {
                Some(d) => &(&pc.alpha * d) + &pc.beta(&ctr.radii[last]),
                None => e_ctr_standard.clone(),
            };
            let margin_hat = (&y_i - &y.to_dyadic().expect("finite output")).to_rat();
            let lipschitz = self.net.margin_lipschitz(i_star, j)?;
            let slack = &margin_hat - &lipschitz * eps - (&e_ctr + &e_ball).to_rat();
            classes.push(ClassBound { j, margin_hat, lipschitz, e_ctr, e_ball, e_ctr_standard, slack });
        }
        let zero = Rat::from_integer(0.into());
        let certified = classes.iter().all(|c| c.slack > zero);
        // with eps -> 0 the ball terms shrink to the centre terms, so a pair with
        // m_hat <= E_ctr + E_ctr(standard) cannot be certified at any radius
        let hopeless = classes
            .iter()
            .any(|c| c.margin_hat <= (&c.e_ctr + &c.e_ctr_standard).to_rat());
        let verdict = if certified {
            Verdict::Certified
        } else if hopeless {
            Verdict::Vacuous
        } else {
            Verdict::NotCertified
        };
        let degradation = classes.iter().map(|c| &c.e_ctr + &c.e_ball).max();
        Ok(Certificate {
            verdict,
            mode,
            predicted: Some(i_star),
            eps: eps.clone(),
            classes,
            degradation,
            overflow: None,
            hybrid_fallback: fallback,
        })
    }
}

/// Deterministic radii `r_0, ..., r_{L-1}`.
pub fn radii(net: &Network, x_norm_up: &Rat, eps: &Rat) -> Vec<Dyadic> {
    let r0 = x_norm_up + eps;
    let mut out = vec![if r0 == Rat::from_integer(0.into()) { Dyadic::zero() } else { dyadic_up(&r0, RADIUS_BITS) }];
    for layer in &net.layers()[..net.depth() - 1] {
        let n = layer.norms();
        let prev = out.last().unwrap();
        // both activations have Lipschitz constant 1
        out.push(&(&norm_dyadic(&n.spec_up) * prev) + &norm_dyadic(&n.bias_l2_up));
    }
    out
}

/// Closed form `D_l = sum_{k <= l} beta_k(r_{k-1}) prod_{k < i <= l} alpha_i`.
pub fn closed_form_devs(cert: &Certifier<'_>, radii: &[Dyadic]) -> Vec<Dyadic> {
    let mut out = vec![Dyadic::zero()];
    for l in 1..radii.len() {
        let mut total = Dyadic::zero();
        for k in 1..=l {
            let mut term = cert.layer_coeffs(k - 1).beta(&radii[k - 1]);
            for i in k + 1..=l {
                term = &term * &cert.layer_coeffs(i - 1).alpha;
            }
            total += &term;
        }
        out.push(total);
    }
    out
}

/// Convenience wrapper building a [`Certifier`] for a single call; hybrid
/// mode compares against binary64.
pub fn certify(net: &Network, x: &[FpValue], eps: &Rat, fmt: &FpFormat, mode: Mode) -> Result<Certificate> {
    let hi = (mode == Mode::Hybrid).then_some(FpFormat::FLOAT64);
    Certifier::new(net, fmt, hi.as_ref())?.certify(x, eps, mode)
}

/// Classical check: exact margins must beat `L_{j,i*} eps` for every `j`.
pub fn real_arith_certify(net: &Network, x: &[FpValue], eps: &Rat) -> Result<RealCertificate> {
    let xs: Vec<Dyadic> = x
        .iter()
        .map(|v| v.to_dyadic().ok_or_else(|| Error::Domain("non-finite input".into())))
        .collect::<Result<_>>()?;
    let acts = exact_forward(net, &xs)?;
    let y = acts.last().unwrap();
    let i_star = argmax_exact(y);
    let mut slack_min: Option<Rat> = None;
    for j in (0..y.len()).filter(|&j| j != i_star) {
        let m = (&y[i_star] - &y[j]).to_rat();
        let s = m - net.margin_lipschitz(i_star, j)? * eps;
        if slack_min.as_ref().is_none_or(|b| s < *b) {
            slack_min = Some(s);
        }
    }
    let slack_min = slack_min.expect("at least two classes");
    Ok(RealCertificate { certified: slack_min > Rat::from_integer(0.into()), predicted: i_star, slack_min })
}
