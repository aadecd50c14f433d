//! Emulated floating-point execution and the exact reference execution.
//!
//! Every format that fits inside binary64 is executed on `f64` carriers that
//! always hold an exact member of the target format. Products and sums are
//! formed exactly in 128-bit integers and rounded once, round-to-nearest
//! ties-to-even with gradual underflow, so the emulation is bit-exact for any
//! such format and not only the ones the hardware supports.

use std::fmt;

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{l2_norm_up, parse_rat, rat_to_string, Dyadic, RVec, Rat};
use crate::format::{FormatName, FpFormat};
use crate::network::{Activation, Network};

/// A value of some floating-point format, or an infinity.
///
/// Negative zero is never produced; zero is always `+0`.
#[derive(Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FpValue(f64);

impl FpValue {
    pub const ZERO: FpValue = FpValue(0.0);

    /// Wrap `v` after checking that it belongs to `fmt`.
    pub fn new(v: f64, fmt: &FpFormat) -> Result<Self> {
        if !fmt.contains(v) {
            return Err(Error::NotRepresentable { value: format!("{v:e}"), format: fmt.to_string() });
        }
        Ok(FpValue(v + 0.0))
    }

    pub(crate) fn from_raw(v: f64) -> Self {
        FpValue(if v == 0.0 { 0.0 } else { v })
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }

    /// Exact value; `None` for non-finite values.
    pub fn to_dyadic(self) -> Option<Dyadic> {
        Dyadic::from_f64(self.0)
    }

    pub fn to_rat(self) -> Option<Rat> {
        self.to_dyadic().map(|d| d.to_rat())
    }
}

impl fmt::Debug for FpValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:e}", self.0)
    }
}

impl fmt::Display for FpValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn require_executable(fmt: &FpFormat) -> Result<()> {
    if fmt.fits_binary64() {
        Ok(())
    } else {
        Err(Error::Config(format!("format {fmt} cannot be executed: it does not fit inside binary64")))
    }
}

fn inf(neg: bool) -> FpValue {
    FpValue(if neg { f64::NEG_INFINITY } else { f64::INFINITY })
}

/// Assemble the binary64 value `(-1)^neg * m * 2^e`, which the caller
/// guarantees to be representable.
fn compose_f64(neg: bool, m: u64, e: i64) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let lz = m.leading_zeros() as i64;
    let shift = lz - 11;
    let (m, e) = if shift >= 0 { (m << shift, e - shift) } else { (m >> -shift, e - shift) };
    let biased = e + 1075;
    let sign = u64::from(neg) << 63;
    let bits = if biased >= 1 {
        debug_assert!(biased < 2047);
        sign | ((biased as u64) << 52) | (m & ((1u64 << 52) - 1))
    } else {
        sign | (m >> (1 - biased))
    };
    f64::from_bits(bits)
}

/// Finite binary64 split as `m * 2^e` with `2^52 <= m < 2^53`.
fn decompose(v: f64) -> (bool, u64, i64) {
    let bits = v.to_bits();
    let neg = bits >> 63 == 1;
    let biased = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    if biased == 0 {
        let lz = frac.leading_zeros() as i64 - 11;
        (neg, frac << lz, -1074 - lz)
    } else {
        (neg, frac | (1u64 << 52), biased - 1075)
    }
}

/// Round the finished value `kept * 2^q` to a format member or infinity.
fn finish(neg: bool, kept: u64, q: i64, fmt: &FpFormat) -> FpValue {
    if kept == 0 {
        return FpValue::ZERO;
    }
    let top = q + 63 - kept.leading_zeros() as i64;
    if top > fmt.emax as i64 {
        return inf(neg);
    }
    FpValue(compose_f64(neg, kept, q))
}

/// Round `(-1)^neg * (mant + s) * 2^exp` where `s` is zero if `!sticky` and
/// lies strictly inside `(0, 1)` otherwise.
fn round_u128(neg: bool, mant: u128, exp: i64, sticky: bool, fmt: &FpFormat) -> FpValue {
    if mant == 0 {
        debug_assert!(!sticky);
        return FpValue::ZERO;
    }
    let p = fmt.p as i64;
    let top = exp + 127 - mant.leading_zeros() as i64;
    let q = (top - p + 1).max(fmt.min_quantum_exp());
    let shift = q - exp;
    if shift <= 0 {
        debug_assert!(!sticky);
        return finish(neg, (mant << (-shift) as u32) as u64, q, fmt);
    }
    let (kept, up) = if shift > 128 {
        (0u128, false)
    } else if shift == 128 {
        let half = 1u128 << 127;
        (0, mant > half || (mant == half && sticky))
    } else {
        let kept = mant >> shift;
        let rem = mant & ((1u128 << shift) - 1);
        let half = 1u128 << (shift - 1);
        (kept, rem > half || (rem == half && (sticky || kept & 1 == 1)))
    };
    finish(neg, (kept + u128::from(up)) as u64, q, fmt)
}

/// Round an exact dyadic value.
pub fn fp_round_dyadic(d: &Dyadic, fmt: &FpFormat) -> FpValue {
    let Some(msb) = d.msb() else { return FpValue::ZERO };
    let neg = d.signum() < 0;
    let top = msb - 1;
    if top > fmt.emax as i64 + 1 {
        return inf(neg);
    }
    let q = (top - fmt.p as i64 + 1).max(fmt.min_quantum_exp());
    let mag = d.mantissa().abs();
    let e = d.exponent();
    if e >= q {
        let kept = (mag << (e - q) as usize).to_u64().expect("at most p bits");
        return finish(neg, kept, q, fmt);
    }
    let k = (q - e) as usize;
    let kept = &mag >> k;
    let rem = &mag - (&kept << k);
    let half = BigInt::one() << (k - 1);
    let kept = kept.to_u64().expect("at most p bits");
    let up = rem > half || (rem == half && kept & 1 == 1);
    finish(neg, kept + u64::from(up), q, fmt)
}

/// Nearest member of `fmt` to `q`, ties to even; `±inf` past the overflow
/// threshold. Zero is returned as `+0`.
pub fn fp_round(q: &Rat, fmt: &FpFormat) -> FpValue {
    if let Some(d) = Dyadic::try_from_rat(q) {
        return fp_round_dyadic(&d, fmt);
    }
    let neg = q.is_negative();
    let n = q.numer().abs();
    let den = q.denom().clone();
    let top = crate::exact::floor_log2(&Rat::new_raw(n.clone(), den.clone()));
    if top > fmt.emax as i64 + 1 {
        return inf(neg);
    }
    let qe = (top - fmt.p as i64 + 1).max(fmt.min_quantum_exp());
    // kept = floor(|q| / 2^qe), compare the remainder against one half
    let (num, dd) = if qe >= 0 { (n, den << qe as usize) } else { (n << (-qe) as usize, den) };
    let kept = &num / &dd;
    let rem2 = (&num - &kept * &dd) * 2u32;
    let kept = kept.to_u64().expect("at most p + 1 bits");
    // a non-dyadic rational is never exactly halfway
    let up = rem2 > dd;
    finish(neg, kept + u64::from(up), qe, fmt)
}

/// `fl(a * b)`.
pub fn fp_mul(a: FpValue, b: FpValue, fmt: &FpFormat) -> FpValue {
    if !a.is_finite() || !b.is_finite() {
        return FpValue::from_raw(a.0 * b.0);
    }
    if a.0 == 0.0 || b.0 == 0.0 {
        return FpValue::ZERO;
    }
    let (na, ma, ea) = decompose(a.0);
    let (nb, mb, eb) = decompose(b.0);
    round_u128(na != nb, ma as u128 * mb as u128, ea + eb, false, fmt)
}

/// `fl(a + b)`.
pub fn fp_add(a: FpValue, b: FpValue, fmt: &FpFormat) -> FpValue {
    if !a.is_finite() || !b.is_finite() {
        return FpValue::from_raw(a.0 + b.0);
    }
    if a.0 == 0.0 {
        return b;
    }
    if b.0 == 0.0 {
        return a;
    }
    let (x, y) = if decompose(a.0).2 >= decompose(b.0).2 { (a, b) } else { (b, a) };
    let (nx, mx, ex) = decompose(x.0);
    let (ny, my, ey) = decompose(y.0);
    let d = ex - ey;
    if d <= 55 {
        let big = (mx as i128) << d;
        let sx = if nx { -big } else { big };
        let sy = if ny { -(my as i128) } else { my as i128 };
        let s = sx + sy;
        return round_u128(s < 0, s.unsigned_abs(), ey, false, fmt);
    }
    // |y| < 2^(ey + 53) <= 2^(ex - 3): y only contributes a sticky fraction
    // of one unit at exponent ex - 3
    let base = (mx as u128) << 3;
    let mant = if nx == ny { base } else { base - 1 };
    round_u128(nx, mant, ex - 3, true, fmt)
}

/// How a format's operations are carried out on binary64 carriers.
///
/// `fl_F(a op b) = fl_F(fl_64(a op b))` whenever `53 >= 2p + 2` and the
/// binary64 operation neither overflows nor underflows, so narrow formats can
/// use native binary64 arithmetic followed by one rounding. The soft
/// [`fp_mul`] / [`fp_add`] path is the reference the others are tested
/// against.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Kernel {
    Binary64,
    Binary32,
    ViaF64(FpFormat),
    Soft(FpFormat),
}

impl Kernel {
    pub(crate) fn new(fmt: &FpFormat) -> Kernel {
        let (p, emin, emax) = (fmt.p, fmt.emin, fmt.emax);
        if (p, emin, emax) == (53, -1022, 1023) {
            Kernel::Binary64
        } else if (p, emin, emax) == (24, -126, 127) {
            Kernel::Binary32
        } else if 2 * p + 2 <= 53 && 2 * fmt.min_quantum_exp() >= -1022 && 2 * (emax as i64 + 1) <= 1023 {
            Kernel::ViaF64(*fmt)
        } else {
            Kernel::Soft(*fmt)
        }
    }

    #[inline]
    fn round(self, v: f64) -> f64 {
        match self {
            Kernel::Binary64 => v,
            Kernel::Binary32 => v as f32 as f64,
            Kernel::ViaF64(f) | Kernel::Soft(f) => {
                if !v.is_finite() || v == 0.0 {
                    return v;
                }
                let (neg, m, e) = decompose(v);
                round_u128(neg, m as u128, e, false, &f).0
            }
        }
    }

    #[inline]
    pub(crate) fn mul(self, a: f64, b: f64) -> f64 {
        match self {
            Kernel::Soft(f) => fp_mul(FpValue(a), FpValue(b), &f).0,
            k => k.round(a * b),
        }
    }

    #[inline]
    pub(crate) fn add(self, a: f64, b: f64) -> f64 {
        match self {
            Kernel::Soft(f) => fp_add(FpValue(a), FpValue(b), &f).0,
            k => k.round(a + b),
        }
    }

    /// Sequential dot product; `-0` is normalised to `+0`.
    #[inline]
    pub(crate) fn dot(self, a: &[f64], b: &[f64]) -> f64 {
        let mut it = a.iter().zip(b);
        let Some((a0, b0)) = it.next() else { return 0.0 };
        let mut s = self.mul(*a0, *b0);
        for (x, y) in it {
            s = self.add(s, self.mul(*x, *y));
        }
        s + 0.0
    }
}

/// Sequential left-to-right dot product without fused multiply-add.
pub fn fp_dot(a: &[FpValue], b: &[FpValue], fmt: &FpFormat) -> Result<FpValue> {
    if a.len() != b.len() {
        return Err(Error::Structural(format!("dot product of lengths {} and {}", a.len(), b.len())));
    }
    require_executable(fmt)?;
    let (a, b) = (as_f64(a), as_f64(b));
    Ok(FpValue(Kernel::new(fmt).dot(&a, &b)))
}

/// Reference dot product built only from the soft [`fp_mul`] and [`fp_add`].
pub fn fp_dot_soft(a: &[FpValue], b: &[FpValue], fmt: &FpFormat) -> FpValue {
    let mut it = a.iter().zip(b);
    let Some((a0, b0)) = it.next() else { return FpValue::ZERO };
    let mut s = fp_mul(*a0, *b0, fmt);
    for (x, y) in it {
        s = fp_add(s, fp_mul(*x, *y, fmt), fmt);
    }
    s
}

fn as_f64(v: &[FpValue]) -> Vec<f64> {
    v.iter().map(|x| x.0).collect()
}

/// Round every entry of `xs` to `fmt`; overflowing entries are an error.
pub fn quantize_input(xs: &[Rat], fmt: &FpFormat) -> Result<Vec<FpValue>> {
    require_executable(fmt)?;
    xs.iter()
        .map(|q| {
            let v = fp_round(q, fmt);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Domain(format!("input value {q} overflows {fmt}")))
            }
        })
        .collect()
}

/// Round `f64` inputs to `fmt`.
pub fn quantize_f64(xs: &[f64], fmt: &FpFormat) -> Result<Vec<FpValue>> {
    require_executable(fmt)?;
    xs.iter()
        .map(|&v| {
            let d = Dyadic::from_f64(v).ok_or_else(|| Error::Domain(format!("non-finite input {v}")))?;
            let r = fp_round_dyadic(&d, fmt);
            if r.is_finite() {
                Ok(r)
            } else {
                Err(Error::Domain(format!("input value {v:e} overflows {fmt}")))
            }
        })
        .collect()
}

/// Record of one emulated forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `preacts[l - 1]` is the rounded pre-activation of layer `l`.
    pub preacts: Vec<Vec<FpValue>>,
    /// `acts[0]` is the input; `acts[l]` the output of layer `l`.
    pub acts: Vec<Vec<FpValue>>,
    pub overflowed: bool,
    /// 1-based layer of the first non-finite value.
    pub overflow_layer: Option<usize>,
    /// Exact real-arithmetic activations, indexed like `acts`.
    pub exact_acts: Vec<RVec>,
}

impl Trace {
    pub fn outputs(&self) -> &[FpValue] {
        self.acts.last().expect("trace has an input layer")
    }

    /// `||acts[l] - exact_acts[l]||_2`, rounded up.
    pub fn deviation_up(&self, l: usize, rel_tol: &Rat) -> Option<Rat> {
        let diff = diff_exact(&self.acts[l], &self.exact_acts[l])?;
        Some(l2_norm_up(&diff, rel_tol))
    }
}

fn diff_exact(a: &[FpValue], b: &[Dyadic]) -> Option<RVec> {
    a.iter().zip(b).map(|(x, y)| Some(x.to_dyadic()? - y.clone())).collect()
}

fn check_input(net: &Network, x: &[FpValue], fmt: &FpFormat) -> Result<()> {
    require_executable(fmt)?;
    if x.len() != net.n_in() {
        return Err(Error::Structural(format!("input has {} entries, network expects {}", x.len(), net.n_in())));
    }
    if !net.executable_in(fmt) {
        return Err(Error::Config(format!(
            "weights stored in {} are not all members of {fmt}; cast the network first",
            net.format()
        )));
    }
    if let Some(v) = x.iter().find(|v| !fmt.contains(v.value())) {
        return Err(Error::NotRepresentable { value: format!("{v:?}"), format: fmt.to_string() });
    }
    Ok(())
}

fn activate(act: Activation, v: FpValue) -> FpValue {
    match act {
        Activation::Relu if v.0 < 0.0 => FpValue::ZERO,
        _ => v,
    }
}

/// One emulated layer: `phi(fl(fl(W z) + b))`, returning pre-activations and
/// activations.
fn fp_layer(net: &Network, l: usize, z: &[FpValue], kernel: Kernel) -> (Vec<FpValue>, Vec<FpValue>) {
    let layer = &net.layers()[l];
    let cols = layer.n_in();
    let w = layer.weights_f64();
    let z = &as_f64(z);
    let pre: Vec<FpValue> = layer
        .bias_f64()
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let s = kernel.dot(&w[i * cols..(i + 1) * cols], z);
            FpValue::from_raw(kernel.add(s, b))
        })
        .collect();
    let act = pre.iter().map(|&v| activate(layer.activation(), v)).collect();
    (pre, act)
}

/// Emulated forward pass only; `Err(Overflow)` on the first non-finite layer.
pub fn fp_outputs(net: &Network, x: &[FpValue], fmt: &FpFormat) -> Result<Vec<FpValue>> {
    check_input(net, x, fmt)?;
    let kernel = Kernel::new(fmt);
    let mut z = x.to_vec();
    for l in 0..net.layers().len() {
        let (_, act) = fp_layer(net, l, &z, kernel);
        if act.iter().any(|v| !v.is_finite()) {
            return Err(Error::Overflow { layer: l + 1 });
        }
        z = act;
    }
    Ok(z)
}

/// Emulated activations of every layer, stopping at the first overflow.
pub fn fp_activations(net: &Network, x: &[FpValue], fmt: &FpFormat) -> Result<Vec<Vec<FpValue>>> {
    check_input(net, x, fmt)?;
    let kernel = Kernel::new(fmt);
    let mut acts = vec![x.to_vec()];
    for l in 0..net.layers().len() {
        let (_, act) = fp_layer(net, l, &acts[l], kernel);
        if act.iter().any(|v| !v.is_finite()) {
            return Err(Error::Overflow { layer: l + 1 });
        }
        acts.push(act);
    }
    Ok(acts)
}

/// Exact activations `z_0 = x, z_l = phi(W_l z_{l-1} + b_l)`.
pub fn exact_forward(net: &Network, x: &[Dyadic]) -> Result<Vec<RVec>> {
    if x.len() != net.n_in() {
        return Err(Error::Structural(format!("input has {} entries, network expects {}", x.len(), net.n_in())));
    }
    let mut acts = vec![x.to_vec()];
    for layer in net.layers() {
        let z = acts.last().unwrap();
        let next = layer
            .weights()
            .mul_vec(z)?
            .into_iter()
            .zip(layer.bias())
            .map(|(s, b)| {
                let a = s + b.clone();
                match layer.activation() {
                    Activation::Relu if a.signum() < 0 => Dyadic::zero(),
                    _ => a,
                }
            })
            .collect();
        acts.push(next);
    }
    Ok(acts)
}

/// Full trace: emulated execution in `fmt` alongside the exact execution.
pub fn fp_forward(net: &Network, x: &[FpValue], fmt: &FpFormat) -> Result<Trace> {
    check_input(net, x, fmt)?;
    let kernel = Kernel::new(fmt);
    let x_exact: RVec = x.iter().map(|v| v.to_dyadic().expect("finite input")).collect();
    let exact_acts = exact_forward(net, &x_exact)?;
    let mut preacts = Vec::with_capacity(net.layers().len());
    let mut acts = vec![x.to_vec()];
    let mut overflow_layer = None;
    for l in 0..net.layers().len() {
        let (pre, act) = fp_layer(net, l, &acts[l], kernel);
        if overflow_layer.is_none() && pre.iter().any(|v| !v.is_finite()) {
            overflow_layer = Some(l + 1);
        }
        preacts.push(pre);
        acts.push(act);
    }
    Ok(Trace { preacts, acts, overflowed: overflow_layer.is_some(), overflow_layer, exact_acts })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_fp(v: &[FpValue]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if x.0 > v[best].0 {
            best = i;
        }
    }
    best
}

pub fn argmax_exact(v: &[Dyadic]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted class under emulated execution in `fmt`.
pub fn classify(net: &Network, x: &[FpValue], fmt: &FpFormat) -> Result<usize> {
    Ok(argmax_fp(&fp_outputs(net, x, fmt)?))
}

/// `||z_hat_{L-1}(x) - z_hat^hi_{L-1}(x)||_2`, rounded up.
pub fn measured_deviation(net: &Network, x: &[FpValue], lo: &FpFormat, hi: &FpFormat, rel_tol: &Rat) -> Result<Rat> {
    let a = fp_activations(net, x, lo)?;
    let b = fp_activations(net, x, hi)?;
    let l = net.layers().len() - 1;
    let diff: RVec = a[l]
        .iter()
        .zip(&b[l])
        .map(|(p, q)| p.to_dyadic().unwrap() - q.to_dyadic().unwrap())
        .collect();
    Ok(l2_norm_up(&diff, rel_tol))
}

/// Exact `a - b` for finite values.
pub fn exact_diff(a: FpValue, b: FpValue) -> Rat {
    (a.to_dyadic().expect("finite") - b.to_dyadic().expect("finite")).to_rat()
}

/// Shortest decimal string that rounds back to `v` in `fmt`.
pub fn shortest_decimal(v: FpValue, fmt: &FpFormat) -> String {
    let x = v.value();
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    match fmt.name {
        FormatName::Float64 => return format!("{x:?}"),
        FormatName::Float32 => return format!("{:?}", x as f32),
        _ => {}
    }
    let q = v.to_rat().expect("finite");
    let a = q.abs();
    let e10 = x.abs().log10().floor() as i64;
    let ten = BigInt::from(10u32);
    let pow10 = |k: i64| {
        if k >= 0 {
            Rat::from_integer(num_traits::pow(ten.clone(), k as usize))
        } else {
            Rat::new(BigInt::one(), num_traits::pow(ten.clone(), (-k) as usize))
        }
    };
    for k in 1..=40i64 {
        let scale = pow10(e10 - k + 1);
        let digits = (&a / &scale).round();
        let d = &digits * &scale;
        let d = if x < 0.0 { -d } else { d };
        if fp_round(&d, fmt) == v {
            let mut ds = digits.to_integer().to_string();
            let mut exp = e10 - k + 1;
            while ds.len() > 1 && ds.ends_with('0') {
                ds.pop();
                exp += 1;
            }
            let sign = if x < 0.0 { "-" } else { "" };
            let sci = exp + ds.len() as i64 - 1;
            return if ds.len() == 1 {
                format!("{sign}{ds}e{sci}")
            } else {
                format!("{sign}{}.{}e{sci}", &ds[..1], &ds[1..])
            };
        }
    }
    rat_to_string(&q)
}

/// The format value a decimal literal denotes: the literal must either be
/// exact or be the shortest round-trip decimal of its rounded value.
pub fn decimal_round_trip(q: &Rat, fmt: &FpFormat) -> Option<FpValue> {
    let v = fp_round(q, fmt);
    if !v.is_finite() {
        return None;
    }
    if v.to_rat().as_ref() == Some(q) {
        return Some(v);
    }
    let back = parse_rat(&shortest_decimal(v, fmt)).ok()?;
    (back == *q).then_some(v)
}
