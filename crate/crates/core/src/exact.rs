//! Exact arithmetic carriers and outward-rounded roots.
//!
//! Two exact number types are used throughout the crate:
//!
//! - [`Rat`]: an arbitrary-precision rational (`num_rational::BigRational`),
//!   used for every scalar that enters a certificate.
//! - [`Dyadic`]: an exact binary fraction `mantissa * 2^exponent`. Every
//!   floating-point value, and every sum or product of them, is dyadic, so
//!   exact reference executions and norm computations run on this type and
//!   never pay for gcd reductions.
//!
//! Irrational quantities (square roots, `2^k`-th roots) are only ever
//! returned as upper bounds whose soundness is checked by exact
//! re-substitution before they are handed out.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use num_bigint::{BigInt, Sign};
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Exact rational scalar.
pub type Rat = BigRational;

/// Exact rational vector.
pub type RVec = Vec<Dyadic>;

/// Relative tolerance used by every root computation unless overridden: `2^-80`.
pub fn default_rel_tol() -> Rat {
    pow2(-80)
}

pub fn rat_int(v: i64) -> Rat {
    Rat::from_integer(BigInt::from(v))
}

/// `2^k` as an exact rational.
pub fn pow2(k: i64) -> Rat {
    if k >= 0 {
        Rat::from_integer(BigInt::one() << (k as usize))
    } else {
        Rat::new_raw(BigInt::one(), BigInt::one() << ((-k) as usize))
    }
}

/// Largest `e` with `2^e <= q`. Requires `q > 0`.
pub fn floor_log2(q: &Rat) -> i64 {
    assert!(q.is_positive(), "floor_log2 of non-positive rational");
    let n = q.numer();
    let d = q.denom();
    let e = n.bits() as i64 - d.bits() as i64;
    let ge = if e >= 0 {
        *n >= (d.clone() << (e as usize))
    } else {
        (n.clone() << ((-e) as usize)) >= *d
    };
    if ge {
        e
    } else {
        e - 1
    }
}

/// Parse an exact rational from `p/q`, an integer, or a decimal literal with
/// optional exponent (`-1.25e-3`). Decimal inputs are converted exactly.
pub fn parse_rat(s: &str) -> Result<Rat> {
    let s = s.trim();
    let bad = || Error::Parse(format!("not a rational literal: {s:?}"));
    if s.is_empty() {
        return Err(bad());
    }
    if let Some((n, d)) = s.split_once('/') {
        let n: BigInt = n.trim().parse().map_err(|_| bad())?;
        let d: BigInt = d.trim().parse().map_err(|_| bad())?;
        if d.is_zero() {
            return Err(Error::Parse(format!("zero denominator in {s:?}")));
        }
        return Ok(Rat::new(n, d));
    }
    let (body, exp) = match s.find(['e', 'E']) {
        Some(i) => {
            let e: i64 = s[i + 1..].parse().map_err(|_| bad())?;
            (&s[..i], e)
        }
        None => (s, 0),
    };
    let (neg, body) = match body.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, body.strip_prefix('+').unwrap_or(body)),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad());
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let digits = format!("{int_part}{frac_part}");
    let mant: BigInt = if digits.is_empty() {
        BigInt::zero()
    } else {
        digits.parse().map_err(|_| bad())?
    };
    let scale = exp - frac_part.len() as i64;
    let ten = BigInt::from(10u32);
    let mut q = if scale >= 0 {
        Rat::from_integer(mant * num_traits::pow(ten, scale as usize))
    } else {
        Rat::new(mant, num_traits::pow(ten, (-scale) as usize))
    };
    if neg {
        q = -q;
    }
    Ok(q)
}

/// Canonical `p/q` (or `p` for integers) rendering, inverse of [`parse_rat`].
pub fn rat_to_string(q: &Rat) -> String {
    if q.is_integer() {
        q.numer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}

/// Nearest-ish `f64` for display; never used in a bound.
pub fn rat_to_f64(q: &Rat) -> f64 {
    q.to_f64().unwrap_or_else(|| {
        if q.is_negative() {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        }
    })
}

/// Exact binary fraction `mantissa * 2^exponent`, kept with an odd mantissa
/// (or zero mantissa and zero exponent).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct Dyadic {
    mant: BigInt,
    exp: i64,
}

impl Dyadic {
    pub fn new(mant: BigInt, exp: i64) -> Self {
        let mut d = Dyadic { mant, exp };
        d.normalize();
        d
    }

    pub fn zero() -> Self {
        Dyadic::default()
    }

    pub fn one() -> Self {
        Dyadic { mant: BigInt::one(), exp: 0 }
    }

    pub fn pow2(k: i64) -> Self {
        Dyadic { mant: BigInt::one(), exp: k }
    }

    pub fn from_i64(v: i64) -> Self {
        Dyadic::new(BigInt::from(v), 0)
    }

    fn normalize(&mut self) {
        match self.mant.trailing_zeros() {
            None => self.exp = 0,
            Some(0) => {}
            Some(tz) => {
                self.mant >>= tz as usize;
                self.exp += tz as i64;
            }
        }
    }

    /// Exact value of a finite `f64`; `None` for NaN and infinities.
    pub fn from_f64(x: f64) -> Option<Self> {
        if !x.is_finite() {
            return None;
        }
        if x == 0.0 {
            return Some(Dyadic::zero());
        }
        let bits = x.to_bits();
        let neg = bits >> 63 == 1;
        let biased = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (m, e) = if biased == 0 {
            (frac, -1074)
        } else {
            (frac | (1u64 << 52), biased - 1075)
        };
        let m = BigInt::from(m);
        Some(Dyadic::new(if neg { -m } else { m }, e))
    }

    /// Exact conversion from a rational whose denominator is a power of two.
    pub fn try_from_rat(q: &Rat) -> Option<Self> {
        let d = q.denom();
        let tz = d.trailing_zeros().unwrap_or(0);
        if (d >> tz as usize) != BigInt::one() {
            return None;
        }
        Some(Dyadic::new(q.numer().clone(), -(tz as i64)))
    }

    pub fn mantissa(&self) -> &BigInt {
        &self.mant
    }

    pub fn exponent(&self) -> i64 {
        self.exp
    }

    pub fn is_zero(&self) -> bool {
        self.mant.is_zero()
    }

    pub fn signum(&self) -> i32 {
        match self.mant.sign() {
            Sign::Minus => -1,
            Sign::NoSign => 0,
            Sign::Plus => 1,
        }
    }

    pub fn abs(&self) -> Self {
        Dyadic { mant: self.mant.abs(), exp: self.exp }
    }

    pub fn square(&self) -> Self {
        Dyadic { mant: &self.mant * &self.mant, exp: 2 * self.exp }
    }

    /// Multiply by `2^k` exactly.
    pub fn mul_pow2(&self, k: i64) -> Self {
        if self.is_zero() {
            return Dyadic::zero();
        }
        Dyadic { mant: self.mant.clone(), exp: self.exp + k }
    }

    /// `Some(e)` with `2^(e-1) <= |self| < 2^e`; `None` for zero.
    pub fn msb(&self) -> Option<i64> {
        if self.is_zero() {
            None
        } else {
            Some(self.mant.bits() as i64 + self.exp)
        }
    }

    pub fn to_rat(&self) -> Rat {
        if self.exp >= 0 {
            Rat::from_integer(&self.mant << (self.exp as usize))
        } else {
            // odd mantissa over a power of two is already reduced
            Rat::new_raw(self.mant.clone(), BigInt::one() << ((-self.exp) as usize))
        }
    }

    /// Exact `f64` if the value is representable in binary64.
    pub fn to_f64_exact(&self) -> Option<f64> {
        if self.is_zero() {
            return Some(0.0);
        }
        if self.mant.bits() > 53 {
            return None;
        }
        let m = self.mant.to_i64()? as f64;
        let v = ldexp(m, self.exp)?;
        Some(v)
    }

    /// Approximate `f64` for display.
    pub fn to_f64_approx(&self) -> f64 {
        rat_to_f64(&self.to_rat())
    }

    /// Smallest dyadic `>= self` whose mantissa has at most `bits` bits.
    pub fn ceil_to_bits(&self, bits: u64) -> Dyadic {
        let len = self.mant.bits();
        if len <= bits {
            return self.clone();
        }
        let k = len - bits;
        // floor division, then step up unless exact (the mantissa is odd, so
        // dropping bits always loses something)
        let q = self.mant.clone() >> k as usize;
        Dyadic::new(q + 1, self.exp + k as i64)
    }

    /// `round(self / 2^shift)` to the nearest integer (ties away from zero)
    /// together with the exact residual `self - result * 2^shift`.
    pub fn round_to_multiple_of_pow2(&self, shift: i64) -> (BigInt, Dyadic) {
        if self.is_zero() {
            return (BigInt::zero(), Dyadic::zero());
        }
        if self.exp >= shift {
            let q = &self.mant << ((self.exp - shift) as usize);
            return (q, Dyadic::zero());
        }
        let k = (shift - self.exp) as usize;
        let half = BigInt::one() << (k - 1);
        let (neg, mag) = (self.mant.is_negative(), self.mant.abs());
        let mut q = (&mag + &half) >> k;
        if neg {
            q = -q;
        }
        let back = Dyadic::new(q.clone(), shift);
        let resid = self - &back;
        (q, resid)
    }
}

/// `m * 2^e` computed exactly when the result is a finite binary64 value.
pub(crate) fn ldexp(m: f64, e: i64) -> Option<f64> {
    if m == 0.0 {
        return Some(0.0);
    }
    // split the scaling so neither factor leaves the representable range
    let mut v = m;
    let mut e = e;
    while e > 1000 {
        v *= pow2_f64(1000);
        e -= 1000;
    }
    while e < -1000 {
        let step = (-e).min(1000);
        let scaled = v * pow2_f64(-step);
        // exactness check: undo and compare
        if scaled * pow2_f64(step) != v {
            return None;
        }
        v = scaled;
        e += step;
    }
    let out = v * pow2_f64(e);
    if !out.is_finite() || out / pow2_f64(e) != v {
        return None;
    }
    Some(out)
}

fn pow2_f64(e: i64) -> f64 {
    debug_assert!((-1074..=1023).contains(&e));
    if e >= -1022 {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else {
        f64::from_bits(1u64 << (e + 1074))
    }
}

impl fmt::Display for Dyadic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", rat_to_string(&self.to_rat()))
    }
}

fn add_dyadic(a: &Dyadic, b: &Dyadic) -> Dyadic {
    if a.is_zero() {
        return b.clone();
    }
    if b.is_zero() {
        return a.clone();
    }
    let (lo, hi) = if a.exp <= b.exp { (a, b) } else { (b, a) };
    let shift = (hi.exp - lo.exp) as usize;
    Dyadic::new(&lo.mant + (&hi.mant << shift), lo.exp)
}

impl Add for &Dyadic {
    type Output = Dyadic;
    fn add(self, rhs: &Dyadic) -> Dyadic {
        add_dyadic(self, rhs)
    }
}

impl Add for Dyadic {
    type Output = Dyadic;
    fn add(self, rhs: Dyadic) -> Dyadic {
        add_dyadic(&self, &rhs)
    }
}

impl AddAssign<&Dyadic> for Dyadic {
    fn add_assign(&mut self, rhs: &Dyadic) {
        *self = add_dyadic(self, rhs);
    }
}

impl Neg for &Dyadic {
    type Output = Dyadic;
    fn neg(self) -> Dyadic {
        Dyadic { mant: -&self.mant, exp: self.exp }
    }
}

impl Neg for Dyadic {
    type Output = Dyadic;
    fn neg(self) -> Dyadic {
        Dyadic { mant: -self.mant, exp: self.exp }
    }
}

impl Sub for &Dyadic {
    type Output = Dyadic;
    fn sub(self, rhs: &Dyadic) -> Dyadic {
        add_dyadic(self, &-rhs)
    }
}

impl Sub for Dyadic {
    type Output = Dyadic;
    fn sub(self, rhs: Dyadic) -> Dyadic {
        add_dyadic(&self, &-rhs)
    }
}

impl Mul for &Dyadic {
    type Output = Dyadic;
    fn mul(self, rhs: &Dyadic) -> Dyadic {
        if self.is_zero() || rhs.is_zero() {
            return Dyadic::zero();
        }
        // product of odd mantissas is odd: already normalized
        Dyadic { mant: &self.mant * &rhs.mant, exp: self.exp + rhs.exp }
    }
}

impl Mul for Dyadic {
    type Output = Dyadic;
    fn mul(self, rhs: Dyadic) -> Dyadic {
        &self * &rhs
    }
}

impl Sum for Dyadic {
    fn sum<I: Iterator<Item = Dyadic>>(iter: I) -> Dyadic {
        iter.fold(Dyadic::zero(), |acc, x| acc + x)
    }
}

impl<'a> Sum<&'a Dyadic> for Dyadic {
    fn sum<I: Iterator<Item = &'a Dyadic>>(iter: I) -> Dyadic {
        iter.fold(Dyadic::zero(), |acc, x| &acc + x)
    }
}

impl PartialOrd for Dyadic {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dyadic {
    fn cmp(&self, other: &Self) -> Ordering {
        let (sa, sb) = (self.signum(), other.signum());
        if sa != sb {
            return sa.cmp(&sb);
        }
        if sa == 0 {
            return Ordering::Equal;
        }
        // same sign: compare magnitudes by msb first
        let (ma, mb) = (self.msb().unwrap(), other.msb().unwrap());
        let mag = if ma != mb {
            ma.cmp(&mb)
        } else {
            (self.abs() - other.abs()).signum().cmp(&0)
        };
        if sa > 0 {
            mag
        } else {
            mag.reverse()
        }
    }
}

/// Dense row-major matrix of exact entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RMat {
    rows: usize,
    cols: usize,
    data: Vec<Dyadic>,
}

impl RMat {
    pub fn new(rows: usize, cols: usize, data: Vec<Dyadic>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Structural(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(RMat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        RMat { rows, cols, data: vec![Dyadic::zero(); rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<Dyadic>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Structural("ragged matrix rows".into()));
        }
        RMat::new(r, c, rows.into_iter().flatten().collect())
    }

    pub fn from_f64_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let conv = rows
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&v| {
                        Dyadic::from_f64(v)
                            .ok_or_else(|| Error::Domain(format!("non-finite matrix entry {v}")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        RMat::from_rows(conv)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &Dyadic {
        &self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[Dyadic] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn entries(&self) -> &[Dyadic] {
        &self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(Dyadic::is_zero)
    }

    /// Entrywise absolute value `|W|`.
    pub fn abs(&self) -> RMat {
        RMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(Dyadic::abs).collect(),
        }
    }

    pub fn transpose(&self) -> RMat {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j).clone());
            }
        }
        RMat { rows: self.cols, cols: self.rows, data }
    }

    /// Exact `W v`.
    pub fn mul_vec(&self, v: &[Dyadic]) -> Result<RVec> {
        if v.len() != self.cols {
            return Err(Error::Structural(format!(
                "matvec dimension mismatch: {} columns, vector of {}",
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Exact sum of squared entries.
    pub fn frobenius_sq(&self) -> Dyadic {
        self.data.iter().map(Dyadic::square).sum()
    }
}

/// Sound upper bound `s` on `sqrt(q)` with `s <= sqrt(q) * (1 + rel_tol)`.
///
/// The candidate comes from an exact integer square root on a scaled copy of
/// `q`; it is then corrected upward until `s^2 >= q` holds exactly.
pub fn sqrt_up(q: &Rat, rel_tol: &Rat) -> Result<Rat> {
    if q.is_negative() {
        return Err(Error::Domain(format!("square root of negative value {q}")));
    }
    if !rel_tol.is_positive() {
        return Err(Error::Domain("root tolerance must be positive".into()));
    }
    if q.is_zero() {
        return Ok(Rat::zero());
    }
    // 2^-t <= rel_tol / 2 and 2^h <= sqrt(q)
    let t = 1 - floor_log2(rel_tol);
    let h = floor_log2(q).div_euclid(2);
    // grid step 2^-n <= sqrt(q) * rel_tol / 2
    let n = t - h;
    let (num, den) = if n >= 0 {
        (q.numer() << (2 * n) as usize, q.denom().clone())
    } else {
        (q.numer().clone(), q.denom() << (2 * (-n)) as usize)
    };
    let mut c = (&num / &den).sqrt();
    while &c * &c * &den < num {
        c += 1;
    }
    let s = if n >= 0 {
        Rat::new(c, BigInt::one() << n as usize)
    } else {
        Rat::from_integer(c << (-n) as usize)
    };
    debug_assert!(&s * &s >= *q);
    Ok(s)
}

/// Sound upper bound on `q^(1 / 2^k)` via `k` nested [`sqrt_up`] calls, each
/// with tolerance `rel_tol / k`.
pub fn root_pow2_up(q: &Rat, k: u32, rel_tol: &Rat) -> Result<Rat> {
    if q.is_negative() {
        return Err(Error::Domain(format!("root of negative value {q}")));
    }
    if k == 0 {
        return Ok(q.clone());
    }
    let step = rel_tol / rat_int(k as i64);
    let mut v = q.clone();
    for _ in 0..k {
        v = sqrt_up(&v, &step)?;
    }
    Ok(v)
}

/// Smallest multiple of `2^(floor(log2 q) - bits)` that is `>= q`; exact when
/// `q` is already dyadic.
pub fn dyadic_up(q: &Rat, bits: u32) -> Dyadic {
    if let Some(d) = Dyadic::try_from_rat(q) {
        return d;
    }
    let k = floor_log2(&q.abs()) - bits as i64;
    let scaled = q / pow2(k);
    Dyadic::new(scaled.ceil().to_integer(), k)
}

/// Sound upper bound on the Euclidean norm of an exact vector.
pub fn l2_norm_up(v: &[Dyadic], rel_tol: &Rat) -> Rat {
    let sq: Dyadic = v.iter().map(Dyadic::square).sum();
    sqrt_up(&sq.to_rat(), rel_tol).expect("sum of squares is nonnegative")
}

/// Exact maximum absolute entry (0 for an empty slice).
pub fn linf_norm(v: &[Dyadic]) -> Dyadic {
    v.iter().map(Dyadic::abs).max().unwrap_or_default()
}
