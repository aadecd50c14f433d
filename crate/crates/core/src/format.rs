//! Floating-point formats and the constants of the rounding-error model.
//!
//! A format is described by its precision `p` (including the implicit bit)
//! and its normal exponent range `[emin, emax]`. Everything derived from it
//! (unit roundoff, subnormal product error, largest finite value, and the
//! dot-product accumulation factors) is an exact rational.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_traits::One;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{pow2, rat_int, Dyadic, Rat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatName {
    Float16,
    Float32,
    Float64,
    Bfloat16,
    Custom,
}

impl FormatName {
    pub fn as_str(self) -> &'static str {
        match self {
            FormatName::Float16 => "float16",
            FormatName::Float32 => "float32",
            FormatName::Float64 => "float64",
            FormatName::Bfloat16 => "bfloat16",
            FormatName::Custom => "custom",
        }
    }
}

impl fmt::Display for FormatName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FormatName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "float16" | "fp16" | "half" => Ok(FormatName::Float16),
            "float32" | "fp32" | "single" => Ok(FormatName::Float32),
            "float64" | "fp64" | "double" => Ok(FormatName::Float64),
            "bfloat16" | "bf16" => Ok(FormatName::Bfloat16),
            other => Err(Error::Config(format!("unknown floating-point format {other:?}"))),
        }
    }
}

/// Binary floating-point format with round-to-nearest-even and gradual underflow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FpFormat {
    pub name: FormatName,
    /// Precision in bits, implicit bit included.
    pub p: u32,
    /// Exponent of the smallest normal number.
    pub emin: i32,
    /// Exponent of the largest finite number.
    pub emax: i32,
}

impl FpFormat {
    pub const FLOAT16: FpFormat = FpFormat { name: FormatName::Float16, p: 11, emin: -14, emax: 15 };
    pub const FLOAT32: FpFormat = FpFormat { name: FormatName::Float32, p: 24, emin: -126, emax: 127 };
    pub const FLOAT64: FpFormat = FpFormat { name: FormatName::Float64, p: 53, emin: -1022, emax: 1023 };
    pub const BFLOAT16: FpFormat = FpFormat { name: FormatName::Bfloat16, p: 8, emin: -126, emax: 127 };

    pub fn custom(p: u32, emin: i32, emax: i32) -> Result<FpFormat> {
        if p < 2 {
            return Err(Error::Config(format!("precision must be at least 2 bits, got {p}")));
        }
        if !(emin < 0 && emax > 0) {
            return Err(Error::Config(format!("need emin < 0 < emax, got [{emin}, {emax}]")));
        }
        Ok(FpFormat { name: FormatName::Custom, p, emin, emax })
    }

    /// Unit roundoff `u = 2^-p`.
    pub fn u(&self) -> Rat {
        pow2(-(self.p as i64))
    }

    pub fn u_dyadic(&self) -> Dyadic {
        Dyadic::pow2(-(self.p as i64))
    }

    /// Absolute error bound of a product landing in the subnormal range, `2^(emin - p)`.
    pub fn a_mul(&self) -> Rat {
        pow2(self.emin as i64 - self.p as i64)
    }

    /// Largest finite value `(2 - 2^(1-p)) * 2^emax`.
    pub fn f_max(&self) -> Rat {
        (rat_int(2) - pow2(1 - self.p as i64)) * pow2(self.emax as i64)
    }

    pub fn f_max_dyadic(&self) -> Dyadic {
        let m = (BigInt::one() << self.p as usize) - BigInt::one();
        Dyadic::new(m, self.emax as i64 - self.p as i64 + 1)
    }

    /// Exponent of the smallest subnormal quantum, `emin - p + 1`.
    pub fn min_quantum_exp(&self) -> i64 {
        self.emin as i64 - self.p as i64 + 1
    }

    /// Whether every value of this format is also a binary64 value, which is
    /// what the execution engine requires.
    pub fn fits_binary64(&self) -> bool {
        self.p <= 53 && self.emin >= -1022 && self.emax <= 1023
    }

    /// Exact membership test for a finite binary64 value.
    pub fn contains(&self, v: f64) -> bool {
        if !v.is_finite() {
            return false;
        }
        if v == 0.0 {
            return true;
        }
        let bits = v.to_bits();
        let biased = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (m, e) = if biased == 0 { (frac, -1074) } else { (frac | (1u64 << 52), biased - 1075) };
        let top = e + 63 - m.leading_zeros() as i64;
        let low = e + m.trailing_zeros() as i64;
        let quantum = (top - self.p as i64 + 1).max(self.min_quantum_exp());
        top <= self.emax as i64 && low >= quantum
    }

    pub fn contains_dyadic(&self, d: &Dyadic) -> bool {
        let Some(msb) = d.msb() else { return true };
        // value = odd * 2^e with top bit at msb - 1
        let e = d.exponent();
        let top = msb - 1;
        let quantum = (top - self.p as i64 + 1).max(self.min_quantum_exp());
        top <= self.emax as i64 && e >= quantum
    }

    /// Width of the exponent field for IEEE-style interchange encodings.
    fn exponent_bits(&self) -> Result<u32> {
        let w = (self.emax as u32 + 1).trailing_zeros() + 1;
        let ok = self.emax > 0
            && (self.emax as u32 + 1).is_power_of_two()
            && self.emin == 1 - self.emax
            && 1 + w + self.p - 1 <= 64;
        if ok {
            Ok(w)
        } else {
            Err(Error::Config(format!("format {self} has no IEEE-style bit encoding")))
        }
    }

    /// Total width of the bit encoding.
    pub fn storage_bits(&self) -> Result<u32> {
        Ok(1 + self.exponent_bits()? + self.p - 1)
    }

    /// Number of lowercase hex digits in an encoded value.
    pub fn hex_digits(&self) -> Result<usize> {
        Ok(self.storage_bits()?.div_ceil(4) as usize)
    }

    /// Bit pattern of a representable finite value. Negative zero encodes as +0.
    pub fn encode_bits(&self, v: f64) -> Result<u64> {
        let w = self.exponent_bits()?;
        if !self.contains(v) {
            return Err(Error::NotRepresentable { value: format!("{v:e}"), format: self.to_string() });
        }
        if v == 0.0 {
            return Ok(0);
        }
        let d = Dyadic::from_f64(v).unwrap();
        let sign = u64::from(v < 0.0);
        let top = d.msb().unwrap() - 1;
        let frac_bits = self.p - 1;
        let (biased, frac) = if top >= self.emin as i64 {
            let scaled = d.abs().mul_pow2(-(top - frac_bits as i64));
            let m = dyadic_to_u64(&scaled);
            ((top + self.emax as i64) as u64, m - (1u64 << frac_bits))
        } else {
            let scaled = d.abs().mul_pow2(-self.min_quantum_exp());
            (0, dyadic_to_u64(&scaled))
        };
        Ok((sign << (w + frac_bits)) | (biased << frac_bits) | frac)
    }

    /// Finite value of a bit pattern; infinities and NaNs are rejected.
    pub fn decode_bits(&self, bits: u64) -> Result<f64> {
        let w = self.exponent_bits()?;
        let total = 1 + w + self.p - 1;
        if total < 64 && bits >> total != 0 {
            return Err(Error::Parse(format!("bit pattern {bits:#x} wider than {self}")));
        }
        let frac_bits = self.p - 1;
        let sign = (bits >> (w + frac_bits)) & 1;
        let biased = (bits >> frac_bits) & ((1u64 << w) - 1);
        let frac = bits & ((1u64 << frac_bits) - 1);
        if biased == (1u64 << w) - 1 {
            return Err(Error::Domain(format!("bit pattern {bits:#x} is not finite in {self}")));
        }
        let (m, e) = if biased == 0 {
            (frac, self.min_quantum_exp())
        } else {
            (frac | (1u64 << frac_bits), biased as i64 - self.emax as i64 - frac_bits as i64)
        };
        let d = Dyadic::new(BigInt::from(m), e);
        let d = if sign == 1 { -d } else { d };
        d.to_f64_exact()
            .ok_or_else(|| Error::Config(format!("format {self} does not fit in binary64")))
    }
}

fn dyadic_to_u64(d: &Dyadic) -> u64 {
    let r = d.to_rat();
    debug_assert!(r.is_integer());
    u64::try_from(r.to_integer()).expect("encoded field fits in 64 bits")
}

impl fmt::Display for FpFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name {
            FormatName::Custom => write!(f, "custom(p={}, emin={}, emax={})", self.p, self.emin, self.emax),
            n => f.write_str(n.as_str()),
        }
    }
}

/// Build one of the named formats.
pub fn make_format(name: FormatName) -> Result<FpFormat> {
    match name {
        FormatName::Float16 => Ok(FpFormat::FLOAT16),
        FormatName::Float32 => Ok(FpFormat::FLOAT32),
        FormatName::Float64 => Ok(FpFormat::FLOAT64),
        FormatName::Bfloat16 => Ok(FpFormat::BFLOAT16),
        FormatName::Custom => Err(Error::Config("custom formats need explicit parameters".into())),
    }
}

impl FromStr for FpFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        make_format(s.parse()?)
    }
}

/// `(1 + u)^n - 1`, exactly.
pub fn gamma(n: u64, fmt: &FpFormat) -> Rat {
    gamma_dyadic(n, fmt).to_rat()
}

pub(crate) fn gamma_dyadic(n: u64, fmt: &FpFormat) -> Dyadic {
    if n == 0 {
        return Dyadic::zero();
    }
    let p = fmt.p as usize;
    let base = (BigInt::one() << p) + BigInt::one();
    let num = num_traits::pow(base, n as usize) - (BigInt::one() << (p * n as usize));
    Dyadic::new(num, -((p as u64 * n) as i64))
}

/// Error-model constants for a dot product of length `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorConstants {
    pub n: u64,
    pub gamma_n: Rat,
    /// `(1 + gamma_n) n a_mul`, absolute error of a length-`n` dot product.
    pub a_dot_n: Rat,
    /// `(1 + gamma_{n-1}) n a_mul`, the forward-error variant.
    pub a_dot_fwd_n: Rat,
    /// `gamma_n + u (1 + gamma_n)`.
    pub kappa_n: Rat,
}

pub fn error_constants(n: u64, fmt: &FpFormat) -> Result<ErrorConstants> {
    if n == 0 {
        return Err(Error::Argument("dot-product length must be at least 1".into()));
    }
    let one = Rat::one();
    let u = fmt.u();
    let a_mul = fmt.a_mul();
    let gamma_n = gamma(n, fmt);
    let gamma_prev = gamma(n - 1, fmt);
    let n_rat = rat_int(n as i64);
    let a_dot_n = (&one + &gamma_n) * &n_rat * &a_mul;
    let a_dot_fwd_n = (&one + &gamma_prev) * &n_rat * &a_mul;
    let kappa_n = &gamma_n + &u * (&one + &gamma_n);
    Ok(ErrorConstants { n, gamma_n, a_dot_n, a_dot_fwd_n, kappa_n })
}

/// Outcome of the `n * u < 1` applicability check.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Applicability {
    pub warnings: Vec<ApplicabilityWarning>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApplicabilityWarning {
    /// 1-based layer index.
    pub layer: usize,
    pub n_times_u: Rat,
}

impl Applicability {
    pub fn is_ok(&self) -> bool {
        self.warnings.is_empty()
    }
}

/// Flags every layer whose dot-product length `n` has `n * u >= 1`; bounds
/// stay sound there but are expected to be vacuous.
pub fn applicability_check(widths: &[u64], fmt: &FpFormat) -> Applicability {
    let u = fmt.u();
    let warnings = widths
        .iter()
        .enumerate()
        .filter_map(|(i, &n)| {
            let nu = rat_int(n as i64) * &u;
            (nu >= Rat::one()).then(|| ApplicabilityWarning { layer: i + 1, n_times_u: nu })
        })
        .collect();
    Applicability { warnings }
}

/// Convenience used by tests and reports: `n u / (1 - n u)` when `n u < 1`.
pub fn gamma_upper_estimate(n: u64, fmt: &FpFormat) -> Option<Rat> {
    let nu = rat_int(n as i64) * fmt.u();
    let one = Rat::one();
    (nu < one).then(|| &nu / (&one - &nu))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float32_constants() {
        let f = make_format(FormatName::Float32).unwrap();
        assert_eq!(f.u(), pow2(-24));
        assert_eq!(f.a_mul(), pow2(-150));
        assert_eq!(f.f_max(), (rat_int(2) - pow2(-23)) * pow2(127));
        assert_eq!(f.f_max(), Dyadic::from_f64(f32::MAX as f64).unwrap().to_rat());
        assert_eq!(f.f_max_dyadic().to_rat(), f.f_max());
    }

    #[test]
    fn float16_and_float64_constants() {
        assert_eq!(FpFormat::FLOAT16.f_max(), rat_int(65504));
        assert_eq!(FpFormat::FLOAT64.u(), pow2(-53));
        assert_eq!(FpFormat::FLOAT64.f_max(), Dyadic::from_f64(f64::MAX).unwrap().to_rat());
    }

    #[test]
    fn unknown_format_rejected() {
        assert!("float8".parse::<FormatName>().is_err());
        assert!(make_format(FormatName::Custom).is_err());
        assert!(FpFormat::custom(1, -2, 3).is_err());
        assert!(FpFormat::custom(4, 2, 3).is_err());
        assert_eq!("FP32".parse::<FpFormat>().unwrap(), FpFormat::FLOAT32);
    }

    #[test]
    fn gamma_small_cases() {
        let f = FpFormat::FLOAT32;
        assert_eq!(gamma(0, &f), rat_int(0));
        assert_eq!(gamma(1, &f), f.u());
        // binomial oracle for n = 2: 2u + u^2
        let u = f.u();
        assert_eq!(gamma(2, &f), rat_int(2) * &u + &u * &u);
    }

    #[test]
    fn gamma_784_below_first_order_bound() {
        let f = FpFormat::FLOAT32;
        let g = gamma(784, &f);
        let bound = gamma_upper_estimate(784, &f).unwrap();
        assert!(g <= bound);
        assert!(g >= rat_int(784) * f.u());
    }

    #[test]
    fn error_constants_examples() {
        let f = FpFormat::FLOAT32;
        let c1 = error_constants(1, &f).unwrap();
        assert_eq!(c1.a_dot_n, (Rat::one() + f.u()) * f.a_mul());
        assert_eq!(c1.a_dot_fwd_n, f.a_mul());
        assert!(error_constants(0, &f).is_err());
        let c128 = error_constants(128, &f).unwrap();
        assert_eq!(c128.a_dot_n, (Rat::one() + gamma(128, &f)) * rat_int(128) * pow2(-150));
        assert_eq!(c128.kappa_n, gamma(128, &f) + f.u() * (Rat::one() + gamma(128, &f)));
    }

    #[test]
    fn applicability_examples() {
        assert!(applicability_check(&[784, 128], &FpFormat::FLOAT32).is_ok());
        let warn = applicability_check(&[3072], &FpFormat::BFLOAT16);
        assert_eq!(warn.warnings.len(), 1);
        assert_eq!(warn.warnings[0].layer, 1);
        assert_eq!(warn.warnings[0].n_times_u, rat_int(12));
        for f in [FpFormat::FLOAT16, FpFormat::FLOAT32, FpFormat::FLOAT64, FpFormat::BFLOAT16] {
            assert!(applicability_check(&[1], &f).is_ok());
        }
    }

    #[test]
    fn bit_encodings_round_trip() {
        assert_eq!(FpFormat::FLOAT32.encode_bits(1.0).unwrap(), 0x3f80_0000);
        assert_eq!(FpFormat::FLOAT16.encode_bits(65504.0).unwrap(), 0x7bff);
        assert_eq!(FpFormat::BFLOAT16.encode_bits(-2.0).unwrap(), 0xc000);
        assert_eq!(FpFormat::FLOAT64.encode_bits(0.1).unwrap(), 0.1f64.to_bits());
        assert_eq!(FpFormat::FLOAT32.decode_bits(1).unwrap(), f32::from_bits(1) as f64);
        assert_eq!(FpFormat::FLOAT16.decode_bits(0x0001).unwrap(), 2f64.powi(-24));
        assert!(FpFormat::FLOAT32.decode_bits(0x7f80_0000).is_err());
        assert!(FpFormat::FLOAT32.encode_bits(0.1).is_err());
        assert_eq!(FpFormat::FLOAT32.hex_digits().unwrap(), 8);
        assert_eq!(FpFormat::FLOAT16.hex_digits().unwrap(), 4);
        for bits in [0x0000_0001u32, 0x007f_ffff, 0x0080_0000, 0x3eaa_aaab, 0xc2f6_e979, 0x7f7f_ffff] {
            let v = f32::from_bits(bits) as f64;
            assert_eq!(FpFormat::FLOAT32.encode_bits(v).unwrap(), bits as u64);
            assert_eq!(FpFormat::FLOAT32.decode_bits(bits as u64).unwrap(), v);
        }
    }

    #[test]
    fn membership() {
        assert!(FpFormat::FLOAT32.contains(f32::MIN_POSITIVE as f64 / 8.0));
        assert!(!FpFormat::FLOAT32.contains(2f64.powi(-150)));
        assert!(!FpFormat::FLOAT16.contains(65520.0));
        assert!(FpFormat::FLOAT16.contains(65504.0));
        assert!(!FpFormat::FLOAT32.contains(1.0 + 2f64.powi(-24)));
        assert!(FpFormat::FLOAT32.contains(1.0 + 2f64.powi(-23)));
    }
}
