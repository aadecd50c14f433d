//! Sound upper bounds on the matrix and vector norms consumed by the certifier.
//!
//! Spectral norms use Gram iteration on a fixed-point copy of the matrix.
//! Every rounding step (quantising `W`, re-quantising each Gram power) is
//! accounted for exactly, so the returned value dominates `||W||_2` no matter
//! how many iterations are run. The chain of bounds, with `K_k` the rounded
//! `k`-th Gram power and `E_k` the rounding error introduced at step `k`:
//!
//! ```text
//! ||W||_2   <= ||W~||_2 + ||W - W~||_F
//! ||K_k||^2  = ||K_k^2||_2 <= ||K_{k+1}||_2 + ||E_{k+1}||_F
//! ||K_last|| <= min(||K_last||_F, max absolute row sum of K_last)
//! ```
//!
//! Scale exponents are tracked separately from the integer mantissas so the
//! bit sizes never grow with the iteration count.

use num_bigint::BigInt;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::exact::{l2_norm_up, linf_norm, pow2, rat_int, sqrt_up, Dyadic, RMat, Rat};

/// Norm bounds for one layer `(W, b)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNorms {
    /// Upper bound on `||W||_2`.
    pub spec_up: Rat,
    /// Upper bound on `|| |W| ||_2`.
    pub abs_spec_up: Rat,
    pub row_l2_up: Vec<Rat>,
    /// Exact per-row maximum absolute entry.
    pub row_linf: Vec<Rat>,
    pub max_row_l2_up: Rat,
    pub max_row_linf: Rat,
    pub bias_l2_up: Rat,
    pub bias_linf: Rat,
}

/// Final-layer quantities for one ordered class pair `(i*, j)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairNorms {
    /// Upper bound on `||W_{L,i*} - W_{L,j}||_2`.
    pub diff_row_l2_up: Rat,
    /// Upper bound on `|| |W_{L,i*}| + |W_{L,j}| ||_2`.
    pub sum_abs_row_l2_up: Rat,
    /// `|b_{L,i*}| + |b_{L,j}|`, exact.
    pub bias_abs_sum: Rat,
}

/// Upper bound on `||W||_2` by `iters` rounds of Gram iteration.
///
/// `iters = 0` returns the Frobenius bound.
pub fn gram_spectral_up(w: &RMat, iters: u32, rel_tol: &Rat) -> Rat {
    if w.is_zero() || w.rows() == 0 || w.cols() == 0 {
        return Rat::zero();
    }
    let tol = rel_tol / rat_int(iters as i64 + 3);
    if iters == 0 {
        return sqrt_up(&w.frobenius_sq().to_rat(), &tol).expect("nonnegative");
    }
    // orient so the Gram matrix is the smaller square
    let a = if w.rows() <= w.cols() { w.clone() } else { w.transpose() };
    let (d, inner) = (a.rows(), a.cols());

    let in_bits = headroom_bits(inner);
    let (amat, scale, resid_sq) = quantize(&a, in_bits);
    let q_bits = headroom_bits(d);

    // P_0 = A A^T, exact in i128
    let p0 = gram_rows(&amat, d, inner);
    let (mut m, t0, e0) = requantize(&p0, q_bits);
    let mut steps = vec![(t0, e0)];
    let mut terminals = vec![terminal_bound(&m, d, &tol)];
    for _ in 0..iters {
        let p = square_symmetric(&m, d);
        let (next, t, e) = requantize(&p, q_bits);
        m = next;
        steps.push((t, e));
        terminals.push(terminal_bound(&m, d, &tol));
    }

    // every prefix of the chain gives a sound bound; keeping the smallest
    // makes the result non-increasing in `iters`
    let resid = (!resid_sq.is_zero()).then(|| sqrt_up(&resid_sq.to_rat(), &tol).expect("nonnegative"));
    let mut best: Option<Rat> = None;
    for (k, term) in terminals.into_iter().enumerate() {
        let mut r = term;
        for (t, e_sq) in steps[..=k].iter().rev() {
            let mut inner_bound = &r * pow2(*t);
            if !e_sq.is_zero() {
                inner_bound += sqrt_up(&Rat::from_integer(e_sq.clone()), &tol).expect("nonnegative");
            }
            r = sqrt_up(&inner_bound, &tol).expect("nonnegative");
        }
        let mut bound = r * pow2(scale);
        if let Some(e) = &resid {
            bound += e;
        }
        if best.as_ref().is_none_or(|b| bound < *b) {
            best = Some(bound);
        }
    }
    best.expect("at least one step")
}

/// `||M||_2 <= min(||M||_F, max absolute row sum)` for symmetric integer `M`.
fn terminal_bound(m: &[i128], d: usize, tol: &Rat) -> Rat {
    let frob_sq: BigInt = m.iter().map(|&v| BigInt::from(v) * BigInt::from(v)).sum();
    let frob = sqrt_up(&Rat::from_integer(frob_sq), tol).expect("nonnegative");
    let row_sum: BigInt = m
        .chunks(d)
        .map(|row| row.iter().map(|v| BigInt::from(v.unsigned_abs())).sum::<BigInt>())
        .max()
        .unwrap_or_default();
    let row_sum = Rat::from_integer(row_sum);
    if row_sum < frob {
        row_sum
    } else {
        frob
    }
}

/// Largest `b` with `2 (b + 1) + ceil(log2 n) <= 126`, so sums of `n`
/// products of `b`-bit integers stay inside `i128`.
fn headroom_bits(n: usize) -> u32 {
    let lg = usize::BITS - (n.max(1) - 1).leading_zeros();
    (126 - lg) / 2 - 1
}

/// Round `a` to integers on the grid `2^scale` with entries below `2^bits`;
/// returns the integers, the scale and the exact squared residual.
fn quantize(a: &RMat, bits: u32) -> (Vec<i128>, i64, Dyadic) {
    let msb_max = a.entries().iter().filter_map(Dyadic::msb).max().expect("nonzero matrix");
    let scale = msb_max - bits as i64;
    let mut resid = Dyadic::zero();
    let ints = a
        .entries()
        .iter()
        .map(|x| {
            let (q, r) = x.round_to_multiple_of_pow2(scale);
            resid += &r.square();
            q.to_i128().expect("quantised entry fits in i128")
        })
        .collect();
    (ints, scale, resid)
}

fn gram_rows(a: &[i128], d: usize, inner: usize) -> Vec<i128> {
    let mut out = vec![0i128; d * d];
    out.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
        let ai = &a[i * inner..(i + 1) * inner];
        for (j, slot) in row.iter_mut().enumerate() {
            let aj = &a[j * inner..(j + 1) * inner];
            *slot = ai.iter().zip(aj).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// `M^2` for symmetric `M`, using `(M^2)_ij = <row_i, row_j>`.
fn square_symmetric(m: &[i128], d: usize) -> Vec<i128> {
    gram_rows(m, d, d)
}

/// Round every entry to a multiple of `2^t`, with `t` chosen so the largest
/// magnitude keeps `bits` bits. Returns the quotients, `t` and the exact
/// squared Frobenius norm of the rounding error.
fn requantize(p: &[i128], bits: u32) -> (Vec<i128>, i64, BigInt) {
    let max = p.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    let msb = 128 - max.leading_zeros();
    let t = msb.saturating_sub(bits);
    if t == 0 {
        return (p.to_vec(), 0, BigInt::zero());
    }
    let half = 1i128 << (t - 1);
    let mut err_sq = BigInt::zero();
    let q = p
        .iter()
        .map(|&v| {
            let q = (v + half) >> t;
            let e = v - (q << t);
            if e != 0 {
                err_sq += BigInt::from(e) * BigInt::from(e);
            }
            q
        })
        .collect();
    (q, t as i64, err_sq)
}

/// All norm bounds for one layer.
pub fn layer_norms(w: &RMat, b: &[Dyadic], iters: u32, rel_tol: &Rat) -> Result<LayerNorms> {
    if w.rows() != b.len() {
        return Err(Error::Structural(format!(
            "weight matrix has {} rows but bias has {} entries",
            w.rows(),
            b.len()
        )));
    }
    let (spec_up, abs_spec_up) = rayon::join(
        || gram_spectral_up(w, iters, rel_tol),
        || gram_spectral_up(&w.abs(), iters, rel_tol),
    );
    let row_l2_up: Vec<Rat> = (0..w.rows()).map(|i| l2_norm_up(w.row(i), rel_tol)).collect();
    let row_linf: Vec<Rat> = (0..w.rows()).map(|i| linf_norm(w.row(i)).to_rat()).collect();
    let max_row_l2_up = row_l2_up.iter().max().cloned().unwrap_or_else(Rat::zero);
    let max_row_linf = row_linf.iter().max().cloned().unwrap_or_else(Rat::zero);
    Ok(LayerNorms {
        spec_up,
        abs_spec_up,
        row_l2_up,
        row_linf,
        max_row_l2_up,
        max_row_linf,
        bias_l2_up: l2_norm_up(b, rel_tol),
        bias_linf: linf_norm(b).to_rat(),
    })
}

/// Pairwise final-layer quantities for rows `i_star` and `j`.
pub fn pair_norms(w_last: &RMat, b_last: &[Dyadic], i_star: usize, j: usize, rel_tol: &Rat) -> Result<PairNorms> {
    if i_star == j {
        return Err(Error::Argument(format!("pair norms need distinct classes, got ({i_star}, {j})")));
    }
    let n = w_last.rows();
    if i_star >= n || j >= n || b_last.len() != n {
        return Err(Error::Argument(format!("class pair ({i_star}, {j}) out of range for {n} outputs")));
    }
    let (ri, rj) = (w_last.row(i_star), w_last.row(j));
    let diff: Vec<Dyadic> = ri.iter().zip(rj).map(|(a, b)| a - b).collect();
    let sum_abs: Vec<Dyadic> = ri.iter().zip(rj).map(|(a, b)| a.abs() + b.abs()).collect();
    Ok(PairNorms {
        diff_row_l2_up: l2_norm_up(&diff, rel_tol),
        sum_abs_row_l2_up: l2_norm_up(&sum_abs, rel_tol),
        bias_abs_sum: (b_last[i_star].abs() + b_last[j].abs()).to_rat(),
    })
}

/// Exact squared Frobenius norm as a rational, for reference checks.
pub fn frobenius_sq(w: &RMat) -> Rat {
    w.frobenius_sq().to_rat()
}
