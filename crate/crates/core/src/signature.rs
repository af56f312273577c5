//! Truncated signatures of piecewise-linear paths.
//!
//! Coefficients are stored flat: level 0 (the constant 1) first, then each
//! level `k` as a `d^k` block in lexicographic multi-index order.

use crate::error::{Error, Result};
use crate::obs_path::InterpolatedPath;

/// Number of coefficients of the level-`m` truncated signature of a `d`-dimensional path.
pub fn sig_dim(d: usize, m: usize) -> Result<usize> {
    if d == 0 {
        return Err(Error::InvalidConfig("signature of a 0-dimensional path".into()));
    }
    let overflow = || Error::SignatureOverflow {
        dim: d,
        level: m,
        max_level: max_level(d),
    };
    if d == 1 {
        return m.checked_add(1).ok_or_else(overflow);
    }
    // 1 + d + ... + d^m
    let mut total: usize = 1;
    let mut block: usize = 1;
    for _ in 0..m {
        block = block.checked_mul(d).ok_or_else(overflow)?;
        total = total.checked_add(block).ok_or_else(overflow)?;
    }
    Ok(total)
}

fn max_level(d: usize) -> usize {
    if d == 1 {
        return usize::MAX - 1;
    }
    let mut m = 0;
    while sig_dim_unchecked(d, m + 1).is_some() {
        m += 1;
    }
    m
}

fn sig_dim_unchecked(d: usize, m: usize) -> Option<usize> {
    let mut total: usize = 1;
    let mut block: usize = 1;
    for _ in 0..m {
        block = block.checked_mul(d)?;
        total = total.checked_add(block)?;
    }
    Some(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSignature {
    dim: usize,
    level: usize,
    coeffs: Vec<f64>,
}

impl TruncatedSignature {
    /// Signature of a constant path: `(1, 0, ..., 0)`.
    pub fn identity(dim: usize, level: usize) -> Result<Self> {
        let mut coeffs = vec![0.0; sig_dim(dim, level)?];
        coeffs[0] = 1.0;
        Ok(TruncatedSignature { dim, level, coeffs })
    }

    /// Signature of the straight line with the given increment: the truncated
    /// tensor exponential, level `k` = `increment^{⊗k} / k!`.
    pub fn of_segment(increment: &[f64], level: usize) -> Result<Self> {
        let dim = increment.len();
        let mut sig = Self::identity(dim, level)?;
        let mut prev = 0..1;
        for k in 1..=level {
            let start = prev.end;
            let len = prev.len() * dim;
            for (a, i) in prev.clone().enumerate() {
                let base = sig.coeffs[i] / k as f64;
                for (b, &x) in increment.iter().enumerate() {
                    sig.coeffs[start + a * dim + b] = base * x;
                }
            }
            prev = start..start + len;
        }
        Ok(sig)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Flat slice holding level `k`.
    pub fn level_block(&self, k: usize) -> &[f64] {
        let r = level_range(self.dim, k);
        &self.coeffs[r]
    }

    /// Chen's identity: the signature of the concatenated path.
    pub fn concat(&self, other: &TruncatedSignature) -> Result<TruncatedSignature> {
        if self.dim != other.dim || self.level != other.level {
            return Err(Error::SignatureMismatch {
                d1: self.dim,
                m1: self.level,
                d2: other.dim,
                m2: other.level,
            });
        }
        let d = self.dim;
        let mut out = vec![0.0; self.coeffs.len()];
        for k in 0..=self.level {
            let dst = level_range(d, k);
            for i in 0..=k {
                let a = self.level_block(i);
                let b = other.level_block(k - i);
                let out_k = &mut out[dst.clone()];
                for (ia, &x) in a.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    let row = &mut out_k[ia * b.len()..(ia + 1) * b.len()];
                    for (o, &y) in row.iter_mut().zip(b) {
                        *o += x * y;
                    }
                }
            }
        }
        Ok(TruncatedSignature {
            dim: d,
            level: self.level,
            coeffs: out,
        })
    }

    /// Appends a straight segment with the given increment in place.
    pub fn push_segment(&mut self, increment: &[f64]) -> Result<()> {
        let seg = Self::of_segment(increment, self.level)?;
        *self = self.concat(&seg)?;
        Ok(())
    }
}

/// Index range of level `k` in the flat layout.
pub fn level_range(d: usize, k: usize) -> std::ops::Range<usize> {
    let (start, len) = if d == 1 {
        (k, 1)
    } else {
        (
            (d.pow(k as u32) - 1) / (d - 1),
            d.pow(k as u32),
        )
    };
    start..start + len
}

/// Signature of `p - p(0)` on `[0, p.cutoff]`, optionally with time as the
/// leading coordinate.
pub fn path_signature(
    p: &InterpolatedPath,
    level: usize,
    time_augment: bool,
) -> Result<TruncatedSignature> {
    let d = p.dim() + usize::from(time_augment);
    let mut sig = TruncatedSignature::identity(d, level)?;
    let mut inc = vec![0.0; d];
    let off = usize::from(time_augment);
    for k in 1..p.knot_times.len() {
        if time_augment {
            inc[0] = p.knot_times[k] - p.knot_times[k - 1];
        }
        for j in 0..p.dim() {
            inc[off + j] = p.knot_values[[k, j]] - p.knot_values[[k - 1, j]];
        }
        sig.push_segment(&inc)?;
    }
    let last = *p.knot_times.last().expect("interpolated path has a knot");
    if time_augment && p.cutoff > last {
        inc.fill(0.0);
        inc[0] = p.cutoff - last;
        sig.push_segment(&inc)?;
    }
    Ok(sig)
}
