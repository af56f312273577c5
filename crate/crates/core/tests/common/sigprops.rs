//! Algebraic properties of truncated signatures, shared by the property
//! tests and the acceptance run.

use ndarray::Array2;
use pdnjode::signature::level_range;
use pdnjode::{path_signature, InterpolatedPath, TruncatedSignature};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use super::oracles::quadrature_signature;

/// A piecewise-linear path with `1..=5` segments in dimension `1..=max_dim`.
pub fn path_strategy(max_dim: usize) -> impl Strategy<Value = InterpolatedPath> {
    (1..=max_dim, 1usize..=5).prop_flat_map(|(d, n)| {
        (
            prop::collection::vec(0.05f64..1.0, n),
            prop::collection::vec(-2.0f64..2.0, (n + 1) * d),
        )
            .prop_map(move |(dts, vals)| {
                let mut times = vec![0.0];
                for dt in dts {
                    times.push(times.last().unwrap() + dt);
                }
                InterpolatedPath {
                    cutoff: *times.last().unwrap(),
                    horizon: *times.last().unwrap(),
                    knot_times: times,
                    knot_values: Array2::from_shape_vec((n + 1, d), vals).unwrap(),
                }
            })
    })
}

fn segment_sig(d: usize, m: usize) -> impl Strategy<Value = TruncatedSignature> {
    prop::collection::vec(-1.5f64..1.5, d).prop_map(move |inc| TruncatedSignature::of_segment(&inc, m).unwrap())
}

pub fn sig_triple() -> impl Strategy<Value = (TruncatedSignature, TruncatedSignature, TruncatedSignature)> {
    (1usize..=3, 1usize..=4).prop_flat_map(|(d, m)| (segment_sig(d, m), segment_sig(d, m), segment_sig(d, m)))
}

pub fn sig_single() -> impl Strategy<Value = TruncatedSignature> {
    (1usize..=3, 1usize..=4).prop_flat_map(|(d, m)| segment_sig(d, m))
}

/// Euclidean length of a piecewise-linear path.
fn length(p: &InterpolatedPath) -> f64 {
    let v = &p.knot_values;
    (1..v.nrows())
        .map(|i| (&v.row(i) - &v.row(i - 1)).mapv(|x| x * x).sum().sqrt())
        .sum()
}

fn sig_length(sigs: &[&TruncatedSignature]) -> f64 {
    sigs.iter()
        .map(|s| s.level_block(1).iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum()
}

/// Per-level comparison relative to `len^k / k!`, the bound on the norm of
/// level `k` for a path of length `len`.
fn levels_close(a: &[f64], b: &[f64], d: usize, m: usize, len: f64, rel: f64) -> Result<(), TestCaseError> {
    let mut bound = 1.0;
    for k in 0..=m {
        if k > 0 {
            bound *= len / k as f64;
        }
        let r = level_range(d, k);
        let scale = b[r.clone()].iter().fold(bound, |s, x| s.max(x.abs())).max(1e-300);
        for i in r {
            prop_assert!(
                (a[i] - b[i]).abs() <= rel * scale,
                "level {} entry {}: {} vs {}",
                k,
                i,
                a[i],
                b[i]
            );
        }
    }
    Ok(())
}

pub fn matches_quadrature(p: &InterpolatedPath, m: usize) -> Result<(), TestCaseError> {
    let sig = path_signature(p, m, false).unwrap();
    let reference = quadrature_signature(p, m);
    levels_close(sig.coeffs(), &reference, p.dim(), m, length(p), 1e-8)
}

pub fn associative(a: &TruncatedSignature, b: &TruncatedSignature, c: &TruncatedSignature) -> Result<(), TestCaseError> {
    let left = a.concat(b).unwrap().concat(c).unwrap();
    let right = a.concat(&b.concat(c).unwrap()).unwrap();
    levels_close(left.coeffs(), right.coeffs(), a.dim(), a.level(), sig_length(&[a, b, c]), 1e-12)
}

pub fn identity_neutral(a: &TruncatedSignature) -> Result<(), TestCaseError> {
    let e = TruncatedSignature::identity(a.dim(), a.level()).unwrap();
    prop_assert_eq!(&e.concat(a).unwrap(), a);
    prop_assert_eq!(&a.concat(&e).unwrap(), a);
    Ok(())
}

pub fn split_factorises(p: &InterpolatedPath, m: usize) -> Result<(), TestCaseError> {
    if p.knot_times.len() < 3 {
        return Ok(());
    }
    let cut = p.knot_times.len() / 2;
    let head = InterpolatedPath {
        cutoff: p.knot_times[cut],
        horizon: p.horizon,
        knot_times: p.knot_times[..=cut].to_vec(),
        knot_values: p.knot_values.slice(ndarray::s![..=cut, ..]).to_owned(),
    };
    let tail = InterpolatedPath {
        cutoff: p.cutoff,
        horizon: p.horizon,
        knot_times: p.knot_times[cut..].to_vec(),
        knot_values: p.knot_values.slice(ndarray::s![cut.., ..]).to_owned(),
    };
    let whole = path_signature(p, m, false).unwrap();
    let product = path_signature(&head, m, false).unwrap().concat(&path_signature(&tail, m, false).unwrap()).unwrap();
    levels_close(product.coeffs(), whole.coeffs(), p.dim(), m, length(p), 1e-12)
}

pub fn endpoints_only(p: &InterpolatedPath, m: usize) -> Result<(), TestCaseError> {
    let sig = path_signature(p, m, false).unwrap();
    let n = p.knot_times.len();
    let total = p.knot_values[[n - 1, 0]] - p.knot_values[[0, 0]];
    let mut factorial = 1.0;
    for k in 1..=m {
        factorial *= k as f64;
        let want = total.powi(k as i32) / factorial;
        prop_assert!((sig.coeffs()[k] - want).abs() <= 1e-10 * want.abs().max(1.0));
    }
    Ok(())
}

pub fn scales_by_lambda(p: &InterpolatedPath, m: usize, lambda: f64) -> Result<(), TestCaseError> {
    let mut q = p.clone();
    q.knot_values.mapv_inplace(|x| lambda * x);
    let a = path_signature(p, m, false).unwrap();
    let b = path_signature(&q, m, false).unwrap();
    let mut scaled = a.coeffs().to_vec();
    for k in 0..=m {
        for i in level_range(p.dim(), k) {
            scaled[i] *= lambda.powi(k as i32);
        }
    }
    levels_close(b.coeffs(), &scaled, p.dim(), m, lambda.abs() * length(p), 1e-12)
}

pub fn reversal_cancels(p: &InterpolatedPath, m: usize) -> Result<(), TestCaseError> {
    let n = p.knot_times.len();
    let rev = InterpolatedPath {
        cutoff: p.cutoff,
        horizon: p.horizon,
        knot_times: p.knot_times.clone(),
        knot_values: Array2::from_shape_fn(p.knot_values.dim(), |(i, j)| p.knot_values[[n - 1 - i, j]]),
    };
    let loop_sig = path_signature(p, m, false).unwrap().concat(&path_signature(&rev, m, false).unwrap()).unwrap();
    let e = TruncatedSignature::identity(p.dim(), m).unwrap();
    for (x, y) in loop_sig.coeffs().iter().zip(e.coeffs()) {
        prop_assert!((x - y).abs() < 1e-9);
    }
    Ok(())
}
