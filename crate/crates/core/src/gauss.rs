//! Conditional expectations of jointly Gaussian, zero-mean processes given
//! finitely many observed values.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-8;

/// Variances below this are treated as deterministic zeros and dropped from
/// the conditioning set (e.g. any Brownian functional at time 0).
const DEGENERATE_VAR: f64 = 1e-14;

/// Cholesky factor of `a`, retrying with a diagonal jitter ramped from 1e-12
/// to 1e-8.
pub fn cholesky_with_jitter(a: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut b = a.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(b) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::Singular { jitter: JITTER_MAX })
}

/// Mean and covariance of `x[target] | x[obs] = obs_values` for a zero-mean
/// Gaussian vector with covariance `cov`. Negative variances from rounding
/// (down to -1e-10) are clipped to zero.
pub fn condition(
    cov: ArrayView2<'_, f64>,
    obs_idx: &[usize],
    target_idx: &[usize],
    obs_values: &[f64],
) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::Shape {
            context: "covariance must be square".into(),
            expected: n,
            got: cov.ncols(),
        });
    }
    if obs_idx.len() != obs_values.len() {
        return Err(Error::Shape {
            context: "observed values".into(),
            expected: obs_idx.len(),
            got: obs_values.len(),
        });
    }
    if obs_idx.iter().chain(target_idx).any(|&i| i >= n) {
        return Err(Error::InvalidConfig("index outside the covariance".into()));
    }
    if obs_idx.iter().any(|i| target_idx.contains(i)) {
        return Err(Error::InvalidConfig("observed and target indices overlap".into()));
    }
    let m = target_idx.len();
    let prior = DMatrix::from_fn(m, m, |a, b| cov[[target_idx[a], target_idx[b]]]);
    if obs_idx.is_empty() {
        return Ok((Array1::zeros(m), to_ndarray(&prior)));
    }
    let s11 = DMatrix::from_fn(obs_idx.len(), obs_idx.len(), |a, b| cov[[obs_idx[a], obs_idx[b]]]);
    let s12 = DMatrix::from_fn(obs_idx.len(), m, |a, b| cov[[obs_idx[a], target_idx[b]]]);
    let chol = cholesky_with_jitter(s11)?;
    let w = chol.solve(&DVector::from_column_slice(obs_values));
    let mean = s12.transpose() * &w;
    let k = chol.solve(&s12);
    let mut var = prior - s12.transpose() * k;
    for i in 0..m {
        if var[(i, i)] < 0.0 {
            var[(i, i)] = 0.0;
        }
    }
    Ok((Array1::from_iter(mean.iter().copied()), to_ndarray(&var)))
}

fn to_ndarray(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Covariance of a multivariate Gaussian process indexed by (coordinate, time).
pub trait GaussianKernel {
    fn dim(&self) -> usize;
    fn cov(&self, i: usize, s: f64, j: usize, t: f64) -> f64;
}

pub fn fbm_cov(hurst: f64, s: f64, t: f64) -> f64 {
    let h2 = 2.0 * hurst;
    0.5 * (s.powf(h2) + t.powf(h2) - (t - s).abs().powf(h2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FbmKernel {
    pub hurst: f64,
}

impl GaussianKernel for FbmKernel {
    fn dim(&self) -> usize {
        1
    }

    fn cov(&self, _: usize, s: f64, _: usize, t: f64) -> f64 {
        fbm_cov(self.hurst, s, t)
    }
}

/// `(U, V) = (aA + bB, aA + bC)` for independent Brownian motions `A, B, C`
/// and `a^2 + b^2 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrBmKernel {
    pub alpha: f64,
}

impl GaussianKernel for CorrBmKernel {
    fn dim(&self) -> usize {
        2
    }

    fn cov(&self, i: usize, s: f64, j: usize, t: f64) -> f64 {
        let m = s.min(t);
        if i == j {
            m
        } else {
            self.alpha * self.alpha * m
        }
    }
}

/// Coordinates `(Y, X)` with `Y = aX + W` for independent Brownian motions
/// `X` (signal) and `W` (noise).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilteringKernel {
    pub alpha: f64,
}

impl GaussianKernel for FilteringKernel {
    fn dim(&self) -> usize {
        2
    }

    fn cov(&self, i: usize, s: f64, j: usize, t: f64) -> f64 {
        let m = s.min(t);
        let a = self.alpha;
        match (i, j) {
            (0, 0) => (a * a + 1.0) * m,
            (1, 1) => m,
            _ => a * m,
        }
    }
}

/// Coordinates `(X, Y)` with `X` a Brownian motion and `Y_t = X_{t - lag}`,
/// zero before the lag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaggedBmKernel {
    pub lag: f64,
}

impl GaussianKernel for LaggedBmKernel {
    fn dim(&self) -> usize {
        2
    }

    fn cov(&self, i: usize, s: f64, j: usize, t: f64) -> f64 {
        let shift = |c: usize, u: f64| if c == 1 { (u - self.lag).max(0.0) } else { u };
        shift(i, s).min(shift(j, t))
    }
}

/// A kernel conditioned on a fixed set of observed `(coordinate, time)`
/// values; the factorization is reused for every query.
#[derive(Debug, Clone)]
pub struct Conditioned<K> {
    kernel: K,
    points: Vec<(usize, f64)>,
    chol: Option<Cholesky<f64, Dyn>>,
    weights: DVector<f64>,
}

impl<K: GaussianKernel> Conditioned<K> {
    pub fn new(kernel: K, points: &[(usize, f64)], values: &[f64]) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::Shape {
                context: "observed points".into(),
                expected: points.len(),
                got: values.len(),
            });
        }
        let mut pts = Vec::with_capacity(points.len());
        let mut vals = Vec::with_capacity(points.len());
        for (&(i, t), &v) in points.iter().zip(values) {
            if kernel.cov(i, t, i, t) > DEGENERATE_VAR {
                pts.push((i, t));
                vals.push(v);
            }
        }
        if pts.is_empty() {
            return Ok(Conditioned {
                kernel,
                points: pts,
                chol: None,
                weights: DVector::zeros(0),
            });
        }
        let n = pts.len();
        let s11 = DMatrix::from_fn(n, n, |a, b| kernel.cov(pts[a].0, pts[a].1, pts[b].0, pts[b].1));
        let chol = cholesky_with_jitter(s11)?;
        let weights = chol.solve(&DVector::from_vec(vals));
        Ok(Conditioned {
            kernel,
            points: pts,
            chol: Some(chol),
            weights,
        })
    }

    fn cross(&self, i: usize, t: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.points.len(),
            self.points.iter().map(|&(j, s)| self.kernel.cov(j, s, i, t)),
        )
    }

    pub fn mean(&self, i: usize, t: f64) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.cross(i, t).dot(&self.weights)
    }

    pub fn variance(&self, i: usize, t: f64) -> f64 {
        let prior = self.kernel.cov(i, t, i, t);
        let Some(chol) = &self.chol else {
            return prior;
        };
        let c = self.cross(i, t);
        (prior - c.dot(&chol.solve(&c))).max(0.0)
    }
}

/// `E[B^H_t | B^H_{t_k} = x_k]` for `t` at or after the observations.
pub fn fbm_cond_exp(hurst: f64, obs_times: &[f64], obs_values: &[f64], t: f64) -> Result<f64> {
    if !(hurst > 0.0 && hurst <= 1.0) {
        return Err(Error::InvalidSpec(format!("Hurst parameter {hurst} not in (0, 1]")));
    }
    if obs_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Singular { jitter: 0.0 });
    }
    let pts: Vec<(usize, f64)> = obs_times.iter().map(|&s| (0, s)).collect();
    Ok(Conditioned::new(FbmKernel { hurst }, &pts, obs_values)?.mean(0, t))
}

/// Observation of some coordinates of a multivariate process at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedObservation {
    pub time: f64,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

fn points_of(obs: &[MaskedObservation]) -> (Vec<(usize, f64)>, Vec<f64>) {
    let mut pts = Vec::new();
    let mut vals = Vec::new();
    for o in obs {
        for (j, (&m, &v)) in o.mask.iter().zip(&o.values).enumerate() {
            if m {
                pts.push((j, o.time));
                vals.push(v);
            }
        }
    }
    (pts, vals)
}

fn cond_exp_2d<K: GaussianKernel>(kernel: K, obs: &[MaskedObservation], t: f64) -> Result<[f64; 2]> {
    if obs.is_empty() {
        return Err(Error::NoObservations);
    }
    let (pts, vals) = points_of(obs);
    let c = Conditioned::new(kernel, &pts, &vals)?;
    Ok([c.mean(0, t), c.mean(1, t)])
}

/// `E[(U_t, V_t) | observations]`; constant in `t` between observations.
pub fn corr_bm_cond_exp(alpha: f64, obs: &[MaskedObservation], t: f64) -> Result<[f64; 2]> {
    if alpha * alpha > 1.0 {
        return Err(Error::InvalidSpec(format!("alpha^2 = {} > 1", alpha * alpha)));
    }
    cond_exp_2d(CorrBmKernel { alpha }, obs, t)
}

/// `E[(Y_t, X_t) | observations]` for the filtering model `Y = aX + W`.
pub fn filtering_cond_exp(alpha: f64, obs: &[MaskedObservation], t: f64) -> Result<[f64; 2]> {
    cond_exp_2d(FilteringKernel { alpha }, obs, t)
}

/// Closed-form `E[(X_t, Y_t) | X_{t_1}, X_{t_2}, ...]` for `Y_t = X_{t-lag}`,
/// where the `X` observations at or before `t` start with `X_0 = 0` at time 0.
pub fn lagged_bm_cond_exp(lag: f64, x_times: &[f64], x_values: &[f64], t: f64) -> Result<[f64; 2]> {
    if !(lag > 0.0) {
        return Err(Error::InvalidSpec(format!("lag {lag} must be positive")));
    }
    if x_times.is_empty() || x_times.len() != x_values.len() {
        return Err(Error::NoObservations);
    }
    let n = x_times.partition_point(|&s| s <= t);
    if n == 0 {
        return Err(Error::NoObservations);
    }
    let last = x_values[n - 1];
    let s = t - lag;
    let y = if s <= 0.0 {
        0.0
    } else if s >= x_times[n - 1] {
        last
    } else {
        let l = x_times[..n].partition_point(|&u| u <= s);
        let (t0, t1) = (x_times[l - 1], x_times[l]);
        let (x0, x1) = (x_values[l - 1], x_values[l]);
        x0 + (x1 - x0) * (s - t0) / (t1 - t0)
    };
    Ok([last, y])
}
