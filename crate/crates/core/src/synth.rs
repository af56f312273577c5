//! Synthetic datasets with their exact conditional expectations.
//!
//! Every sample draws from its own ChaCha stream keyed by `(seed, index)`,
//! so any subset of a dataset can be regenerated independently.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{
    cholesky_with_jitter, fbm_cov, Conditioned, CorrBmKernel, FbmKernel, FilteringKernel,
    GaussianKernel, LaggedBmKernel,
};
use crate::loss::OracleTrajectory;
use crate::obs_path::{grid_index, ObservedPath};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Process {
    BlackScholes {
        mu: f64,
        sigma: f64,
        x0: f64,
    },
    OrnsteinUhlenbeck {
        k: f64,
        m: f64,
        sigma: f64,
        x0: f64,
    },
    /// Only the price is part of the dataset.
    Heston {
        mu: f64,
        sigma: f64,
        k: f64,
        m: f64,
        rho: f64,
        x0: f64,
        v0: f64,
    },
    Poisson {
        lambda: f64,
    },
    Fbm {
        hurst: f64,
    },
    CorrBm {
        alpha: f64,
    },
    /// Coordinates `(Y, X)`: `Y = aX + W` is always observed, the signal `X`
    /// with probability `p_signal` at each observation time after `t_0`.
    Filtering {
        alpha: f64,
        p_signal: f64,
    },
    /// Coordinates `(X, Y)` with `Y_t = X_{t - lag}`. `Y` is observed `lag`
    /// after every observation of `X`, and with probability `aux_prob` one
    /// grid step after it.
    LaggedBm {
        lag: f64,
        aux_prob: f64,
    },
    /// `(X, X^2)` for a Brownian motion `X`.
    BmSquare,
    /// State `(a1, a2, p1, p2)`, started straight with both angles drawn
    /// from `N(angle_mean, angle_std^2)` and zero momenta.
    DoublePendulum {
        m1: f64,
        m2: f64,
        l1: f64,
        l2: f64,
        g: f64,
        angle_mean: f64,
        angle_std: f64,
    },
}

impl Process {
    pub fn name(&self) -> &'static str {
        match self {
            Process::BlackScholes { .. } => "black_scholes",
            Process::OrnsteinUhlenbeck { .. } => "ornstein_uhlenbeck",
            Process::Heston { .. } => "heston",
            Process::Poisson { .. } => "poisson",
            Process::Fbm { .. } => "fbm",
            Process::CorrBm { .. } => "corr_bm",
            Process::Filtering { .. } => "filtering",
            Process::LaggedBm { .. } => "lagged_bm",
            Process::BmSquare => "bm_square",
            Process::DoublePendulum { .. } => "double_pendulum",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Process::CorrBm { .. } | Process::Filtering { .. } | Process::LaggedBm { .. } | Process::BmSquare => 2,
            Process::DoublePendulum { .. } => 4,
            _ => 1,
        }
    }

    pub fn black_scholes() -> Self {
        Process::BlackScholes {
            mu: 2.0,
            sigma: 0.3,
            x0: 1.0,
        }
    }

    pub fn ornstein_uhlenbeck() -> Self {
        Process::OrnsteinUhlenbeck {
            k: 2.0,
            m: 4.0,
            sigma: 0.3,
            x0: 1.0,
        }
    }

    pub fn heston() -> Self {
        Process::Heston {
            mu: 2.0,
            sigma: 0.3,
            k: 2.0,
            m: 4.0,
            rho: 0.5,
            x0: 1.0,
            v0: 4.0,
        }
    }

    pub fn poisson() -> Self {
        Process::Poisson { lambda: 2.0 }
    }

    pub fn fbm() -> Self {
        Process::Fbm { hurst: 0.05 }
    }

    pub fn corr_bm() -> Self {
        Process::CorrBm { alpha: 0.9f64.sqrt() }
    }

    pub fn filtering() -> Self {
        Process::Filtering {
            alpha: 1.0,
            p_signal: 0.25,
        }
    }

    pub fn lagged_bm() -> Self {
        Process::LaggedBm {
            lag: 0.19,
            aux_prob: 0.5,
        }
    }

    pub fn double_pendulum() -> Self {
        Process::DoublePendulum {
            m1: 1.0,
            m2: 1.0,
            l1: 1.0,
            l2: 1.0,
            g: 9.81,
            angle_mean: std::f64::consts::PI,
            angle_std: 0.2,
        }
    }
}

/// How many coordinates are revealed at an observation time after `t_0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    Complete,
    /// `min(d, 1 + Poisson(lambda))` coordinates without replacement.
    Poisson { lambda: f64 },
    /// Exactly one coordinate.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Intensity {
    #[default]
    Constant,
    /// `p = 0.05 + 0.4 tanh(|X_t| / 10)` at each grid point.
    StateDependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub process: Process,
    pub horizon: f64,
    pub step: f64,
    pub obs_prob: f64,
    #[serde(default)]
    pub masks: MaskMode,
    #[serde(default)]
    pub intensity: Intensity,
}

impl GeneratorSpec {
    pub fn new(process: Process) -> Self {
        let (horizon, step) = match process {
            Process::DoublePendulum { .. } => (2.5, 0.025),
            _ => (1.0, 0.01),
        };
        let masks = match process {
            Process::CorrBm { .. } => MaskMode::Single,
            _ => MaskMode::Complete,
        };
        GeneratorSpec {
            process,
            horizon,
            step,
            obs_prob: 0.1,
            masks,
            intensity: Intensity::Constant,
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.step).round() as usize
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.n_steps()).map(|i| i as f64 * self.step).collect()
    }

    pub fn dim(&self) -> usize {
        self.process.dim()
    }

    /// Spec of the held-out split: signal and auxiliary observations switched off.
    pub fn test_variant(&self) -> Self {
        let mut s = self.clone();
        match &mut s.process {
            Process::Filtering { p_signal, .. } => *p_signal = 0.0,
            Process::LaggedBm { aux_prob, .. } => *aux_prob = 0.0,
            _ => {}
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(self.horizon > 0.0 && self.step > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon {} / step {}", self.horizon, self.step));
        }
        let n = self.horizon / self.step;
        if (n - n.round()).abs() > 1e-9 || n.round() < 1.0 {
            return bad(format!("horizon {} is not a multiple of step {}", self.horizon, self.step));
        }
        if !(self.obs_prob > 0.0 && self.obs_prob <= 1.0) {
            return bad(format!("observation probability {} not in (0, 1]", self.obs_prob));
        }
        if let MaskMode::Poisson { lambda } = self.masks {
            if !(lambda > 0.0 && lambda.is_finite()) {
                return bad(format!("mask intensity {lambda} must be positive"));
            }
        }
        let prob = |p: f64, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!("{what} {p} not in [0, 1]")))
            }
        };
        match self.process {
            Process::BlackScholes { sigma, x0, .. } => {
                if !(sigma > 0.0) || !(x0 > 0.0) {
                    return bad("black-scholes needs sigma > 0 and x0 > 0".into());
                }
            }
            Process::OrnsteinUhlenbeck { k, sigma, .. } => {
                if !(k > 0.0 && sigma > 0.0) {
                    return bad("ornstein-uhlenbeck needs k > 0 and sigma > 0".into());
                }
            }
            Process::Heston { sigma, k, m, rho, x0, v0, .. } => {
                if !(sigma > 0.0 && k > 0.0 && m > 0.0 && x0 > 0.0 && v0 >= 0.0) || !(rho.abs() < 1.0) {
                    return bad("heston needs sigma, k, m, x0 > 0, v0 >= 0, |rho| < 1".into());
                }
            }
            Process::Poisson { lambda } => {
                if !(lambda > 0.0 && lambda.is_finite()) {
                    return bad(format!("poisson rate {lambda} must be positive"));
                }
            }
            Process::Fbm { hurst } => {
                if !(hurst > 0.0 && hurst <= 1.0) {
                    return bad(format!("Hurst parameter {hurst} not in (0, 1]"));
                }
            }
            Process::CorrBm { alpha } => {
                if !(alpha * alpha <= 1.0) {
                    return bad(format!("alpha^2 = {} > 1", alpha * alpha));
                }
            }
            Process::Filtering { alpha, p_signal } => {
                if !alpha.is_finite() {
                    return bad("filtering alpha must be finite".into());
                }
                prob(p_signal, "signal observation probability")?;
            }
            Process::LaggedBm { lag, aux_prob } => {
                let l = lag / self.step;
                if !(lag > 0.0) || (l - l.round()).abs() > 1e-9 {
                    return bad(format!("lag {lag} must be a positive multiple of the step"));
                }
                prob(aux_prob, "auxiliary observation probability")?;
            }
            Process::BmSquare => {}
            Process::DoublePendulum { m1, m2, l1, l2, g, angle_std, .. } => {
                if !(m1 > 0.0 && m2 > 0.0 && l1 > 0.0 && l2 > 0.0 && g >= 0.0 && angle_std >= 0.0) {
                    return bad("double pendulum needs positive masses and lengths".into());
                }
            }
        }
        Ok(())
    }
}

/// Per-sample random stream.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Shared, sample-independent precomputation.
struct Sampler {
    spec: GeneratorSpec,
    grid: Vec<f64>,
    fbm_chol: Option<DMatrix<f64>>,
}

impl Sampler {
    fn new(spec: &GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let grid = spec.grid();
        let fbm_chol = match spec.process {
            Process::Fbm { hurst } => {
                let t = &grid[1..];
                let n = t.len();
                let cov = DMatrix::from_fn(n, n, |i, j| fbm_cov(hurst, t[i], t[j]));
                Some(cholesky_with_jitter(cov)?.l())
            }
            _ => None,
        };
        Ok(Sampler {
            spec: spec.clone(),
            grid,
            fbm_chol,
        })
    }

    fn values(&self, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let n = self.grid.len();
        let dt = self.spec.step;
        let sq = dt.sqrt();
        let mut z = || -> f64 { StandardNormal.sample(rng) };
        let mut out = Array2::zeros((n, self.spec.dim()));
        match self.spec.process {
            Process::BlackScholes { mu, sigma, x0 } => {
                out[[0, 0]] = x0;
                for i in 1..n {
                    out[[i, 0]] = out[[i - 1, 0]] * ((mu - 0.5 * sigma * sigma) * dt + sigma * sq * z()).exp();
                }
            }
            Process::OrnsteinUhlenbeck { k, m, sigma, x0 } => {
                let e = (-k * dt).exp();
                let sd = sigma * ((1.0 - e * e) / (2.0 * k)).sqrt();
                out[[0, 0]] = x0;
                for i in 1..n {
                    out[[i, 0]] = m + (out[[i - 1, 0]] - m) * e + sd * z();
                }
            }
            Process::Heston { mu, sigma, k, m, rho, x0, v0 } => {
                let rc = (1.0 - rho * rho).sqrt();
                let mut v = v0;
                out[[0, 0]] = x0;
                for i in 1..n {
                    let (z1, z2) = (z(), z());
                    let vp = v.max(0.0);
                    let dw = sq * z1;
                    let db = sq * (rho * z1 + rc * z2);
                    out[[i, 0]] = out[[i - 1, 0]] * ((mu - 0.5 * vp) * dt + vp.sqrt() * dw).exp();
                    v += -k * (vp - m) * dt + sigma * vp.sqrt() * db;
                }
            }
            Process::Poisson { lambda } => {
                let exp = Exp::new(lambda).expect("validated rate");
                let horizon = self.spec.horizon;
                let mut arrivals = Vec::new();
                let mut t = exp.sample(rng);
                while t <= horizon {
                    arrivals.push(t);
                    t += exp.sample(rng);
                }
                for (i, &s) in self.grid.iter().enumerate() {
                    out[[i, 0]] = arrivals.partition_point(|&a| a <= s) as f64;
                }
            }
            Process::Fbm { .. } => {
                let l = self.fbm_chol.as_ref().expect("factor built for fbm");
                let w = DVector::from_fn(n - 1, |_, _| z());
                let x = l * w;
                for i in 1..n {
                    out[[i, 0]] = x[i - 1];
                }
            }
            Process::CorrBm { alpha } => {
                let beta = (1.0 - alpha * alpha).sqrt();
                for i in 1..n {
                    let (a, b, c) = (z(), z(), z());
                    out[[i, 0]] = out[[i - 1, 0]] + sq * (alpha * a + beta * b);
                    out[[i, 1]] = out[[i - 1, 1]] + sq * (alpha * a + beta * c);
                }
            }
            Process::Filtering { alpha, .. } => {
                let mut x = 0.0;
                let mut w = 0.0;
                for i in 1..n {
                    x += sq * z();
                    w += sq * z();
                    out[[i, 0]] = alpha * x + w;
                    out[[i, 1]] = x;
                }
            }
            Process::LaggedBm { lag, .. } => {
                let shift = (lag / dt).round() as usize;
                for i in 1..n {
                    out[[i, 0]] = out[[i - 1, 0]] + sq * z();
                }
                for i in shift..n {
                    out[[i, 1]] = out[[i - shift, 0]];
                }
            }
            Process::BmSquare => {
                for i in 1..n {
                    let x = out[[i - 1, 0]] + sq * z();
                    out[[i, 0]] = x;
                    out[[i, 1]] = x * x;
                }
            }
            Process::DoublePendulum { angle_mean, angle_std, .. } => {
                let a = Normal::new(angle_mean, angle_std).expect("validated").sample(rng);
                let traj = pendulum_trajectory(&self.spec, [a, a, 0.0, 0.0], n);
                out.assign(&traj);
            }
        }
        out
    }

    fn obs_prob_at(&self, values: &Array2<f64>, i: usize) -> f64 {
        match self.spec.intensity {
            Intensity::Constant => self.spec.obs_prob,
            Intensity::StateDependent => {
                let norm = values.row(i).dot(&values.row(i)).sqrt();
                0.05 + 0.4 * (norm / 10.0).tanh()
            }
        }
    }

    fn draw_mask(&self, rng: &mut ChaCha8Rng) -> Vec<bool> {
        let d = self.spec.dim();
        let pick = |rng: &mut ChaCha8Rng, count: usize| {
            let mut m = vec![false; d];
            for j in sample_indices(rng, d, count.min(d)) {
                m[j] = true;
            }
            m
        };
        match self.spec.masks {
            MaskMode::Complete => vec![true; d],
            MaskMode::Single => pick(rng, 1),
            MaskMode::Poisson { lambda } => {
                let extra: f64 = Poisson::new(lambda).expect("validated").sample(rng);
                pick(rng, 1 + extra as usize)
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> ObservedPath {
        let values = self.values(rng);
        let n = self.grid.len();
        let d = self.spec.dim();
        let mut idx = vec![0usize];
        let mut masks: Vec<Vec<bool>> = vec![vec![true; d]];

        match self.spec.process {
            Process::Filtering { p_signal, .. } => {
                masks[0] = vec![true, false];
                for i in 1..n {
                    if rng.random::<f64>() < self.obs_prob_at(&values, i) {
                        idx.push(i);
                        masks.push(vec![true, rng.random::<f64>() < p_signal]);
                    }
                }
            }
            Process::LaggedBm { lag, aux_prob } => {
                let shift = (lag / self.spec.step).round() as usize;
                let mut flags = vec![[false, false]; n];
                flags[0] = [true, true];
                let mut x_idx = vec![0];
                for i in 1..n {
                    if rng.random::<f64>() < self.obs_prob_at(&values, i) {
                        x_idx.push(i);
                    }
                }
                for &i in &x_idx {
                    flags[i][0] = true;
                    if i + shift < n {
                        flags[i + shift][1] = true;
                    }
                }
                for &i in &x_idx {
                    if i + 1 < n && rng.random::<f64>() < aux_prob {
                        flags[i + 1][1] = true;
                    }
                }
                for (i, f) in flags.iter().enumerate().skip(1) {
                    if f[0] || f[1] {
                        idx.push(i);
                        masks.push(f.to_vec());
                    }
                }
            }
            _ => {
                for i in 1..n {
                    if rng.random::<f64>() < self.obs_prob_at(&values, i) {
                        idx.push(i);
                        let m = self.draw_mask(rng);
                        masks.push(m);
                    }
                }
            }
        }
        let mask_arr = Array2::from_shape_fn((idx.len(), d), |(k, j)| masks[k][j]);
        ObservedPath::from_grid(self.spec.horizon, self.grid.clone(), values, &idx, mask_arr)
    }
}

/// Samples `indices` of the dataset defined by `(spec, seed)`.
pub fn sample_paths_range(
    spec: &GeneratorSpec,
    seed: u64,
    indices: std::ops::Range<usize>,
) -> Result<Vec<ObservedPath>> {
    let sampler = Sampler::new(spec)?;
    Ok(indices
        .map(|i| sampler.sample(&mut sample_rng(seed, i)))
        .collect())
}

pub fn sample_paths(spec: &GeneratorSpec, n_samples: usize, seed: u64) -> Result<Vec<ObservedPath>> {
    sample_paths_range(spec, seed, 0..n_samples)
}

fn pendulum_rhs(p: &Process, s: [f64; 4]) -> [f64; 4] {
    let Process::DoublePendulum { m1, m2, l1, l2, g, .. } = *p else {
        unreachable!("pendulum dynamics for another process")
    };
    let [a1, a2, p1, p2] = s;
    let (sd, cd) = (a1 - a2).sin_cos();
    let a0 = m1 + m2 * sd * sd;
    let da1 = (p1 * l2 - p2 * l1 * cd) / (l1 * l1 * l2 * a0);
    let da2 = (p2 * (m1 + m2) * l1 - p1 * m2 * l2 * cd) / (m2 * l1 * l2 * l2 * a0);
    let k1 = p1 * p2 * sd / (l1 * l2 * a0);
    let k2 = (p1 * p1 * m2 * l2 * l2 - 2.0 * p1 * p2 * m2 * l1 * l2 * cd + p2 * p2 * (m1 + m2) * l1 * l1)
        * (2.0 * (a1 - a2)).sin()
        / (2.0 * l1 * l1 * l2 * l2 * a0 * a0);
    let dp1 = -(m1 + m2) * g * l1 * a1.sin() - k1 + k2;
    let dp2 = -m2 * g * l2 * a2.sin() + k1 - k2;
    [da1, da2, dp1, dp2]
}

const PENDULUM_SUBSTEPS: usize = 10;

/// RK4 solution on the dataset grid, ten internal steps per grid step.
pub fn pendulum_trajectory(spec: &GeneratorSpec, x0: [f64; 4], n_points: usize) -> Array2<f64> {
    let h = spec.step / PENDULUM_SUBSTEPS as f64;
    let p = &spec.process;
    let mut out = Array2::zeros((n_points, 4));
    let mut s = x0;
    let add = |a: [f64; 4], b: [f64; 4], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2], a[3] + c * b[3]];
    for i in 0..n_points {
        if i > 0 {
            for _ in 0..PENDULUM_SUBSTEPS {
                let k1 = pendulum_rhs(p, s);
                let k2 = pendulum_rhs(p, add(s, k1, h / 2.0));
                let k3 = pendulum_rhs(p, add(s, k2, h / 2.0));
                let k4 = pendulum_rhs(p, add(s, k3, h));
                for j in 0..4 {
                    s[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                }
            }
        }
        for j in 0..4 {
            out[[i, j]] = s[j];
        }
    }
    out
}

/// Conditional expectation given the first `k + 1` observations, valid for
/// times from `t_k` up to the next observation.
enum Segment {
    Markov { spec: Process, tau: f64, last: Array1<f64> },
    Gaussian(Box<dyn Fn(f64) -> Array1<f64>>),
    Lagged { lag: f64, x_times: Vec<f64>, x_values: Vec<f64> },
    Pendulum(Array2<f64>),
}

fn gaussian_segment<K: GaussianKernel + 'static>(kernel: K, path: &ObservedPath, k: usize) -> Result<Segment> {
    let d = kernel.dim();
    let mut pts = Vec::new();
    let mut vals = Vec::new();
    for i in 0..=k {
        for j in 0..d {
            if path.masks[[i, j]] {
                pts.push((j, path.obs_times[i]));
                vals.push(path.obs_values[[i, j]]);
            }
        }
    }
    let c = Conditioned::new(kernel, &pts, &vals)?;
    Ok(Segment::Gaussian(Box::new(move |t| {
        Array1::from_iter((0..d).map(|j| c.mean(j, t)))
    })))
}

/// Forward-filled observed values after observation `k`.
fn last_values(path: &ObservedPath, k: usize) -> Array1<f64> {
    let mut last = Array1::zeros(path.dim);
    for i in 0..=k {
        for j in 0..path.dim {
            if path.masks[[i, j]] {
                last[j] = path.obs_values[[i, j]];
            }
        }
    }
    last
}

impl Segment {
    fn new(spec: &GeneratorSpec, path: &ObservedPath, k: usize) -> Result<Segment> {
        Ok(match spec.process {
            Process::Fbm { hurst } => gaussian_segment(FbmKernel { hurst }, path, k)?,
            Process::CorrBm { alpha } => gaussian_segment(CorrBmKernel { alpha }, path, k)?,
            Process::Filtering { alpha, .. } => gaussian_segment(FilteringKernel { alpha }, path, k)?,
            Process::LaggedBm { lag, .. } => {
                let extra_y = (0..=k).any(|i| {
                    path.masks[[i, 1]] && {
                        let s = path.obs_times[i] - lag;
                        s > crate::obs_path::TIME_TOL
                            && !(0..=k).any(|l| path.masks[[l, 0]] && (path.obs_times[l] - s).abs() <= 1e-9)
                    }
                });
                if extra_y {
                    gaussian_segment(LaggedBmKernel { lag }, path, k)?
                } else {
                    let (x_times, x_values) = (0..=k)
                        .filter(|&i| path.masks[[i, 0]])
                        .map(|i| (path.obs_times[i], path.obs_values[[i, 0]]))
                        .unzip();
                    Segment::Lagged { lag, x_times, x_values }
                }
            }
            Process::DoublePendulum { .. } => {
                let x0 = [0, 1, 2, 3].map(|j| path.obs_values[[0, j]]);
                Segment::Pendulum(pendulum_trajectory(spec, x0, path.grid_times.len()))
            }
            ref p => Segment::Markov {
                spec: p.clone(),
                tau: path.obs_times[k],
                last: last_values(path, k),
            },
        })
    }

    fn at(&self, path: &ObservedPath, t: f64) -> Result<Array1<f64>> {
        Ok(match self {
            Segment::Markov { spec, tau, last } => markov_cond_exp(spec, last.view(), t - tau),
            Segment::Gaussian(f) => f(t),
            Segment::Lagged { lag, x_times, x_values } => {
                Array1::from(crate::gauss::lagged_bm_cond_exp(*lag, x_times, x_values, t)?.to_vec())
            }
            Segment::Pendulum(traj) => {
                let i = grid_index(&path.grid_times, t)
                    .ok_or_else(|| Error::InvalidPath(format!("time {t} is not on the simulation grid")))?;
                traj.row(i).to_owned()
            }
        })
    }
}

/// Closed forms for the Markov processes, `dt = t - tau(t)`.
pub fn markov_cond_exp(p: &Process, last: ndarray::ArrayView1<'_, f64>, dt: f64) -> Array1<f64> {
    match *p {
        Process::BlackScholes { mu, .. } | Process::Heston { mu, .. } => &last * (mu * dt).exp(),
        Process::OrnsteinUhlenbeck { k, m, .. } => {
            let e = (-k * dt).exp();
            last.mapv(|x| x * e + m * (1.0 - e))
        }
        Process::Poisson { lambda } => last.mapv(|x| x + lambda * dt),
        Process::BmSquare => Array1::from(vec![last[0], last[1] + dt]),
        _ => unreachable!("not a Markov closed form"),
    }
}

/// `E[v_t | v_tau]` for the Heston variance.
pub fn heston_variance_cond_exp(v_tau: f64, k: f64, m: f64, dt: f64) -> f64 {
    let e = (-k * dt).exp();
    v_tau * e + m * (1.0 - e)
}

/// The exact conditional expectation of `path` on `times` (which must
/// contain its observation times), with left limits at observations.
pub fn oracle_trajectory(spec: &GeneratorSpec, path: &ObservedPath, times: &[f64]) -> Result<OracleTrajectory> {
    if path.dim != spec.dim() {
        return Err(Error::Shape {
            context: "path dimension for oracle".into(),
            expected: spec.dim(),
            got: path.dim,
        });
    }
    let d = path.dim;
    let n = path.n_obs();
    let mut values = Array2::zeros((times.len(), d));
    let mut left = Array2::zeros((n.saturating_sub(1), d));
    let mut k = 0;
    let mut seg = Segment::new(spec, path, 0)?;
    for (i, &t) in times.iter().enumerate() {
        while k + 1 < n && path.obs_times[k + 1] <= t + crate::obs_path::TIME_TOL {
            left.row_mut(k).assign(&seg.at(path, path.obs_times[k + 1])?);
            k += 1;
            seg = Segment::new(spec, path, k)?;
        }
        values.row_mut(i).assign(&seg.at(path, t)?);
    }
    while k + 1 < n {
        left.row_mut(k).assign(&seg.at(path, path.obs_times[k + 1])?);
        k += 1;
        seg = Segment::new(spec, path, k)?;
    }
    Ok(OracleTrajectory {
        times: times.to_vec(),
        values,
        left_limits: left,
    })
}
