//! Monte-Carlo estimates of conditional expectations, independent of the
//! closed-form oracles: forward resimulation for the Markov generators and
//! least squares on jointly sampled paths for the Gaussian ones.

use nalgebra::{DMatrix, DVector};
use pdnjode::obs_path::grid_index;
use pdnjode::synth::{oracle_trajectory, sample_paths, sample_paths_range, GeneratorSpec, Process};
use pdnjode::ObservedPath;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

#[derive(Debug, Clone)]
pub struct Comparison {
    pub process: &'static str,
    pub schedule: usize,
    pub time: f64,
    pub coord: usize,
    pub oracle: f64,
    pub mc: f64,
    pub se: f64,
}

impl Comparison {
    pub fn z(&self) -> f64 {
        if self.se > 0.0 {
            (self.oracle - self.mc).abs() / self.se
        } else if (self.oracle - self.mc).abs() < 1e-9 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Euler step of the Monte-Carlo resimulation.
const EULER_STEP: f64 = 1e-4;

fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Samples of `X_{tau + dt}` started from the last observed state.
fn resimulate(p: &Process, tau: f64, state: &[f64], dt: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let steps = |len: f64| ((len / EULER_STEP).ceil() as usize).max(1);
    let z = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    (0..n)
        .map(|_| match *p {
            Process::BlackScholes { mu, sigma, .. } => {
                let (k, h) = (steps(dt), dt / steps(dt) as f64);
                let mut x = state[0];
                for _ in 0..k {
                    x += mu * x * h + sigma * x * h.sqrt() * z(rng);
                }
                vec![x]
            }
            Process::OrnsteinUhlenbeck { k: kappa, m, sigma, .. } => {
                let (k, h) = (steps(dt), dt / steps(dt) as f64);
                let mut x = state[0];
                for _ in 0..k {
                    x += kappa * (m - x) * h + sigma * h.sqrt() * z(rng);
                }
                vec![x]
            }
            Process::Heston { mu, sigma, k: kappa, m, rho, v0, .. } => {
                // The variance at tau is not observed; the expected price does
                // not depend on it, so it starts from its prior mean.
                let mut v = m + (v0 - m) * (-kappa * tau).exp();
                let (k, h) = (steps(dt), dt / steps(dt) as f64);
                let mut x = state[0];
                for _ in 0..k {
                    let (z1, z2) = (z(rng), z(rng));
                    let vp = v.max(0.0);
                    x += mu * x * h + vp.sqrt() * x * h.sqrt() * z1;
                    v += kappa * (m - vp) * h + sigma * vp.sqrt() * h.sqrt() * (rho * z1 + (1.0 - rho * rho).sqrt() * z2);
                }
                vec![x]
            }
            Process::Poisson { lambda } => {
                let e = Exp::new(lambda).unwrap();
                let mut s = e.sample(rng);
                let mut count = 0.0;
                while s <= dt {
                    count += 1.0;
                    s += e.sample(rng);
                }
                vec![state[0] + count]
            }
            Process::BmSquare => {
                let x = state[0] + dt.sqrt() * z(rng);
                vec![x, x * x]
            }
            _ => unreachable!("not resimulated"),
        })
        .collect()
}

/// The schedule path and a target grid index that is not an observation.
fn schedule(spec: &GeneratorSpec, seed: u64, s: usize) -> (ObservedPath, usize) {
    let path = sample_paths(spec, s + 1, seed).unwrap().pop().unwrap();
    let obs: Vec<usize> = path.grid_indices().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s as u64).wrapping_mul(0x9E37_79B9));
    loop {
        let i = rng.random_range(1..path.grid_times.len());
        if !obs.contains(&i) {
            return (path, i);
        }
    }
}

/// Streaming least squares of targets on observed values.
struct Regression {
    n: f64,
    sx: DVector<f64>,
    sy: DVector<f64>,
    sxx: DMatrix<f64>,
    sxy: DMatrix<f64>,
    syy: DVector<f64>,
}

impl Regression {
    fn new(p: usize, q: usize) -> Self {
        Regression {
            n: 0.0,
            sx: DVector::zeros(p),
            sy: DVector::zeros(q),
            sxx: DMatrix::zeros(p, p),
            sxy: DMatrix::zeros(p, q),
            syy: DVector::zeros(q),
        }
    }

    fn push(&mut self, x: &DVector<f64>, y: &DVector<f64>) {
        self.n += 1.0;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x.transpose();
        self.sxy += x * y.transpose();
        for j in 0..y.len() {
            self.syy[j] += y[j] * y[j];
        }
    }

    /// Prediction and standard error for each target at `x0`.
    fn predict(&self, x0: &DVector<f64>) -> Vec<(f64, f64)> {
        let n = self.n;
        let mx = &self.sx / n;
        let my = &self.sy / n;
        let cxx = &self.sxx / n - &mx * mx.transpose();
        let cxy = &self.sxy / n - &mx * my.transpose();
        let pinv = pinv(&cxx);
        let dx = x0 - &mx;
        let leverage = (dx.transpose() * &pinv * &dx)[0];
        let rank = rank(&cxx) as f64;
        (0..my.len())
            .map(|j| {
                let c = cxy.column(j).into_owned();
                let beta = &pinv * &c;
                let var_y = self.syy[j] / n - my[j] * my[j];
                let resid = ((var_y - c.dot(&beta)) * n / (n - rank - 1.0)).max(0.0);
                let mean = my[j] + beta.dot(&dx);
                (mean, (resid / n * (1.0 + leverage)).sqrt())
            })
            .collect()
    }
}

fn pinv(c: &DMatrix<f64>) -> DMatrix<f64> {
    if c.nrows() == 0 {
        return DMatrix::zeros(0, 0);
    }
    let svd = c.clone().svd(true, true);
    let tol = 1e-10 * svd.singular_values.max().max(1e-300);
    svd.pseudo_inverse(tol).unwrap()
}

fn rank(c: &DMatrix<f64>) -> usize {
    if c.nrows() == 0 {
        return 0;
    }
    let svd = c.clone().svd(false, false);
    let tol = 1e-10 * svd.singular_values.max().max(1e-300);
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

fn is_gaussian(p: &Process) -> bool {
    matches!(p, Process::Fbm { .. } | Process::CorrBm { .. } | Process::Filtering { .. } | Process::LaggedBm { .. })
}

/// Oracle against Monte Carlo at one random target time for each of
/// `n_schedules` sampled observation schedules.
pub fn compare_process(spec: &GeneratorSpec, n_schedules: usize, n_mc: usize, seed: u64) -> Vec<Comparison> {
    let mut out = Vec::new();
    let d = spec.dim();
    for s in 0..n_schedules {
        let (path, target) = schedule(spec, seed, s);
        let t = path.grid_times[target];
        let oracle = oracle_trajectory(spec, &path, &path.grid_times).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1_000 + s as u64));
        let estimates: Vec<(f64, f64)> = if is_gaussian(&spec.process) {
            // Observed entries up to t, as (grid index, coordinate).
            let mut feats = Vec::new();
            let mut x0 = Vec::new();
            for k in 0..path.n_obs() {
                if path.obs_times[k] > t {
                    break;
                }
                let i = grid_index(&path.grid_times, path.obs_times[k]).unwrap();
                for j in 0..d {
                    if path.masks[[k, j]] {
                        feats.push((i, j));
                        x0.push(path.obs_values[[k, j]]);
                    }
                }
            }
            let mut reg = Regression::new(feats.len(), d);
            let mc_seed: u64 = rng.random();
            let chunk = 10_000;
            let mut start = 0;
            while start < n_mc {
                let end = (start + chunk).min(n_mc);
                for p in sample_paths_range(spec, mc_seed, start..end).unwrap() {
                    let x = DVector::from_iterator(feats.len(), feats.iter().map(|&(i, j)| p.grid_values[[i, j]]));
                    let y = DVector::from_iterator(d, (0..d).map(|j| p.grid_values[[target, j]]));
                    reg.push(&x, &y);
                }
                start = end;
            }
            reg.predict(&DVector::from_vec(x0))
        } else {
            let k = path.obs_times.partition_point(|&s| s <= t) - 1;
            let tau = path.obs_times[k];
            let state: Vec<f64> = path.obs_values.row(k).to_vec();
            let draws = resimulate(&spec.process, tau, &state, t - tau, n_mc, &mut rng);
            (0..d)
                .map(|j| mean_se(&draws.iter().map(|v| v[j]).collect::<Vec<_>>()))
                .collect()
        };
        for (j, (mc, se)) in estimates.into_iter().enumerate() {
            out.push(Comparison {
                process: spec.process.name(),
                schedule: s,
                time: t,
                coord: j,
                oracle: oracle.values[[target, j]],
                mc,
                se,
            });
        }
    }
    out
}
