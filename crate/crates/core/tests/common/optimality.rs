//! The Monte-Carlo objective evaluated on explicit output processes.

use ndarray::Array2;
use pdnjode::loss::{loss_from_outputs, LossConfig, OracleTrajectory};
use pdnjode::obs_path::grid_index;
use pdnjode::ObservedPath;
use rand::Rng;

/// A bounded perturbation `delta(t, x)` of an output process: a smooth
/// function of time plus a bounded function of the last observation.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub offset: Vec<f64>,
    pub amp: Vec<f64>,
    pub freq: Vec<f64>,
    pub phase: Vec<f64>,
    pub state_gain: Vec<f64>,
}

impl Perturbation {
    /// Coordinate `j` moves by between `0.05 scale[j]` and `0.75 scale[j]`.
    pub fn random<R: Rng>(rng: &mut R, scale: &[f64]) -> Self {
        let mut p = Perturbation {
            offset: Vec::new(),
            amp: Vec::new(),
            freq: Vec::new(),
            phase: Vec::new(),
            state_gain: Vec::new(),
        };
        for &s in scale {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            p.offset.push(sign * s * rng.random_range(0.3..0.5));
            p.amp.push(s * rng.random_range(-0.15..0.15));
            p.freq.push(rng.random_range(0.5..6.0));
            p.phase.push(rng.random_range(0.0..std::f64::consts::TAU));
            p.state_gain.push(s * rng.random_range(-0.1..0.1));
        }
        p
    }

    pub fn at(&self, t: f64, last: &[f64], j: usize) -> f64 {
        self.offset[j] + self.amp[j] * (self.freq[j] * t + self.phase[j]).sin() + self.state_gain[j] * last[j].tanh()
    }
}

/// `Phi_N` of the oracle shifted by `delta` (none for the oracle itself).
pub fn objective(paths: &[ObservedPath], oracles: &[OracleTrajectory], delta: Option<&Perturbation>, cfg: &LossConfig) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for (p, o) in paths.iter().zip(oracles) {
        let n = p.n_obs();
        if n < 2 {
            continue;
        }
        let d = p.dim;
        let mut post = Array2::zeros((n - 1, d));
        let mut minus = Array2::zeros((n - 1, d));
        let mut last = vec![0.0; d];
        for j in 0..d {
            if p.masks[[0, j]] {
                last[j] = p.obs_values[[0, j]];
            }
        }
        for k in 1..n {
            let t = p.obs_times[k];
            let i = grid_index(&o.times, t).unwrap();
            let before = last.clone();
            for j in 0..d {
                if p.masks[[k, j]] {
                    last[j] = p.obs_values[[k, j]];
                }
            }
            for j in 0..d {
                let (dp, dm) = delta.map_or((0.0, 0.0), |dl| (dl.at(t, &last, j), dl.at(t, &before, j)));
                post[[k - 1, j]] = o.values[[i, j]] + dp;
                minus[[k - 1, j]] = o.left_limits[[k - 1, j]] + dm;
            }
        }
        total += loss_from_outputs(p, post.view(), minus.view(), cfg).unwrap();
        counted += 1;
    }
    total / counted as f64
}
