//! Irregularly and partially observed sample paths.
//!
//! An [`ObservedPath`] carries the ground-truth path on the full simulation
//! grid together with the random observation times and masks. The model only
//! ever sees the observed part, through [`ObservedPath::last_obs_time`] and
//! the continuous interpolation [`ObservedPath::interpolate`].

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when matching observation times against grid times.
pub const TIME_TOL: f64 = 1e-12;

/// Which coordinates of `X_0` are revealed at `t = 0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialRegime {
    Full,
    Empty,
    Subset(Vec<usize>),
}

impl InitialRegime {
    pub fn from_mask(mask: ArrayView1<'_, bool>) -> Self {
        let observed: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(j, &m)| m.then_some(j))
            .collect();
        if observed.len() == mask.len() {
            InitialRegime::Full
        } else if observed.is_empty() {
            InitialRegime::Empty
        } else {
            InitialRegime::Subset(observed)
        }
    }

    pub fn mask(&self, dim: usize) -> Array1<bool> {
        match self {
            InitialRegime::Full => Array1::from_elem(dim, true),
            InitialRegime::Empty => Array1::from_elem(dim, false),
            InitialRegime::Subset(idx) => {
                let mut m = Array1::from_elem(dim, false);
                for &j in idx {
                    m[j] = true;
                }
                m
            }
        }
    }
}

/// One sample: ground truth on the grid plus its observations.
///
/// `obs_values` holds zero in masked-out entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedPath {
    pub dim: usize,
    pub horizon: f64,
    pub grid_times: Vec<f64>,
    /// `(grid_times.len(), dim)`
    pub grid_values: Array2<f64>,
    pub obs_times: Vec<f64>,
    /// `(obs_times.len(), dim)`
    pub obs_values: Array2<f64>,
    /// `(obs_times.len(), dim)`
    pub masks: Array2<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape(String),
    FirstObservationNotAtZero(f64),
    NonIncreasingTimes { index: usize },
    EmptyMask { index: usize },
    OffGrid { index: usize, time: f64 },
    ValueMismatch { index: usize, coord: usize },
    NonFinite { what: &'static str, index: usize },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidityReport {
    pub violations: Vec<Violation>,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl ObservedPath {
    /// Builds a path whose observations are read off the grid at `obs_idx`.
    pub fn from_grid(
        horizon: f64,
        grid_times: Vec<f64>,
        grid_values: Array2<f64>,
        obs_idx: &[usize],
        masks: Array2<bool>,
    ) -> Self {
        let dim = grid_values.ncols();
        let obs_times = obs_idx.iter().map(|&i| grid_times[i]).collect();
        let mut obs_values = Array2::zeros((obs_idx.len(), dim));
        for (k, &i) in obs_idx.iter().enumerate() {
            for j in 0..dim {
                if masks[[k, j]] {
                    obs_values[[k, j]] = grid_values[[i, j]];
                }
            }
        }
        ObservedPath {
            dim,
            horizon,
            grid_times,
            grid_values,
            obs_times,
            obs_values,
            masks,
        }
    }

    pub fn n_obs(&self) -> usize {
        self.obs_times.len()
    }

    pub fn initial_regime(&self) -> InitialRegime {
        InitialRegime::from_mask(self.masks.row(0))
    }

    /// `tau(t)`: time of the last observation at or before `t`.
    pub fn last_obs_time(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Domain {
                t,
                horizon: self.horizon,
            });
        }
        let n = self.obs_times.partition_point(|&s| s <= t);
        Ok(if n == 0 { 0.0 } else { self.obs_times[n - 1] })
    }

    /// Grid index of every observation time.
    pub fn grid_indices(&self) -> Result<Vec<usize>> {
        self.obs_times
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                grid_index(&self.grid_times, t).ok_or_else(|| {
                    Error::InvalidPath(format!("observation {k} at t={t} is not a grid time"))
                })
            })
            .collect()
    }

    /// Continuous interpolation of the observations up to `cutoff`.
    ///
    /// Knots sit at the observation times `t_k <= cutoff`. The value of
    /// coordinate `j` at knot `k` is its last observed value; between knots
    /// the path is linear, and it is constant after the last knot. A
    /// coordinate that was never observed is held at zero.
    pub fn interpolate(&self, cutoff: f64) -> Result<InterpolatedPath> {
        if !(0.0..=self.horizon).contains(&cutoff) {
            return Err(Error::Domain {
                t: cutoff,
                horizon: self.horizon,
            });
        }
        let n = self.obs_times.partition_point(|&s| s <= cutoff).max(1);
        let mut last = Array1::<f64>::zeros(self.dim);
        let mut knot_values = Array2::zeros((n, self.dim));
        for k in 0..n {
            for j in 0..self.dim {
                if self.masks[[k, j]] {
                    last[j] = self.obs_values[[k, j]];
                }
            }
            knot_values.row_mut(k).assign(&last);
        }
        Ok(InterpolatedPath {
            cutoff,
            horizon: self.horizon,
            knot_times: self.obs_times[..n].to_vec(),
            knot_values,
        })
    }

    /// Checks the structural assumptions on observation times and masks.
    pub fn validate(&self) -> ValidityReport {
        let mut v = Vec::new();
        let n = self.obs_times.len();
        if self.grid_values.nrows() != self.grid_times.len() || self.grid_values.ncols() != self.dim {
            v.push(Violation::Shape(format!(
                "grid values {:?} vs {} times x {} dims",
                self.grid_values.dim(),
                self.grid_times.len(),
                self.dim
            )));
        }
        if self.obs_values.dim() != (n, self.dim) || self.masks.dim() != (n, self.dim) {
            v.push(Violation::Shape(format!(
                "observation arrays {:?}/{:?} vs {} times x {} dims",
                self.obs_values.dim(),
                self.masks.dim(),
                n,
                self.dim
            )));
            return ValidityReport { violations: v };
        }
        match self.obs_times.first() {
            Some(&t0) if t0.abs() > TIME_TOL => v.push(Violation::FirstObservationNotAtZero(t0)),
            None => v.push(Violation::FirstObservationNotAtZero(f64::NAN)),
            _ => {}
        }
        for k in 1..n {
            if self.obs_times[k] <= self.obs_times[k - 1] {
                v.push(Violation::NonIncreasingTimes { index: k });
            }
            if !self.masks.row(k).iter().any(|&m| m) {
                v.push(Violation::EmptyMask { index: k });
            }
        }
        for (i, x) in self.grid_values.rows().into_iter().enumerate() {
            if x.iter().any(|x| !x.is_finite()) {
                v.push(Violation::NonFinite {
                    what: "grid value",
                    index: i,
                });
            }
        }
        for k in 0..n {
            let t = self.obs_times[k];
            if !t.is_finite() || self.obs_values.row(k).iter().any(|x| !x.is_finite()) {
                v.push(Violation::NonFinite {
                    what: "observation",
                    index: k,
                });
                continue;
            }
            let Some(i) = grid_index(&self.grid_times, t) else {
                v.push(Violation::OffGrid { index: k, time: t });
                continue;
            };
            for j in 0..self.dim {
                if self.masks[[k, j]] && self.obs_values[[k, j]] != self.grid_values[[i, j]] {
                    v.push(Violation::ValueMismatch { index: k, coord: j });
                }
            }
        }
        ValidityReport { violations: v }
    }
}

/// Index of `t` in a sorted grid, within [`TIME_TOL`].
pub fn grid_index(grid: &[f64], t: f64) -> Option<usize> {
    let i = grid.partition_point(|&s| s < t - TIME_TOL);
    (i < grid.len() && (grid[i] - t).abs() <= TIME_TOL).then_some(i)
}

/// The continuous piecewise-linear path built from observations up to a cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolatedPath {
    pub cutoff: f64,
    pub horizon: f64,
    pub knot_times: Vec<f64>,
    /// `(knot_times.len(), dim)`
    pub knot_values: Array2<f64>,
}

impl InterpolatedPath {
    pub fn dim(&self) -> usize {
        self.knot_values.ncols()
    }

    pub fn value_at(&self, s: f64) -> Array1<f64> {
        let n = self.knot_times.len();
        let i = self.knot_times.partition_point(|&k| k < s);
        if i == 0 {
            return self.knot_values.row(0).to_owned();
        }
        if i >= n {
            return self.knot_values.row(n - 1).to_owned();
        }
        let (t0, t1) = (self.knot_times[i - 1], self.knot_times[i]);
        let w = (s - t0) / (t1 - t0);
        let a = self.knot_values.row(i - 1);
        let b = self.knot_values.row(i);
        &a * (1.0 - w) + &b * w
    }
}
