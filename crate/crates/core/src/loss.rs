//! Training objectives and the evaluation metric.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::Mode;
use crate::njode::{LatentTrajectory, ModelGrads, NjOdeModel};
use crate::obs_path::ObservedPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Second term compares the jump size `Y_t - Y_{t-}`.
    Original,
    /// Second term compares the pre-jump output with the observation.
    #[default]
    Equivalent,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Original => "original",
            LossVariant::Equivalent => "equivalent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LossConfig {
    pub variant: LossVariant,
}

/// A reference trajectory on an evaluation grid: values after each
/// observation, plus the left limits at observation times `t_1, t_2, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTrajectory {
    pub times: Vec<f64>,
    /// `(times, d)`
    pub values: Array2<f64>,
    /// `(observations - 1, d)`
    pub left_limits: Array2<f64>,
}

/// `s = |M(X - Y)| + |M(Z)|` with `Z` per variant, and `ds/dY`, `ds/dY-`.
fn observation_term(
    x: ArrayView1<'_, f64>,
    mask: ArrayView1<'_, bool>,
    y: ArrayView1<'_, f64>,
    y_minus: ArrayView1<'_, f64>,
    variant: LossVariant,
) -> (f64, Array1<f64>, Array1<f64>) {
    let d = x.len();
    let mut r1 = Array1::zeros(d);
    let mut r2 = Array1::zeros(d);
    for j in 0..d {
        if mask[j] {
            r1[j] = x[j] - y[j];
            r2[j] = match variant {
                LossVariant::Original => y[j] - y_minus[j],
                LossVariant::Equivalent => x[j] - y_minus[j],
            };
        }
    }
    let n1 = r1.dot(&r1).sqrt();
    let n2 = r2.dot(&r2).sqrt();
    // Subgradient zero at a vanishing norm.
    let u1 = if n1 > 0.0 { &r1 / n1 } else { Array1::zeros(d) };
    let u2 = if n2 > 0.0 { &r2 / n2 } else { Array1::zeros(d) };
    let (dy, dym) = match variant {
        LossVariant::Original => (-&u1 + &u2, -u2),
        LossVariant::Equivalent => (-u1, -u2),
    };
    (n1 + n2, dy, dym)
}

/// Per-sample loss from explicit outputs at `t_1, ..., t_n`: one row of
/// `y_post` and `y_minus` per observation after `t_0`.
pub fn loss_from_outputs(
    path: &ObservedPath,
    y_post: ArrayView2<'_, f64>,
    y_minus: ArrayView2<'_, f64>,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(loss_and_output_grads(path, y_post, y_minus, cfg)?.0)
}

/// Loss with its gradients with respect to `y_post` and `y_minus`.
pub fn loss_and_output_grads(
    path: &ObservedPath,
    y_post: ArrayView2<'_, f64>,
    y_minus: ArrayView2<'_, f64>,
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let n = path.n_obs().saturating_sub(1);
    if n == 0 {
        return Err(Error::NoObservations);
    }
    if y_post.dim() != (n, path.dim) || y_minus.dim() != (n, path.dim) {
        return Err(Error::Shape {
            context: "outputs at observation times".into(),
            expected: n,
            got: y_post.nrows(),
        });
    }
    let mut total = 0.0;
    let mut g_post = Array2::zeros((n, path.dim));
    let mut g_minus = Array2::zeros((n, path.dim));
    let nf = n as f64;
    for i in 0..n {
        let k = i + 1;
        let (s, dy, dym) = observation_term(
            path.obs_values.row(k),
            path.masks.row(k),
            y_post.row(i),
            y_minus.row(i),
            cfg.variant,
        );
        total += s * s;
        g_post.row_mut(i).assign(&(dy * (2.0 * s / nf)));
        g_minus.row_mut(i).assign(&(dym * (2.0 * s / nf)));
    }
    Ok((total / nf, g_post, g_minus))
}

fn outputs_of(traj: &LatentTrajectory) -> (Array2<f64>, Array2<f64>) {
    let d = traj.y.ncols();
    let n = traj.jumps.len();
    let mut post = Array2::zeros((n, d));
    let mut minus = Array2::zeros((n, d));
    for (i, j) in traj.jumps.iter().enumerate() {
        post.row_mut(i).assign(&traj.y.row(j.index));
        minus.row_mut(i).assign(&j.y_minus);
    }
    (post, minus)
}

pub fn sample_loss(path: &ObservedPath, traj: &LatentTrajectory, cfg: &LossConfig) -> Result<f64> {
    let (post, minus) = outputs_of(traj);
    loss_from_outputs(path, post.view(), minus.view(), cfg)
}

/// Mean loss over a batch and its parameter gradients. Samples without
/// observations after `t_0` carry no loss and are left out of the mean.
pub fn batch_loss_and_grads<R: Rng + ?Sized>(
    model: &NjOdeModel,
    paths: &[&ObservedPath],
    ids: &[usize],
    cfg: &LossConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, ModelGrads)> {
    let first = paths
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty batch".into()))?;
    let times = &first.grid_times;
    if paths.iter().any(|p| p.grid_times != *times) {
        return Err(Error::GridMismatch("batch members use different grids".into()));
    }
    let batch = model.prepare(paths, ids, times)?;
    let run = model.forward_batch(&batch, mode, true, false, rng)?;

    let counted = paths.iter().filter(|p| p.n_obs() > 1).count();
    if counted == 0 {
        return Ok((0.0, ModelGrads::zeros_like(model)));
    }
    let ne = batch.n_events();
    let mut dy_post = Array2::zeros((ne, model.output_dim));
    let mut dy_minus = Array2::zeros((ne, model.output_dim));
    let nsamp: Vec<f64> = paths.iter().map(|p| (p.n_obs() - 1) as f64).collect();
    let mut per_sample = vec![0.0; paths.len()];
    for (e, (row, k)) in batch.events().enumerate() {
        let p = paths[row];
        let (s, dy, dym) = observation_term(
            p.obs_values.row(k),
            p.masks.row(k),
            run.y_post.row(e),
            run.y_minus.row(e),
            cfg.variant,
        );
        per_sample[row] += s * s / nsamp[row];
        let w = 2.0 * s / nsamp[row] / counted as f64;
        dy_post.row_mut(e).assign(&(dy * w));
        dy_minus.row_mut(e).assign(&(dym * w));
    }
    let loss = per_sample.iter().sum::<f64>() / counted as f64;
    let grads = model.backward_batch(&batch, &run, dy_minus.view(), dy_post.view())?;
    Ok((loss, grads))
}

/// Grid MSE of one sample: squared Euclidean error averaged over grid points.
pub fn grid_mse(oracle: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>) -> Result<f64> {
    if oracle.dim() != pred.dim() {
        return Err(Error::GridMismatch(format!(
            "oracle {:?} vs prediction {:?}",
            oracle.dim(),
            pred.dim()
        )));
    }
    let n = oracle.nrows() as f64;
    Ok((&oracle - &pred).mapv(|x| x * x).sum() / n)
}

/// Mean over samples of [`grid_mse`], model values taken post-jump.
pub fn evaluation_metric(oracles: &[OracleTrajectory], preds: &[LatentTrajectory]) -> Result<f64> {
    if oracles.len() != preds.len() || oracles.is_empty() {
        return Err(Error::GridMismatch(format!(
            "{} oracle trajectories vs {} predictions",
            oracles.len(),
            preds.len()
        )));
    }
    let mut total = 0.0;
    for (o, p) in oracles.iter().zip(preds) {
        if !same_grid(&o.times, &p.times) {
            return Err(Error::GridMismatch("evaluation grids differ".into()));
        }
        total += grid_mse(o.values.view(), p.y.view())?;
    }
    Ok(total / oracles.len() as f64)
}

/// [`evaluation_metric`] on raw output arrays sharing the oracle grids.
pub fn evaluation_metric_values(oracles: &[OracleTrajectory], preds: &[Array2<f64>]) -> Result<f64> {
    if oracles.len() != preds.len() || oracles.is_empty() {
        return Err(Error::GridMismatch(format!(
            "{} oracle trajectories vs {} predictions",
            oracles.len(),
            preds.len()
        )));
    }
    let mut total = 0.0;
    for (o, p) in oracles.iter().zip(preds) {
        total += grid_mse(o.values.view(), p.view())?;
    }
    Ok(total / oracles.len() as f64)
}

fn same_grid(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= crate::obs_path::TIME_TOL)
}

/// `m2 - m1^2` for a trajectory whose columns are `(m1, m2)` blocks of equal
/// width, clipped at zero.
pub fn variance_estimate(values: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let w = values.ncols();
    if w % 2 != 0 {
        return Err(Error::Shape {
            context: "paired moment trajectory".into(),
            expected: w + 1,
            got: w,
        });
    }
    let d = w / 2;
    Ok(Array2::from_shape_fn((values.nrows(), d), |(i, j)| {
        let m1 = values[[i, j]];
        (values[[i, d + j]] - m1 * m1).max(0.0)
    }))
}
