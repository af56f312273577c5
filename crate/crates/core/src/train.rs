//! Training harness: run configuration, the mini-batch Adam loop, metric
//! and trajectory files, checkpoints and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::loss::{batch_loss_and_grads, evaluation_metric_values, LossConfig, LossVariant, OracleTrajectory};
use crate::neural::{clip_global_norm, AdamConfig, AdamState, Mode};
use crate::njode::{ModelConfig, ModelVariant, NjOdeModel};
use crate::obs_path::{grid_index, ObservedPath};
use crate::synth::{oracle_trajectory, GeneratorSpec, Process};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.json";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.json";
pub const DIVERGED_CHECKPOINT: &str = "checkpoint_diverged.json";
pub const TRAJECTORY_DIR: &str = "trajectories";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub spec: GeneratorSpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Load this dataset directory instead of generating one.
    pub path: Option<PathBuf>,
}

impl DataConfig {
    pub fn new(spec: GeneratorSpec) -> Self {
        DataConfig {
            spec,
            n_train: 16_000,
            n_test: 4_000,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub loss: LossVariant,
    /// Evaluate on the test split every this many epochs (and after the last).
    pub eval_every: usize,
    pub eval_batch_size: usize,
    /// Number of test samples written to the trajectory files.
    pub n_plot: usize,
    /// Wall-clock seconds in the metrics file; off keeps it reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 200,
            lr: 1e-3,
            weight_decay: 5e-4,
            clip_norm: Some(10.0),
            loss: LossVariant::Equivalent,
            eval_every: 1,
            eval_batch_size: 500,
            n_plot: 5,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub variants: Vec<ModelVariant>,
    #[serde(default)]
    pub losses: Vec<LossVariant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Overrides `model.use_signature` and `model.recurrent_jump`.
    pub model_variant: Option<ModelVariant>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub sweep: Option<SweepConfig>,
}

impl RunConfig {
    pub fn new(spec: GeneratorSpec, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            seed: 0,
            out_dir: out_dir.into(),
            model_variant: None,
            data: DataConfig::new(spec),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sweep: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// The model configuration with the variant override applied.
    pub fn effective_model(&self) -> ModelConfig {
        match self.model_variant {
            Some(v) => self.model.clone().with_variant(v),
            None => self.model.clone(),
        }
    }

    pub fn variant(&self) -> ModelVariant {
        let m = self.effective_model();
        match (m.use_signature, m.recurrent_jump) {
            (false, false) => ModelVariant::Njode,
            (true, false) => ModelVariant::NjodeSig,
            (false, true) => ModelVariant::NjodeRnn,
            (true, true) => ModelVariant::PdNjode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size == 0 || t.eval_batch_size == 0 || t.eval_every == 0 {
            return Err(Error::InvalidConfig("batch sizes and eval cadence must be positive".into()));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite() && t.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!("lr {} / weight decay {}", t.lr, t.weight_decay)));
        }
        if let Some(c) = t.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("clip norm {c} must be positive")));
            }
        }
        if self.data.path.is_none() && (self.data.n_train == 0 || self.data.n_test == 0) {
            return Err(Error::InvalidConfig("empty train or test split".into()));
        }
        self.data.spec.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Training randomness, keyed by `(seed, stream)`; stream 0 initialises the
/// model and stream `e` drives epoch `e`.
pub fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_4E5B);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub eval_metric: Option<f64>,
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub config: RunConfig,
    pub model: NjOdeModel,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        ck.model.check_shapes()?;
        Ok(ck)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub best_metric: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub out_dir: PathBuf,
}

/// Test paths with their oracle trajectories on the data grid.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub spec: GeneratorSpec,
    pub paths: Vec<ObservedPath>,
    pub oracles: Vec<OracleTrajectory>,
}

impl EvalSet {
    pub fn new(spec: &GeneratorSpec, paths: Vec<ObservedPath>) -> Result<Self> {
        let oracles = paths
            .iter()
            .map(|p| oracle_trajectory(spec, p, &p.grid_times))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSet {
            spec: spec.clone(),
            paths,
            oracles,
        })
    }

    pub fn predict(&self, predictor: Predictor<'_>, batch_size: usize) -> Result<Vec<Array2<f64>>> {
        match predictor {
            Predictor::Oracle => Ok(self.oracles.iter().map(|o| o.values.clone()).collect()),
            Predictor::Model(m) => {
                let grid = &self.paths.first().ok_or_else(|| Error::InvalidConfig("empty test split".into()))?.grid_times;
                let refs: Vec<&ObservedPath> = self.paths.iter().collect();
                m.predict_grid(&refs, grid, batch_size)
            }
        }
    }

    pub fn metric(&self, predictor: Predictor<'_>, batch_size: usize) -> Result<f64> {
        evaluation_metric_values(&self.oracles, &self.predict(predictor, batch_size)?)
    }
}

/// What produces the evaluated trajectories.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a NjOdeModel),
    /// Emits the conditional expectation itself.
    Oracle,
}

pub fn load_or_generate(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => {
            let ds = Dataset::load(p)?;
            if ds.spec != cfg.data.spec {
                return Err(Error::InvalidConfig(format!(
                    "dataset at {} was generated from a different spec",
                    p.display()
                )));
            }
            Ok(ds)
        }
        None => Dataset::generate(&cfg.data.spec, cfg.seed, cfg.data.n_train, cfg.data.n_test),
    }
}

/// Trains from scratch. See [`resume_training`] to continue a checkpoint.
pub fn run_training(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let data = load_or_generate(cfg)?;
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty train split".into()))?;
    let model = NjOdeModel::new(
        cfg.effective_model(),
        data.spec.dim(),
        first.initial_regime(),
        &mut run_rng(cfg.seed, 0),
    )?;
    let adam = AdamState::new(cfg.adam(), &model);
    let state = Checkpoint {
        epoch: 0,
        config: cfg.clone(),
        model,
        adam,
        history: Vec::new(),
    };
    train_loop(state, &data, None)
}

/// Continues a checkpoint up to `epochs` total (the stored config's count
/// when `None`). Matches an uninterrupted run of the same length.
pub fn resume_training(checkpoint: &Path, epochs: Option<usize>) -> Result<RunReport> {
    let mut state = Checkpoint::load(checkpoint)?;
    if let Some(e) = epochs {
        state.config.train.epochs = e;
    }
    let data = load_or_generate(&state.config)?;
    let best_path = state.config.out_dir.join(BEST_CHECKPOINT);
    let best = if best_path.exists() {
        Some(Checkpoint::load(&best_path)?.model)
    } else {
        None
    };
    train_loop(state, &data, best)
}

fn best_of(history: &[EpochRecord]) -> Option<(f64, usize)> {
    history
        .iter()
        .filter_map(|r| r.eval_metric.map(|m| (m, r.epoch)))
        .fold(None, |acc, (m, e)| match acc {
            Some((bm, _)) if bm <= m => acc,
            _ => Some((m, e)),
        })
}

fn train_loop(mut state: Checkpoint, data: &Dataset, mut best_model: Option<NjOdeModel>) -> Result<RunReport> {
    let cfg = state.config.clone();
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out)?;
    let loss_cfg = LossConfig {
        variant: cfg.train.loss,
    };
    let eval = EvalSet::new(&data.spec.test_variant(), data.test.clone())?;
    let start = Instant::now();
    let wall = |rec: bool| rec.then(|| start.elapsed().as_secs_f64());

    if state.history.is_empty() {
        let m = eval.metric(Predictor::Model(&state.model), cfg.train.eval_batch_size)?;
        state.history.push(EpochRecord {
            epoch: 0,
            train_loss: None,
            eval_metric: Some(m),
            wall_time: wall(cfg.train.record_wall_time),
        });
        state.save(&out.join(BEST_CHECKPOINT))?;
        best_model = Some(state.model.clone());
    }

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    while state.epoch < cfg.train.epochs {
        let epoch = state.epoch + 1;
        let mut rng = run_rng(cfg.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let good = (state.model.clone(), state.adam.clone());

        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        let mut failure = None;
        for chunk in order.chunks(cfg.train.batch_size) {
            let mut ids = chunk.to_vec();
            ids.sort_unstable();
            let ids = &ids[..];
            let paths: Vec<&ObservedPath> = ids.iter().map(|&i| &data.train[i]).collect();
            let step = batch_loss_and_grads(&state.model, &paths, ids, &loss_cfg, Mode::Train, &mut rng).and_then(
                |(loss, mut grads)| {
                    if !loss.is_finite() {
                        return Err(Error::NonFiniteGradient("loss".into()));
                    }
                    if let Some(c) = cfg.train.clip_norm {
                        clip_global_norm(&mut grads, c);
                    }
                    state.adam.step(&mut state.model, &grads)?;
                    Ok(loss)
                },
            );
            match step {
                Ok(loss) => {
                    loss_sum += loss;
                    n_batches += 1;
                }
                Err(e @ (Error::NonFiniteGradient(_) | Error::NonFiniteLatent { .. })) => {
                    failure = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if failure.is_some() {
            let (model, adam) = good;
            let path = out.join(DIVERGED_CHECKPOINT);
            Checkpoint { model, adam, ..state }.save(&path)?;
            return Err(Error::Diverged { epoch, checkpoint: path });
        }

        state.epoch = epoch;
        let eval_now = epoch % cfg.train.eval_every == 0 || epoch == cfg.train.epochs;
        let metric = if eval_now {
            Some(eval.metric(Predictor::Model(&state.model), cfg.train.eval_batch_size)?)
        } else {
            None
        };
        let prev_best = best_of(&state.history).map(|b| b.0);
        state.history.push(EpochRecord {
            epoch,
            train_loss: Some(loss_sum / n_batches.max(1) as f64),
            eval_metric: metric,
            wall_time: wall(cfg.train.record_wall_time),
        });
        write_metrics(&out.join(METRICS_FILE), &state.history, cfg.variant())?;
        if let Some(m) = metric {
            if prev_best.is_none_or(|b| m < b) {
                state.save(&out.join(BEST_CHECKPOINT))?;
                best_model = Some(state.model.clone());
            }
        }
    }

    state.save(&out.join(LAST_CHECKPOINT))?;
    write_metrics(&out.join(METRICS_FILE), &state.history, cfg.variant())?;
    let best = best_model.unwrap_or_else(|| state.model.clone());
    write_trajectories(&out.join(TRAJECTORY_DIR), &eval, Predictor::Model(&best), cfg.train.n_plot)?;
    let (best_metric, best_epoch) = best_of(&state.history).expect("epoch 0 is always evaluated");
    Ok(RunReport {
        best_metric,
        best_epoch,
        history: state.history,
        out_dir: out,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_metrics(file: &Path, history: &[EpochRecord], variant: ModelVariant) -> Result<()> {
    let mut w = csv::Writer::from_path(file)?;
    w.write_record(["epoch", "train_loss", "eval_metric", "wall_time", "variant"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            opt(r.train_loss),
            opt(r.eval_metric),
            opt(r.wall_time),
            variant.name().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One CSV per panel sample with truth, model, oracle and observation flag
/// for every coordinate.
pub fn write_trajectories(dir: &Path, eval: &EvalSet, predictor: Predictor<'_>, n_plot: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = n_plot.min(eval.paths.len());
    let sub = EvalSet {
        spec: eval.spec.clone(),
        paths: eval.paths[..n].to_vec(),
        oracles: eval.oracles[..n].to_vec(),
    };
    if n == 0 {
        return Ok(());
    }
    let preds = sub.predict(predictor, n)?;
    for (s, ((path, oracle), pred)) in sub.paths.iter().zip(&sub.oracles).zip(&preds).enumerate() {
        let d = path.dim;
        let mut w = csv::Writer::from_path(dir.join(format!("sample_{s:04}.csv")))?;
        let mut header = vec!["time".to_string()];
        for j in 0..d {
            header.extend([format!("truth_{j}"), format!("model_{j}"), format!("oracle_{j}"), format!("obs_{j}")]);
        }
        w.write_record(&header)?;
        let mut observed = Array2::from_elem((path.grid_times.len(), d), false);
        for k in 0..path.n_obs() {
            if let Some(i) = grid_index(&path.grid_times, path.obs_times[k]) {
                for j in 0..d {
                    observed[[i, j]] |= path.masks[[k, j]];
                }
            }
        }
        for (i, t) in path.grid_times.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            for j in 0..d {
                rec.extend([
                    path.grid_values[[i, j]].to_string(),
                    pred[[i, j]].to_string(),
                    oracle.values[[i, j]].to_string(),
                    u8::from(observed[[i, j]]).to_string(),
                ]);
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: f64,
    pub n_samples: usize,
}

/// Eval-mode metric of a checkpoint (or of the oracle) on the test split of
/// `data`, writing trajectory files to `out` when given.
pub fn evaluate_checkpoint(
    checkpoint: Option<&Checkpoint>,
    data: &Dataset,
    out: Option<&Path>,
    n_plot: usize,
) -> Result<EvalReport> {
    let eval = EvalSet::new(&data.spec.test_variant(), data.test.clone())?;
    let predictor = match checkpoint {
        Some(ck) => {
            if ck.model.obs_dim != data.spec.dim() {
                return Err(Error::Shape {
                    context: "checkpoint observation dimension".into(),
                    expected: data.spec.dim(),
                    got: ck.model.obs_dim,
                });
            }
            Predictor::Model(&ck.model)
        }
        None => Predictor::Oracle,
    };
    let batch = checkpoint.map_or(500, |c| c.config.train.eval_batch_size);
    let metric = eval.metric(predictor, batch)?;
    if let Some(dir) = out {
        write_trajectories(&dir.join(TRAJECTORY_DIR), &eval, predictor, n_plot)?;
    }
    Ok(EvalReport {
        metric,
        n_samples: eval.paths.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub variant: ModelVariant,
    pub loss: LossVariant,
    pub best_metric: f64,
    pub best_epoch: usize,
}

/// The runs of an ablation sweep, each in its own subdirectory of the base
/// output directory.
pub fn sweep_configs(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let sweep = base.sweep.clone().unwrap_or(SweepConfig {
        variants: vec![
            ModelVariant::Njode,
            ModelVariant::NjodeSig,
            ModelVariant::NjodeRnn,
            ModelVariant::PdNjode,
        ],
        losses: Vec::new(),
    });
    let losses = if sweep.losses.is_empty() {
        vec![base.train.loss]
    } else {
        sweep.losses
    };
    let mut runs = Vec::new();
    for &v in &sweep.variants {
        for &l in &losses {
            let label = format!("{}_{}", v.name(), l.name());
            let mut c = base.clone();
            c.model_variant = Some(v);
            c.train.loss = l;
            c.sweep = None;
            c.out_dir = base.out_dir.join(&label);
            runs.push((label, c));
        }
    }
    runs
}

pub fn compare(base: &RunConfig) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    for (label, cfg) in sweep_configs(base) {
        let r = run_training(&cfg)?;
        rows.push(CompareRow {
            label,
            variant: cfg.variant(),
            loss: cfg.train.loss,
            best_metric: r.best_metric,
            best_epoch: r.best_epoch,
        });
    }
    fs::create_dir_all(&base.out_dir)?;
    let mut w = csv::Writer::from_path(base.out_dir.join("compare.csv"))?;
    w.write_record(["label", "variant", "loss", "best_metric", "best_epoch"])?;
    for r in &rows {
        w.write_record([
            r.label.clone(),
            r.variant.name().to_string(),
            r.loss.name().to_string(),
            r.best_metric.to_string(),
            r.best_epoch.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

/// A small ready-to-run configuration for each process.
pub fn example_config(process: Process, out_dir: impl Into<PathBuf>) -> RunConfig {
    RunConfig::new(GeneratorSpec::new(process), out_dir)
}
