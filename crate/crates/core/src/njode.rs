//! The PD-NJ-ODE: an Euler-integrated latent ODE between observations,
//! jump updates at observations, and a readout, plus the exact discrete
//! adjoint of that recursion.
//!
//! All samples of a batch share one time grid and are advanced in lockstep,
//! so every network evaluation is a matrix product over the batch. At a grid
//! time only the rows observed there go through the jump network.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{Activation, Mlp, MlpGrads, Mode, ParamBlocks, ParamBlocksMut, Tape};
use crate::obs_path::{grid_index, InitialRegime, ObservedPath};
use crate::signature::{sig_dim, TruncatedSignature};

/// The four model families compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    Njode,
    NjodeSig,
    NjodeRnn,
    #[default]
    PdNjode,
}

impl ModelVariant {
    pub fn use_signature(self) -> bool {
        matches!(self, ModelVariant::NjodeSig | ModelVariant::PdNjode)
    }

    pub fn recurrent_jump(self) -> bool {
        matches!(self, ModelVariant::NjodeRnn | ModelVariant::PdNjode)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Njode => "njode",
            ModelVariant::NjodeSig => "njode-sig",
            ModelVariant::NjodeRnn => "njode-rnn",
            ModelVariant::PdNjode => "pd-njode",
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "njode" => Ok(ModelVariant::Njode),
            "njode-sig" | "njode+sig" => Ok(ModelVariant::NjodeSig),
            "njode-rnn" | "njode+rnn" => Ok(ModelVariant::NjodeRnn),
            "pd-njode" => Ok(ModelVariant::PdNjode),
            other => Err(Error::InvalidConfig(format!("unknown model variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Hidden widths shared by the drift, jump and initial-state networks.
    pub hidden: Vec<usize>,
    /// Affine readout instead of one with the same hidden widths.
    pub linear_readout: bool,
    pub activation: Activation,
    pub dropout: f64,
    pub sig_level: usize,
    pub time_augment: bool,
    pub use_signature: bool,
    pub recurrent_jump: bool,
    /// Appends the mask of the latest observation to the path features.
    pub mask_input: bool,
    /// Maximal Euler step; `None` steps exactly on the evaluation grid.
    pub ode_step: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 50,
            hidden: vec![50, 50],
            linear_readout: false,
            activation: Activation::Tanh,
            dropout: 0.1,
            sig_level: 3,
            time_augment: true,
            use_signature: true,
            recurrent_jump: true,
            mask_input: false,
            ode_step: None,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, v: ModelVariant) -> Self {
        self.use_signature = v.use_signature();
        self.recurrent_jump = v.recurrent_jump();
        self
    }

    /// Width of the path features: signature and `X_0`, or the forward-filled
    /// last observation, then the latest mask when enabled.
    pub fn feature_dim(&self, obs_dim: usize) -> Result<usize> {
        let mask = usize::from(self.mask_input) * obs_dim;
        if self.use_signature {
            Ok(sig_dim(obs_dim + usize::from(self.time_augment), self.sig_level)? + obs_dim + mask)
        } else {
            Ok(obs_dim + mask)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NjOdeModel {
    pub config: ModelConfig,
    pub obs_dim: usize,
    pub output_dim: usize,
    pub initial: InitialRegime,
    pub drift: Mlp,
    pub jump: Mlp,
    pub readout: Mlp,
    pub init_net: Option<Mlp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub drift: MlpGrads,
    pub jump: MlpGrads,
    pub readout: MlpGrads,
    pub init_net: Option<MlpGrads>,
}

impl ModelGrads {
    pub fn zeros_like(m: &NjOdeModel) -> Self {
        ModelGrads {
            drift: MlpGrads::zeros_like(&m.drift),
            jump: MlpGrads::zeros_like(&m.jump),
            readout: MlpGrads::zeros_like(&m.readout),
            init_net: m.init_net.as_ref().map(MlpGrads::zeros_like),
        }
    }

    pub fn add_assign(&mut self, o: &ModelGrads) {
        self.drift.add_assign(&o.drift);
        self.jump.add_assign(&o.jump);
        self.readout.add_assign(&o.readout);
        if let (Some(a), Some(b)) = (self.init_net.as_mut(), o.init_net.as_ref()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for (_, b) in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x *= c);
        }
    }
}

fn prefixed<'a>(prefix: &str, v: Vec<(String, &'a [f64])>) -> impl Iterator<Item = (String, &'a [f64])> + use<'a> {
    let p = prefix.to_string();
    v.into_iter().map(move |(n, b)| (format!("{p}.{n}"), b))
}

fn prefixed_mut<'a>(
    prefix: &str,
    v: Vec<(String, &'a mut [f64])>,
) -> impl Iterator<Item = (String, &'a mut [f64])> + use<'a> {
    let p = prefix.to_string();
    v.into_iter().map(move |(n, b)| (format!("{p}.{n}"), b))
}

macro_rules! impl_blocks {
    ($t:ty) => {
        impl ParamBlocks for $t {
            fn blocks(&self) -> Vec<(String, &[f64])> {
                let mut out: Vec<_> = prefixed("drift", self.drift.blocks()).collect();
                out.extend(prefixed("jump", self.jump.blocks()));
                out.extend(prefixed("readout", self.readout.blocks()));
                if let Some(n) = &self.init_net {
                    out.extend(prefixed("init", n.blocks()));
                }
                out
            }
        }

        impl ParamBlocksMut for $t {
            fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
                let mut out: Vec<_> = prefixed_mut("drift", self.drift.blocks_mut()).collect();
                out.extend(prefixed_mut("jump", self.jump.blocks_mut()));
                out.extend(prefixed_mut("readout", self.readout.blocks_mut()));
                if let Some(n) = &mut self.init_net {
                    out.extend(prefixed_mut("init", n.blocks_mut()));
                }
                out
            }
        }
    };
}

impl_blocks!(NjOdeModel);
impl_blocks!(ModelGrads);

/// Latent state and output on an evaluation grid.
#[derive(Debug, Clone)]
pub struct LatentTrajectory {
    pub times: Vec<f64>,
    /// `(times, d_H)`, post-jump at observation times.
    pub h: Array2<f64>,
    /// `(times, d_Y)`, post-jump at observation times.
    pub y: Array2<f64>,
    /// One entry per observation after `t_0`.
    pub jumps: Vec<JumpRecord>,
    tape: Option<BatchTape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpRecord {
    /// Index into `times`.
    pub index: usize,
    pub time: f64,
    pub h_minus: Array1<f64>,
    pub y_minus: Array1<f64>,
}

impl LatentTrajectory {
    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    /// Output right after the `i`-th jump.
    pub fn y_post(&self, i: usize) -> Array1<f64> {
        self.y.row(self.jumps[i].index).to_owned()
    }
}

/// Samples prepared for lockstep integration on a shared grid.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub times: Vec<f64>,
    /// Sample ids used in error messages.
    pub ids: Vec<usize>,
    /// Per grid index, `(row, observation)` pairs observed there (`t_0` excluded).
    events_at: Vec<Vec<(usize, usize)>>,
    /// Per row, path features after each observation.
    features: Vec<Array2<f64>>,
    /// `(rows, init width)`: input of the initial-state network.
    init_input: Array2<f64>,
    n_events: usize,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.n_events
    }

    /// Observations in the global event order used by [`BatchRun`]:
    /// by time, then by row.
    pub fn events(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.events_at.iter().flatten().copied()
    }
}

/// Recorded intermediates for the reverse pass.
#[derive(Debug, Clone)]
struct BatchTape {
    init: Tape,
    /// Per grid interval, one tape per Euler sub-step.
    drift: Vec<Vec<(f64, Tape)>>,
    /// Per grid index with events.
    jump: Vec<Option<Tape>>,
    readout_minus: Option<Tape>,
    readout_post: Option<Tape>,
}

/// Result of a lockstep forward pass.
#[derive(Debug, Clone)]
pub struct BatchRun {
    /// `(events, d_Y)` in [`PreparedBatch::events`] order.
    pub y_minus: Array2<f64>,
    pub y_post: Array2<f64>,
    pub h_minus: Array2<f64>,
    /// `(times, rows, d_H)` when the grid was recorded.
    pub h_grid: Option<Array3<f64>>,
    tape: Option<BatchTape>,
}

impl NjOdeModel {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        obs_dim: usize,
        initial: InitialRegime,
        rng: &mut R,
    ) -> Result<Self> {
        if obs_dim == 0 || config.latent_dim == 0 {
            return Err(Error::InvalidConfig("zero observation or latent dimension".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} not in [0, 1)", config.dropout)));
        }
        if let Some(h) = config.ode_step {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidConfig(format!("ode step {h} must be positive")));
            }
        }
        if let InitialRegime::Subset(idx) = &initial {
            if idx.is_empty() || idx.iter().any(|&j| j >= obs_dim) {
                return Err(Error::InvalidConfig(format!("invalid initial subset {idx:?}")));
            }
        }
        let dh = config.latent_dim;
        let feat = config.feature_dim(obs_dim)?;
        let act = config.activation;
        let p = config.dropout;
        let h = &config.hidden;
        let drift = Mlp::new(dh + 2 + feat, h, dh, act, p, rng);
        let jump_in = usize::from(config.recurrent_jump) * dh + 1 + feat;
        let jump = Mlp::new(jump_in, h, dh, act, p, rng);
        let readout_hidden: &[usize] = if config.linear_readout { &[] } else { h };
        let readout = Mlp::new(dh, readout_hidden, obs_dim, act, p, rng);
        let init_net = match &initial {
            InitialRegime::Full => None,
            InitialRegime::Empty => Some(Mlp::new(1, h, dh, act, p, rng)),
            InitialRegime::Subset(idx) => Some(Mlp::new(idx.len(), h, dh, act, p, rng)),
        };
        Ok(NjOdeModel {
            config,
            obs_dim,
            output_dim: obs_dim,
            initial,
            drift,
            jump,
            readout,
            init_net,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config
            .feature_dim(self.obs_dim)
            .expect("checked at construction")
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Checks the network shapes against the configuration.
    pub fn check_shapes(&self) -> Result<()> {
        let dh = self.latent_dim();
        let feat = self.config.feature_dim(self.obs_dim)?;
        let jump_in = usize::from(self.config.recurrent_jump) * dh + 1 + feat;
        let checks = [
            ("drift input", self.drift.input_dim(), dh + 2 + feat),
            ("drift output", self.drift.output_dim(), dh),
            ("jump input", self.jump.input_dim(), jump_in),
            ("jump output", self.jump.output_dim(), dh),
            ("readout input", self.readout.input_dim(), dh),
            ("readout output", self.readout.output_dim(), self.output_dim),
        ];
        for (what, got, expected) in checks {
            if got != expected {
                return Err(Error::Shape {
                    context: what.into(),
                    expected,
                    got,
                });
            }
        }
        match (&self.initial, &self.init_net) {
            (InitialRegime::Full, None) => Ok(()),
            (InitialRegime::Empty, Some(n)) if n.input_dim() == 1 && n.output_dim() == dh => Ok(()),
            (InitialRegime::Subset(i), Some(n)) if n.input_dim() == i.len() && n.output_dim() == dh => Ok(()),
            _ => Err(Error::InvalidConfig(
                "initial-state network does not match the initial regime".into(),
            )),
        }
    }

    fn path_features(&self, path: &ObservedPath) -> Result<Array2<f64>> {
        let dx = self.obs_dim;
        let n = path.n_obs();
        let width = self.feature_dim();
        let mut out = Array2::zeros((n, width));
        let mut last = Array1::<f64>::zeros(dx);
        for j in 0..dx {
            if path.masks[[0, j]] {
                last[j] = path.obs_values[[0, j]];
            }
        }
        if !self.config.use_signature {
            for k in 0..n {
                if k > 0 {
                    for j in 0..dx {
                        if path.masks[[k, j]] {
                            last[j] = path.obs_values[[k, j]];
                        }
                    }
                }
                out.row_mut(k).slice_mut(s![..dx]).assign(&last);
            }
            self.write_masks(path, &mut out);
            return Ok(out);
        }
        let ta = usize::from(self.config.time_augment);
        let x0 = last.clone();
        let mut sig = TruncatedSignature::identity(dx + ta, self.config.sig_level)?;
        let sd = sig.len();
        let mut inc = vec![0.0; dx + ta];
        for k in 0..n {
            if k > 0 {
                if ta == 1 {
                    inc[0] = path.obs_times[k] - path.obs_times[k - 1];
                }
                for j in 0..dx {
                    let prev = last[j];
                    if path.masks[[k, j]] {
                        last[j] = path.obs_values[[k, j]];
                    }
                    inc[ta + j] = last[j] - prev;
                }
                sig.push_segment(&inc)?;
            }
            let mut row = out.row_mut(k);
            row.slice_mut(s![..sd])
                .assign(&ArrayView2::from_shape((1, sd), sig.coeffs()).expect("flat").row(0));
            row.slice_mut(s![sd..sd + dx]).assign(&x0);
        }
        self.write_masks(path, &mut out);
        Ok(out)
    }

    fn write_masks(&self, path: &ObservedPath, out: &mut Array2<f64>) {
        if self.config.mask_input {
            let off = out.ncols() - self.obs_dim;
            for k in 0..path.n_obs() {
                for j in 0..self.obs_dim {
                    out[[k, off + j]] = f64::from(u8::from(path.masks[[k, j]]));
                }
            }
        }
    }

    fn init_input(&self, path: &ObservedPath) -> Result<Vec<f64>> {
        let regime = path.initial_regime();
        if regime != self.initial {
            return Err(Error::InvalidPath(format!(
                "initial mask {regime:?} does not match the model's {:?}",
                self.initial
            )));
        }
        Ok(match &self.initial {
            InitialRegime::Full => vec![],
            InitialRegime::Empty => vec![0.0],
            InitialRegime::Subset(idx) => idx.iter().map(|&j| path.obs_values[[0, j]]).collect(),
        })
    }

    /// Prepares samples for integration on `times`, which must contain every
    /// observation time of every sample.
    pub fn prepare(&self, paths: &[&ObservedPath], ids: &[usize], times: &[f64]) -> Result<PreparedBatch> {
        if paths.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        if times.first().is_none_or(|t| t.abs() > crate::obs_path::TIME_TOL) {
            return Err(Error::InvalidPath("evaluation grid must start at 0".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidPath("evaluation grid not strictly increasing".into()));
        }
        let mut events_at = vec![Vec::new(); times.len()];
        let mut features = Vec::with_capacity(paths.len());
        let init_w = match &self.initial {
            InitialRegime::Full => 0,
            InitialRegime::Empty => 1,
            InitialRegime::Subset(i) => i.len(),
        };
        let mut init_input = Array2::zeros((paths.len(), init_w));
        let mut n_events = 0;
        for (row, path) in paths.iter().enumerate() {
            if path.dim != self.obs_dim {
                return Err(Error::Shape {
                    context: "path dimension".into(),
                    expected: self.obs_dim,
                    got: path.dim,
                });
            }
            if path.n_obs() == 0 || path.obs_times[0].abs() > crate::obs_path::TIME_TOL {
                return Err(Error::InvalidPath(format!(
                    "sample {} has no observation at t = 0",
                    ids[row]
                )));
            }
            for (k, &t) in path.obs_times.iter().enumerate().skip(1) {
                let j = grid_index(times, t).ok_or_else(|| {
                    Error::InvalidPath(format!(
                        "observation time {t} of sample {} is not on the evaluation grid",
                        ids[row]
                    ))
                })?;
                events_at[j].push((row, k));
                n_events += 1;
            }
            features.push(self.path_features(path)?);
            let x = self.init_input(path)?;
            init_input.row_mut(row).assign(&Array1::from(x));
        }
        for ev in &mut events_at {
            ev.sort_unstable();
        }
        Ok(PreparedBatch {
            times: times.to_vec(),
            ids: ids.to_vec(),
            events_at,
            features,
            init_input,
            n_events,
        })
    }

    fn substeps(&self, dt: f64) -> usize {
        match self.config.ode_step {
            None => 1,
            Some(h) => ((dt / h) - 1e-9).ceil().max(1.0) as usize,
        }
    }

    fn check_finite(&self, h: &Array2<f64>, t: f64, ids: &[usize]) -> Result<()> {
        for (r, row) in h.rows().into_iter().enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteLatent { t, sample: ids[r] });
            }
        }
        Ok(())
    }

    /// Integrates the whole batch. With `record_tape` the run can be fed to
    /// [`NjOdeModel::backward_batch`]; with `record_grid` the latent state at
    /// every grid time is kept.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        batch: &PreparedBatch,
        mode: Mode,
        record_tape: bool,
        record_grid: bool,
        rng: &mut R,
    ) -> Result<BatchRun> {
        let b = batch.len();
        let dh = self.latent_dim();
        let fd = self.feature_dim();
        let rec = self.config.recurrent_jump;
        let times = &batch.times;

        let mut cur_feat = Array2::zeros((b, fd));
        for (r, f) in batch.features.iter().enumerate() {
            cur_feat.row_mut(r).assign(&f.row(0));
        }
        let mut tau = Array1::<f64>::zeros(b);

        let (mut h, init_tape) = match &self.init_net {
            None => {
                let off = usize::from(rec) * dh;
                let mut inp = Array2::zeros((b, off + 1 + fd));
                inp.slice_mut(s![.., off + 1..]).assign(&cur_feat);
                self.jump.forward(inp.view(), mode, rng)?
            }
            Some(net) => net.forward(batch.init_input.view(), mode, rng)?,
        };
        self.check_finite(&h, 0.0, &batch.ids)?;

        let mut h_grid = record_grid.then(|| Array3::zeros((times.len(), b, dh)));
        if let Some(g) = h_grid.as_mut() {
            g.index_axis_mut(Axis(0), 0).assign(&h);
        }
        let ne = batch.n_events;
        let mut h_minus = Array2::zeros((ne, dh));
        let mut h_post = Array2::zeros((ne, dh));
        let mut drift_tapes = Vec::with_capacity(if record_tape { times.len() } else { 0 });
        let mut jump_tapes = Vec::with_capacity(if record_tape { times.len() } else { 0 });
        if record_tape {
            jump_tapes.push(None);
        }
        let mut e = 0;
        let mut inp = Array2::zeros((b, dh + 2 + fd));
        for j in 0..times.len() - 1 {
            let dt = times[j + 1] - times[j];
            let n_sub = self.substeps(dt);
            let step = dt / n_sub as f64;
            let mut tapes = Vec::with_capacity(if record_tape { n_sub } else { 0 });
            inp.slice_mut(s![.., dh + 2..]).assign(&cur_feat);
            inp.column_mut(dh).assign(&tau);
            for sub in 0..n_sub {
                let t = times[j] + sub as f64 * step;
                inp.slice_mut(s![.., ..dh]).assign(&h);
                inp.column_mut(dh + 1).assign(&tau.mapv(|x| t - x));
                let (out, tape) = self.drift.forward(inp.view(), mode, rng)?;
                h.scaled_add(step, &out);
                if record_tape {
                    tapes.push((step, tape));
                }
            }
            let t_next = times[j + 1];
            self.check_finite(&h, t_next, &batch.ids)?;
            if record_tape {
                drift_tapes.push(tapes);
            }

            let ev = &batch.events_at[j + 1];
            if ev.is_empty() {
                if record_tape {
                    jump_tapes.push(None);
                }
            } else {
                let rows: Vec<usize> = ev.iter().map(|&(r, _)| r).collect();
                let hm = h.select(Axis(0), &rows);
                let off = usize::from(rec) * dh;
                let mut jinp = Array2::zeros((rows.len(), off + 1 + fd));
                if rec {
                    jinp.slice_mut(s![.., ..dh]).assign(&hm);
                }
                jinp.column_mut(off).fill(t_next);
                for (i, &(r, k)) in ev.iter().enumerate() {
                    let f = batch.features[r].row(k);
                    jinp.slice_mut(s![i, off + 1..]).assign(&f);
                    cur_feat.row_mut(r).assign(&f);
                    tau[r] = t_next;
                }
                let (hp, tape) = self.jump.forward(jinp.view(), mode, rng)?;
                for (i, &r) in rows.iter().enumerate() {
                    h.row_mut(r).assign(&hp.row(i));
                }
                h_minus.slice_mut(s![e..e + rows.len(), ..]).assign(&hm);
                h_post.slice_mut(s![e..e + rows.len(), ..]).assign(&hp);
                e += rows.len();
                self.check_finite(&h, t_next, &batch.ids)?;
                if record_tape {
                    jump_tapes.push(Some(tape));
                }
            }
            if let Some(g) = h_grid.as_mut() {
                g.index_axis_mut(Axis(0), j + 1).assign(&h);
            }
        }

        let (y_minus, rm_tape) = self.readout.forward(h_minus.view(), mode, rng)?;
        let (y_post, rp_tape) = self.readout.forward(h_post.view(), mode, rng)?;
        let tape = record_tape.then(|| BatchTape {
            init: init_tape,
            drift: drift_tapes,
            jump: jump_tapes,
            readout_minus: Some(rm_tape),
            readout_post: Some(rp_tape),
        });
        Ok(BatchRun {
            y_minus,
            y_post,
            h_minus,
            h_grid,
            tape,
        })
    }

    /// Reverse pass given loss gradients with respect to the outputs before
    /// and after every jump, in event order.
    pub fn backward_batch(
        &self,
        batch: &PreparedBatch,
        run: &BatchRun,
        dy_minus: ArrayView2<'_, f64>,
        dy_post: ArrayView2<'_, f64>,
    ) -> Result<ModelGrads> {
        let tape = run
            .tape
            .as_ref()
            .ok_or_else(|| Error::StaleTape("forward pass was run without a tape".into()))?;
        self.backward_tape(batch, tape, dy_minus, dy_post)
    }

    fn backward_tape(
        &self,
        batch: &PreparedBatch,
        tape: &BatchTape,
        dy_minus: ArrayView2<'_, f64>,
        dy_post: ArrayView2<'_, f64>,
    ) -> Result<ModelGrads> {
        if dy_minus.nrows() != batch.n_events || dy_post.nrows() != batch.n_events {
            return Err(Error::Shape {
                context: "loss gradients per observation".into(),
                expected: batch.n_events,
                got: dy_minus.nrows().min(dy_post.nrows()),
            });
        }
        let mut grads = ModelGrads::zeros_like(self);
        let dh = self.latent_dim();
        let rec = self.config.recurrent_jump;
        let ne = batch.n_events;
        let (da_minus, da_post) = if ne > 0 {
            (
                self.readout.backward(
                    tape.readout_minus.as_ref().expect("recorded"),
                    dy_minus,
                    &mut grads.readout,
                )?,
                self.readout.backward(
                    tape.readout_post.as_ref().expect("recorded"),
                    dy_post,
                    &mut grads.readout,
                )?,
            )
        } else {
            (Array2::zeros((0, dh)), Array2::zeros((0, dh)))
        };

        let times = &batch.times;
        let mut a = Array2::<f64>::zeros((batch.len(), dh));
        let mut e = ne;
        for j in (0..times.len() - 1).rev() {
            let ev = &batch.events_at[j + 1];
            if !ev.is_empty() {
                let n = ev.len();
                e -= n;
                let mut up = Array2::zeros((n, dh));
                for (i, &(r, _)) in ev.iter().enumerate() {
                    let mut row = up.row_mut(i);
                    row.assign(&a.row(r));
                    row += &da_post.row(e + i);
                }
                let jt = tape.jump[j + 1].as_ref().expect("recorded");
                let din = self.jump.backward(jt, up.view(), &mut grads.jump)?;
                for (i, &(r, _)) in ev.iter().enumerate() {
                    let mut row = a.row_mut(r);
                    row.assign(&da_minus.row(e + i));
                    if rec {
                        row += &din.slice(s![i, ..dh]);
                    }
                }
            }
            for (step, t) in tape.drift[j].iter().rev() {
                let up = &a * *step;
                let din = self.drift.backward(t, up.view(), &mut grads.drift)?;
                a += &din.slice(s![.., ..dh]);
            }
        }
        match (&self.init_net, grads.init_net.as_mut()) {
            (Some(net), Some(g)) => {
                net.backward(&tape.init, a.view(), g)?;
            }
            _ => {
                self.jump.backward(&tape.init, a.view(), &mut grads.jump)?;
            }
        }
        Ok(grads)
    }

    /// Eval-mode outputs `(times, d_Y)` of every path on a common grid,
    /// integrated `batch_size` samples at a time.
    pub fn predict_grid(
        &self,
        paths: &[&ObservedPath],
        times: &[f64],
        batch_size: usize,
    ) -> Result<Vec<Array2<f64>>> {
        let mut out = Vec::with_capacity(paths.len());
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        for (c, chunk) in paths.chunks(batch_size.max(1)).enumerate() {
            let ids: Vec<usize> = (0..chunk.len()).map(|i| c * batch_size.max(1) + i).collect();
            let batch = self.prepare(chunk, &ids, times)?;
            let run = self.forward_batch(&batch, Mode::Eval, false, true, &mut rng)?;
            let hg = run.h_grid.expect("grid recorded");
            let (nt, nb, dh) = hg.dim();
            let flat = hg.into_shape_with_order((nt * nb, dh)).expect("contiguous");
            let y = self.readout.predict(flat.view())?;
            let y = y.into_shape_with_order((nt, nb, self.output_dim)).expect("contiguous");
            for r in 0..nb {
                out.push(y.index_axis(Axis(1), r).to_owned());
            }
        }
        Ok(out)
    }

    /// Runs one sample on `eval_times` (which must contain its observation
    /// times) and returns the full latent trajectory.
    pub fn forward_path<R: Rng + ?Sized>(
        &self,
        path: &ObservedPath,
        eval_times: &[f64],
        mode: Mode,
        rng: &mut R,
    ) -> Result<LatentTrajectory> {
        self.forward_path_impl(path, eval_times, mode, false, rng)
    }

    /// As [`NjOdeModel::forward_path`], keeping the tape for
    /// [`NjOdeModel::backward_path`].
    pub fn forward_path_taped<R: Rng + ?Sized>(
        &self,
        path: &ObservedPath,
        eval_times: &[f64],
        mode: Mode,
        rng: &mut R,
    ) -> Result<LatentTrajectory> {
        self.forward_path_impl(path, eval_times, mode, true, rng)
    }

    fn forward_path_impl<R: Rng + ?Sized>(
        &self,
        path: &ObservedPath,
        eval_times: &[f64],
        mode: Mode,
        record_tape: bool,
        rng: &mut R,
    ) -> Result<LatentTrajectory> {
        if let Some(&t) = eval_times.last() {
            if t > path.horizon + crate::obs_path::TIME_TOL {
                return Err(Error::Domain {
                    t,
                    horizon: path.horizon,
                });
            }
        }
        let batch = self.prepare(&[path], &[0], eval_times)?;
        let run = self.forward_batch(&batch, mode, record_tape, true, rng)?;
        let hg = run.h_grid.as_ref().expect("grid recorded");
        let h = hg.index_axis(Axis(1), 0).to_owned();
        let y = self.readout.predict(h.view())?;
        let jumps = batch
            .events()
            .enumerate()
            .map(|(i, (_, k))| {
                let time = path.obs_times[k];
                JumpRecord {
                    index: grid_index(eval_times, time).expect("checked in prepare"),
                    time,
                    h_minus: run.h_minus.row(i).to_owned(),
                    y_minus: run.y_minus.row(i).to_owned(),
                }
            })
            .collect();
        // Mode::Train outputs at the jumps may carry dropout; keep the taped ones.
        let mut y = y;
        if mode == Mode::Train {
            for (i, (_, k)) in batch.events().enumerate() {
                let idx = grid_index(eval_times, path.obs_times[k]).expect("checked");
                y.row_mut(idx).assign(&run.y_post.row(i));
            }
        }
        Ok(LatentTrajectory {
            times: eval_times.to_vec(),
            h,
            y,
            jumps,
            tape: run.tape,
        })
    }

    /// Gradients of a per-sample loss given its derivatives with respect to
    /// the output before (`dy_minus`) and after (`dy_post`) every jump, one
    /// row per entry of `traj.jumps`.
    pub fn backward_path(
        &self,
        path: &ObservedPath,
        traj: &LatentTrajectory,
        dy_minus: ArrayView2<'_, f64>,
        dy_post: ArrayView2<'_, f64>,
    ) -> Result<ModelGrads> {
        let tape = traj
            .tape
            .as_ref()
            .ok_or_else(|| Error::StaleTape("trajectory was recorded without a tape".into()))?;
        let batch = self.prepare(&[path], &[0], &traj.times)?;
        self.backward_tape(&batch, tape, dy_minus, dy_post)
    }
}
