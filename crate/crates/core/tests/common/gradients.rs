use ndarray::Array2;
use pdnjode::loss::{batch_loss_and_grads, LossConfig, LossVariant};
use pdnjode::neural::{Activation, Mode, ParamBlocks, ParamBlocksMut};
use pdnjode::njode::{ModelConfig, ModelVariant, NjOdeModel};
use pdnjode::ObservedPath;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central finite differences of `loss` with respect to every parameter.
pub fn finite_differences<P, F>(params: &P, h: f64, mut loss: F) -> Vec<f64>
where
    P: ParamBlocksMut + Clone,
    F: FnMut(&P) -> f64,
{
    let sizes: Vec<usize> = params.clone().blocks_mut().iter().map(|(_, b)| b.len()).collect();
    let mut out = Vec::new();
    for (bi, &n) in sizes.iter().enumerate() {
        for k in 0..n {
            let mut plus = params.clone();
            plus.blocks_mut()[bi].1[k] += h;
            let mut minus = params.clone();
            minus.blocks_mut()[bi].1[k] -= h;
            out.push((loss(&plus) - loss(&minus)) / (2.0 * h));
        }
    }
    out
}

pub fn flatten<G: ParamBlocks + ?Sized>(g: &G) -> Vec<f64> {
    g.blocks().iter().flat_map(|(_, b)| b.iter().copied()).collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// A random path on the grid `0, step, ..., n_steps * step` whose
/// observation masks at `t_0` follow `initial` and are non-empty later.
pub fn random_path<R: Rng>(rng: &mut R, dim: usize, n_steps: usize, step: f64, initial: &[bool]) -> ObservedPath {
    let grid: Vec<f64> = (0..=n_steps).map(|i| i as f64 * step).collect();
    let mut values = Array2::zeros((n_steps + 1, dim));
    for i in 1..=n_steps {
        for j in 0..dim {
            values[[i, j]] = values[[i - 1, j]] + rng.random_range(-0.5..0.5);
        }
    }
    for j in 0..dim {
        let x0 = rng.random_range(-1.0..1.0);
        values.column_mut(j).mapv_inplace(|x| x + x0);
    }
    let mut idx = vec![0];
    for i in 1..=n_steps {
        if rng.random::<f64>() < 0.35 || (i == n_steps && idx.len() == 1) {
            idx.push(i);
        }
    }
    let mut masks = Array2::from_elem((idx.len(), dim), false);
    for (j, &m) in initial.iter().enumerate() {
        masks[[0, j]] = m;
    }
    for k in 1..idx.len() {
        let keep = rng.random_range(0..dim);
        for j in 0..dim {
            masks[[k, j]] = j == keep || rng.random::<f64>() < 0.5;
        }
    }
    ObservedPath::from_grid(n_steps as f64 * step, grid, values, &idx, masks)
}

/// A small random model together with a batch it can run on.
pub fn toy_instance(seed: u64) -> (NjOdeModel, Vec<ObservedPath>, LossConfig, Mode) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(1..=3);
    let variant = [
        ModelVariant::Njode,
        ModelVariant::NjodeSig,
        ModelVariant::NjodeRnn,
        ModelVariant::PdNjode,
    ][rng.random_range(0..4)];
    let train = rng.random::<f64>() < 0.3;
    let cfg = ModelConfig {
        latent_dim: rng.random_range(2..=4),
        hidden: (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=5)).collect(),
        linear_readout: rng.random(),
        activation: Activation::Tanh,
        dropout: if train { 0.2 } else { 0.0 },
        sig_level: rng.random_range(1..=3),
        time_augment: rng.random(),
        ode_step: rng.random::<bool>().then_some(0.03),
        mask_input: rng.random(),
        ..ModelConfig::default()
    }
    .with_variant(variant);
    let initial: Vec<bool> = match rng.random_range(0..3) {
        0 => vec![true; dim],
        1 => vec![false; dim],
        _ => (0..dim).map(|j| j == 0).collect(),
    };
    let n_paths = rng.random_range(1..=3);
    let paths: Vec<ObservedPath> = (0..n_paths).map(|_| random_path(&mut rng, dim, 8, 0.05, &initial)).collect();
    let model = NjOdeModel::new(cfg, dim, paths[0].initial_regime(), &mut rng).unwrap();
    let loss = LossConfig {
        variant: if rng.random() { LossVariant::Equivalent } else { LossVariant::Original },
    };
    (model, paths, loss, if train { Mode::Train } else { Mode::Eval })
}

/// Relative error of the model gradient against central differences.
pub fn model_gradient_error(seed: u64) -> f64 {
    let (model, paths, loss, mode) = toy_instance(seed);
    let refs: Vec<&ObservedPath> = paths.iter().collect();
    let ids: Vec<usize> = (0..refs.len()).collect();
    let eval = |m: &NjOdeModel| {
        batch_loss_and_grads(m, &refs, &ids, &loss, mode, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    };
    let (_, grads) = eval(&model);
    let fd = finite_differences(&model, 1e-6, |m| eval(m).0);
    relative_error(&flatten(&grads), &fd)
}

