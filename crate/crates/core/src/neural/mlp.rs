use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamBlocks, ParamBlocksMut};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One affine layer, `y = x W + b` with `W` of shape `(in, out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let u = Uniform::new_inclusive(-a, a).expect("finite bounds");
        Dense {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || u.sample(rng)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

/// Feed-forward network: hidden layers share one activation and dropout
/// rate, the last layer is affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
    dropout: f64,
    #[serde(skip)]
    version: u64,
}

/// Intermediates recorded by a training forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    /// Input seen by every layer (after dropout for hidden layers).
    inputs: Vec<Array2<f64>>,
    /// Per hidden layer: activation derivative times dropout scaling.
    gates: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.inputs[0].nrows()
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.inputs[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weight: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            weight: net.layers.iter().map(|l| Array2::zeros(l.weight.dim())).collect(),
            bias: net.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl Mlp {
    /// Builds `input -> hidden... -> output`. An empty `hidden` gives a
    /// purely affine map.
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        let layers = widths
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Mlp {
            layers,
            activation,
            dropout,
            version: 0,
        }
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation, dropout: f64) -> Result<Self> {
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::Shape {
                    context: format!("layer {} -> {}", i, i + 1),
                    expected: w[0].fan_out(),
                    got: w[1].fan_in(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::Shape {
                    context: "bias".into(),
                    expected: l.fan_out(),
                    got: l.bias.len(),
                });
            }
        }
        Ok(Mlp {
            layers,
            activation,
            dropout,
            version: 0,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn set_dropout(&mut self, p: f64) {
        self.dropout = p;
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape {
                context: "mlp input".into(),
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Forward pass on a batch (one sample per row) without recording a tape.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Forward pass recording the intermediates needed by [`Mlp::backward`].
    /// In [`Mode::Train`] hidden activations go through inverted dropout.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<'_, f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let drop = mode == Mode::Train && self.dropout > 0.0;
        let keep = 1.0 - self.dropout;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut gates = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            inputs.push(h);
            if i < last {
                let act = self.activation;
                let mut gate = Array2::zeros(z.dim());
                if drop {
                    let scale = 1.0 / keep;
                    Zip::from(&mut z).and(&mut gate).for_each(|z, g| {
                        let a = act.apply(*z);
                        if rng.random::<f64>() < keep {
                            *g = act.grad_from_output(a) * scale;
                            *z = a * scale;
                        } else {
                            *g = 0.0;
                            *z = 0.0;
                        }
                    });
                } else {
                    Zip::from(&mut z).and(&mut gate).for_each(|z, g| {
                        let a = act.apply(*z);
                        *g = act.grad_from_output(a);
                        *z = a;
                    });
                }
                gates.push(gate);
            }
            h = z;
        }
        Ok((
            h,
            Tape {
                version: self.version,
                inputs,
                gates,
            },
        ))
    }

    /// Reverse pass: accumulates `d(out . upstream)/dparams` into `grads`
    /// and returns the gradient with respect to the input batch.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: ArrayView2<'_, f64>,
        grads: &mut MlpGrads,
    ) -> Result<Array2<f64>> {
        if tape.version != self.version || tape.inputs.len() != self.layers.len() {
            return Err(Error::StaleTape(format!(
                "tape version {} / {} layers, network version {} / {} layers",
                tape.version,
                tape.inputs.len(),
                self.version,
                self.layers.len()
            )));
        }
        if upstream.dim() != (tape.batch(), self.output_dim()) {
            return Err(Error::Shape {
                context: "mlp upstream gradient".into(),
                expected: self.output_dim(),
                got: upstream.ncols(),
            });
        }
        let mut delta = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &tape.inputs[i];
            ndarray::linalg::general_mat_mul(1.0, &input.t(), &delta, 1.0, &mut grads.weight[i]);
            grads.bias[i] += &delta.sum_axis(Axis(0));
            let mut back = delta.dot(&layer.weight.t());
            if i > 0 {
                back *= &tape.gates[i - 1];
            }
            delta = back;
        }
        Ok(delta)
    }
}

impl ParamBlocks for Mlp {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.as_slice().expect("standard layout")));
            out.push((format!("layer{i}.bias"), l.bias.as_slice().expect("standard layout")));
        }
        out
    }
}

impl ParamBlocksMut for Mlp {
    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.version += 1;
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((
                format!("layer{i}.weight"),
                l.weight.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("layer{i}.bias"),
                l.bias.as_slice_mut().expect("standard layout"),
            ));
        }
        out
    }
}

impl ParamBlocks for MlpGrads {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.weight.len());
        for (i, (w, b)) in self.weight.iter().zip(&self.bias).enumerate() {
            out.push((format!("layer{i}.weight"), w.as_slice().expect("standard layout")));
            out.push((format!("layer{i}.bias"), b.as_slice().expect("standard layout")));
        }
        out
    }
}

impl ParamBlocksMut for MlpGrads {
    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(2 * self.weight.len());
        for (i, (w, b)) in self.weight.iter_mut().zip(self.bias.iter_mut()).enumerate() {
            out.push((format!("layer{i}.weight"), w.as_slice_mut().expect("standard layout")));
            out.push((format!("layer{i}.bias"), b.as_slice_mut().expect("standard layout")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn identity_net(d: usize) -> Mlp {
        let layer = Dense {
            weight: Array2::eye(d),
            bias: Array1::zeros(d),
        };
        Mlp::from_layers(vec![layer], Activation::Tanh, 0.0).unwrap()
    }

    #[test]
    fn affine_identity() {
        let net = identity_net(3);
        let x = array![[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]];
        let (y, tape) = net.forward(x.view(), Mode::Train, &mut rng(0)).unwrap();
        assert_eq!(y, x);

        let up = array![[0.3, 0.1, -1.0], [2.0, 0.0, 1.0]];
        let mut g = MlpGrads::zeros_like(&net);
        let dx = net.backward(&tape, up.view(), &mut g).unwrap();
        assert_eq!(dx, up);
        assert_eq!(g.bias[0], up.sum_axis(Axis(0)));
    }

    #[test]
    fn tanh_unit_at_zero() {
        let net = Mlp::from_layers(
            vec![
                Dense {
                    weight: array![[1.0]],
                    bias: array![0.0],
                },
                Dense {
                    weight: array![[1.0]],
                    bias: array![0.0],
                },
            ],
            Activation::Tanh,
            0.0,
        )
        .unwrap();
        assert_eq!(net.predict(array![[0.0]].view()).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn eval_mode_ignores_rng() {
        let net = Mlp::new(4, &[8, 8], 2, Activation::Tanh, 0.3, &mut rng(1));
        let x = array![[0.1, 0.2, -0.3, 0.4]];
        let (a, _) = net.forward(x.view(), Mode::Eval, &mut rng(2)).unwrap();
        let (b, _) = net.forward(x.view(), Mode::Eval, &mut rng(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, net.predict(x.view()).unwrap());
    }

    #[test]
    fn shape_errors() {
        let net = Mlp::new(3, &[4], 1, Activation::Relu, 0.0, &mut rng(0));
        assert!(matches!(
            net.predict(array![[1.0, 2.0]].view()),
            Err(Error::Shape { .. })
        ));
        let (_, tape) = net
            .forward(array![[1.0, 2.0, 3.0]].view(), Mode::Eval, &mut rng(0))
            .unwrap();
        let mut g = MlpGrads::zeros_like(&net);
        assert!(net.backward(&tape, array![[1.0, 2.0]].view(), &mut g).is_err());
    }

    #[test]
    fn tape_goes_stale_after_update() {
        let mut net = Mlp::new(2, &[3], 1, Activation::Tanh, 0.0, &mut rng(0));
        let (_, tape) = net
            .forward(array![[1.0, 2.0]].view(), Mode::Eval, &mut rng(0))
            .unwrap();
        net.layers_mut()[0].bias[0] += 1.0;
        let mut g = MlpGrads::zeros_like(&net);
        assert!(matches!(
            net.backward(&tape, array![[1.0]].view(), &mut g),
            Err(Error::StaleTape(_))
        ));
    }

    fn finite_difference_check(act: Activation, seed: u64) {
        let mut r = rng(seed);
        let mut net = Mlp::new(3, &[5, 4], 2, act, 0.0, &mut r);
        let x = Array2::from_shape_simple_fn((4, 3), || r.random_range(-1.0..1.0));
        let up = Array2::from_shape_simple_fn((4, 2), || r.random_range(-1.0..1.0));
        let objective = |net: &Mlp, x: &Array2<f64>| (net.predict(x.view()).unwrap() * &up).sum();

        let (_, tape) = net.forward(x.view(), Mode::Eval, &mut r).unwrap();
        let mut g = MlpGrads::zeros_like(&net);
        let dx = net.backward(&tape, up.view(), &mut g).unwrap();

        let h = 1e-5;
        let analytic: Vec<f64> = g.blocks().into_iter().flat_map(|(_, b)| b.to_vec()).collect();
        let mut k = 0;
        let n_blocks = net.blocks().len();
        for b in 0..n_blocks {
            let len = net.blocks()[b].1.len();
            for i in 0..len {
                let orig = net.blocks()[b].1[i];
                net.blocks_mut()[b].1[i] = orig + h;
                let fp = objective(&net, &x);
                net.blocks_mut()[b].1[i] = orig - h;
                let fm = objective(&net, &x);
                net.blocks_mut()[b].1[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-3);
                assert!(err < 1e-6, "param {b}/{i}: fd {fd} vs {}", analytic[k]);
                k += 1;
            }
        }
        for r_ in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[r_, c]] += h;
                let mut xm = x.clone();
                xm[[r_, c]] -= h;
                let fd = (objective(&net, &xp) - objective(&net, &xm)) / (2.0 * h);
                assert!((fd - dx[[r_, c]]).abs() < 1e-7 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            finite_difference_check(Activation::Tanh, seed);
        }
        // ReLU kinks are hit with probability zero for random inputs.
        finite_difference_check(Activation::Relu, 11);
    }

    #[test]
    fn dropout_preserves_expectation_for_linear_readout() {
        // One hidden ReLU layer fed with positive inputs stays in its linear region.
        let net = Mlp::from_layers(
            vec![
                Dense {
                    weight: array![[1.0, 0.5], [0.25, 1.0]],
                    bias: array![0.1, 0.2],
                },
                Dense {
                    weight: array![[1.0], [2.0]],
                    bias: array![0.0],
                },
            ],
            Activation::Relu,
            0.1,
        )
        .unwrap();
        let x = Array2::from_shape_fn((100_000, 2), |(_, j)| [0.5, 1.5][j]);
        let (train, _) = net.forward(x.view(), Mode::Train, &mut rng(9)).unwrap();
        let eval = net.predict(x.slice(ndarray::s![0..1, ..])).unwrap()[[0, 0]];
        let mean = train.mean().unwrap();
        assert!((mean - eval).abs() / eval < 0.01, "{mean} vs {eval}");
    }
}
