use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamBlocks, ParamBlocksMut};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: ParamBlocks + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.blocks().iter().map(|(_, b)| b.len()).collect();
        AdamState {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One Adam update. Fails without touching anything if a gradient is not finite.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: ParamBlocksMut + ?Sized,
        G: ParamBlocks + ?Sized,
    {
        let gblocks = grads.blocks();
        for (name, g) in &gblocks {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        let mut pblocks = params.blocks_mut();
        if pblocks.len() != gblocks.len() || pblocks.len() != self.first.len() {
            return Err(Error::Shape {
                context: "adam parameter blocks".into(),
                expected: self.first.len(),
                got: pblocks.len(),
            });
        }
        for (i, ((name, p), (_, g))) in pblocks.iter().zip(&gblocks).enumerate() {
            if p.len() != g.len() || p.len() != self.first[i].len() {
                return Err(Error::Shape {
                    context: format!("adam block `{name}`"),
                    expected: self.first[i].len(),
                    got: g.len(),
                });
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (i, (_, p)) in pblocks.iter_mut().enumerate() {
            let g = gblocks[i].1;
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for k in 0..p.len() {
                let gk = g[k] + c.weight_decay * p[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m[k] / bias1;
                let vhat = v[k] / bias2;
                p[k] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm<G: ParamBlocks + ?Sized>(grads: &G) -> f64 {
    grads
        .blocks()
        .iter()
        .flat_map(|(_, b)| b.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint 2-norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<G: ParamBlocks + ParamBlocksMut + ?Sized>(grads: &mut G, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for (_, b) in grads.blocks_mut() {
            b.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
