//! Feed-forward networks with hand-written reverse-mode gradients and Adam.

mod adam;
mod mlp;

pub use adam::{clip_global_norm, global_norm, AdamConfig, AdamState};
pub use mlp::{Activation, Dense, Mlp, MlpGrads, Mode, Tape};

/// Named, flat views of a parameter (or gradient) collection.
pub trait ParamBlocks {
    fn blocks(&self) -> Vec<(String, &[f64])>;
}

pub trait ParamBlocksMut {
    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])>;
}
