//! Dense layers, set encoders, reverse-mode gradients and the optimizer.

pub mod adam;
pub mod checkpoint;
pub mod matrix;
pub mod params;
pub mod tape;

pub use adam::{sgd_adam_step, Adam};
pub use checkpoint::{Checkpoint, NamedParams};
pub use matrix::Matrix;
pub use params::{clip_global_norm, dense_forward, Activation, Gradient, LayerSpec, NetParams};
pub use tape::{set_encode, BlockId, Tape, Var};
