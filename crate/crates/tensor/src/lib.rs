//! Dense `f64` tensors, a recording tape for reverse-mode automatic
//! differentiation, the Adam optimizer and a binary parameter checkpoint
//! format. Sized for desk-scale models trained on one CPU thread.

mod adam;
mod checkpoint;
mod error;
mod params;
mod tape;
mod tensor;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use error::{Result, TensorError};
pub use params::{ParamId, ParamSet};
pub use tape::{mix64, sigmoid, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
