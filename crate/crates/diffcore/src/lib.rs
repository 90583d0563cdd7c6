//! Reverse-mode differentiation over dense `f64` tensors, plus the handful of
//! layers, the AdamW optimizer and the `MRF1` checkpoint container needed to
//! train the motion tokenizers and the flow transformer on a CPU.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use layers::{Activation, Ctx, EncoderBlock, Layer, LayerSpec, Mode, Sequential};
pub use optim::{AdamW, LrSchedule};
pub use params::{Param, ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
