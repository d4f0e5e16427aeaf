//! Minimal reverse-mode autodiff for small CNN classifiers.
//!
//! Ops are recorded at layer granularity on a [`Tape`]; parameters live in a
//! [`Model`] and are copied onto the tape as leaves for each forward pass.

pub mod checkpoint;
pub(crate) mod kernels;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use loss::{cross_entropy, kd_loss, tempered_softmax};
pub use model::{small_cnn, ForwardPass, LayerSpec, Mode, Model, Param};
pub use optim::{sgd_step, LrSchedule, OptimState};
pub use tape::{Tape, Var};
pub use tensor::{argmax, Tensor};
