//! Dense `f64` tensors, a reverse-mode differentiation tape, named parameter
//! storage with JSON checkpoints, and the Adam optimizer.

mod error;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use optim::{Adam, AdamConfig};
pub use params::{
    accumulate_grads, clip_global_norm, global_norm, Bindings, Checkpoint, NamedGrads, ParamStore,
    CHECKPOINT_VERSION,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
