//! Dense-tensor math with reverse-mode automatic differentiation.
//!
//! Everything is generic over [`Real`], instantiated at `f32` for training
//! and `f64` for verification. The [`Tape`] records primitive operations as
//! they execute (define-by-run) and replays them in reverse to accumulate
//! gradients into a [`ParamStore`].

mod optim;
mod scalar;
mod tape;
mod tensor;

pub use optim::{AdamConfig, ParamId, ParamStore, StepOutcome};
pub use scalar::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
