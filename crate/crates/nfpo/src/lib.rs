//! Normalizing-flow policy optimization.
//!
//! A from-scratch stack for training RealNVP policies under the PPO clipped
//! objective, next to a diagonal-Gaussian baseline. The crate is organized
//! bottom-up:
//!
//! - [`autodiff`]: dense tensors, a define-by-run reverse-mode tape and an
//!   adaptive-moment optimizer, generic over `f32` (training) and `f64`
//!   (verification).
//! - [`nets`]: the small MLPs used for scale/translation networks, the
//!   Gaussian mean and the value function.
//! - [`flow`]: state-conditioned affine coupling layers with the four scale
//!   normalization variants (`none`, `clip`, `tanh`, `no_s`), exact
//!   log-probability and temperature sampling.
//! - [`policy`]: one interface over flow and Gaussian policies.
//! - [`ppo`]: GAE, the clipped surrogate, adaptive learning rate and the
//!   epoch/minibatch update loop.
//! - [`envs`]: vectorized desk-scale environments (continuous-action
//!   gridworld, 2-D point reach).
//! - [`runner`]: rollout collection, the training loop, evaluation and
//!   checkpointing.
//! - [`telemetry`]: metrics rows, gradient-factor probes and mode-coverage
//!   analysis.
//! - [`verify`]: independent numeric oracles (finite differences, numerical
//!   Jacobians, quadrature, brute-force GAE) used by tests and `nfpo verify`.

// Dense kernels and finite-difference sweeps index on purpose.
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod flow;
pub mod nets;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod runner;
pub mod telemetry;
pub mod verify;

use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the attempted operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A tensor operation produced a non-finite value while finiteness
    /// checking is active (64-bit verification mode).
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    /// Misuse of the autodiff graph (non-scalar root, untracked root, ...).
    #[error("autodiff: {0}")]
    Graph(String),
    /// A configuration field violates its invariant.
    #[error("config: {field}: {message}")]
    Config { field: String, message: String },
    /// A layout map failed to parse.
    #[error("layout: row {row}, col {col}: {message}")]
    Layout {
        row: usize,
        col: usize,
        message: String,
    },
    /// A checkpoint file is malformed or incompatible.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    /// Checkpoint architecture does not match the requested reconstruction.
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
