//! Joint learning of causal representations and instantaneous causal graphs
//! from temporal sequences with known intervention targets.
//!
//! The crate is organized bottom-up:
//!
//! - [`diff`]: reverse-mode differentiation on a flat tape, plus the
//!   relaxed categorical sampler; [`opt`] holds Adam and the LR schedules.
//! - [`scm`]: the ground-truth data process — causal graphs, mechanism
//!   networks, ancestral simulation with perfect interventions.
//! - [`flows`]: invertible transforms with exact log-determinants, used both
//!   as the fixed entangler and as the trainable encoder.
//! - [`model`]: latent-to-group assignment, per-latent prior networks with
//!   graph/intervention masking, and the full likelihood.
//! - [`graphlearn`]: the two differentiable graph learners and hard-graph
//!   extraction; [`regularize`] the mutual-information and target-classifier
//!   terms.
//! - [`train`]: the optimization loop, checkpoints and history.
//! - [`discovery`]: ENCO-style discovery on fixed group values, used for
//!   post-hoc graph fitting and temporal pruning.
//! - [`eval`]: R^2 disentanglement scores, structural Hamming distance and
//!   the two-variable identifiability check.
//!
//! All numerics are generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below pin the `f64` instantiation the CLI and experiments use.

pub mod diff;
pub mod error;
pub mod flows;
pub mod gradcheck;
pub mod opt;
pub mod rng;
pub mod scm;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

/// Element type of the reference (CLI) instantiation.
pub type Real = f64;
pub type Tensor64 = tensor::Tensor<Real>;
pub type Graph64 = diff::Graph<Real>;
pub type ParamSet64 = diff::ParamSet<Real>;
