//! Contrastive pre-training on drifting data streams with a causal
//! intervention over the drift-adaptation window.
//!
//! The crate is organized bottom-up:
//!
//! - [`numkern`]: dense `f64` tensors, a reverse-mode tape, seeded streams.
//! - [`stream`]: drifting Gaussian-mixture streams, augmentation, OOD draws,
//!   IDX ingestion and the tensor file format.
//! - [`model`]: MLP encoder, query head and the EMA teacher.
//! - [`rcp`]: the intervention module, InfoNCE and the training loop.
//! - [`eval`]: linear probing, angular feature geometry and OOD metrics.
//! - [`cli`]: config files, run manifests and the `driftlab` subcommands.

pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod numkern;
pub mod rcp;
pub mod stream;

pub use error::{Error, Result};
pub use numkern::{Graph, Rng, Tensor, Var};
