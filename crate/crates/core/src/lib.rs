//! Two-view discriminant canonical correlation filter network.
//!
//! Filters are learned layer by layer from labeled image pairs by
//! accumulating patch moments over batches, solving a whitened
//! correlation problem, and reshaping the canonical vectors into
//! convolution kernels. Final responses are sign-hashed and encoded as
//! block-histogram self-information features.

pub mod classify;
pub mod config;
pub mod data;
pub mod dcca;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod network;
pub mod patches;
pub mod pipeline;
pub mod synth;
pub mod views;

pub use error::{Error, Result};
pub use exec::ExecSettings;
