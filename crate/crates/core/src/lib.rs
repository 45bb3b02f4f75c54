//! Causal latent next-token pretraining for point-cloud patch
//! sequences: patchification, space-filling-curve serialization, a
//! small reverse-mode tape, the causal transformer pipeline, and the
//! training/evaluation harness.

pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod model;
pub mod objective;
pub mod position;
pub mod rng;
pub mod serial;
pub mod tokenizer;
pub mod train;

pub use error::{CoreError, Result};
pub use geometry::{PatchSet, Point, PointCloud};
pub use serial::{OrderKind, SerializationOrder};
