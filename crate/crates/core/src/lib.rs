//! Two-stream hierarchical similarity reasoning for image-text matching.
//!
//! Pipeline: region features and token ids are encoded into local and
//! global features ([`encoders`]); cross attention turns them into
//! vector-valued local similarities ([`attention`]); the image-to-text
//! similarities are refined by stacked gated graph reasoning ([`hsr`]);
//! the two streams are fused and scored ([`fusion`]). Training and recall
//! evaluation live in [`train`] and [`eval`], dataset files in [`data`].

pub mod attention;
pub mod config;
pub mod data;
pub mod encoders;
mod error;
pub mod eval;
pub mod fusion;
pub mod hsr;
pub mod kv;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, StreamMode};
pub use numerics::{ParamStore, Tape, Tensor, Var};
