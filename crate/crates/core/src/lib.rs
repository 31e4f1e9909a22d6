//! Ocean-colour foundation model pipeline.
//!
//! Masked-autoencoder pre-training of a small vision transformer on
//! multispectral ocean tiles, sparse-label pixel-regression fine-tuning,
//! an extremely randomized trees baseline, and a cross-validation and
//! inference evaluation harness.

pub mod error;
pub mod graph;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod par;
pub mod tensor;

pub mod tile;
pub mod io;
pub mod sampling;
pub mod synth;

pub mod mae;
pub mod finetune;
pub mod trees;
pub mod eval;

pub mod seeds;

pub use error::{Error, Result};
pub use tensor::Tensor;
