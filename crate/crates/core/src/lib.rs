//! Two-stream decoupled encoder-decoder for vision-language pretraining.
//!
//! The object and sentence encoders are shared; a cross-modal encoder serves
//! the understanding objectives (masked language modeling, masked object
//! classification) and a causal cross-modal decoder serves masked sentence
//! generation. Image-sentence matching reads the single-modality encoders.
//! Training can run single-pass or with one of three two-pass scheduled
//! sampling schemes that replace `[MASK]` inputs with tokens sampled from the
//! first pass.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod nn;
pub mod rng;

pub use error::{Result, TdenError};
pub mod model;

pub use model::{EncodedPair, TdenModel};
pub mod proxy;
pub mod sampling;
pub mod train;
pub mod downstream;
pub mod gradsuite;
pub mod config;
pub mod ablation;
pub mod cli;
