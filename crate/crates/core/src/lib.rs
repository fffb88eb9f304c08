//! Few-shot abstractive opinion summarization.
//!
//! A review model is trained to predict each review of a product from the
//! other reviews of that product while conditioned on a handful of text
//! properties. A tiny plug-in network then learns to predict property values
//! from the input reviews alone, which switches the generator into producing
//! summaries after fine-tuning on a few annotated examples.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod diff;
pub mod error;
pub mod evaluation;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod plugin;
pub mod synth;
pub mod textproc;
pub mod training;

pub use error::{Error, Result};
