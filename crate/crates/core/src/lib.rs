//! Speech sentiment classification on top of frozen ASR-encoder features.
//!
//! The pipeline: PCM audio -> log-mel frames ([`frontend`]) -> frozen
//! encoder ([`encoder`]) -> sentiment decoder + softmax classifier
//! ([`model`]), trained with SpecAugment ([`augment`]) and evaluated by
//! weighted/unweighted accuracy ([`metrics`]) under leave-one-speaker-out
//! cross-validation ([`train`]). [`synthcorpus`] generates corpora with
//! planted class cues; [`visualize`] turns attention into word heatmaps.
// `!(x > 0.0)` is deliberate throughout: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod config;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthcorpus;
pub mod train;
mod util;
pub mod visualize;

pub use error::{Error, Result};
