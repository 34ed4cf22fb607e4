//! Meta-learned sample reweighting for classifiers trained on biased data.
//!
//! A small weighting network maps each training sample's classifier output
//! to a weight in `(0, 1)`. Its parameters are tuned so that one weighted SGD
//! step on the training batch lowers the loss on a small clean meta set.
//! Three weighting networks are provided: [`mwnet::Variant::LossNet`] (loss
//! only), [`mwnet::Variant::LogitNet`] (logits with a label embedding) and
//! [`mwnet::Variant::MetaInfoNet`] (logits through a stochastic bottleneck).

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval_metrics;
pub mod experiment;
pub mod gradcheck;
pub mod meta_train;
pub mod mwnet;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
