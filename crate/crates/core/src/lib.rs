//! Detect, explain and correct spurious attributions in time-series anomaly
//! classifiers.
//!
//! The pipeline: train a fully-convolutional classifier ([`model`]), explain
//! each prediction with a class activation map, cluster the anomaly-related
//! sequences by a blend of DTW distance and attribution cosine distance
//! ([`similarity`], [`clustering`]), let a human (or [`oracle`]) mark clusters
//! as correct or spurious and propagate those marks over the cluster graph
//! ([`spuriousness`]), then fine-tune on noise-masked data ([`enhancement`]).

// `!(x > y)` is how NaN gets rejected, and the numerical loops index several
// parallel arrays by one counter.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod clustering;
pub mod data;
pub mod enhancement;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod similarity;
pub mod spuriousness;

pub use error::{Error, Result};
