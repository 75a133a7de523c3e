//! Text classification with dynamic-routing aggregation.
//!
//! The pipeline is embedding lookup, a bidirectional LSTM encoder, an
//! aggregation layer that turns the variable-length encoder output into a
//! fixed-size vector, and an MLP softmax classifier. The aggregation layer
//! is one of max pooling, average pooling, self-attention, or capsule-style
//! dynamic routing (standard or reversed), optionally applied
//! hierarchically over sentences and then documents.
//!
//! Everything differentiable runs on the small tape in [`autodiff`].

pub mod aggregation;
pub mod autodiff;
pub mod config;
pub mod data;
mod error;
pub mod exec;
pub mod harness;
pub mod layers;
pub mod model;
pub mod objective;
pub mod params;
pub mod viz;

pub use error::{Error, Result};
