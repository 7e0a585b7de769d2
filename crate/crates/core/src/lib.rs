//! Retrieval representation fusion for small transformer encoders.
//!
//! Retrieved embedding vectors are added to the classification-token row of
//! selected linear modules instead of being concatenated to the input. Two
//! learnable ranking schemes refine the retrievals before fusion:
//!
//! - a per-site reranker (softmax-weighted sum over the k hits), and
//! - a per-dimension ordered mask built from a relaxed categorical sample.
//!
//! A per-site mixture over `{no fusion, reranker, ordered mask}` is searched
//! with alternating train/validation updates and then discretized.
//!
//! Module map:
//!
//! | module | contents |
//! |---|---|
//! | [`autodiff`] | tape, differentiable ops, deterministic RNG, gradient checks |
//! | [`retriever`] | exact top-k store, binary persistence, query encoders |
//! | [`fusion`] | reranker and ordered-mask schemes, fused linear modules |
//! | [`params`] | named parameter storage |
//! | [`integrator`] | per-site candidate mixture, discretization |
//! | [`model`] | toy encoder, concatenation baseline, checkpoints |
//! | [`trainer`] | AdamW, lower/upper steps, search and fine-tuning |
//! | [`analyzer`] | FLOPs accounting and latency breakdown |
//! | [`harness`] | synthetic tasks, configs, pipelines, sweeps |

pub mod analyzer;
pub mod autodiff;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod integrator;
pub mod model;
pub mod params;
pub mod retriever;
pub mod trainer;

pub use error::{Error, Result};
