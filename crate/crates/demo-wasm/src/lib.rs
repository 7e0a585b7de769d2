//! Browser bindings for three pure computations: ordered-mask sampling,
//! reranker weights and analytic FLOPs curves. Every export returns JSON
//! text (or a plain vector) so the page needs no serialization glue.

use refusion::autodiff::{Array, RngStream};
use refusion::fusion::{rerank_weights as softmax_weights, sample_ordered_masks};
use refusion::harness::{flops_report, ExperimentConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Samples ordered masks for a `dim × k` logit matrix given row-major.
/// Returns `{"choice": [[..]..], "masks": [[..]..]}`.
#[wasm_bindgen]
pub fn ordered_mask(
    beta: Vec<f64>,
    dim: usize,
    k: usize,
    tau: f64,
    seed: u64,
    noise_free: bool,
) -> Result<String, JsError> {
    ordered_mask_json(beta, dim, k, tau, seed, noise_free).map_err(js_err)
}

/// Softmax weights the reranker assigns to `k` retrieval logits.
#[wasm_bindgen]
pub fn rerank_weights(logits: Vec<f64>) -> Vec<f64> {
    softmax_weights(&logits)
}

/// Concatenation and fusion FLOPs for `k = 0..=k_max` on a model of the given
/// shape. Returns an array of `{k, rc_flops, rf_flops, rc_seq_len, rf_seq_len}`.
#[wasm_bindgen]
pub fn flops_curve(
    layers: usize,
    hidden: usize,
    max_len: usize,
    body_len: usize,
    k_max: usize,
) -> Result<String, JsError> {
    flops_curve_json(layers, hidden, max_len, body_len, k_max).map_err(js_err)
}

pub fn ordered_mask_json(
    beta: Vec<f64>,
    dim: usize,
    k: usize,
    tau: f64,
    seed: u64,
    noise_free: bool,
) -> refusion::Result<String> {
    let beta = Array::new(vec![dim, k], beta)?;
    let sample = sample_ordered_masks(&beta, tau, &mut RngStream::new(seed), noise_free)?;
    let rows = |a: &Array| -> Vec<Vec<f64>> { a.data().chunks(k.max(1)).map(<[f64]>::to_vec).collect() };
    let value = serde_json::json!({ "choice": rows(&sample.choice), "masks": rows(&sample.masks) });
    Ok(value.to_string())
}

pub fn flops_curve_json(
    layers: usize,
    hidden: usize,
    max_len: usize,
    body_len: usize,
    k_max: usize,
) -> refusion::Result<String> {
    let mut config = ExperimentConfig::default();
    config.model.layers = layers;
    config.model.hidden = hidden;
    config.model.ffn_hidden = 4 * hidden;
    config.model.max_len = max_len;
    config.data.body_len = body_len;
    config.validate()?;
    let ks: Vec<usize> = (0..=k_max).collect();
    let rows = flops_report(&config, &ks, None)?;
    Ok(serde_json::to_string(&rows)?)
}
