//! FLOPs accounting and latency breakdown.
//!
//! Multiply-adds count as 2 FLOPs. Non-matmul work uses the per-element
//! constants in [`crate::autodiff::flop_costs`], the same table the tape's
//! instrumented counter uses, so analytic and counted totals differ only in
//! the fusion-overhead convention.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::flop_costs::*;
use crate::autodiff::{Array, FlopCounter, FlopScope, RngStream, Tape};
use crate::error::{Error, Result};
use crate::fusion::SchemeKind;
use crate::model::{build_concat_input, Augmentation, EncoderModel, Example, ModelConfig, ModelInput, Retrieval};
use crate::retriever::{encode_query, Metric, QueryInput, QueryMode, VectorStore};

/// Warmup runs excluded from latency medians.
pub const LATENCY_WARMUP: usize = 5;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub embedding: u64,
    pub attention_projections: u64,
    pub attention_scores: u64,
    pub ffn: u64,
    /// Biases, norms, softmax, activations, residuals.
    pub elementwise: u64,
    pub fusion: u64,
    pub classifier: u64,
    pub total: u64,
    /// Sequence length actually encoded.
    pub seq_len: usize,
    /// Length before clamping to `max_len`.
    pub requested_len: usize,
    pub clamped: bool,
}

impl FlopsReport {
    pub fn components(&self) -> [(&'static str, u64); 7] {
        [
            ("embedding", self.embedding),
            ("attention_projections", self.attention_projections),
            ("attention_scores", self.attention_scores),
            ("ffn", self.ffn),
            ("elementwise", self.elementwise),
            ("fusion", self.fusion),
            ("classifier", self.classifier),
        ]
    }

    fn finish(mut self) -> Self {
        self.total = self.components().iter().map(|(_, v)| v).sum();
        self
    }

    /// Components without fusion overhead.
    pub fn encoder_total(&self) -> u64 {
        self.total - self.fusion
    }
}

/// Forward FLOPs of the plain encoder at `seq_len` tokens.
pub fn flops_encoder(config: &ModelConfig, seq_len: usize) -> Result<FlopsReport> {
    if seq_len == 0 || seq_len > config.max_len {
        return Err(Error::Config(format!(
            "sequence length {seq_len} outside 1..={}",
            config.max_len
        )));
    }
    let (s, d, f, h) = (
        seq_len as u64,
        config.hidden as u64,
        config.ffn_hidden as u64,
        config.heads as u64,
    );
    let n = config.num_layers as u64;
    // Two norms; four biases and two residuals in model width; FFN bias and
    // activation; score scaling and softmax per head.
    let per_layer_elementwise = 2 * LAYER_NORM_PER_ELEM * s * d
        + 7 * ADD_PER_ELEM * s * d
        + (ADD_PER_ELEM + GELU_PER_ELEM) * s * f
        + (MUL_PER_ELEM + SOFTMAX_PER_ELEM) * h * s * s;
    Ok(FlopsReport {
        embedding: ADD_PER_ELEM * s * d,
        attention_projections: n * 4 * (2 * s * d * d),
        attention_scores: n * 2 * (2 * s * s * d),
        ffn: n * 2 * (2 * s * d * f),
        elementwise: n * per_layer_elementwise + LAYER_NORM_PER_ELEM * s * d,
        fusion: 0,
        classifier: 2 * d * config.num_labels() as u64,
        total: 0,
        seq_len,
        requested_len: seq_len,
        clamped: false,
    }
    .finish())
}

/// Encoder FLOPs with `k` retrievals of `retrieval_len` tokens concatenated
/// (each followed by a separator), clamped to `max_len`.
pub fn flops_rc(config: &ModelConfig, prompt_len: usize, k: usize, retrieval_len: usize) -> Result<FlopsReport> {
    if prompt_len > config.max_len {
        return Err(Error::Config(format!(
            "prompt length {prompt_len} exceeds max_len {}",
            config.max_len
        )));
    }
    let requested = prompt_len + k * (retrieval_len + 1);
    let seq_len = requested.min(config.max_len);
    let mut report = flops_encoder(config, seq_len)?;
    report.requested_len = requested;
    report.clamped = requested > config.max_len;
    Ok(report)
}

/// Per-site fusion overhead: reranker `2kD + 5k`, ordered mask `2kD + 6kD`.
pub fn fusion_overhead(scheme: SchemeKind, k: usize, hidden: usize) -> u64 {
    let (k, d) = (k as u64, hidden as u64);
    match scheme {
        SchemeKind::NoFusion => 0,
        SchemeKind::Reranker => 2 * k * d + 5 * k,
        SchemeKind::OrderedMask => 2 * k * d + 6 * k * d,
    }
}

/// Encoder FLOPs at the prompt length plus fusion overhead at `active_sites`.
pub fn flops_rf(
    config: &ModelConfig,
    prompt_len: usize,
    k: usize,
    active_sites: usize,
    scheme: SchemeKind,
) -> Result<FlopsReport> {
    let mut report = flops_encoder(config, prompt_len)?;
    report.fusion = active_sites as u64 * fusion_overhead(scheme, k, config.hidden);
    Ok(report.finish())
}

/// Maps an instrumented counter onto report components.
pub fn report_from_counter(counter: &FlopCounter, seq_len: usize) -> FlopsReport {
    use FlopScope::*;
    let both = |s| counter.matmul(s) + counter.elementwise(s);
    FlopsReport {
        embedding: both(Embedding),
        attention_projections: counter.matmul(AttentionProjections),
        attention_scores: counter.matmul(AttentionScores),
        ffn: counter.matmul(Ffn),
        elementwise: counter.elementwise(AttentionProjections)
            + counter.elementwise(AttentionScores)
            + counter.elementwise(Ffn)
            + both(Other),
        fusion: both(Fusion),
        classifier: both(Classifier),
        total: 0,
        seq_len,
        requested_len: seq_len,
        clamped: false,
    }
    .finish()
}

/// Runs one noise-free forward and returns its instrumented counts.
pub fn counted_flops(model: &EncoderModel, input: ModelInput<'_>) -> Result<FlopsReport> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, None);
    model.forward(&mut tape, &bound, input, &mut RngStream::new(0), true)?;
    Ok(report_from_counter(tape.flops(), input.tokens.len()))
}

/// One row of a FLOPs curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub k: usize,
    pub mode: String,
    pub flops_total: u64,
    pub flops_fusion: u64,
    pub seq_len: usize,
    pub accuracy: Option<f64>,
}

pub fn flops_rows_csv(rows: &[FlopsRow]) -> String {
    let mut out = String::from("k,mode,flops_total,flops_fusion,seq_len,accuracy\n");
    for r in rows {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.k, r.mode, r.flops_total, r.flops_fusion, r.seq_len, acc
        ));
    }
    out
}

pub fn write_flops_rows(rows: &[FlopsRow], json_path: &Path, csv_path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(rows)?;
    std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
    std::fs::write(csv_path, flops_rows_csv(rows)).map_err(|e| Error::io(csv_path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub mode: Augmentation,
    pub query_mode: QueryMode,
    /// Medians in milliseconds.
    pub retrieve_ms: f64,
    pub forward_ms: f64,
    pub total_ms: f64,
    /// `max(0, retrieve_ms + forward_ms - total_ms)`; medians of parts need not add up.
    pub slack_ms: f64,
    pub samples: usize,
    pub warmup: usize,
}

/// What a latency run needs besides the model.
pub struct LatencySetup<'a> {
    pub model: &'a EncoderModel,
    pub store: &'a VectorStore,
    /// Retrieval encoder used for input-text queries.
    pub encoder: &'a Array,
    /// Body tokens of store entries, for concatenation.
    pub bodies: &'a HashMap<u64, Vec<usize>>,
    pub queries: &'a [Example],
    pub k: usize,
    pub metric: Metric,
    pub query_mode: QueryMode,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Median per-phase wall time over `samples` runs after [`LATENCY_WARMUP`] warmups.
///
/// Single-threaded; concurrent measurements in one process skew each other.
pub fn measure_latency(setup: &LatencySetup<'_>, samples: usize) -> Result<LatencyBreakdown> {
    if setup.queries.is_empty() {
        return Err(Error::Config("latency needs at least one query".into()));
    }
    let mode = setup.model.config.augmentation;
    let mut retrieve = Vec::with_capacity(samples);
    let mut forward = Vec::with_capacity(samples);
    let mut total = Vec::with_capacity(samples);
    let mut rng = RngStream::new(0);
    for run in 0..LATENCY_WARMUP + samples {
        let ex = &setup.queries[run % setup.queries.len()];
        let (r, f, t) = match mode {
            Augmentation::None => {
                let start = Instant::now();
                setup.model.predict(input(ex, Retrieval::Off), &mut rng, true)?;
                let t = ms(start);
                (0.0, t, t)
            }
            Augmentation::Concat => {
                let start = Instant::now();
                let q = encode_query(QueryInput::Tokens(ex.body()), setup.encoder)?;
                let hits = setup.store.top_k(&q, setup.k, setup.metric, None)?;
                let r = ms(start);
                let fstart = Instant::now();
                let retrieved: Vec<Vec<usize>> = hits
                    .hits
                    .iter()
                    .map(|h| setup.bodies.get(&h.id).cloned().unwrap_or_default())
                    .collect();
                let (tokens, mask_pos) = build_concat_input(ex, &retrieved, setup.k, setup.model.config.max_len)?;
                let inp = ModelInput {
                    tokens: &tokens,
                    mask_pos,
                    retrieval: Retrieval::Off,
                };
                setup.model.predict(inp, &mut rng, true)?;
                (r, ms(fstart), ms(start))
            }
            Augmentation::Fusion => match setup.query_mode {
                QueryMode::InputText => {
                    let start = Instant::now();
                    let q = encode_query(QueryInput::Tokens(ex.body()), setup.encoder)?;
                    let hits = setup.store.top_k(&q, setup.k, setup.metric, None)?.matrix();
                    let r = ms(start);
                    let fstart = Instant::now();
                    setup
                        .model
                        .predict(input(ex, Retrieval::Static(&hits)), &mut rng, true)?;
                    (r, ms(fstart), ms(start))
                }
                QueryMode::HiddenState => {
                    let spent = std::cell::Cell::new(0.0);
                    let per_site = |q: &[f64]| -> Result<Array> {
                        let s = Instant::now();
                        let m = setup.store.top_k(q, setup.k, setup.metric, None)?.matrix();
                        spent.set(spent.get() + ms(s));
                        Ok(m)
                    };
                    let start = Instant::now();
                    setup
                        .model
                        .predict(input(ex, Retrieval::PerSite(&per_site)), &mut rng, true)?;
                    let t = ms(start);
                    let r = spent.get();
                    (r, (t - r).max(0.0), t)
                }
            },
        };
        if run >= LATENCY_WARMUP {
            retrieve.push(r);
            forward.push(f);
            total.push(t);
        }
    }
    let (r, f, t) = (median(&mut retrieve), median(&mut forward), median(&mut total));
    Ok(LatencyBreakdown {
        mode,
        query_mode: setup.query_mode,
        retrieve_ms: r,
        forward_ms: f,
        total_ms: t,
        slack_ms: (r + f - t).max(0.0),
        samples,
        warmup: LATENCY_WARMUP,
    })
}

fn input<'a>(ex: &'a Example, retrieval: Retrieval<'a>) -> ModelInput<'a> {
    ModelInput {
        tokens: &ex.tokens,
        mask_pos: ex.mask_pos,
        retrieval,
    }
}
