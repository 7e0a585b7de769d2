//! Alternating bi-level training.
//!
//! The lower level updates every weight (encoder and fusion parameters) on
//! training batches with the architecture logits frozen; the upper level
//! updates only the architecture logits on validation batches with the
//! weights frozen. Both use AdamW. The upper gradient is first-order: the
//! weights are treated as constants.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, RngStream, Tape};
use crate::error::{Error, Result};
use crate::integrator::Architecture;
use crate::model::{EncoderModel, ModelInput, Retrieval, SiteModule};
use crate::params::{ParamGroup, ParamId, ParamSet};
use crate::retriever::{Metric, VectorStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_weights: f64,
    pub lr_arch: f64,
    pub batch_size: usize,
    /// Lower-level steps per run; a search uses `search_fraction` of them.
    pub steps: usize,
    pub search_fraction: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub arch_weight_decay: f64,
    /// Full validation loss is logged every this many fine-tuning steps (0 = never).
    pub eval_interval: usize,
    /// Fine-tuning of a searched architecture starts from the pre-search weights.
    pub restart_after_search: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_weights: 1e-3,
            lr_arch: 3e-3,
            batch_size: 16,
            steps: 400,
            search_fraction: 0.5,
            tau_start: 1.0,
            tau_end: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            arch_weight_decay: 1e-3,
            eval_interval: 50,
            restart_after_search: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_weights >= 0.0) || !(self.lr_arch >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.search_fraction) {
            return Err(Error::Config("search_fraction must be in [0, 1]".into()));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }

    pub fn search_steps(&self) -> usize {
        (self.steps as f64 * self.search_fraction).round() as usize
    }

    /// Linear anneal from `tau_start` to `tau_end` over `total` steps.
    pub fn tau_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.tau_end;
        }
        let t = step.min(total - 1) as f64 / (total - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * t
    }

    fn adamw(&self, lr: f64, weight_decay: f64) -> AdamW {
        AdamW::new(lr, self.beta1, self.beta2, self.eps, weight_decay)
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `ids` from matching gradients.
    pub fn update(&mut self, params: &mut ParamSet, updates: &[(ParamId, &[f64])]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for &(id, grad) in updates {
            let value = params.get_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let decay = 1.0 - self.lr * self.weight_decay;
            for (i, (theta, &g)) in value.data_mut().iter_mut().zip(grad).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *theta = *theta * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// A prepared training/evaluation item.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub tokens: Vec<usize>,
    pub mask_pos: usize,
    pub label: usize,
    /// Input-text retrieval result (`k × D`), reused at every fusion site.
    pub hits: Option<Array>,
}

/// Per-site retrieval from hidden states.
#[derive(Clone, Copy, Debug)]
pub struct HiddenRetriever<'a> {
    pub store: &'a VectorStore,
    pub k: usize,
    pub metric: Metric,
    pub exclude_self: bool,
}

impl HiddenRetriever<'_> {
    pub fn query(&self, q: &[f64], id: u64) -> Result<Array> {
        let exclude = self.exclude_self.then_some(id);
        Ok(self.store.top_k(q, self.k, self.metric, exclude)?.matrix())
    }
}

/// Everything a run trains and evaluates on.
#[derive(Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub test: &'a [Sample],
    pub hidden: Option<HiddenRetriever<'a>>,
}

fn with_inputs<T>(
    samples: &[&Sample],
    hidden: Option<HiddenRetriever<'_>>,
    f: impl FnOnce(&[(ModelInput<'_>, usize)]) -> Result<T>,
) -> Result<T> {
    let closures: Vec<Box<dyn Fn(&[f64]) -> Result<Array> + '_>> = samples
        .iter()
        .map(|s| {
            let id = s.id;
            Box::new(move |q: &[f64]| match hidden {
                Some(h) => h.query(q, id),
                None => Err(Error::Model("no hidden-state retriever".into())),
            }) as Box<dyn Fn(&[f64]) -> Result<Array>>
        })
        .collect();
    let inputs: Vec<(ModelInput<'_>, usize)> = samples
        .iter()
        .zip(&closures)
        .map(|(s, c)| {
            let retrieval = match (&s.hits, hidden) {
                (Some(h), _) => Retrieval::Static(h),
                (None, Some(_)) => Retrieval::PerSite(c.as_ref()),
                (None, None) => Retrieval::Off,
            };
            (
                ModelInput {
                    tokens: &s.tokens,
                    mask_pos: s.mask_pos,
                    retrieval,
                },
                s.label,
            )
        })
        .collect();
    f(&inputs)
}

/// Epoch-wise shuffled index stream.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: RngStream,
}

impl BatchSampler {
    pub fn new(len: usize, rng: RngStream) -> Self {
        let mut s = BatchSampler {
            order: (0..len).collect(),
            pos: len,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: String,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub tau: f64,
    /// Mixture weights per searched site.
    pub alpha: BTreeMap<String, Vec<f64>>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class_total: Vec<usize>,
    pub per_class_correct: Vec<usize>,
    pub mean_loss: f64,
}

/// Stateful bi-level trainer for one model and one seed.
pub struct Trainer {
    pub config: TrainConfig,
    weight_opt: AdamW,
    arch_opt: AdamW,
    train_batches: BatchSampler,
    val_batches: BatchSampler,
    noise: RngStream,
    step: usize,
    total_steps: usize,
}

impl Trainer {
    /// `total_steps` is the length of the temperature schedule.
    pub fn new(config: TrainConfig, rng: &RngStream, train_len: usize, val_len: usize, total_steps: usize) -> Self {
        Trainer {
            weight_opt: config.adamw(config.lr_weights, config.weight_decay),
            arch_opt: config.adamw(config.lr_arch, config.arch_weight_decay),
            train_batches: BatchSampler::new(train_len, rng.split("train_batches")),
            val_batches: BatchSampler::new(val_len, rng.split("val_batches")),
            noise: rng.split("forward_noise"),
            config,
            step: 0,
            total_steps,
        }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn step_loss(
        model: &EncoderModel,
        samples: &[&Sample],
        hidden: Option<HiddenRetriever<'_>>,
        trainable: ParamGroup,
        rng: &mut RngStream,
        step: usize,
    ) -> Result<(f64, Vec<(ParamId, Vec<f64>)>)> {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, Some(trainable));
        let loss = with_inputs(samples, hidden, |batch| {
            model.loss(&mut tape, &bound, batch, rng, false)
        })?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "{trainable:?} loss {value} on ids {:?}",
                    samples.iter().map(|s| s.id).collect::<Vec<_>>()
                ),
            });
        }
        let grads = tape.backward(loss)?;
        let ids = model.params.ids_in(trainable);
        let out = ids
            .into_iter()
            .map(|id| (id, grads.wrt(bound.var(id)).expect("tracked").to_vec()))
            .collect();
        Ok((value, out))
    }

    fn anneal(&self, model: &mut EncoderModel) -> Result<f64> {
        let tau = self.config.tau_at(self.step, self.total_steps);
        model.set_tau(tau)?;
        Ok(tau)
    }

    /// One weight update on a training batch; architecture logits stay bit-identical.
    pub fn lower_step(&mut self, model: &mut EncoderModel, splits: &Splits<'_>) -> Result<f64> {
        self.anneal(model)?;
        let idx = self.train_batches.next_batch(self.config.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &splits.train[i]).collect();
        let mut rng = self.noise.split_index("lower", self.step as u64);
        let (loss, grads) = Self::step_loss(model, &batch, splits.hidden, ParamGroup::Weights, &mut rng, self.step)?;
        let updates: Vec<(ParamId, &[f64])> = grads.iter().map(|(id, g)| (*id, g.as_slice())).collect();
        self.weight_opt.update(&mut model.params, &updates);
        self.step += 1;
        Ok(loss)
    }

    /// One architecture update on a validation batch; weights stay bit-identical.
    pub fn upper_step(&mut self, model: &mut EncoderModel, splits: &Splits<'_>) -> Result<f64> {
        let idx = self.val_batches.next_batch(self.config.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &splits.val[i]).collect();
        let mut rng = self.noise.split_index("upper", self.step as u64);
        let (loss, grads) = Self::step_loss(model, &batch, splits.hidden, ParamGroup::Arch, &mut rng, self.step)?;
        let updates: Vec<(ParamId, &[f64])> = grads.iter().map(|(id, g)| (*id, g.as_slice())).collect();
        self.arch_opt.update(&mut model.params, &updates);
        Ok(loss)
    }

    /// Alternates lower and upper steps, then returns the discretized architecture.
    pub fn search(
        &mut self,
        model: &mut EncoderModel,
        splits: &Splits<'_>,
        steps: usize,
        log: &mut Vec<StepRecord>,
    ) -> Result<Architecture> {
        for _ in 0..steps {
            let start = Instant::now();
            let step = self.step;
            let train_loss = self.lower_step(model, splits)?;
            let val_loss = self.upper_step(model, splits)?;
            log.push(StepRecord {
                step,
                phase: "search".into(),
                train_loss,
                val_loss: Some(val_loss),
                tau: model.tau(),
                alpha: alpha_snapshot(model),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        Ok(model.discretize())
    }

    /// Lower-level training only, with full validation loss every `eval_interval` steps.
    pub fn finetune(
        &mut self,
        model: &mut EncoderModel,
        splits: &Splits<'_>,
        steps: usize,
        log: &mut Vec<StepRecord>,
    ) -> Result<()> {
        for i in 0..steps {
            let start = Instant::now();
            let step = self.step;
            let train_loss = self.lower_step(model, splits)?;
            let interval = self.config.eval_interval;
            let val_loss = if interval > 0 && ((i + 1) % interval == 0 || i + 1 == steps) && !splits.val.is_empty() {
                Some(evaluate(model, splits.val, splits.hidden)?.mean_loss)
            } else {
                None
            };
            log.push(StepRecord {
                step,
                phase: "finetune".into(),
                train_loss,
                val_loss,
                tau: model.tau(),
                alpha: alpha_snapshot(model),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        Ok(())
    }
}

/// Softmax mixture weights per searched site, keyed by site.
pub fn alpha_snapshot(model: &EncoderModel) -> BTreeMap<String, Vec<f64>> {
    model
        .mixture_sites()
        .into_iter()
        .filter_map(|s| match model.site(s) {
            SiteModule::Mixture(m) => Some((s.to_string(), m.mixture_weights(&model.params))),
            _ => None,
        })
        .collect()
}

/// Noise-free accuracy and mean loss.
pub fn evaluate(model: &EncoderModel, samples: &[Sample], hidden: Option<HiddenRetriever<'_>>) -> Result<Metrics> {
    let labels = model.config.num_labels();
    let mut m = Metrics {
        accuracy: 0.0,
        correct: 0,
        total: samples.len(),
        per_class_total: vec![0; labels],
        per_class_correct: vec![0; labels],
        mean_loss: 0.0,
    };
    let mut rng = RngStream::new(0);
    for s in samples {
        let logits = with_inputs(&[s], hidden, |batch| model.predict(batch[0].0, &mut rng, true))?;
        let pred = crate::integrator::discretize(&logits);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        m.mean_loss += lse - logits[s.label];
        m.per_class_total[s.label] += 1;
        if pred == s.label {
            m.correct += 1;
            m.per_class_correct[s.label] += 1;
        }
    }
    if !samples.is_empty() {
        m.accuracy = m.correct as f64 / samples.len() as f64;
        m.mean_loss /= samples.len() as f64;
    }
    Ok(m)
}

/// Applies a fixed architecture and fine-tunes for `steps` lower steps, then evaluates on test.
pub fn finetune_discretized(
    trainer: &mut Trainer,
    model: &mut EncoderModel,
    arch: &Architecture,
    splits: &Splits<'_>,
    steps: usize,
    log: &mut Vec<StepRecord>,
) -> Result<Metrics> {
    model.apply_architecture(arch)?;
    trainer.finetune(model, splits, steps, log)?;
    evaluate(model, splits.test, splits.hidden)
}

#[cfg(test)]
mod tests;
