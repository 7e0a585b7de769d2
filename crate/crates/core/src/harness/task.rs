//! Synthetic few-shot classification tasks.
//!
//! Vocabulary layout: special tokens, one label token per class, one cluster
//! of `cluster_size` tokens per class, then noise tokens. Each body token is
//! drawn from the example's own cluster with probability `signal`, from a
//! uniformly chosen other cluster with probability `cross`, and from the
//! noise tokens otherwise.
//!
//! The retrieval encoder is a fixed table standing in for a pretrained
//! model: cluster tokens sit near their class prototype, noise tokens are
//! random. Store vectors and input-text queries are mean encodings of the
//! body.

use serde::{Deserialize, Serialize};

use super::config::DataConfig;
use crate::autodiff::{Array, RngStream};
use crate::error::{Error, Result};
use crate::model::{Example, NUM_SPECIAL};
use crate::retriever::{encode_query, Metric, QueryInput, StoreEntry, VectorStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskLayout {
    pub classes: usize,
    pub cluster_size: usize,
    pub vocab: usize,
}

impl TaskLayout {
    pub fn new(config: &DataConfig) -> Result<Self> {
        let layout = TaskLayout {
            classes: config.classes,
            cluster_size: config.cluster_size,
            vocab: config.vocab,
        };
        let needs_noise = config.signal + config.cross < 1.0;
        let needed = layout.noise_start() + usize::from(needs_noise);
        if config.vocab < needed {
            return Err(Error::Config(format!(
                "vocabulary {} too small for {} clusters of {} (needs {needed})",
                config.vocab, config.classes, config.cluster_size
            )));
        }
        Ok(layout)
    }

    pub fn label_token(&self, class: usize) -> usize {
        NUM_SPECIAL + class
    }

    pub fn cluster(&self, class: usize) -> std::ops::Range<usize> {
        let start = NUM_SPECIAL + self.classes + class * self.cluster_size;
        start..start + self.cluster_size
    }

    pub fn noise_start(&self) -> usize {
        NUM_SPECIAL + self.classes * (1 + self.cluster_size)
    }

    pub fn noise_tokens(&self) -> std::ops::Range<usize> {
        self.noise_start()..self.vocab
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    /// Exact accuracy of the Bayes-optimal classifier on the body tokens.
    pub bayes_accuracy: f64,
    pub chance: f64,
    /// Fraction of examples whose nearest training neighbor (self excluded) shares their class.
    pub purity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub seed: u64,
    /// Retrieval encoder, `vocab × dim`.
    pub encoder: Array,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub stats: TaskStats,
}

impl SyntheticTask {
    pub fn all_examples(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn encode(&self, example: &Example) -> Result<Vec<f64>> {
        encode_query(QueryInput::Tokens(example.body()), &self.encoder)
    }

    /// Store over the training split; payload is the label.
    pub fn build_store(&self) -> Result<VectorStore> {
        let entries = self
            .train
            .iter()
            .map(|e| {
                Ok(StoreEntry {
                    id: e.id,
                    vector: self.encode(e)?,
                    payload: Some(e.label as i64),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        VectorStore::build(entries)
    }
}

fn encoder_table(config: &DataConfig, layout: &TaskLayout, dim: usize) -> Result<Array> {
    let rng = RngStream::new(config.task_seed).split("encoder");
    let scale = config.encoder_scale;
    let mut proto_rng = rng.split("prototypes");
    let prototypes: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| (0..dim).map(|_| proto_rng.normal() * scale).collect())
        .collect();
    let mut token_rng = rng.split("tokens");
    let mut table = Array::zeros(&[config.vocab, dim]);
    for class in 0..config.classes {
        for t in layout.cluster(class) {
            let row = &mut table.data_mut()[t * dim..(t + 1) * dim];
            for (v, p) in row.iter_mut().zip(&prototypes[class]) {
                *v = p + config.encoder_noise * token_rng.normal() * scale;
            }
        }
    }
    for t in layout.noise_tokens() {
        let row = &mut table.data_mut()[t * dim..(t + 1) * dim];
        for v in row {
            *v = token_rng.normal() * scale;
        }
    }
    Ok(table)
}

fn sample_body(config: &DataConfig, layout: &TaskLayout, class: usize, rng: &mut RngStream) -> Vec<usize> {
    let noise = layout.noise_tokens();
    (0..config.body_len)
        .map(|_| {
            let u = rng.uniform_open();
            if u < config.signal {
                layout.cluster(class).start + rng.below(config.cluster_size)
            } else if u < config.signal + config.cross {
                let other = (class + 1 + rng.below(config.classes - 1)) % config.classes;
                layout.cluster(other).start + rng.below(config.cluster_size)
            } else {
                noise.start + rng.below(noise.len())
            }
        })
        .collect()
}

/// Samples splits for `seed`; clusters and the encoder depend only on `task_seed`.
pub fn generate_task(config: &DataConfig, dim: usize, seed: u64) -> Result<SyntheticTask> {
    if config.classes < 2 || config.shots == 0 {
        return Err(Error::Config("need at least 2 classes and 1 shot".into()));
    }
    let layout = TaskLayout::new(config)?;
    let encoder = encoder_table(config, &layout, dim)?;
    let root = RngStream::new(seed).split("task");
    let mut next_id = 0u64;
    let mut split = |name: &str, per_class: usize| -> Vec<Example> {
        let mut rng = root.split(name);
        let mut labels: Vec<usize> = (0..config.classes)
            .flat_map(|c| std::iter::repeat_n(c, per_class))
            .collect();
        rng.shuffle(&mut labels);
        labels
            .into_iter()
            .map(|c| {
                let body = sample_body(config, &layout, c, &mut rng);
                let ex = Example::from_body(next_id, &body, c);
                next_id += 1;
                ex
            })
            .collect()
    };
    let train = split("train", config.shots);
    let val = split("val", config.shots);
    let test = split("test", config.test_per_class);
    let mut task = SyntheticTask {
        seed,
        encoder,
        train,
        val,
        test,
        stats: TaskStats {
            bayes_accuracy: bayes_accuracy(config),
            chance: 1.0 / config.classes as f64,
            purity: 0.0,
        },
    };
    task.stats.purity = measure_purity(&task, Metric::L2)?;
    Ok(task)
}

/// Top-1 class agreement of every example against the training store, self excluded.
pub fn measure_purity(task: &SyntheticTask, metric: Metric) -> Result<f64> {
    let store = task.build_store()?;
    let labels: std::collections::HashMap<u64, usize> = task.train.iter().map(|e| (e.id, e.label)).collect();
    let mut agree = 0usize;
    let mut total = 0usize;
    for e in task.all_examples() {
        let hit = store.top_k(&task.encode(e)?, 1, metric, Some(e.id))?;
        total += 1;
        agree += usize::from(labels[&hit.hits[0].id] == e.label);
    }
    Ok(agree as f64 / total as f64)
}

/// Exact Bayes accuracy under a uniform class prior.
///
/// Tokens within a category (a class cluster or the noise set) are
/// exchangeable, so per-category counts are sufficient and the sum runs
/// over count compositions instead of token sequences.
pub fn bayes_accuracy(config: &DataConfig) -> f64 {
    let c = config.classes;
    let noise = 1.0 - config.signal - config.cross;
    let cross_each = config.cross / (c - 1) as f64;
    // category probabilities per class: c cluster categories then noise
    let probs: Vec<Vec<f64>> = (0..c)
        .map(|class| {
            let mut p: Vec<f64> = (0..c)
                .map(|j| if j == class { config.signal } else { cross_each })
                .collect();
            p.push(noise);
            p
        })
        .collect();
    let n = config.body_len;
    let log_fact: Vec<f64> = (0..=n)
        .scan(0.0, |acc, i| {
            if i > 0 {
                *acc += (i as f64).ln();
            }
            Some(*acc)
        })
        .collect();
    let mut counts = vec![0usize; c + 1];
    let mut total = 0.0;
    compositions(n, 0, &mut counts, &mut |counts| {
        let coef = log_fact[n] - counts.iter().map(|&k| log_fact[k]).sum::<f64>();
        let best = probs
            .iter()
            .map(|p| {
                counts
                    .iter()
                    .zip(p)
                    .map(|(&k, &q)| if k == 0 { 1.0 } else { q.powi(k as i32) })
                    .product::<f64>()
            })
            .fold(0.0, f64::max);
        total += coef.exp() * best;
    });
    total / c as f64
}

fn compositions(remaining: usize, at: usize, counts: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if at == counts.len() - 1 {
        counts[at] = remaining;
        f(counts);
        return;
    }
    for k in 0..=remaining {
        counts[at] = k;
        compositions(remaining - k, at + 1, counts, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            classes: 2,
            ..DataConfig::default()
        }
    }

    #[test]
    fn split_counts_are_exact() {
        let t = generate_task(&small(), 32, 13).unwrap();
        assert_eq!(t.train.len(), 32);
        for c in 0..2 {
            assert_eq!(t.train.iter().filter(|e| e.label == c).count(), 16);
        }
        assert_eq!(t.val.len(), 32);
        assert_eq!(t.test.len(), 100);
        let mut ids: Vec<u64> = t.all_examples().map(|e| e.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 164, "splits must be disjoint");
    }

    #[test]
    fn same_seed_same_tokens() {
        let a = generate_task(&DataConfig::default(), 32, 21).unwrap();
        let b = generate_task(&DataConfig::default(), 32, 21).unwrap();
        assert_eq!(a, b);
        let c = generate_task(&DataConfig::default(), 32, 42).unwrap();
        assert_ne!(a.train, c.train);
        assert_eq!(a.encoder, c.encoder);
    }

    #[test]
    fn vocabulary_too_small() {
        let cfg = DataConfig {
            vocab: 40,
            ..DataConfig::default()
        };
        assert!(matches!(generate_task(&cfg, 32, 1), Err(Error::Config(_))));
    }

    #[test]
    fn default_purity_reaches_target() {
        let cfg = DataConfig::default();
        for seed in crate::harness::DEFAULT_SEEDS {
            let t = generate_task(&cfg, 32, seed).unwrap();
            assert!(t.stats.purity >= cfg.purity, "seed {seed}: {}", t.stats.purity);
        }
    }

    #[test]
    fn bayes_accuracy_edge_cases() {
        let pure = DataConfig {
            signal: 1.0,
            cross: 0.0,
            ..DataConfig::default()
        };
        assert!((bayes_accuracy(&pure) - 1.0).abs() < 1e-12);
        let uninformative = DataConfig {
            signal: 0.0,
            cross: 0.0,
            ..DataConfig::default()
        };
        assert!((bayes_accuracy(&uninformative) - 0.25).abs() < 1e-12);
        let d = DataConfig::default();
        let acc = bayes_accuracy(&d);
        assert!(acc > 0.25 && acc < 1.0);
    }

    #[test]
    fn bayes_accuracy_single_token_closed_form() {
        // One token: the argmax class is the token's cluster owner, or any class for noise.
        let d = DataConfig {
            body_len: 1,
            ..DataConfig::default()
        };
        let noise = 1.0 - d.signal - d.cross;
        let expected = d.signal + noise / 4.0;
        assert!((bayes_accuracy(&d) - expected).abs() < 1e-12);
    }

    #[test]
    fn bayes_accuracy_matches_monte_carlo() {
        let d = DataConfig::default();
        let layout = TaskLayout::new(&d).unwrap();
        let mut rng = RngStream::new(99);
        let cross_each = d.cross / 3.0;
        let mut correct = 0usize;
        let n = 40_000;
        for i in 0..n {
            let class = i % 4;
            let body = sample_body(&d, &layout, class, &mut rng);
            let score = |c: usize| -> f64 {
                body.iter()
                    .map(|&t| {
                        let owner = (0..4).find(|&j| layout.cluster(j).contains(&t));
                        match owner {
                            Some(j) if j == c => d.signal,
                            Some(_) => cross_each,
                            None => 1.0,
                        }
                    })
                    .product()
            };
            let best = (0..4).map(score).fold(f64::NEG_INFINITY, f64::max);
            let winners: Vec<usize> = (0..4).filter(|&c| score(c) == best).collect();
            if winners.contains(&class) {
                correct += 1;
                if winners.len() > 1 {
                    // ties count fractionally through the rare extra draw below
                    correct -= usize::from(rng.below(winners.len()) != 0);
                }
            }
        }
        let mc = correct as f64 / n as f64;
        assert!(
            (mc - bayes_accuracy(&d)).abs() < 0.01,
            "mc {mc} vs {}",
            bayes_accuracy(&d)
        );
    }
}
