//! Multi-seed pipelines, sweeps, and report files.
//!
//! Output layout under the run directory:
//!
//! ```text
//! config.conf                    echo of the effective config
//! stores/seed-<s>.rfvs           training-split store
//! <variant>/seed-<s>/metrics_log.jsonl
//! <variant>/seed-<s>/metrics.json
//! <variant>/seed-<s>/arch.txt
//! <variant>/seed-<s>/checkpoint.rfck
//! results.json, results.csv      per-seed rows plus mean/std per variant
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SweepAxis, Variant};
use super::task::{generate_task, SyntheticTask, TaskStats};
use crate::analyzer::{self, FlopsRow, LatencyBreakdown, LatencySetup};
use crate::autodiff::RngStream;
use crate::error::{Error, Result};
use crate::fusion::SchemeKind;
use crate::integrator::Architecture;
use crate::model::{build_concat_input, checkpoint_bytes, load_checkpoint, Augmentation, EncoderModel, Example};
use crate::retriever::{QueryMode, VectorStore};
use crate::trainer::{evaluate, HiddenRetriever, Metrics, Sample, Splits, StepRecord, Trainer};

/// How far a seed run goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Architecture search only (no-op for fixed variants).
    Search,
    /// Search if applicable, fine-tune, evaluate on test.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSplits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Turns examples into model-ready samples for one variant.
pub fn prepare_samples(
    config: &ExperimentConfig,
    variant: Variant,
    task: &SyntheticTask,
    store: &VectorStore,
) -> Result<PreparedSplits> {
    let r = &config.retrieval;
    let bodies: HashMap<u64, &[usize]> = task.train.iter().map(|e| (e.id, e.body())).collect();
    let prep = |e: &Example| -> Result<Sample> {
        let exclude = r.exclude_self.then_some(e.id);
        let mut s = Sample {
            id: e.id,
            tokens: e.tokens.clone(),
            mask_pos: e.mask_pos,
            label: e.label,
            hits: None,
        };
        match variant.augmentation() {
            Augmentation::None => {}
            Augmentation::Concat => {
                let top = store.top_k(&task.encode(e)?, r.k, r.metric, exclude)?;
                let retrieved: Vec<Vec<usize>> = top.hits.iter().map(|h| bodies[&h.id].to_vec()).collect();
                let (tokens, mask_pos) = build_concat_input(e, &retrieved, r.k, config.model.max_len)?;
                s.tokens = tokens;
                s.mask_pos = mask_pos;
            }
            Augmentation::Fusion => {
                if r.query_mode == QueryMode::InputText {
                    s.hits = Some(store.top_k(&task.encode(e)?, r.k, r.metric, exclude)?.matrix());
                }
            }
        }
        Ok(s)
    };
    let all = |xs: &[Example]| xs.iter().map(prep).collect::<Result<Vec<_>>>();
    Ok(PreparedSplits {
        train: all(&task.train)?,
        val: all(&task.val)?,
        test: all(&task.test)?,
    })
}

fn hidden_retriever<'a>(
    config: &ExperimentConfig,
    variant: Variant,
    store: &'a VectorStore,
) -> Option<HiddenRetriever<'a>> {
    let r = &config.retrieval;
    (variant.augmentation() == Augmentation::Fusion && r.query_mode == QueryMode::HiddenState).then_some(
        HiddenRetriever {
            store,
            k: r.k,
            metric: r.metric,
            exclude_self: r.exclude_self,
        },
    )
}

pub struct SeedRun {
    pub seed: u64,
    pub variant: Variant,
    pub model: EncoderModel,
    pub architecture: Architecture,
    pub log: Vec<StepRecord>,
    /// Test metrics; absent after a search-only run.
    pub metrics: Option<Metrics>,
    pub stats: TaskStats,
}

/// One seed of one variant, fully in memory.
pub fn run_seed(config: &ExperimentConfig, variant: Variant, seed: u64, stage: Stage) -> Result<SeedRun> {
    let task = generate_task(&config.data, config.model.hidden, seed)?;
    let store = task.build_store()?;
    run_seed_on(config, variant, &task, &store, stage)
}

pub fn run_seed_on(
    config: &ExperimentConfig,
    variant: Variant,
    task: &SyntheticTask,
    store: &VectorStore,
    stage: Stage,
) -> Result<SeedRun> {
    let seed = task.seed;
    let prepared = prepare_samples(config, variant, task, store)?;
    let splits = Splits {
        train: &prepared.train,
        val: &prepared.val,
        test: &prepared.test,
        hidden: hidden_retriever(config, variant, store),
    };
    let root = RngStream::new(seed);
    let mut model = EncoderModel::new(config.model_config(variant)?, &mut root.split("model"))?;
    let initial = (config.train.restart_after_search && variant.searches()).then(|| model.clone());
    let tc = &config.train;
    let mut trainer = Trainer::new(
        tc.clone(),
        &root.split("train"),
        splits.train.len(),
        splits.val.len(),
        tc.steps,
    );
    let mut log = Vec::new();
    let search_steps = if variant.searches() { tc.search_steps() } else { 0 };
    let architecture = trainer.search(&mut model, &splits, search_steps, &mut log)?;
    if stage == Stage::Search {
        return Ok(SeedRun {
            seed,
            variant,
            model,
            architecture,
            log,
            metrics: None,
            stats: task.stats.clone(),
        });
    }
    if let Some(initial) = initial.filter(|_| search_steps > 0) {
        model = initial;
        trainer = Trainer::new(
            tc.clone(),
            &root.split("finetune"),
            splits.train.len(),
            splits.val.len(),
            tc.steps - search_steps,
        );
    }
    model.apply_architecture(&architecture)?;
    trainer.finetune(&mut model, &splits, tc.steps - search_steps, &mut log)?;
    let metrics = evaluate(&model, splits.test, splits.hidden)?;
    Ok(SeedRun {
        seed,
        variant,
        model,
        architecture,
        log,
        metrics: Some(metrics),
        stats: task.stats.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub accuracy: Option<f64>,
    pub metrics: Option<Metrics>,
    pub architecture: Option<String>,
    pub fusing_sites: Option<usize>,
    pub task: Option<TaskStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub seeds: Vec<SeedOutcome>,
    pub n_ok: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation across successful seeds.
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineResults {
    pub name: String,
    pub variants: Vec<VariantResult>,
}

impl PipelineResults {
    pub fn variant(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }

    pub fn failed_seeds(&self) -> usize {
        self.variants.iter().map(|v| v.seeds.len() - v.n_ok).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,accuracy,std,fusing_sites,status\n");
        for v in &self.variants {
            for s in &v.seeds {
                let _ = writeln!(
                    out,
                    "{},{},{},,{},{}",
                    v.variant,
                    s.seed,
                    opt(s.accuracy),
                    s.fusing_sites.map(|n| n.to_string()).unwrap_or_default(),
                    if s.ok { "ok" } else { "failed" }
                );
            }
            let _ = writeln!(out, "{},mean,{},{},,n={}", v.variant, opt(v.mean), opt(v.std), v.n_ok);
        }
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (Some(mean), Some(var.sqrt()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn log_jsonl(log: &[StepRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn seed_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join(variant.name()).join(format!("seed-{seed}"))
}

pub fn store_path(out: &Path, seed: u64) -> PathBuf {
    out.join("stores").join(format!("seed-{seed}.rfvs"))
}

fn write_seed(dir: &Path, run: &SeedRun, outcome: &SeedOutcome) -> Result<()> {
    let log_name = if run.metrics.is_some() {
        "metrics_log.jsonl"
    } else {
        "search_log.jsonl"
    };
    write(&dir.join(log_name), log_jsonl(&run.log)?)?;
    write(&dir.join("arch.txt"), run.architecture.to_text())?;
    let ckpt = if run.metrics.is_some() {
        "checkpoint.rfck"
    } else {
        "search.rfck"
    };
    write(&dir.join(ckpt), checkpoint_bytes(&run.model)?)?;
    if run.metrics.is_some() {
        write(&dir.join("metrics.json"), serde_json::to_string_pretty(outcome)?)?;
    }
    Ok(())
}

/// Runs every variant over every seed. Seed failures are recorded, not raised.
pub fn run_pipeline(config: &ExperimentConfig, out: Option<&Path>, stage: Stage) -> Result<PipelineResults> {
    config.validate()?;
    if let Some(out) = out {
        write(&out.join("config.conf"), config.to_text()?)?;
    }
    let mut tasks: Vec<Result<(SyntheticTask, VectorStore)>> = Vec::new();
    for &seed in &config.seeds {
        tasks.push(generate_task(&config.data, config.model.hidden, seed).and_then(|t| {
            let s = t.build_store()?;
            if let Some(out) = out {
                let path = store_path(out, seed);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                s.save(&path)?;
            }
            Ok((t, s))
        }));
    }
    let mut variants = Vec::new();
    for &variant in &config.variants {
        let mut seeds = Vec::new();
        for (&seed, task) in config.seeds.iter().zip(&tasks) {
            let run = match task {
                Ok((t, s)) => run_seed_on(config, variant, t, s, stage),
                Err(e) => Err(Error::Model(format!("task generation failed: {e}"))),
            };
            let outcome = match run {
                Ok(run) => {
                    let outcome = SeedOutcome {
                        seed,
                        ok: true,
                        error: None,
                        accuracy: run.metrics.as_ref().map(|m| m.accuracy),
                        metrics: run.metrics.clone(),
                        architecture: Some(run.architecture.to_text()),
                        fusing_sites: Some(run.architecture.fusing_sites()),
                        task: Some(run.stats.clone()),
                    };
                    if let Some(out) = out {
                        write_seed(&seed_dir(out, variant, seed), &run, &outcome)?;
                    }
                    outcome
                }
                Err(e) => SeedOutcome {
                    seed,
                    ok: false,
                    error: Some(e.to_string()),
                    accuracy: None,
                    metrics: None,
                    architecture: None,
                    fusing_sites: None,
                    task: None,
                },
            };
            seeds.push(outcome);
        }
        let accs: Vec<f64> = seeds.iter().filter_map(|s| s.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        variants.push(VariantResult {
            variant,
            n_ok: seeds.iter().filter(|s| s.ok).count(),
            seeds,
            mean,
            std,
        });
    }
    let results = PipelineResults {
        name: config.name.clone(),
        variants,
    };
    if let Some(out) = out {
        let name = if stage == Stage::Full {
            "results"
        } else {
            "search_results"
        };
        write(
            &out.join(format!("{name}.json")),
            serde_json::to_string_pretty(&results)?,
        )?;
        write(&out.join(format!("{name}.csv")), results.to_csv())?;
    }
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: String,
    pub results: PipelineResults,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn failed_seeds(&self) -> usize {
        self.cells.iter().map(|c| c.results.failed_seeds()).sum()
    }

    /// One row per value, variant and seed, then one aggregate row per value and variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,variant,seed,accuracy,std,status\n");
        let axis = self.axis.name();
        for c in &self.cells {
            for v in &c.results.variants {
                for s in &v.seeds {
                    let status = if s.ok { "ok" } else { "failed" };
                    let _ = writeln!(
                        out,
                        "{axis},{},{},{},{},,{status}",
                        c.value,
                        v.variant,
                        s.seed,
                        opt(s.accuracy)
                    );
                }
            }
        }
        for c in &self.cells {
            for v in &c.results.variants {
                let _ = writeln!(
                    out,
                    "{axis},{},{},mean,{},{},n={}",
                    c.value,
                    v.variant,
                    opt(v.mean),
                    opt(v.std),
                    v.n_ok
                );
            }
        }
        out
    }
}

/// One pipeline per axis value on shared seeds.
pub fn run_sweep(
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    out: Option<&Path>,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| config.with_axis(axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        let dir = out.map(|o| o.join(format!("{}-{}", axis.name(), value)));
        let results = run_pipeline(cfg, dir.as_deref(), Stage::Full)?;
        cells.push(SweepCell {
            value: value.clone(),
            results,
        });
    }
    let table = SweepTable { axis, cells };
    if let Some(out) = out {
        write(&out.join("sweep.csv"), table.to_csv())?;
        write(&out.join("sweep.json"), serde_json::to_string_pretty(&table)?)?;
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsCurveRow {
    pub k: usize,
    pub rc_flops: u64,
    pub rf_flops: u64,
    pub rc_seq_len: usize,
    pub rf_seq_len: usize,
    pub rc_accuracy: Option<f64>,
    pub rf_accuracy: Option<f64>,
}

/// RC and RF FLOPs for each k on the configured model, with accuracy joined
/// from a k sweep in `out/sweep.json` when one exists.
///
/// RF overhead uses the ordered mask, the costlier scheme, at every configured site.
pub fn flops_report(config: &ExperimentConfig, k_values: &[usize], out: Option<&Path>) -> Result<Vec<FlopsCurveRow>> {
    let model = config.model_config(Variant::AriAll)?;
    let prompt_len = config.data.body_len + 3;
    let sites = model.fusion_sites.len();
    let accuracy = out.map(load_k_accuracy).unwrap_or_default();
    let mut rows = Vec::new();
    for &k in k_values {
        let rc = analyzer::flops_rc(&model, prompt_len, k, config.data.body_len)?;
        let rf = analyzer::flops_rf(&model, prompt_len, k, sites, SchemeKind::OrderedMask)?;
        rows.push(FlopsCurveRow {
            k,
            rc_flops: rc.total,
            rf_flops: rf.total,
            rc_seq_len: rc.seq_len,
            rf_seq_len: rf.seq_len,
            rc_accuracy: accuracy.get(&(k, "rc")).copied(),
            rf_accuracy: accuracy.get(&(k, "rf")).copied(),
        });
    }
    if let Some(out) = out {
        let mut csv = String::from("k,rc_flops,rf_flops,rc_seq_len,rf_seq_len,rc_accuracy,rf_accuracy\n");
        let mut long = Vec::new();
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                r.k,
                r.rc_flops,
                r.rf_flops,
                r.rc_seq_len,
                r.rf_seq_len,
                opt(r.rc_accuracy),
                opt(r.rf_accuracy)
            );
            long.push(FlopsRow {
                k: r.k,
                mode: "rc".into(),
                flops_total: r.rc_flops,
                flops_fusion: 0,
                seq_len: r.rc_seq_len,
                accuracy: r.rc_accuracy,
            });
            long.push(FlopsRow {
                k: r.k,
                mode: "rf".into(),
                flops_total: r.rf_flops,
                flops_fusion: r.rf_flops - analyzer::flops_encoder(&model, prompt_len)?.total,
                seq_len: r.rf_seq_len,
                accuracy: r.rf_accuracy,
            });
        }
        write(&out.join("flops_curve.csv"), csv)?;
        write(&out.join("flops_curve.json"), serde_json::to_string_pretty(&rows)?)?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        analyzer::write_flops_rows(&long, &out.join("flops_report.json"), &out.join("flops_report.csv"))?;
    }
    Ok(rows)
}

fn load_k_accuracy(out: &Path) -> HashMap<(usize, &'static str), f64> {
    let mut acc = HashMap::new();
    let Ok(text) = std::fs::read_to_string(out.join("sweep.json")) else {
        return acc;
    };
    let Ok(table) = serde_json::from_str::<SweepTable>(&text) else {
        return acc;
    };
    if table.axis != SweepAxis::K {
        return acc;
    }
    for cell in &table.cells {
        let Ok(k) = cell.value.parse::<usize>() else { continue };
        for v in &cell.results.variants {
            let mode = match v.variant.augmentation() {
                Augmentation::Concat => "rc",
                Augmentation::Fusion => "rf",
                Augmentation::None => continue,
            };
            if let Some(m) = v.mean {
                acc.entry((k, mode)).or_insert(m);
            }
        }
    }
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
    pub latency: Option<LatencyBreakdown>,
}

/// Re-evaluates saved checkpoints on regenerated test splits. Latency is
/// measured on the first seed of each variant.
pub fn evaluate_saved(config: &ExperimentConfig, out: &Path, latency_samples: usize) -> Result<Vec<EvalRecord>> {
    config.validate()?;
    let mut records = Vec::new();
    for &variant in &config.variants {
        for (i, &seed) in config.seeds.iter().enumerate() {
            let attempt = || -> Result<(Metrics, Option<LatencyBreakdown>)> {
                let model = load_checkpoint(&seed_dir(out, variant, seed).join("checkpoint.rfck"))?;
                let task = generate_task(&config.data, config.model.hidden, seed)?;
                let store = match VectorStore::load(&store_path(out, seed)) {
                    Ok(s) => s,
                    Err(_) => task.build_store()?,
                };
                let prepared = prepare_samples(config, variant, &task, &store)?;
                let hidden = hidden_retriever(config, variant, &store);
                let metrics = evaluate(&model, &prepared.test, hidden)?;
                let latency = if i == 0 && latency_samples > 0 {
                    let bodies: HashMap<u64, Vec<usize>> =
                        task.train.iter().map(|e| (e.id, e.body().to_vec())).collect();
                    Some(analyzer::measure_latency(
                        &LatencySetup {
                            model: &model,
                            store: &store,
                            encoder: &task.encoder,
                            bodies: &bodies,
                            queries: &task.test,
                            k: config.retrieval.k,
                            metric: config.retrieval.metric,
                            query_mode: config.retrieval.query_mode,
                        },
                        latency_samples,
                    )?)
                } else {
                    None
                };
                Ok((metrics, latency))
            };
            records.push(match attempt() {
                Ok((m, latency)) => EvalRecord {
                    variant,
                    seed,
                    metrics: Some(m),
                    error: None,
                    latency,
                },
                Err(e) => EvalRecord {
                    variant,
                    seed,
                    metrics: None,
                    error: Some(e.to_string()),
                    latency: None,
                },
            });
        }
    }
    write(&out.join("eval.json"), serde_json::to_string_pretty(&records)?)?;
    Ok(records)
}

/// Writes each seed's task (examples and stats) as JSON.
pub fn write_tasks(config: &ExperimentConfig, out: &Path) -> Result<Vec<TaskStats>> {
    config.validate()?;
    let mut stats = Vec::new();
    for &seed in &config.seeds {
        let task = generate_task(&config.data, config.model.hidden, seed)?;
        write(
            &out.join("tasks").join(format!("seed-{seed}.json")),
            serde_json::to_string(&task)?,
        )?;
        stats.push(task.stats);
    }
    Ok(stats)
}

/// Builds and saves each seed's store.
pub fn write_stores(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let mut paths = Vec::new();
    for &seed in &config.seeds {
        let task = generate_task(&config.data, config.model.hidden, seed)?;
        let path = store_path(out, seed);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        task.build_store()?.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
