//! Experiment configuration and its flat dotted-key file format.
//!
//! ```text
//! # comment
//! name = "default"
//! model.hidden = 32
//! retrieval.metric = "l2"
//! ```
//!
//! Keys are TOML dotted keys, so any TOML parser reads the files. Writing
//! emits one `key = value` line per leaf in sorted key order.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionScale, SchemeKind};
use crate::integrator::{FusionSite, ModuleRole};
use crate::model::{Augmentation, ModelConfig, NUM_SPECIAL};
use crate::retriever::{Metric, QueryMode};
use crate::trainer::TrainConfig;

/// Seeds used for every multi-seed average unless overridden.
pub const DEFAULT_SEEDS: [u64; 5] = [13, 21, 42, 87, 100];

/// What a pipeline trains: augmentation mode plus candidate set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    Concat,
    RerankerOnly,
    OrderedOnly,
    AriReranker,
    AriOrdered,
    AriAll,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::Concat,
        Variant::RerankerOnly,
        Variant::OrderedOnly,
        Variant::AriReranker,
        Variant::AriOrdered,
        Variant::AriAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Concat => "concat",
            Variant::RerankerOnly => "reranker-only",
            Variant::OrderedOnly => "ordered-only",
            Variant::AriReranker => "ari-reranker",
            Variant::AriOrdered => "ari-ordered",
            Variant::AriAll => "ari-all",
        }
    }

    pub fn augmentation(self) -> Augmentation {
        match self {
            Variant::Baseline => Augmentation::None,
            Variant::Concat => Augmentation::Concat,
            _ => Augmentation::Fusion,
        }
    }

    pub fn candidates(self) -> Vec<SchemeKind> {
        use SchemeKind::*;
        match self {
            Variant::Baseline | Variant::Concat => vec![NoFusion],
            Variant::RerankerOnly => vec![Reranker],
            Variant::OrderedOnly => vec![OrderedMask],
            Variant::AriReranker => vec![NoFusion, Reranker],
            Variant::AriOrdered => vec![NoFusion, OrderedMask],
            Variant::AriAll => vec![NoFusion, Reranker, OrderedMask],
        }
    }

    /// Whether training starts with an architecture search.
    pub fn searches(self) -> bool {
        self.candidates().len() > 1
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts variant names plus the mode aliases `none` and `fusion`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => return Ok(Variant::Baseline),
            "fusion" => return Ok(Variant::AriAll),
            _ => {}
        }
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_len: usize,
    /// Roles fused in every layer.
    pub sites: Vec<ModuleRole>,
    pub fusion_scale: FusionScale,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            layers: 2,
            hidden: 32,
            heads: 2,
            ffn_hidden: 128,
            max_len: 64,
            sites: vec![ModuleRole::Key, ModuleRole::Value],
            fusion_scale: FusionScale::OneOverK,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    /// Training and validation examples per class.
    pub shots: usize,
    pub test_per_class: usize,
    pub body_len: usize,
    pub vocab: usize,
    /// Tokens in each class cluster.
    pub cluster_size: usize,
    /// Probability a body token comes from its own class cluster.
    pub signal: f64,
    /// Probability a body token comes from another class's cluster.
    pub cross: f64,
    /// Per-token deviation from its class prototype in the retrieval encoder.
    pub encoder_noise: f64,
    /// Per-coordinate scale of retrieval encodings.
    pub encoder_scale: f64,
    /// Target top-1 neighbor class agreement of the generated pool.
    pub purity: f64,
    /// Fixes clusters and the retrieval encoder; run seeds only resample examples.
    pub task_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 4,
            shots: 16,
            test_per_class: 50,
            body_len: 5,
            vocab: 64,
            cluster_size: 12,
            signal: 0.55,
            cross: 0.15,
            encoder_noise: 0.5,
            encoder_scale: 10.0,
            purity: 0.8,
            task_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub metric: Metric,
    pub query_mode: QueryMode,
    pub exclude_self: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 8,
            metric: Metric::L2,
            query_mode: QueryMode::InputText,
            exclude_self: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    K,
    Metric,
    FusionSites,
    QueryMode,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Metric => "metric",
            SweepAxis::FusionSites => "fusion-sites",
            SweepAxis::QueryMode => "query-mode",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepAxis::K,
            SweepAxis::Metric,
            SweepAxis::FusionSites,
            SweepAxis::QueryMode,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            axis: SweepAxis::K,
            values: ["1", "2", "4", "8"].map(String::from).to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsConfig {
    pub k_values: Vec<usize>,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        FlopsConfig {
            k_values: vec![0, 1, 2, 4, 8, 16, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub variants: Vec<Variant>,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub retrieval: RetrievalConfig,
    pub sweep: SweepConfig,
    pub flops: FlopsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "default".into(),
            seeds: DEFAULT_SEEDS.to_vec(),
            output_dir: "runs/default".into(),
            variants: vec![Variant::AriAll],
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            retrieval: RetrievalConfig::default(),
            sweep: SweepConfig::default(),
            flops: FlopsConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub mode: Option<Variant>,
    pub out: Option<String>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// One `key = value` line per leaf, keys sorted.
    pub fn to_text(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        Ok(lines.into_iter().map(|l| l + "\n").collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(k) = o.k {
            self.retrieval.k = k;
        }
        if let Some(mode) = o.mode {
            self.variants = vec![mode];
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.seeds.is_empty() {
            return fail("no seeds");
        }
        if self.variants.is_empty() {
            return fail("no variants");
        }
        let d = &self.data;
        if d.classes < 2 {
            return fail("data.classes must be at least 2");
        }
        if d.shots == 0 {
            return fail("data.shots must be at least 1");
        }
        if d.body_len == 0 || d.body_len + 3 > self.model.max_len {
            return fail("data.body_len must be in 1..=model.max_len-3");
        }
        if d.cluster_size == 0 {
            return fail("data.cluster_size must be positive");
        }
        if !(0.0..=1.0).contains(&d.signal) || !(0.0..=1.0).contains(&d.cross) || d.signal + d.cross > 1.0 {
            return fail("data.signal and data.cross must be probabilities with sum <= 1");
        }
        if self.retrieval.k == 0 {
            return fail("retrieval.k must be positive");
        }
        self.train.validate()?;
        for &v in &self.variants {
            self.model_config(v)?.validate()?;
        }
        crate::harness::task::TaskLayout::new(d)?;
        Ok(())
    }

    pub fn fusion_sites(&self) -> Vec<FusionSite> {
        (0..self.model.layers)
            .flat_map(|layer| self.model.sites.iter().map(move |&role| FusionSite { layer, role }))
            .collect()
    }

    /// Model configuration for one variant.
    pub fn model_config(&self, variant: Variant) -> Result<ModelConfig> {
        let m = &self.model;
        let config = ModelConfig {
            num_layers: m.layers,
            hidden: m.hidden,
            heads: m.heads,
            ffn_hidden: m.ffn_hidden,
            vocab: self.data.vocab,
            max_len: m.max_len,
            label_tokens: (NUM_SPECIAL..NUM_SPECIAL + self.data.classes).collect(),
            augmentation: variant.augmentation(),
            fusion_sites: self.fusion_sites(),
            candidates: variant.candidates(),
            k: self.retrieval.k,
            fusion_scale: m.fusion_scale,
            architecture: None,
        };
        config.validate()?;
        Ok(config)
    }

    /// Copy with one sweep axis set to `value`.
    pub fn with_axis(&self, axis: SweepAxis, value: &str) -> Result<Self> {
        let mut c = self.clone();
        let bad = || Error::Config(format!("bad {} value {value:?}", axis.name()));
        match axis {
            SweepAxis::K => c.retrieval.k = value.parse().map_err(|_| bad())?,
            SweepAxis::Metric => {
                c.retrieval.metric = match value {
                    "l2" | "L2" => Metric::L2,
                    "ip" | "inner_product" | "inner-product" => Metric::InnerProduct,
                    _ => return Err(bad()),
                }
            }
            SweepAxis::FusionSites => {
                c.model.sites = value
                    .split('+')
                    .map(|r| r.trim().parse::<ModuleRole>())
                    .collect::<Result<Vec<_>>>()?;
            }
            SweepAxis::QueryMode => {
                c.retrieval.query_mode = match value {
                    "input-text" | "input_text" => QueryMode::InputText,
                    "hidden-state" | "hidden_state" => QueryMode::HiddenState,
                    _ => return Err(bad()),
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        leaf => out.push(format!("{prefix} = {leaf}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        let text = c.to_text().unwrap();
        assert!(text.contains("model.hidden = 32\n"), "{text}");
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn awkward_floats_round_trip() {
        let mut c = ExperimentConfig::default();
        c.train.lr_weights = 0.1 + 0.2;
        c.data.encoder_noise = 1e-300;
        c.train.tau_end = 1.0 / 3.0;
        let back = ExperimentConfig::parse(&c.to_text().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_use_defaults() {
        let c = ExperimentConfig::parse("model.hidden = 16\nretrieval.k = 4\n").unwrap();
        assert_eq!(c.model.hidden, 16);
        assert_eq!(c.retrieval.k, 4);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            ExperimentConfig::parse("model.hiden = 16"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("data.classes = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("data.vocab = 20"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("model.heads = 3"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overrides_apply() {
        let mut c = ExperimentConfig::default();
        c.apply(&Overrides {
            seed: Some(5),
            k: Some(3),
            mode: Some("none".parse().unwrap()),
            out: Some("x".into()),
        })
        .unwrap();
        assert_eq!(c.seeds, vec![5]);
        assert_eq!(c.retrieval.k, 3);
        assert_eq!(c.variants, vec![Variant::Baseline]);
        assert_eq!(c.output_dir, "x");
    }

    #[test]
    fn axes_apply() {
        let c = ExperimentConfig::default();
        assert_eq!(c.with_axis(SweepAxis::K, "2").unwrap().retrieval.k, 2);
        assert_eq!(
            c.with_axis(SweepAxis::Metric, "ip").unwrap().retrieval.metric,
            Metric::InnerProduct
        );
        assert_eq!(
            c.with_axis(SweepAxis::FusionSites, "key+value").unwrap().model.sites,
            vec![ModuleRole::Key, ModuleRole::Value]
        );
        assert_eq!(
            c.with_axis(SweepAxis::QueryMode, "hidden-state")
                .unwrap()
                .retrieval
                .query_mode,
            QueryMode::HiddenState
        );
        assert!(c.with_axis(SweepAxis::K, "zero").is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("fusion".parse::<Variant>().unwrap(), Variant::AriAll);
        assert!("bogus".parse::<Variant>().is_err());
    }
}
