//! Shipped experiment presets.

use super::config::{ExperimentConfig, SweepAxis, SweepConfig, Variant};
use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 5] = ["default", "motivation", "ablation-rankers", "query-mode", "sweeps"];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = ExperimentConfig {
        name: name.to_string(),
        output_dir: format!("runs/{name}"),
        ..ExperimentConfig::default()
    };
    let values = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let config = match name {
        "default" => base,
        // RC versus RF: accuracy and FLOPs as k grows.
        "motivation" => ExperimentConfig {
            variants: vec![Variant::Baseline, Variant::Concat, Variant::AriAll],
            sweep: SweepConfig {
                axis: SweepAxis::K,
                values: values(&["1", "2", "4", "8", "16"]),
            },
            ..base
        },
        "ablation-rankers" => ExperimentConfig {
            variants: vec![
                Variant::Baseline,
                Variant::RerankerOnly,
                Variant::OrderedOnly,
                Variant::AriReranker,
                Variant::AriOrdered,
                Variant::AriAll,
            ],
            ..base
        },
        "query-mode" => ExperimentConfig {
            sweep: SweepConfig {
                axis: SweepAxis::QueryMode,
                values: values(&["input-text", "hidden-state"]),
            },
            ..base
        },
        "sweeps" => base,
        _ => return Err(Error::Config(format!("unknown preset {name:?}"))),
    };
    config.validate()?;
    Ok(config)
}
