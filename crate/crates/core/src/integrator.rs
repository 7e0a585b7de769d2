//! Per-site mixture over fusion candidates and its discretization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, RngStream, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{FusedLinear, FusionScale, Linear, Scheme, SchemeKind};
use crate::params::{Bound, ParamGroup, ParamId, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleRole {
    Query,
    Key,
    Value,
    Ffn,
}

impl ModuleRole {
    pub fn name(self) -> &'static str {
        match self {
            ModuleRole::Query => "Query",
            ModuleRole::Key => "Key",
            ModuleRole::Value => "Value",
            ModuleRole::Ffn => "Ffn",
        }
    }
}

impl FromStr for ModuleRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "query" => Ok(ModuleRole::Query),
            "key" => Ok(ModuleRole::Key),
            "value" => Ok(ModuleRole::Value),
            "ffn" => Ok(ModuleRole::Ffn),
            _ => Err(Error::Config(format!("unknown module role {s:?}"))),
        }
    }
}

/// A (layer, role) location whose linear module may fuse retrievals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FusionSite {
    pub layer: usize,
    pub role: ModuleRole,
}

impl fmt::Display for FusionSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer:{} role:{}", self.layer, self.role.name())
    }
}

/// Architecture logits of one site, one per candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    pub logits: ParamId,
}

/// Mixture `Σ_i softmax(α)_i · o_i` over candidates that share one linear.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegratorModule {
    pub linear: Linear,
    pub candidates: Vec<FusedLinear>,
    pub arch: ArchParams,
}

impl IntegratorModule {
    /// Builds an integrator with zero architecture logits (uniform mixture).
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        linear: Linear,
        schemes: Vec<Scheme>,
        scale: FusionScale,
    ) -> Result<Self> {
        if schemes.is_empty() {
            return Err(Error::Config(format!("integrator {name} has no candidates")));
        }
        let m = schemes.len();
        let candidates = schemes
            .into_iter()
            .map(|s| FusedLinear::new(linear.clone(), s, scale))
            .collect();
        let logits = params.add(format!("{name}.alpha"), Array::zeros(&[m]), ParamGroup::Arch);
        Ok(IntegratorModule {
            linear,
            candidates,
            arch: ArchParams { logits },
        })
    }

    pub fn kinds(&self) -> Vec<SchemeKind> {
        self.candidates.iter().map(|c| c.scheme.kind()).collect()
    }

    /// Softmax of the architecture logits.
    pub fn mixture_weights(&self, params: &ParamSet) -> Vec<f64> {
        crate::fusion::rerank_weights(params.get(self.arch.logits).data())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        hits: Option<&Array>,
        rng: &mut RngStream,
        noise_free: bool,
    ) -> Result<Var> {
        let y = self.linear.forward(tape, bound, x)?;
        let outs = self
            .candidates
            .iter()
            .map(|c| c.fuse(tape, bound, y, hits, rng, noise_free))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        let w = tape.softmax(bound.var(self.arch.logits), 0)?;
        tape.weighted_sum(&outs, w)
    }

    /// The chosen candidate after discretization.
    pub fn discretized(&self, params: &ParamSet) -> FusedLinear {
        self.candidates[discretize(params.get(self.arch.logits).data())].clone()
    }
}

/// Argmax over architecture logits; ties go to the lowest index.
pub fn discretize(alpha: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in alpha.iter().enumerate() {
        if a > alpha[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchSpace {
    pub count: u128,
    /// Set when the true count exceeds `u128::MAX`; `count` is then `u128::MAX`.
    pub saturated: bool,
}

/// Number of architectures when `sites_per_layer` sites in each of
/// `num_layers` layers each choose among `candidates` options.
pub fn search_space_size(num_layers: u32, sites_per_layer: u32, candidates: u32) -> Result<SearchSpace> {
    if num_layers == 0 || sites_per_layer == 0 || candidates == 0 {
        return Err(Error::Param("search space arguments must be positive".into()));
    }
    let exponent = num_layers.checked_mul(sites_per_layer);
    Ok(match exponent.and_then(|e| u128::from(candidates).checked_pow(e)) {
        Some(count) => SearchSpace {
            count,
            saturated: false,
        },
        None => SearchSpace {
            count: u128::MAX,
            saturated: true,
        },
    })
}

/// Discretized choice for every searched site.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Architecture {
    pub choices: Vec<(FusionSite, SchemeKind)>,
}

impl Architecture {
    pub fn choice(&self, site: FusionSite) -> Option<SchemeKind> {
        self.choices.iter().find(|(s, _)| *s == site).map(|(_, k)| *k)
    }

    pub fn fusing_sites(&self) -> usize {
        self.choices.iter().filter(|(_, k)| *k != SchemeKind::NoFusion).count()
    }

    /// One line per site: `layer:<n> role:<Role> choice:<Scheme>`.
    pub fn to_text(&self) -> String {
        self.choices
            .iter()
            .map(|(site, kind)| format!("{site} choice:{}\n", kind.name()))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut choices = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("architecture line {}: {line:?}", n + 1));
            let mut layer = None;
            let mut role = None;
            let mut choice = None;
            for field in line.split_whitespace() {
                let (key, value) = field.split_once(':').ok_or_else(bad)?;
                match key {
                    "layer" => layer = Some(value.parse::<usize>().map_err(|_| bad())?),
                    "role" => role = Some(value.parse::<ModuleRole>()?),
                    "choice" => choice = Some(SchemeKind::parse(value).ok_or_else(bad)?),
                    _ => return Err(bad()),
                }
            }
            match (layer, role, choice) {
                (Some(layer), Some(role), Some(choice)) => choices.push((FusionSite { layer, role }, choice)),
                _ => return Err(bad()),
            }
        }
        Ok(Architecture { choices })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize(&[1.0, 0.0, 0.0]), 0);
        assert_eq!(discretize(&[0.0, 5.0, 1.0]), 1);
        assert_eq!(discretize(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(discretize(&[2.0, 7.0, 7.0]), 1);
        assert_eq!(discretize(&[100.0, 105.0, 101.0]), 1);
    }

    #[test]
    fn search_space_examples() {
        assert_eq!(search_space_size(24, 2, 3).unwrap().count, 9u128.pow(24));
        assert_eq!(search_space_size(1, 2, 3).unwrap().count, 9);
        assert_eq!(search_space_size(2, 1, 2).unwrap().count, 4);
        let big = search_space_size(100, 4, 3).unwrap();
        assert!(big.saturated);
        assert!(search_space_size(0, 1, 1).is_err());
    }

    #[test]
    fn architecture_text_round_trip() {
        let arch = Architecture {
            choices: vec![
                (
                    FusionSite {
                        layer: 0,
                        role: ModuleRole::Key,
                    },
                    SchemeKind::Reranker,
                ),
                (
                    FusionSite {
                        layer: 1,
                        role: ModuleRole::Value,
                    },
                    SchemeKind::NoFusion,
                ),
                (
                    FusionSite {
                        layer: 1,
                        role: ModuleRole::Ffn,
                    },
                    SchemeKind::OrderedMask,
                ),
            ],
        };
        let text = arch.to_text();
        assert_eq!(text.lines().next().unwrap(), "layer:0 role:Key choice:Reranker");
        assert_eq!(Architecture::from_text(&text).unwrap(), arch);
        assert_eq!(arch.fusing_sites(), 2);
        assert!(Architecture::from_text("layer:x role:Key choice:Reranker").is_err());
    }
}
