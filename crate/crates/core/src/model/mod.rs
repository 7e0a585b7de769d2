//! Toy pre-norm transformer encoder with masked-token classification.
//!
//! Inputs look like `[cls] body… [mask] [sep]`. The classifier scores the
//! final hidden state at the mask position against the (tied) embeddings of
//! the label tokens. Retrieval can enter in two ways:
//!
//! - concatenation: retrieved token sequences are prepended to the prompt,
//! - fusion: retrieved vectors are added at the classification-token row of
//!   configured fusion sites (Q/K/V projections or the FFN output).

mod checkpoint;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, FlopScope, RngStream, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{FusedLinear, FusionScale, Linear, OrderedMaskParams, RerankerParams, Scheme, SchemeKind};
use crate::integrator::{Architecture, FusionSite, IntegratorModule, ModuleRole};
use crate::params::{Bound, ParamGroup, ParamId, ParamSet};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
pub const SEP: usize = 3;
pub const NUM_SPECIAL: usize = 4;

const EMBED_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    Concat,
    Fusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub label_tokens: Vec<usize>,
    pub augmentation: Augmentation,
    pub fusion_sites: Vec<FusionSite>,
    /// Candidate schemes per site. One entry fixes the scheme; more build a searchable mixture.
    pub candidates: Vec<SchemeKind>,
    pub k: usize,
    pub fusion_scale: FusionScale,
    /// Set once a searched mixture has been discretized.
    pub architecture: Option<Architecture>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            hidden: 32,
            heads: 2,
            ffn_hidden: 128,
            vocab: 64,
            max_len: 64,
            label_tokens: vec![4, 5, 6, 7],
            augmentation: Augmentation::None,
            fusion_sites: default_sites(2),
            candidates: vec![SchemeKind::NoFusion, SchemeKind::Reranker, SchemeKind::OrderedMask],
            k: 8,
            fusion_scale: FusionScale::OneOverK,
            architecture: None,
        }
    }
}

/// Key and value projections of every layer.
pub fn default_sites(num_layers: usize) -> Vec<FusionSite> {
    (0..num_layers)
        .flat_map(|layer| {
            [ModuleRole::Key, ModuleRole::Value]
                .into_iter()
                .map(move |role| FusionSite { layer, role })
        })
        .collect()
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return fail("model dimensions must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.max_len < 3 {
            return fail(format!("max_len {} below 3", self.max_len));
        }
        if self.label_tokens.is_empty() {
            return fail("no label tokens".into());
        }
        if let Some(&bad) = self.label_tokens.iter().find(|&&t| t >= self.vocab) {
            return fail(format!("label token {bad} outside vocabulary {}", self.vocab));
        }
        let mut sites = self.fusion_sites.clone();
        sites.sort();
        if sites.windows(2).any(|w| w[0] == w[1]) {
            return fail("duplicate fusion site".into());
        }
        if let Some(s) = sites.iter().find(|s| s.layer >= self.num_layers) {
            return fail(format!("fusion site {s} beyond {} layers", self.num_layers));
        }
        if self.augmentation == Augmentation::Fusion {
            if self.candidates.is_empty() {
                return fail("fusion needs at least one candidate scheme".into());
            }
            if self.k == 0 {
                return fail("fusion needs k >= 1".into());
            }
        }
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.label_tokens.len()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    fn fuses(&self, site: FusionSite) -> bool {
        self.augmentation == Augmentation::Fusion && self.fusion_sites.contains(&site)
    }
}

/// A linear module at a possible fusion site.
#[derive(Clone, Debug, PartialEq)]
pub enum SiteModule {
    Plain(Linear),
    Fused(FusedLinear),
    Mixture(IntegratorModule),
}

impl SiteModule {
    pub fn fuses(&self) -> bool {
        match self {
            SiteModule::Plain(_) => false,
            SiteModule::Fused(f) => f.scheme.kind() != SchemeKind::NoFusion,
            SiteModule::Mixture(m) => m.kinds().iter().any(|k| *k != SchemeKind::NoFusion),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        hits: Option<&Array>,
        rng: &mut RngStream,
        noise_free: bool,
    ) -> Result<Var> {
        match self {
            SiteModule::Plain(l) => l.forward(tape, bound, x),
            SiteModule::Fused(f) => f.forward(tape, bound, x, hits, rng, noise_free),
            SiteModule::Mixture(m) => m.forward(tape, bound, x, hits, rng, noise_free),
        }
    }

    fn schemes_mut(&mut self) -> Vec<&mut Scheme> {
        match self {
            SiteModule::Plain(_) => Vec::new(),
            SiteModule::Fused(f) => vec![&mut f.scheme],
            SiteModule::Mixture(m) => m.candidates.iter_mut().map(|c| &mut c.scheme).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn init(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNormParams {
            gain: params.add(format!("{name}.gain"), Array::filled(&[dim], 1.0), ParamGroup::Weights),
            bias: params.add(format!("{name}.bias"), Array::zeros(&[dim]), ParamGroup::Weights),
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gain), bound.var(self.bias))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln_attn: LayerNormParams,
    pub query: SiteModule,
    pub key: SiteModule,
    pub value: SiteModule,
    pub output: Linear,
    pub ln_ffn: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: SiteModule,
}

impl EncoderLayer {
    pub fn site(&self, role: ModuleRole) -> &SiteModule {
        match role {
            ModuleRole::Query => &self.query,
            ModuleRole::Key => &self.key,
            ModuleRole::Value => &self.value,
            ModuleRole::Ffn => &self.ffn_out,
        }
    }

    fn site_mut(&mut self, role: ModuleRole) -> &mut SiteModule {
        match role {
            ModuleRole::Query => &mut self.query,
            ModuleRole::Key => &mut self.key,
            ModuleRole::Value => &mut self.value,
            ModuleRole::Ffn => &mut self.ffn_out,
        }
    }
}

/// Where fusion sites get their retrieved vectors.
#[derive(Clone, Copy)]
pub enum Retrieval<'a> {
    /// No retrieval; fusing sites fail.
    Off,
    /// One `k × D` hit matrix reused at every site.
    Static(&'a Array),
    /// Called at each fusing site with the classification-token row of the site input.
    PerSite(&'a dyn Fn(&[f64]) -> Result<Array>),
}

/// One model input: token ids and the mask position.
#[derive(Clone, Copy)]
pub struct ModelInput<'a> {
    pub tokens: &'a [usize],
    pub mask_pos: usize,
    pub retrieval: Retrieval<'a>,
}

pub struct ForwardOutput {
    /// Label logits, shape `[num_labels]`.
    pub logits: Var,
    /// Attention probabilities per layer and head, each `L × L`.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub tokens: Vec<usize>,
    pub mask_pos: usize,
    pub label: usize,
}

impl Example {
    /// Builds `[cls] body [mask] [sep]`.
    pub fn from_body(id: u64, body: &[usize], label: usize) -> Self {
        let mut tokens = Vec::with_capacity(body.len() + 3);
        tokens.push(CLS);
        tokens.extend_from_slice(body);
        tokens.push(MASK);
        tokens.push(SEP);
        Example {
            id,
            tokens,
            mask_pos: body.len() + 1,
            label,
        }
    }

    pub fn body(&self) -> &[usize] {
        &self.tokens[1..self.mask_pos]
    }

    pub fn validate(&self) -> Result<()> {
        let masks = self.tokens.iter().filter(|&&t| t == MASK).count();
        if masks != 1 || self.tokens.get(self.mask_pos) != Some(&MASK) {
            return Err(Error::Model(format!(
                "example {} needs exactly one mask token",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub ln_final: LayerNormParams,
    tau: f64,
}

impl EncoderModel {
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let mut params = ParamSet::new();
        let embed = |n: usize, rng: &mut RngStream| -> Vec<f64> { (0..n).map(|_| rng.normal() * EMBED_STD).collect() };
        let token_embedding = params.add(
            "embed.tokens",
            Array::new(vec![config.vocab, d], embed(config.vocab * d, rng))?,
            ParamGroup::Weights,
        );
        let position_embedding = params.add(
            "embed.positions",
            Array::new(vec![config.max_len, d], embed(config.max_len * d, rng))?,
            ParamGroup::Weights,
        );
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("layer{l}");
            let ln_attn = LayerNormParams::init(&mut params, &format!("{p}.ln_attn"), d);
            let site = |role: ModuleRole, name: &str, d_in: usize, params: &mut ParamSet, rng: &mut RngStream| {
                let linear = Linear::init(params, &format!("{p}.{name}"), d_in, d, rng);
                build_site(
                    &config,
                    params,
                    FusionSite { layer: l, role },
                    &format!("{p}.{name}"),
                    linear,
                )
            };
            let query = site(ModuleRole::Query, "query", d, &mut params, rng)?;
            let key = site(ModuleRole::Key, "key", d, &mut params, rng)?;
            let value = site(ModuleRole::Value, "value", d, &mut params, rng)?;
            let output = Linear::init(&mut params, &format!("{p}.attn_out"), d, d, rng);
            let ln_ffn = LayerNormParams::init(&mut params, &format!("{p}.ln_ffn"), d);
            let ffn_in = Linear::init(&mut params, &format!("{p}.ffn_in"), d, config.ffn_hidden, rng);
            let ffn_out = site(ModuleRole::Ffn, "ffn_out", config.ffn_hidden, &mut params, rng)?;
            layers.push(EncoderLayer {
                ln_attn,
                query,
                key,
                value,
                output,
                ln_ffn,
                ffn_in,
                ffn_out,
            });
        }
        let ln_final = LayerNormParams::init(&mut params, "ln_final", d);
        let mut model = EncoderModel {
            config,
            params,
            token_embedding,
            position_embedding,
            layers,
            ln_final,
            tau: crate::fusion::DEFAULT_TAU,
        };
        if let Some(arch) = model.config.architecture.clone() {
            model.apply_architecture(&arch)?;
        }
        Ok(model)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Sets the ordered-mask temperature at every site.
    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0) {
            return Err(Error::Param(format!("temperature must be positive, got {tau}")));
        }
        self.tau = tau;
        for layer in &mut self.layers {
            for role in [ModuleRole::Query, ModuleRole::Key, ModuleRole::Value, ModuleRole::Ffn] {
                for scheme in layer.site_mut(role).schemes_mut() {
                    if let Scheme::OrderedMask(p) = scheme {
                        p.tau = tau;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn site(&self, site: FusionSite) -> &SiteModule {
        self.layers[site.layer].site(site.role)
    }

    pub fn site_mut(&mut self, site: FusionSite) -> &mut SiteModule {
        self.layers[site.layer].site_mut(site.role)
    }

    /// Sites that currently hold a searchable mixture.
    pub fn mixture_sites(&self) -> Vec<FusionSite> {
        self.config
            .fusion_sites
            .iter()
            .copied()
            .filter(|s| matches!(self.site(*s), SiteModule::Mixture(_)))
            .collect()
    }

    /// Sets Gaussian output noise on every candidate of `kind` inside a mixture.
    ///
    /// Used to build deliberately degraded candidates; returns how many were changed.
    pub fn set_candidate_noise(&mut self, kind: SchemeKind, std: f64) -> usize {
        let mut changed = 0;
        for site in self.mixture_sites() {
            if let SiteModule::Mixture(m) = self.site_mut(site) {
                for c in m.candidates.iter_mut().filter(|c| c.scheme.kind() == kind) {
                    c.output_noise = std;
                    changed += 1;
                }
            }
        }
        changed
    }

    /// Argmax choice at every mixture site.
    pub fn discretize(&self) -> Architecture {
        let mut choices = Vec::new();
        for site in &self.config.fusion_sites {
            match self.site(*site) {
                SiteModule::Mixture(m) => {
                    let idx = crate::integrator::discretize(self.params.get(m.arch.logits).data());
                    choices.push((*site, m.candidates[idx].scheme.kind()));
                }
                SiteModule::Fused(f) => choices.push((*site, f.scheme.kind())),
                SiteModule::Plain(_) => {}
            }
        }
        Architecture { choices }
    }

    /// Replaces every mixture named in `arch` by its chosen candidate.
    ///
    /// Parameters are untouched, so the parameter layout (and checkpoints)
    /// stay compatible with the searched model.
    pub fn apply_architecture(&mut self, arch: &Architecture) -> Result<()> {
        for (site, kind) in &arch.choices {
            if !self.config.fusion_sites.contains(site) {
                return Err(Error::Config(format!("{site} is not a fusion site")));
            }
            let replaced = match self.site(*site) {
                SiteModule::Mixture(m) => {
                    let cand = m
                        .candidates
                        .iter()
                        .find(|c| c.scheme.kind() == *kind)
                        .ok_or_else(|| Error::Config(format!("{site} has no {} candidate", kind.name())))?;
                    if *kind == SchemeKind::NoFusion {
                        SiteModule::Plain(cand.linear.clone())
                    } else {
                        SiteModule::Fused(cand.clone())
                    }
                }
                SiteModule::Fused(f) if f.scheme.kind() == *kind => continue,
                SiteModule::Plain(_) if *kind == SchemeKind::NoFusion => continue,
                _ => return Err(Error::Config(format!("{site} cannot take {}", kind.name()))),
            };
            *self.site_mut(*site) = replaced;
        }
        self.config.architecture = Some(arch.clone());
        Ok(())
    }

    /// Full forward pass returning label logits at the mask position.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: ModelInput<'_>,
        rng: &mut RngStream,
        noise_free: bool,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let n = input.tokens.len();
        if n > cfg.max_len {
            return Err(Error::Model(format!(
                "sequence length {n} exceeds max_len {}",
                cfg.max_len
            )));
        }
        if input.mask_pos >= n || input.tokens[input.mask_pos] != MASK {
            return Err(Error::Model(format!(
                "mask position {} is not a mask token",
                input.mask_pos
            )));
        }
        let d = cfg.hidden;

        let prev = tape.set_scope(FlopScope::Embedding);
        let tok = tape.gather_rows(bound.var(self.token_embedding), input.tokens)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(bound.var(self.position_embedding), &positions)?;
        let mut x = tape.add(tok, pos)?;

        let mut attention = Vec::with_capacity(cfg.num_layers * cfg.heads);
        for layer in &self.layers {
            tape.set_scope(FlopScope::Other);
            let a = layer.ln_attn.forward(tape, bound, x)?;
            tape.set_scope(FlopScope::AttentionProjections);
            let q = self.run_site(tape, bound, &layer.query, a, input.retrieval, rng, noise_free)?;
            let k = self.run_site(tape, bound, &layer.key, a, input.retrieval, rng, noise_free)?;
            let v = self.run_site(tape, bound, &layer.value, a, input.retrieval, rng, noise_free)?;

            tape.set_scope(FlopScope::AttentionScores);
            let dh = cfg.head_dim();
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let probs = tape.softmax(scaled, 1)?;
                attention.push(probs);
                heads.push(tape.matmul(probs, vh)?);
            }
            let mixed = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            };
            tape.set_scope(FlopScope::AttentionProjections);
            let o = layer.output.forward(tape, bound, mixed)?;
            tape.set_scope(FlopScope::Other);
            x = tape.add(x, o)?;

            let f = layer.ln_ffn.forward(tape, bound, x)?;
            tape.set_scope(FlopScope::Ffn);
            let hidden = layer.ffn_in.forward(tape, bound, f)?;
            let act = tape.gelu(hidden);
            // The FFN site queries with its block input, which lives in the model width.
            let hits = self.site_hits(tape, &layer.ffn_out, f, input.retrieval)?;
            let out = layer
                .ffn_out
                .forward(tape, bound, act, hits.as_ref(), rng, noise_free)?;
            tape.set_scope(FlopScope::Other);
            x = tape.add(x, out)?;
            debug_assert_eq!(tape.shape(x), &[n, d]);
        }

        let xf = self.ln_final.forward(tape, bound, x)?;
        tape.set_scope(FlopScope::Classifier);
        let h = tape.select_row(xf, input.mask_pos)?;
        let labels = tape.gather_rows(bound.var(self.token_embedding), &cfg.label_tokens)?;
        let logits = tape.matmul_nt(h, labels)?;
        let logits = tape.reshape(logits, &[cfg.num_labels()])?;
        tape.set_scope(prev);
        Ok(ForwardOutput { logits, attention })
    }

    fn site_hits(
        &self,
        tape: &Tape,
        module: &SiteModule,
        query_src: Var,
        retrieval: Retrieval<'_>,
    ) -> Result<Option<Array>> {
        if !module.fuses() {
            return Ok(None);
        }
        match retrieval {
            Retrieval::Off => Ok(None),
            Retrieval::Static(h) => Ok(Some(h.clone())),
            Retrieval::PerSite(f) => Ok(Some(f(tape.value(query_src).row(0))?)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_site(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        module: &SiteModule,
        x: Var,
        retrieval: Retrieval<'_>,
        rng: &mut RngStream,
        noise_free: bool,
    ) -> Result<Var> {
        let hits = self.site_hits(tape, module, x, retrieval)?;
        module.forward(tape, bound, x, hits.as_ref(), rng, noise_free)
    }

    /// Mean cross-entropy over a batch.
    pub fn loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[(ModelInput<'_>, usize)],
        rng: &mut RngStream,
        noise_free: bool,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Param("empty batch".into()));
        }
        let mut total: Option<Var> = None;
        for (input, label) in batch {
            let out = self.forward(tape, bound, *input, rng, noise_free)?;
            let ce = tape.cross_entropy(out.logits, *label)?;
            total = Some(match total {
                None => ce,
                Some(t) => tape.add(t, ce)?,
            });
        }
        Ok(tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64))
    }

    /// Label logits as plain values, with no parameter tracking.
    pub fn predict(&self, input: ModelInput<'_>, rng: &mut RngStream, noise_free: bool) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, None);
        let out = self.forward(&mut tape, &bound, input, rng, noise_free)?;
        Ok(tape.value(out.logits).data().to_vec())
    }
}

fn build_site(
    config: &ModelConfig,
    params: &mut ParamSet,
    site: FusionSite,
    name: &str,
    linear: Linear,
) -> Result<SiteModule> {
    if !config.fuses(site) {
        return Ok(SiteModule::Plain(linear));
    }
    let d_out = linear.d_out(params);
    let mut schemes = Vec::with_capacity(config.candidates.len());
    for kind in &config.candidates {
        schemes.push(match kind {
            SchemeKind::NoFusion => Scheme::NoFusion,
            SchemeKind::Reranker => Scheme::Reranker(RerankerParams::init(params, &format!("{name}.rerank"), config.k)),
            SchemeKind::OrderedMask => Scheme::OrderedMask(OrderedMaskParams::init(
                params,
                &format!("{name}.mask"),
                d_out,
                config.k,
            )),
        });
    }
    if schemes.len() == 1 {
        let scheme = schemes.pop().expect("one scheme");
        return Ok(match scheme {
            Scheme::NoFusion => SiteModule::Plain(linear),
            s => SiteModule::Fused(FusedLinear::new(linear, s, config.fusion_scale)),
        });
    }
    Ok(SiteModule::Mixture(IntegratorModule::new(
        params,
        name,
        linear,
        schemes,
        config.fusion_scale,
    )?))
}

/// Token stream for retrieval concatenation.
///
/// Produces `[cls] z_1 [sep] … z_k [sep] prompt[1..]`. When this exceeds
/// `max_len`, tokens are dropped from the end of the retrieval block so the
/// prompt segment always survives intact. Returns the tokens and the new
/// mask position.
pub fn build_concat_input(
    example: &Example,
    retrievals: &[Vec<usize>],
    k: usize,
    max_len: usize,
) -> Result<(Vec<usize>, usize)> {
    let prompt = &example.tokens;
    if prompt.len() > max_len {
        return Err(Error::Model(format!(
            "prompt length {} exceeds max_len {max_len}",
            prompt.len()
        )));
    }
    let mut block: Vec<usize> = Vec::new();
    for z in retrievals.iter().take(k) {
        block.extend_from_slice(z);
        block.push(SEP);
    }
    block.truncate(max_len - prompt.len());
    let mut tokens = Vec::with_capacity(prompt.len() + block.len());
    tokens.push(CLS);
    tokens.extend_from_slice(&block);
    tokens.extend_from_slice(&prompt[1..]);
    let mask_pos = example.mask_pos + block.len();
    Ok((tokens, mask_pos))
}

#[cfg(test)]
mod tests;
