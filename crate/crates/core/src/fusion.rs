//! Ranking schemes that fuse retrieved vectors into a linear module's output.
//!
//! Both schemes only touch the fusion row (the classification token) of the
//! linear output:
//!
//! - reranker: `h + s · Σ_i softmax(r)_i · z_i`
//! - ordered mask: `h + s · Σ_i v_i ⊙ z_i`, where for every dimension `d`,
//!   `c^d` is a relaxed categorical sample over the k hits and
//!   `v^d = 1 - exclusive_cumsum(c^d)`
//!
//! `s` is `1/k` ([`FusionScale::OneOverK`]) or `1`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, FlopScope, RngStream, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionScale {
    #[default]
    OneOverK,
    One,
}

impl FusionScale {
    pub fn factor(self, k: usize) -> f64 {
        match self {
            FusionScale::OneOverK => 1.0 / k as f64,
            FusionScale::One => 1.0,
        }
    }
}

/// Scheme label without parameters, used in configs and exported architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeKind {
    NoFusion,
    Reranker,
    OrderedMask,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::NoFusion => "NoFusion",
            SchemeKind::Reranker => "Reranker",
            SchemeKind::OrderedMask => "OrderedMask",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "NoFusion" => Some(SchemeKind::NoFusion),
            "Reranker" => Some(SchemeKind::Reranker),
            "OrderedMask" => Some(SchemeKind::OrderedMask),
            _ => None,
        }
    }
}

pub const DEFAULT_TAU: f64 = 1.0;
const BETA_RAMP_STEP: f64 = 0.1;

/// Per-site reranker logits, shape `[1, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RerankerParams {
    pub logits: ParamId,
}

impl RerankerParams {
    /// Zero logits: uniform weights over the hits.
    pub fn init(params: &mut ParamSet, name: &str, k: usize) -> Self {
        RerankerParams {
            logits: params.add(name, Array::zeros(&[1, k]), ParamGroup::Weights),
        }
    }
}

/// Per-dimension ordered-mask logits `beta` (`D × k`) and temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderedMaskParams {
    pub logits: ParamId,
    pub tau: f64,
}

impl OrderedMaskParams {
    /// Descending ramp `beta[d][i] = (k - i) · 0.1`, so the expected mask keeps top hits longest.
    pub fn init(params: &mut ParamSet, name: &str, dim: usize, k: usize) -> Self {
        let row: Vec<f64> = (0..k).map(|i| (k - i) as f64 * BETA_RAMP_STEP).collect();
        let data = (0..dim).flat_map(|_| row.iter().copied()).collect();
        OrderedMaskParams {
            logits: params.add(
                name,
                Array::new(vec![dim, k], data).expect("ramp shape"),
                ParamGroup::Weights,
            ),
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scheme {
    NoFusion,
    Reranker(RerankerParams),
    OrderedMask(OrderedMaskParams),
}

impl Scheme {
    pub fn kind(&self) -> SchemeKind {
        match self {
            Scheme::NoFusion => SchemeKind::NoFusion,
            Scheme::Reranker(_) => SchemeKind::Reranker,
            Scheme::OrderedMask(_) => SchemeKind::OrderedMask,
        }
    }
}

/// `Y = X · Wᵀ + b` as parameter handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init(params: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut RngStream) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let w: Vec<f64> = (0..d_in * d_out).map(|_| rng.normal() * std).collect();
        Linear {
            weight: params.add(
                format!("{name}.weight"),
                Array::new(vec![d_out, d_in], w).expect("weight shape"),
                ParamGroup::Weights,
            ),
            bias: params.add(format!("{name}.bias"), Array::zeros(&[d_out]), ParamGroup::Weights),
        }
    }

    pub fn d_out(&self, params: &ParamSet) -> usize {
        params.get(self.weight).rows()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound.var(self.weight), Some(bound.var(self.bias)))
    }
}

/// A linear module whose fusion row receives refined retrieval vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedLinear {
    pub linear: Linear,
    pub scheme: Scheme,
    pub fusion_row: usize,
    pub scale: FusionScale,
    /// Std of Gaussian noise added to every output entry in sampling mode.
    /// Zero in normal use; non-zero builds deliberately degraded candidates.
    pub output_noise: f64,
}

impl FusedLinear {
    pub fn new(linear: Linear, scheme: Scheme, scale: FusionScale) -> Self {
        FusedLinear {
            linear,
            scheme,
            fusion_row: 0,
            scale,
            output_noise: 0.0,
        }
    }

    /// Linear output with the scheme applied to the fusion row.
    ///
    /// `hits` is the `k × D_out` matrix of retrieved vectors; it must be
    /// present exactly when the scheme fuses.
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
        self.fuse(tape, bound, y, hits, rng, noise_free)
    }

    /// Applies the scheme to an already computed linear output `y`.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        y: Var,
        hits: Option<&Array>,
        rng: &mut RngStream,
        noise_free: bool,
    ) -> Result<Var> {
        let fused = match &self.scheme {
            Scheme::NoFusion => y,
            scheme => {
                let hits =
                    hits.ok_or_else(|| Error::Model(format!("{:?} fusion requires retrieval hits", scheme.kind())))?;
                let d_out = tape.shape(y)[1];
                if hits.cols() != d_out {
                    return Err(Error::shape("fused_linear hits", hits.shape(), &[hits.rows(), d_out]));
                }
                let prev = tape.set_scope(FlopScope::Fusion);
                let h = tape.select_row(y, self.fusion_row)?;
                let row = match scheme {
                    Scheme::Reranker(p) => {
                        let hz = tape.constant(hits.clone());
                        fuse_reranked_on(tape, h, hz, bound.var(p.logits), self.scale)?
                    }
                    Scheme::OrderedMask(p) => {
                        let hz_t = tape.constant(hits.transposed());
                        let masks = ordered_masks_on(tape, bound.var(p.logits), p.tau, rng, noise_free)?;
                        fuse_ordered_masked_on(tape, h, hz_t, masks, self.scale)?
                    }
                    Scheme::NoFusion => unreachable!(),
                };
                let out = tape.replace_row(y, self.fusion_row, row)?;
                tape.set_scope(prev);
                out
            }
        };
        if self.output_noise > 0.0 && !noise_free {
            let shape = tape.shape(fused).to_vec();
            let n: usize = shape.iter().product();
            let noise: Vec<f64> = (0..n).map(|_| rng.normal() * self.output_noise).collect();
            let c = tape.constant(Array::new(shape, noise)?);
            return tape.add(fused, c);
        }
        Ok(fused)
    }
}

/// Softmax weights of reranker logits (any shape, normalized over the last axis).
pub fn rerank_weights_on(tape: &mut Tape, logits: Var) -> Result<Var> {
    let last = tape.shape(logits).len() - 1;
    tape.softmax(logits, last)
}

/// `h + s · softmax(r) · H_Z` with `h: [1, D]`, `hz: [k, D]`, `r: [1, k]`.
pub fn fuse_reranked_on(tape: &mut Tape, h: Var, hz: Var, logits: Var, scale: FusionScale) -> Result<Var> {
    let k = tape.shape(hz)[0];
    if tape.value(logits).len() != k {
        return Err(Error::shape("fuse_reranked", tape.shape(logits), &[1, k]));
    }
    let r = tape.reshape(logits, &[1, k])?;
    let w = rerank_weights_on(tape, r)?;
    let mixed = tape.matmul(w, hz)?;
    let scaled = tape.scale(mixed, scale.factor(k));
    let h = tape.reshape(h, &[1, tape.value(hz).cols()])?;
    tape.add(h, scaled)
}

/// Ordered masks `V` (`D × k`) from logits `beta` (`D × k`).
pub fn ordered_masks_on(tape: &mut Tape, beta: Var, tau: f64, rng: &mut RngStream, noise_free: bool) -> Result<Var> {
    let c = tape.gumbel_softmax(beta, tau, rng, noise_free)?;
    masks_on(tape, c)
}

/// `V = max(1 - exclusive_cumsum(c), 0)`; the clamp only removes round-off below zero.
fn masks_on(tape: &mut Tape, c: Var) -> Result<Var> {
    let cs = tape.exclusive_cumsum(c)?;
    let v = tape.affine(cs, -1.0, 1.0);
    Ok(tape.clamp_min(v, 0.0))
}

/// `h + s · Σ_i V[:, i] ⊙ z_i` with `hz_t` the transposed hits (`D × k`).
pub fn fuse_ordered_masked_on(tape: &mut Tape, h: Var, hz_t: Var, masks: Var, scale: FusionScale) -> Result<Var> {
    let (d, k) = (tape.shape(hz_t)[0], tape.shape(hz_t)[1]);
    let masked = tape.mul(masks, hz_t)?;
    let summed = tape.sum_last(masked);
    let row = tape.reshape(summed, &[1, d])?;
    let scaled = tape.scale(row, scale.factor(k));
    let h = tape.reshape(h, &[1, d])?;
    tape.add(h, scaled)
}

/// Normalized reranker weights.
pub fn rerank_weights(logits: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(Array::vector(logits.to_vec()));
    let w = rerank_weights_on(&mut tape, r).expect("vector softmax");
    tape.value(w).data().to_vec()
}

fn hits_matrix(h: &[f64], hz: &[Vec<f64>]) -> Result<Array> {
    if hz.is_empty() {
        return Err(Error::Param("fusion needs at least one retrieval".into()));
    }
    for z in hz {
        if z.len() != h.len() {
            return Err(Error::shape("fusion", &[h.len()], &[z.len()]));
        }
    }
    Array::from_rows(hz)
}

/// Reranked fusion of `hz` into `h`.
pub fn fuse_reranked(h: &[f64], hz: &[Vec<f64>], logits: &[f64], scale: FusionScale) -> Result<Vec<f64>> {
    let hits = hits_matrix(h, hz)?;
    let mut tape = Tape::new();
    let hv = tape.constant(Array::new(vec![1, h.len()], h.to_vec())?);
    let zv = tape.constant(hits);
    let rv = tape.constant(Array::vector(logits.to_vec()));
    let out = fuse_reranked_on(&mut tape, hv, zv, rv, scale)?;
    Ok(tape.value(out).data().to_vec())
}

/// Dropped-index samples `c` and masks `V`, both `D × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderedMaskSample {
    pub choice: Array,
    pub masks: Array,
}

pub fn sample_ordered_masks(
    beta: &Array,
    tau: f64,
    rng: &mut RngStream,
    noise_free: bool,
) -> Result<OrderedMaskSample> {
    let mut tape = Tape::new();
    let b = tape.constant(beta.clone());
    let c = tape.gumbel_softmax(b, tau, rng, noise_free)?;
    let v = masks_on(&mut tape, c)?;
    Ok(OrderedMaskSample {
        choice: tape.value(c).clone(),
        masks: tape.value(v).clone(),
    })
}

/// Masks from given dropped-index distributions `c` (`D × k`).
pub fn masks_from_choice(choice: &Array) -> Result<Array> {
    let mut tape = Tape::new();
    let c = tape.constant(choice.clone());
    let v = masks_on(&mut tape, c)?;
    Ok(tape.value(v).clone())
}

/// Ordered-mask fusion of `hz` into `h` under masks `V` (`D × k`).
pub fn fuse_ordered_masked(h: &[f64], hz: &[Vec<f64>], masks: &Array, scale: FusionScale) -> Result<Vec<f64>> {
    let hits = hits_matrix(h, hz)?;
    if masks.shape() != [h.len(), hz.len()] {
        return Err(Error::shape("fuse_ordered_masked", masks.shape(), &[h.len(), hz.len()]));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(Array::new(vec![1, h.len()], h.to_vec())?);
    let zt = tape.constant(hits.transposed());
    let mv = tape.constant(masks.clone());
    let out = fuse_ordered_masked_on(&mut tape, hv, zt, mv, scale)?;
    Ok(tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len(), "{a:?} vs {b:?}");
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn rerank_weight_examples() {
        close(&rerank_weights(&[0.0, 0.0]), &[0.5, 0.5], 1e-15);
        close(&rerank_weights(&[2f64.ln(), 0.0]), &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
        let w = rerank_weights(&[1.0, 2.0, 3.0]);
        close(&w, &[0.09003, 0.24473, 0.66524], 5e-6);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_reranked_examples() {
        let out = fuse_reranked(&[1.0, 2.0], &[vec![3.0, 4.0]], &[0.7], FusionScale::OneOverK).unwrap();
        assert_eq!(out, vec![4.0, 6.0]);

        let out = fuse_reranked(
            &[0.0, 0.0],
            &[vec![2.0, 0.0], vec![0.0, 2.0]],
            &[0.0, 0.0],
            FusionScale::OneOverK,
        )
        .unwrap();
        close(&out, &[0.5, 0.5], 1e-15);

        let h = [0.3, -1.2, 4.0];
        let out = fuse_reranked(&h, &[vec![0.0; 3], vec![0.0; 3]], &[0.4, -2.0], FusionScale::One).unwrap();
        assert_eq!(out, h.to_vec());
    }

    #[test]
    fn fuse_reranked_dim_mismatch() {
        assert!(fuse_reranked(&[1.0, 2.0], &[vec![1.0]], &[0.0], FusionScale::One).is_err());
    }

    #[test]
    fn masks_from_choice_examples() {
        let c = Array::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0 / 3.0; 3]]).unwrap();
        let v = masks_from_choice(&c).unwrap();
        close(v.row(0), &[1.0, 0.0, 0.0], 0.0);
        close(v.row(1), &[1.0, 1.0, 1.0], 0.0);
        close(v.row(2), &[1.0, 2.0 / 3.0, 1.0 / 3.0], 1e-15);
    }

    #[test]
    fn fuse_ordered_masked_examples() {
        let ones = Array::filled(&[2, 1], 1.0);
        let out = fuse_ordered_masked(&[1.0, 2.0], &[vec![0.5, -1.0]], &ones, FusionScale::OneOverK).unwrap();
        assert_eq!(out, vec![1.5, 1.0]);

        let zeros = Array::zeros(&[2, 2]);
        let out =
            fuse_ordered_masked(&[1.0, 2.0], &[vec![5.0, 5.0], vec![7.0, 7.0]], &zeros, FusionScale::One).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);

        let v = Array::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let out = fuse_ordered_masked(&[0.0, 0.0], &[vec![1.0, 1.0], vec![1.0, 1.0]], &v, FusionScale::One).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn beta_ramp_descends() {
        let mut ps = ParamSet::new();
        let p = OrderedMaskParams::init(&mut ps, "beta", 2, 3);
        let b = ps.get(p.logits);
        assert_eq!(b.shape(), &[2, 3]);
        close(b.row(1), &[0.3, 0.2, 0.1], 1e-15);
        assert_eq!(p.tau, 1.0);
    }

    #[test]
    fn missing_hits_is_an_error() {
        let mut ps = ParamSet::new();
        let mut rng = RngStream::new(0);
        let lin = Linear::init(&mut ps, "lin", 3, 2, &mut rng);
        let r = RerankerParams::init(&mut ps, "r", 2);
        let m = FusedLinear::new(lin, Scheme::Reranker(r), FusionScale::OneOverK);
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape, None);
        let x = tape.constant(Array::zeros(&[4, 3]));
        assert!(matches!(
            m.forward(&mut tape, &b, x, None, &mut rng, true),
            Err(Error::Model(_))
        ));
    }
}
