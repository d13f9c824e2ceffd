//! Spatial-temporal aware router.
//!
//! Visual and textual embeddings share a projection into a router space.
//! Mean-pooled visual features pass a two-layer GELU MLP (spatial logits);
//! the textual stream, prefixed with a learnable summary token, passes one
//! transformer block and is average-pooled (temporal logits). The summary
//! token's output drives a sigmoid temperature that scales the summed logits
//! before Gumbel-softmax selection of the active layers.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::params::{fan_in_param, normal_param, param_tree, zero_param};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transformer::{layer_forward, LayerParams};

/// Which load-balance regularizer to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BalanceFormulation {
    /// Squared load ratios from the top-k indicators, `ε = 1e-6`.
    Paper,
    /// `K · Σ_i f_i · P_i` with usage share `f` and mean soft probability `P`.
    #[default]
    Fraction,
}

impl std::str::FromStr for BalanceFormulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(BalanceFormulation::Paper),
            "fraction" => Ok(BalanceFormulation::Fraction),
            other => Err(Error::Config(format!("unknown balance formulation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    /// Shared projection width.
    pub d1: usize,
    /// Spatial MLP hidden width.
    pub d2: usize,
    /// Heads in the temporal block.
    pub heads: usize,
    pub gumbel_tau: f64,
    pub balance: BalanceFormulation,
}

impl RouterConfig {
    /// `d1 = d/2`, `d2 = d1/2`.
    pub fn for_width(width: usize) -> RouterConfig {
        let d1 = (width / 2).max(2);
        RouterConfig {
            d1,
            d2: (d1 / 2).max(1),
            heads: 2,
            gumbel_tau: 1.0,
            balance: BalanceFormulation::Fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d1 == 0 || self.d2 == 0 || self.heads == 0 || !self.d1.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("bad router widths {self:?}")));
        }
        if !(self.gumbel_tau > 0.0) {
            return Err(Error::Config(format!("gumbel_tau must be positive, got {}", self.gumbel_tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RouterParams {
    pub proj: Tensor,
    pub spatial_w1: Tensor,
    pub spatial_b1: Tensor,
    pub spatial_w2: Tensor,
    pub summary: Tensor,
    pub temporal: LayerParams,
    pub temporal_out: Tensor,
    pub temp_w: Tensor,
    pub temp_b: Tensor,
}

param_tree!(RouterParams {
    proj,
    spatial_w1,
    spatial_b1,
    spatial_w2,
    summary,
    temporal,
    temporal_out,
    temp_w,
    temp_b,
});

impl RouterParams {
    pub fn init(width: usize, layers: usize, config: &RouterConfig, rng: &mut Rng) -> RouterParams {
        let (d1, d2) = (config.d1, config.d2);
        RouterParams {
            proj: fan_in_param(rng, &[width, d1]),
            spatial_w1: fan_in_param(rng, &[d1, d2]),
            spatial_b1: zero_param(&[d2]),
            spatial_w2: fan_in_param(rng, &[d2, layers]),
            summary: normal_param(rng, &[d1]),
            temporal: LayerParams::init(d1, rng),
            temporal_out: fan_in_param(rng, &[d1, layers]),
            temp_w: fan_in_param(rng, &[d1, 1]),
            temp_b: zero_param(&[1]),
        }
    }

    pub fn layers(&self) -> usize {
        self.spatial_w2.shape()[1]
    }

    pub fn d1(&self) -> usize {
        self.proj.shape()[1]
    }

    /// Projects both modalities with the same matrix.
    pub fn project_shared(&self, visual: &Tensor, text: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = self.proj.shape()[0];
        for (name, t) in [("visual", visual), ("text", text)] {
            contract!(
                t.rank() == 3 && t.shape()[2] == d,
                "{name} features {:?} do not have width {d}",
                t.shape()
            );
        }
        Ok((visual.matmul(&self.proj)?, text.matmul(&self.proj)?))
    }

    /// Mean-pool over tokens, then `W2 · GELU(W1 · x + b1)`: `[b, K]`.
    pub fn spatial_weights(&self, h_img: &Tensor) -> Result<Tensor> {
        h_img
            .mean_axis(1)?
            .matmul(&self.spatial_w1)?
            .add_row(&self.spatial_b1)?
            .gelu()
            .matmul(&self.spatial_w2)
    }

    /// Runs the temporal block over `[summary; h_text]`. Returns the block
    /// output at the summary position `[b, d1]` and at the text positions
    /// `[b, n_text, d1]`.
    fn temporal_block(&self, h_text: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
        let (b, n, d1) = (h_text.shape()[0], h_text.shape()[1], h_text.shape()[2]);
        let summary = self.summary.reshape(&[1, 1, d1])?.expand(0, b)?;
        let seq = Tensor::concat(&[summary, h_text.clone()], 1)?;
        let out = layer_forward(&seq, &self.temporal, heads)?;
        Ok((out.select(1, 0)?, out.slice(1, 1, n)?))
    }

    /// Temporal logits `W_t · mean(Transformer(h_text))`: `[b, K]`.
    pub fn temporal_weights(&self, h_text: &Tensor, heads: usize) -> Result<Tensor> {
        let (_, tokens) = self.temporal_block(h_text, heads)?;
        tokens.mean_axis(1)?.matmul(&self.temporal_out)
    }

    /// `σ(W_τ · summary + b_τ)`: `[b]`.
    pub fn temperature(&self, h_text: &Tensor, heads: usize) -> Result<Tensor> {
        let (summary, _) = self.temporal_block(h_text, heads)?;
        self.temperature_from_summary(&summary)
    }

    fn temperature_from_summary(&self, summary: &Tensor) -> Result<Tensor> {
        let b = summary.shape()[0];
        summary.matmul(&self.temp_w)?.add_row(&self.temp_b)?.sigmoid().reshape(&[b])
    }

    /// Spatial logits, temporal logits and temperature in one pass.
    pub fn route(&self, visual: &Tensor, text: &Tensor, heads: usize) -> Result<RouterOutput> {
        let (h_img, h_text) = self.project_shared(visual, text)?;
        let spatial = self.spatial_weights(&h_img)?;
        let (summary, tokens) = self.temporal_block(&h_text, heads)?;
        let temporal = tokens.mean_axis(1)?.matmul(&self.temporal_out)?;
        let alpha = self.temperature_from_summary(&summary)?;
        Ok(RouterOutput { spatial, temporal, alpha })
    }
}

/// Router logits before selection.
#[derive(Debug, Clone)]
pub struct RouterOutput {
    pub spatial: Tensor,
    pub temporal: Tensor,
    pub alpha: Tensor,
}

/// Per-sample layer selection.
#[derive(Debug, Clone)]
pub struct GateDecision {
    /// Selection probabilities `[b, K]`.
    pub soft: Tensor,
    /// Binary mask `[b, K]`; forwards the mask, back-propagates into `soft`.
    pub hard: Tensor,
    /// Temperature `[b]`.
    pub alpha: Tensor,
    pub k_active: usize,
}

impl GateDecision {
    pub fn batch(&self) -> usize {
        self.hard.shape()[0]
    }

    pub fn layers(&self) -> usize {
        self.hard.shape()[1]
    }

    /// `mask[i][k]` is true when sample `i` runs layer `k`.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        let k = self.layers();
        self.hard.data().chunks(k).map(|row| row.iter().map(|&v| v == 1.0).collect()).collect()
    }

    /// Number of samples that ran each layer.
    pub fn usage_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.layers()];
        for row in self.mask() {
            for (c, on) in counts.iter_mut().zip(row) {
                *c += on as usize;
            }
        }
        counts
    }
}

/// Indices of the `k` largest values, ties going to the lower index.
pub(crate) fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Selects `k_active` layers per sample from `α ⊙ (S + T)`.
///
/// In training mode standard Gumbel noise is added to the scaled logits
/// before the softmax at temperature `tau`; in evaluation mode no noise is
/// drawn. The hard mask is the top-k of the resulting distribution.
pub fn gate(
    spatial: &Tensor,
    temporal: &Tensor,
    alpha: &Tensor,
    k_active: usize,
    tau: f64,
    rng: &mut Rng,
    train: bool,
) -> Result<GateDecision> {
    contract!(
        spatial.rank() == 2 && spatial.shape() == temporal.shape(),
        "spatial {:?} and temporal {:?} logits must both be [b, K]",
        spatial.shape(),
        temporal.shape()
    );
    let (b, layers) = (spatial.shape()[0], spatial.shape()[1]);
    contract!(alpha.shape() == [b], "alpha {:?} must be [{b}]", alpha.shape());
    if k_active == 0 || k_active > layers {
        return Err(Error::Config(format!("k_active {k_active} outside [1, {layers}]")));
    }
    let scale = alpha.unsqueeze(1)?.expand(1, layers)?;
    let mut logits = scale.mul(&spatial.add(temporal)?)?;
    if train {
        let noise = Tensor::new(&[b, layers], (0..b * layers).map(|_| rng.gumbel()).collect())?;
        logits = logits.add(&noise)?;
    }
    let soft = logits.scale(1.0 / tau).softmax(1)?;
    let mut hard = vec![0.0; b * layers];
    for (i, row) in soft.data().chunks(layers).enumerate() {
        for j in top_k(row, k_active) {
            hard[i * layers + j] = 1.0;
        }
    }
    let hard = Tensor::straight_through(&soft, &hard)?;
    Ok(GateDecision { soft, hard, alpha: alpha.clone(), k_active })
}

/// Load-balance regularizer over one batch of decisions.
pub fn load_balance_loss(decision: &GateDecision, formulation: BalanceFormulation) -> Result<Tensor> {
    let (b, layers) = (decision.batch(), decision.layers());
    if b == 0 {
        return Err(Error::Input("load balance over an empty batch".into()));
    }
    match formulation {
        BalanceFormulation::Paper => {
            let load = decision.hard.sum_axis(0)?;
            let ratio = load.div(&load.affine(1.0, 1e-6))?;
            Ok(ratio.mul(&ratio)?.mean_all())
        }
        BalanceFormulation::Fraction => {
            let total = (b * decision.k_active) as f64;
            let share: Vec<f64> = decision.usage_counts().iter().map(|&c| c as f64 / total).collect();
            let share = Tensor::new(&[layers], share)?;
            let mean_prob = decision.soft.mean_axis(0)?;
            Ok(mean_prob.mul(&share)?.sum_all().scale(layers as f64))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamTree;

    fn decision_from(soft: Vec<Vec<f64>>, hard: Vec<Vec<f64>>, k: usize) -> GateDecision {
        let (b, l) = (soft.len(), soft[0].len());
        let soft = Tensor::param(&[b, l], soft.concat()).unwrap();
        let hard = Tensor::straight_through(&soft, &hard.concat()).unwrap();
        GateDecision { soft, hard, alpha: Tensor::full(&[b], 0.5), k_active: k }
    }

    #[test]
    fn identity_projection_passes_inputs_through() {
        let mut rng = Rng::new(0);
        let cfg = RouterConfig { d1: 4, ..RouterConfig::for_width(4) };
        let mut r = RouterParams::init(4, 3, &cfg, &mut rng);
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        r.proj = Tensor::param(&[4, 4], eye).unwrap();
        let v = Tensor::new(&[2, 3, 4], rng.normals(24, 1.0)).unwrap();
        let l = Tensor::new(&[2, 2, 4], rng.normals(16, 1.0)).unwrap();
        let (hi, ht) = r.project_shared(&v, &l).unwrap();
        assert_eq!(hi.data(), v.data());
        assert_eq!(ht.data(), l.data());
        let (zi, _) = r.project_shared(&Tensor::zeros(&[1, 3, 4]), &l).unwrap();
        assert!(zi.data().iter().all(|&x| x == 0.0));
        assert!(matches!(r.project_shared(&Tensor::zeros(&[1, 3, 5]), &l), Err(Error::Contract(_))));
    }

    #[test]
    fn spatial_zero_input_and_permutation_invariance() {
        let mut rng = Rng::new(1);
        let cfg = RouterConfig::for_width(8);
        let r = RouterParams::init(8, 4, &cfg, &mut rng);
        let s = r.spatial_weights(&Tensor::zeros(&[2, 5, cfg.d1])).unwrap();
        assert!(s.data().iter().all(|&x| x == 0.0));
        let x = rng.normals(5 * cfg.d1, 1.0);
        let mut swapped = x.clone();
        swapped[..cfg.d1].copy_from_slice(&x[3 * cfg.d1..4 * cfg.d1]);
        swapped[3 * cfg.d1..4 * cfg.d1].copy_from_slice(&x[..cfg.d1]);
        let a = r.spatial_weights(&Tensor::new(&[1, 5, cfg.d1], x).unwrap()).unwrap();
        let b = r.spatial_weights(&Tensor::new(&[1, 5, cfg.d1], swapped).unwrap()).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn temporal_zero_output_map_gives_zero_logits() {
        let mut rng = Rng::new(2);
        let cfg = RouterConfig::for_width(8);
        let mut r = RouterParams::init(8, 4, &cfg, &mut rng);
        r.temporal_out = Tensor::zeros(&[cfg.d1, 4]);
        let t = r.temporal_weights(&Tensor::new(&[2, 3, cfg.d1], rng.normals(6 * cfg.d1, 1.0)).unwrap(), 2).unwrap();
        assert_eq!(t.shape(), &[2, 4]);
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn temperature_limits() {
        let mut rng = Rng::new(3);
        let cfg = RouterConfig::for_width(8);
        let mut r = RouterParams::init(8, 4, &cfg, &mut rng);
        r.temp_w = Tensor::zeros(&[cfg.d1, 1]);
        let h = Tensor::new(&[2, 3, cfg.d1], rng.normals(6 * cfg.d1, 1.0)).unwrap();
        assert!(r.temperature(&h, 2).unwrap().data().iter().all(|&a| a == 0.5));
        r.temp_b = Tensor::new(&[1], vec![10.0]).unwrap();
        assert!(r.temperature(&h, 2).unwrap().data().iter().all(|&a| a > 0.9999 && a < 1.0));
    }

    #[test]
    fn full_k_selects_everything() {
        let mut rng = Rng::new(4);
        let s = Tensor::new(&[3, 5], rng.normals(15, 4.0)).unwrap();
        let t = Tensor::new(&[3, 5], rng.normals(15, 4.0)).unwrap();
        let a = Tensor::full(&[3], 0.7);
        let d = gate(&s, &t, &a, 5, 1.0, &mut rng, true).unwrap();
        assert!(d.hard.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn eval_mode_takes_argmax() {
        let s = Tensor::new(&[1, 4], vec![5.0, 1.0, 1.0, 1.0]).unwrap();
        let t = Tensor::zeros(&[1, 4]);
        let d = gate(&s, &t, &Tensor::full(&[1], 1.0), 1, 1.0, &mut Rng::new(0), false).unwrap();
        assert_eq!(d.hard.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn k_out_of_range_is_config_error() {
        let s = Tensor::zeros(&[1, 4]);
        let a = Tensor::full(&[1], 1.0);
        for k in [0, 5] {
            assert!(matches!(gate(&s, &s, &a, k, 1.0, &mut Rng::new(0), false), Err(Error::Config(_))));
        }
    }

    #[test]
    fn soft_rows_sum_to_one_and_hard_rows_to_k() {
        let mut rng = Rng::new(5);
        let s = Tensor::new(&[16, 8], rng.normals(128, 3.0)).unwrap();
        let t = Tensor::new(&[16, 8], rng.normals(128, 3.0)).unwrap();
        let a = Tensor::new(&[16], (0..16).map(|_| rng.uniform()).collect()).unwrap();
        for k in 1..=8 {
            let d = gate(&s, &t, &a, k, 1.0, &mut rng, true).unwrap();
            for (srow, hrow) in d.soft.data().chunks(8).zip(d.hard.data().chunks(8)) {
                assert!((srow.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert_eq!(hrow.iter().sum::<f64>(), k as f64);
            }
        }
    }

    #[test]
    fn paper_balance_is_one_when_every_layer_is_loaded() {
        let d = decision_from(
            vec![vec![0.25; 4]; 4],
            vec![
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
            1,
        );
        let l = load_balance_loss(&d, BalanceFormulation::Paper).unwrap().item().unwrap();
        assert!((l - 1.0).abs() < 1e-5, "{l}");
    }

    #[test]
    fn fraction_balance_uniform_is_one() {
        let d = decision_from(
            vec![vec![0.25; 4]; 4],
            vec![
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
            1,
        );
        let l = load_balance_loss(&d, BalanceFormulation::Fraction).unwrap().item().unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fraction_balance_collapsed_is_k() {
        // K = 4, all load and probability on layer 0: 4 · (1 · 1) = 4.
        let d = decision_from(vec![vec![1.0, 0.0, 0.0, 0.0]], vec![vec![1.0, 0.0, 0.0, 0.0]], 1);
        let l = load_balance_loss(&d, BalanceFormulation::Fraction).unwrap().item().unwrap();
        assert!((l - 4.0).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_input_error() {
        let soft = Tensor::zeros(&[0, 4]);
        let d = GateDecision {
            hard: Tensor::straight_through(&soft, &[]).unwrap(),
            soft,
            alpha: Tensor::zeros(&[0]),
            k_active: 1,
        };
        assert!(matches!(load_balance_loss(&d, BalanceFormulation::Fraction), Err(Error::Input(_))));
    }

    #[test]
    fn router_is_small_relative_to_width() {
        let cfg = RouterConfig::for_width(64);
        let r = RouterParams::init(64, 8, &cfg, &mut Rng::new(0));
        assert_eq!(cfg.d1, 32);
        assert_eq!(cfg.d2, 16);
        assert!(r.param_count() < 20_000);
    }
}
