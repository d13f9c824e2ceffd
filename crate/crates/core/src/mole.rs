//! Gated execution of the layer stack and analytic FLOPs accounting.
//!
//! FLOPs follow the convention 1 multiply-accumulate = 2 FLOPs and count
//! only matrix products; norms, softmax and activations are not counted.
//! Embedding lookups cost nothing.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::action::HeadConfig;
use crate::error::{contract, Result};
use crate::router::RouterConfig;
use crate::tensor::Tensor;
use crate::transformer::{layer_forward, LayerStack, StackConfig};

/// Output of one pass through the stack.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Final-norm features `[b, n, d]`.
    pub features: Tensor,
    /// Final feature of the last (cognition) position, `[b, d]`.
    pub cognition: Tensor,
    /// `executed[i][k]`: sample `i` ran layer `k`.
    pub executed: Vec<Vec<bool>>,
    /// Per-sample FLOPs spent inside the stack.
    pub flops: Vec<u64>,
}

fn cognition_of(features: &Tensor) -> Result<Tensor> {
    let n = features.shape()[1];
    features.select(1, n - 1)
}

/// Applies `h_k = G_k · π_k(h_{k−1}) + (1 − G_k) · h_{k−1}` per sample.
///
/// `mask` is `[b, K]` with entries exactly 0 or 1; it may carry gradient
/// (a straight-through gate). Layers with `G_k = 0` are not evaluated for
/// that sample. Each layer runs once over the samples that selected it;
/// every operation inside a layer is row-independent, so a sample's result
/// does not depend on which other samples share the call. The final norm
/// runs once at the end.
pub fn skip_forward(h0: &Tensor, stack: &LayerStack, mask: &Tensor, heads: usize) -> Result<ForwardTrace> {
    contract!(h0.rank() == 3, "stack input must be [b, n, d], got {:?}", h0.shape());
    let (b, n, d) = (h0.shape()[0], h0.shape()[1], h0.shape()[2]);
    let depth = stack.depth();
    contract!(
        mask.shape() == [b, depth],
        "mask {:?} does not match batch {b} and stack depth {depth}",
        mask.shape()
    );
    contract!(
        mask.data().iter().all(|&v| v == 0.0 || v == 1.0),
        "layer mask must be binary"
    );
    let executed: Vec<Vec<bool>> = mask.data().chunks(depth).map(|row| row.iter().map(|&v| v == 1.0).collect()).collect();
    let mut hs = (0..b).map(|i| h0.slice(0, i, 1)).collect::<Result<Vec<_>>>()?;
    for (k, layer) in stack.layers.iter().enumerate() {
        let active: Vec<usize> = (0..b).filter(|&i| executed[i][k]).collect();
        if active.is_empty() {
            continue;
        }
        let parts: Vec<Tensor> = active.iter().map(|&i| hs[i].clone()).collect();
        let out = layer_forward(&Tensor::concat(&parts, 0)?, layer, heads)?;
        for (j, &i) in active.iter().enumerate() {
            let o = out.slice(0, j, 1)?;
            hs[i] = if mask.requires_grad() {
                let g = mask.select(0, i)?.slice(0, k, 1)?;
                Tensor::gate_residual(&hs[i], &o, &g)?
            } else {
                o
            };
        }
    }
    let features = stack.final_norm(&Tensor::concat(&hs, 0)?)?;
    let cognition = cognition_of(&features)?;
    let per_layer = layer_flops(n, d);
    let flops = executed.iter().map(|row| per_layer * row.iter().filter(|&&on| on).count() as u64).collect();
    Ok(ForwardTrace { features, cognition, executed, flops })
}

/// Runs every teacher layer on a detached copy of `h0`; nothing upstream
/// of the teacher can receive gradient through this path.
pub fn full_forward(h0: &Tensor, teacher: &LayerStack, heads: usize) -> Result<ForwardTrace> {
    contract!(h0.rank() == 3, "stack input must be [b, n, d], got {:?}", h0.shape());
    let (b, n, d) = (h0.shape()[0], h0.shape()[1], h0.shape()[2]);
    let features = teacher.forward(&h0.detach(), heads)?;
    let cognition = cognition_of(&features)?;
    let depth = teacher.depth();
    Ok(ForwardTrace {
        features,
        cognition,
        executed: vec![vec![true; depth]; b],
        flops: vec![layer_flops(n, d) * depth as u64; b],
    })
}

/// FLOPs of one layer on a sequence of `n` tokens of width `d`:
/// attention `8nd² + 4n²d`, feedforward `16nd²`.
pub fn layer_flops(n: usize, d: usize) -> u64 {
    let (n, d) = (n as u64, d as u64);
    8 * n * d * d + 4 * n * n * d + 16 * n * d * d
}

/// Router FLOPs per sample.
pub fn router_flops(stack: &StackConfig, router: &RouterConfig) -> u64 {
    let (d, d1, d2, k) = (stack.width as u64, router.d1 as u64, router.d2 as u64, stack.layers as u64);
    let tokens = (stack.n_img + stack.n_text) as u64;
    let m = stack.n_text as u64 + 1;
    let projection = tokens * d * d1;
    let spatial = d1 * d2 + d2 * k;
    let temporal_block = 4 * m * d1 * d1 + 2 * m * m * d1 + 8 * m * d1 * d1;
    let temporal_out = d1 * k;
    let temperature = d1;
    2 * (projection + spatial + temporal_block + temporal_out + temperature)
}

/// What a deployed policy evaluates per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsModel {
    pub stack: StackConfig,
    /// `None` for policies without a router (full depth, early exit, random skip).
    pub router: Option<RouterConfig>,
    pub head: HeadConfig,
    /// Denoising iterations per action.
    pub denoise_steps: usize,
}

/// Per-sample FLOPs split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub embeddings: u64,
    pub router: u64,
    pub stack: u64,
    pub head: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.embeddings + self.router + self.stack + self.head
    }
}

impl FlopsModel {
    /// Closed-form count for a sample that runs `active_layers` layers.
    pub fn count(&self, active_layers: usize) -> FlopsBreakdown {
        let n = self.stack.seq_len();
        FlopsBreakdown {
            embeddings: 0,
            router: self.router.map_or(0, |r| router_flops(&self.stack, &r)),
            stack: layer_flops(n, self.stack.width) * active_layers as u64,
            head: 2 * self.head.macs(self.stack.width) * self.denoise_steps as u64,
        }
    }

    /// Per-sample totals for every row of a `[b, K]` binary mask.
    pub fn count_mask(&self, mask: &[Vec<bool>]) -> Vec<FlopsBreakdown> {
        mask.iter().map(|row| self.count(row.iter().filter(|&&on| on).count())).collect()
    }

    /// Stack-only FLOPs ratio of running `k_active` layers versus all of them.
    pub fn stack_ratio(&self, k_active: usize) -> f64 {
        self.count(k_active).stack as f64 / self.count(self.stack.layers).stack as f64
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    dot / (na * nb)
}

/// Mean cosine similarity between the hidden states entering and leaving
/// each layer, averaged over batch and tokens. Entry `k` compares the
/// input and output of layer `k`.
pub fn adjacent_layer_similarity(h0: &Tensor, stack: &LayerStack, heads: usize) -> Result<Vec<f64>> {
    let d = h0.shape()[2];
    let mut h = h0.detach();
    let mut sims = Vec::with_capacity(stack.depth());
    for layer in &stack.layers {
        let next = layer_forward(&h, layer, heads)?.detach();
        let pairs = h.data().chunks(d).zip(next.data().chunks(d));
        let count = h.numel() / d;
        sims.push(pairs.map(|(a, b)| cosine(a, b)).sum::<f64>() / count as f64);
        h = next;
    }
    Ok(sims)
}

/// Writes `layer,cosine_similarity` rows.
pub fn write_similarity_csv(similarities: &[f64], out: &mut impl Write) -> Result<()> {
    writeln!(out, "layer,cosine_similarity")?;
    for (k, s) in similarities.iter().enumerate() {
        writeln!(out, "{k},{s}")?;
    }
    Ok(())
}
