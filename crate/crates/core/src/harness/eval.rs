//! Deterministic evaluation of a trained or fresh state.

use serde::{Deserialize, Serialize};

use crate::action::ACTION_DIM;
use crate::error::{Error, Result};
use crate::mole::skip_forward;
use crate::rng::Rng;

use super::task::{batch_tokens, gen_batch, SyntheticTask};
use super::train::{select_layers, stream, TrainState};

/// Evaluation samples per forward pass.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean squared error of the denoised action over samples and components,
    /// in raw action units.
    pub action_mse: f64,
    pub gripper_accuracy: f64,
    pub mean_layers: f64,
    /// Mean per-sample inference FLOPs (router, executed layers, denoising).
    pub flops_per_sample: f64,
    /// Samples that ran each layer.
    pub usage: Vec<usize>,
    /// Entropy in nats of the normalized usage histogram.
    pub usage_entropy: f64,
}

/// The fixed held-out set for a seed.
pub fn eval_set(state: &TrainState) -> Vec<SyntheticTask> {
    let mut rng = Rng::new(state.config.seed).fork(stream::EVAL_DATA);
    gen_batch(&state.config.task(), state.config.eval_size, &mut rng)
}

/// Entropy in nats of a count histogram; 0 for an empty one.
pub fn usage_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Runs the policy without Gumbel noise and samples actions with the full
/// denoising loop. Random-skip subsets come from a fixed stream, so repeated
/// calls agree.
pub fn evaluate(state: &TrainState, tasks: &[SyntheticTask]) -> Result<EvalMetrics> {
    if tasks.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let config = &state.config;
    let flops = config.flops_model();
    let mut gate_rng = Rng::new(config.seed).fork(stream::EVAL_GATE);
    let mut sq = 0.0;
    let mut gripper_hits = 0usize;
    let mut usage = vec![0usize; config.layers];
    let mut layers_run = 0usize;
    let mut flops_sum = 0u64;
    for chunk in tasks.chunks(CHUNK) {
        let h0 = state.embed(chunk, &state.student.cognition)?;
        let (mask, _) = select_layers(&state.student, config, &h0, &mut gate_rng, false)?;
        let mask = mask.detach();
        let trace = skip_forward(&h0, &state.student.stack, &mask, config.heads)?;
        let sampled = state.student.head.sample(&trace.cognition, &state.schedule)?;
        let (_, _, targets) = batch_tokens(chunk);
        for (row, target) in sampled.data().chunks(ACTION_DIM).zip(&targets) {
            let pred = state.normalizer.denormalize(&row.try_into().expect("action width"));
            sq += pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
            gripper_hits += ((pred[6] >= 0.5) == (target[6] >= 0.5)) as usize;
        }
        for (row, breakdown) in trace.executed.iter().zip(flops.count_mask(&trace.executed)) {
            flops_sum += breakdown.total();
            for (c, &on) in usage.iter_mut().zip(row) {
                *c += on as usize;
                layers_run += on as usize;
            }
        }
    }
    let n = tasks.len() as f64;
    Ok(EvalMetrics {
        action_mse: sq / (n * ACTION_DIM as f64),
        gripper_accuracy: gripper_hits as f64 / n,
        mean_layers: layers_run as f64 / n,
        flops_per_sample: flops_sum as f64 / n,
        usage_entropy: usage_entropy(&usage),
        usage,
    })
}
