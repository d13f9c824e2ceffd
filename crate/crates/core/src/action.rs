//! Noise-prediction action head for 7-DoF end-effector actions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::params::{fan_in_param, param_tree, zero_param};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const ACTION_DIM: usize = 7;

/// Translation offsets, rotation deltas in radians, and gripper state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
    pub gripper: f64,
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

impl ActionVector {
    pub fn new(translation: [f64; 3], rotation: [f64; 3], gripper: f64) -> ActionVector {
        ActionVector {
            translation,
            rotation: rotation.map(wrap_angle),
            gripper: gripper.clamp(0.0, 1.0),
        }
    }

    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        let [x, y, z] = self.translation;
        let [r, p, w] = self.rotation;
        [x, y, z, r, p, w, self.gripper]
    }

    /// Rebuilds an action from raw components, wrapping rotations and
    /// clamping the gripper.
    pub fn from_array(a: [f64; ACTION_DIM]) -> ActionVector {
        ActionVector::new([a[0], a[1], a[2]], [a[3], a[4], a[5]], a[6])
    }

    /// Gripper state thresholded at 0.5.
    pub fn gripper_closed(&self) -> bool {
        self.gripper >= 0.5
    }
}

/// Linear-β noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule::linear(8, 0.05, 0.5).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
        if steps == 0 {
            return Err(Error::Config("diffusion schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        DiffusionSchedule::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<DiffusionSchedule> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("noise scales must lie in (0, 1): {betas:?}")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(DiffusionSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative product `ᾱ_i`.
    pub fn alpha_bar(&self, step: usize) -> Result<f64> {
        self.alpha_bars
            .get(step)
            .copied()
            .ok_or_else(|| Error::Input(format!("step {step} outside schedule of {}", self.steps())))
    }

    /// Draws `ε ~ N(0, I)` and returns `(√ᾱ·a + √(1−ᾱ)·ε, ε)`.
    pub fn noised_action(
        &self,
        clean: &[f64; ACTION_DIM],
        step: usize,
        rng: &mut Rng,
    ) -> Result<([f64; ACTION_DIM], [f64; ACTION_DIM])> {
        let ab = self.alpha_bar(step)?;
        let eps: [f64; ACTION_DIM] = std::array::from_fn(|_| rng.normal());
        Ok((mix(clean, &eps, ab), eps))
    }
}

/// `√ᾱ·a + √(1−ᾱ)·ε`.
pub fn mix(clean: &[f64; ACTION_DIM], eps: &[f64; ACTION_DIM], alpha_bar: f64) -> [f64; ACTION_DIM] {
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    std::array::from_fn(|j| s * clean[j] + n * eps[j])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    /// Width of the sinusoidal step embedding.
    pub step_embed: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { hidden: 64, step_embed: 16 }
    }
}

impl HeadConfig {
    pub fn input_width(&self, cognition_width: usize) -> usize {
        cognition_width + ACTION_DIM + self.step_embed
    }

    /// Multiply-accumulates for one noise prediction of one sample.
    pub fn macs(&self, cognition_width: usize) -> u64 {
        (self.input_width(cognition_width) * self.hidden + self.hidden * ACTION_DIM) as u64
    }
}

/// Sinusoidal embedding of a denoising step index.
pub fn step_embedding(step: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut e = Vec::with_capacity(width);
    for j in 0..half {
        let freq = 1.0 / 10_000f64.powf(j as f64 / half.max(1) as f64);
        e.push((step as f64 * freq).sin());
    }
    for j in 0..width - half {
        let freq = 1.0 / 10_000f64.powf(j as f64 / half.max(1) as f64);
        e.push((step as f64 * freq).cos());
    }
    e
}

/// Two-layer GELU MLP over `[cognition, noisy action, step embedding]`.
#[derive(Debug, Clone)]
pub struct ActionHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

param_tree!(ActionHead { w1, b1, w2, b2 });

impl ActionHead {
    pub fn init(cognition_width: usize, config: &HeadConfig, rng: &mut Rng) -> ActionHead {
        ActionHead {
            w1: fan_in_param(rng, &[config.input_width(cognition_width), config.hidden]),
            b1: zero_param(&[config.hidden]),
            w2: zero_param(&[config.hidden, ACTION_DIM]),
            b2: zero_param(&[ACTION_DIM]),
        }
    }

    fn step_embed_width(&self, cognition_width: usize) -> usize {
        self.w1.shape()[0] - cognition_width - ACTION_DIM
    }

    /// Predicted noise `[b, 7]`.
    pub fn predict_noise(&self, cognition: &Tensor, noisy: &Tensor, steps: &[usize]) -> Result<Tensor> {
        contract!(cognition.rank() == 2, "cognition must be [b, d], got {:?}", cognition.shape());
        let (b, d) = (cognition.shape()[0], cognition.shape()[1]);
        contract!(noisy.shape() == [b, ACTION_DIM], "noisy action {:?} must be [{b}, 7]", noisy.shape());
        contract!(steps.len() == b, "{} step indices for batch of {b}", steps.len());
        contract!(
            self.w1.shape()[0] > d + ACTION_DIM,
            "head input width {} too small for cognition width {d}",
            self.w1.shape()[0]
        );
        let e = self.step_embed_width(d);
        let emb: Vec<f64> = steps.iter().flat_map(|&s| step_embedding(s, e)).collect();
        let emb = Tensor::new(&[b, e], emb)?;
        Tensor::concat(&[cognition.clone(), noisy.clone(), emb], 1)?
            .matmul(&self.w1)?
            .add_row(&self.b1)?
            .gelu()
            .matmul(&self.w2)?
            .add_row(&self.b2)
    }

    /// Deterministic DDIM sampling from the zero vector; returns actions in
    /// the head's (normalized) space, `[b, 7]`.
    pub fn sample(&self, cognition: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
        let b = cognition.shape()[0];
        let cognition = cognition.detach();
        let mut x = vec![[0.0; ACTION_DIM]; b];
        let mut x0 = x.clone();
        for step in (0..schedule.steps()).rev() {
            let noisy = Tensor::new(&[b, ACTION_DIM], x.concat())?;
            let eps = self.predict_noise(&cognition, &noisy, &vec![step; b])?;
            let ab = schedule.alpha_bar(step)?;
            let prev = if step > 0 { Some(schedule.alpha_bar(step - 1)?) } else { None };
            for (i, e) in eps.data().chunks(ACTION_DIM).enumerate() {
                for j in 0..ACTION_DIM {
                    x0[i][j] = (x[i][j] - (1.0 - ab).sqrt() * e[j]) / ab.sqrt();
                    x[i][j] = match prev {
                        Some(pb) => pb.sqrt() * x0[i][j] + (1.0 - pb).sqrt() * e[j],
                        None => x0[i][j],
                    };
                }
            }
        }
        Tensor::new(&[b, ACTION_DIM], x0.concat())
    }
}

/// Mean squared error over batch and action components.
pub fn task_loss(predicted: &Tensor, target: &Tensor) -> Result<Tensor> {
    predicted.mse(target)
}
