//! Flat run configuration, presets and derived component configs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::action::{DiffusionSchedule, HeadConfig};
use crate::cogkd::{DistillOptions, TeacherMaskSource};
use crate::error::{Error, Result};
use crate::mole::FlopsModel;
use crate::router::{BalanceFormulation, RouterConfig};
use crate::transformer::StackConfig;

use super::task::TaskConfig;

/// Training regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Routed skipping with distillation and load balancing.
    #[default]
    Mole,
    /// Every layer, task loss only.
    Full,
    /// A uniformly random `k_active` subset per sample.
    RandomSkip,
    /// The first `k_active` layers.
    EarlyExit,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mole" => Ok(Baseline::Mole),
            "full" => Ok(Baseline::Full),
            "random_skip" | "random-skip" => Ok(Baseline::RandomSkip),
            "early_exit" | "early-exit" => Ok(Baseline::EarlyExit),
            other => Err(Error::Config(format!("unknown baseline {other:?}"))),
        }
    }
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Baseline::Mole => "mole",
            Baseline::Full => "full",
            Baseline::RandomSkip => "random_skip",
            Baseline::EarlyExit => "early_exit",
        })
    }
}

/// Every knob of a run. Serialized as a flat TOML table; missing keys take
/// the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub baseline: Baseline,
    pub k_active: usize,

    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub ema_alpha: f64,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length; 0 keeps the rate constant.
    pub warmup_steps: usize,

    pub layers: usize,
    pub width: usize,
    pub heads: usize,

    pub grid: usize,
    pub codes: usize,
    pub objects: usize,
    pub verbs: usize,
    pub n_text: usize,

    pub router_heads: usize,
    pub gumbel_tau: f64,
    pub balance: BalanceFormulation,

    pub head_hidden: usize,
    pub step_embed: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub teacher_mask_source: TeacherMaskSource,
    pub detach_masks: bool,
    /// Learnable linear map applied to student features in the mimic loss.
    pub projector: bool,

    pub eval_size: usize,
    /// Evaluate and write a metrics row every this many steps (and at the end).
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            steps: 2000,
            batch: 16,
            baseline: Baseline::Mole,
            k_active: 4,
            lambda1: 0.5,
            lambda2: 0.5,
            lambda3: 0.1,
            ema_alpha: 0.999,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            layers: 8,
            width: 64,
            heads: 4,
            grid: 4,
            codes: 8,
            objects: 4,
            verbs: 4,
            n_text: 8,
            router_heads: 2,
            gumbel_tau: 1.0,
            balance: BalanceFormulation::Fraction,
            head_hidden: 64,
            step_embed: 16,
            diffusion_steps: 8,
            beta_start: 0.05,
            beta_end: 0.5,
            teacher_mask_source: TeacherMaskSource::Student,
            detach_masks: true,
            projector: false,
            eval_size: 256,
            log_every: 100,
        }
    }
}

/// Named presets.
pub const PRESETS: [&str; 3] = ["default", "appendix-best", "desk"];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Defaults, then the preset, then keys present in the file.
    pub fn resolve(preset: Option<&str>, file: Option<&Path>) -> Result<RunConfig> {
        let mut base = RunConfig::default();
        if let Some(name) = preset {
            base.apply_preset(name)?;
        }
        let Some(path) = file else {
            base.validate()?;
            return Ok(base);
        };
        let overrides: toml::Table = toml::from_str(&std::fs::read_to_string(path)?)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merged.extend(overrides);
        let config: RunConfig = merged.try_into()?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Overrides fields with a named preset.
    ///
    /// `appendix-best` uses `λ1 = 0.5, λ2 = 0.1, λ3 = 0.5`. `desk` shrinks
    /// the model to width 32 with a 3×3 grid so multi-seed comparisons run
    /// in minutes on one core.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "default" => {}
            "appendix-best" => {
                self.lambda1 = 0.5;
                self.lambda2 = 0.1;
                self.lambda3 = 0.5;
            }
            "desk" => {
                self.width = 32;
                self.heads = 2;
                self.grid = 3;
                self.codes = 6;
                self.objects = 3;
                self.n_text = 4;
                self.head_hidden = 64;
                self.batch = 16;
                self.eval_size = 256;
            }
            other => {
                return Err(Error::Config(format!("unknown preset {other:?}; known: {PRESETS:?}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        self.stack().validate()?;
        self.task().validate()?;
        self.router().validate()?;
        if self.batch == 0 {
            return fail("batch must be positive".into());
        }
        if self.k_active == 0 || self.k_active > self.layers {
            return fail(format!("k_active {} outside [1, {}]", self.k_active, self.layers));
        }
        for (name, v) in [("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        for (name, v) in [("lambda1", self.lambda1), ("ema_alpha", self.ema_alpha), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("lr, adam_eps and weight_decay must be non-negative (adam_eps positive)".into());
        }
        if self.head_hidden == 0 || self.step_embed == 0 {
            return fail("head widths must be positive".into());
        }
        if self.eval_size == 0 || self.log_every == 0 {
            return fail("eval_size and log_every must be positive".into());
        }
        self.schedule()?;
        Ok(())
    }

    pub fn task(&self) -> TaskConfig {
        TaskConfig { grid: self.grid, codes: self.codes, objects: self.objects, verbs: self.verbs, n_text: self.n_text }
    }

    pub fn stack(&self) -> StackConfig {
        StackConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            n_img: self.grid * self.grid,
            n_text: self.n_text,
            vocab: self.task().vocab(),
        }
    }

    pub fn router(&self) -> RouterConfig {
        RouterConfig {
            heads: self.router_heads,
            gumbel_tau: self.gumbel_tau,
            balance: self.balance,
            ..RouterConfig::for_width(self.width)
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig { hidden: self.head_hidden, step_embed: self.step_embed }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn distill(&self) -> DistillOptions {
        DistillOptions { teacher_mask_source: self.teacher_mask_source, detach_masks: self.detach_masks }
    }

    /// Layers a sample runs under this configuration.
    pub fn active_layers(&self) -> usize {
        match self.baseline {
            Baseline::Full => self.layers,
            _ => self.k_active,
        }
    }

    /// Inference cost model for the configured policy.
    pub fn flops_model(&self) -> FlopsModel {
        FlopsModel {
            stack: self.stack(),
            router: (self.baseline == Baseline::Mole).then(|| self.router()),
            head: self.head(),
            denoise_steps: self.diffusion_steps,
        }
    }
}
