//! Whole runs: training with periodic evaluation, artifact export and sweeps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::eval::{eval_set, evaluate, EvalMetrics};
use super::metrics::{params_hash, standard_notes, write_csv, LogRow, Manifest};
use super::train::{train_step, StepMetrics, TrainState};

pub struct RunOutput {
    pub state: TrainState,
    pub history: Vec<LogRow>,
    pub final_eval: EvalMetrics,
}

/// Trains for `config.steps` steps, evaluating every `log_every` steps and
/// after the last one. `on_step` sees every step's metrics.
pub fn run_training(config: &RunConfig, mut on_step: impl FnMut(&StepMetrics)) -> Result<RunOutput> {
    let mut state = TrainState::new(config)?;
    let set = eval_set(&state);
    let mut history = Vec::new();
    let mut last_eval = None;
    for step in 0..config.steps {
        let batch = state.next_batch();
        let m = train_step(&mut state, &batch)?;
        on_step(&m);
        if (step + 1) % config.log_every == 0 || step + 1 == config.steps {
            let e = evaluate(&state, &set)?;
            history.push(LogRow {
                step: step + 1,
                task: m.task,
                cog: m.cog,
                lb: m.lb,
                total: m.total,
                eval_mse: e.action_mse,
                flops: e.flops_per_sample,
                usage_entropy: e.usage_entropy,
            });
            last_eval = Some(e);
        }
    }
    let final_eval = match last_eval {
        Some(e) => e,
        None => evaluate(&state, &set)?,
    };
    Ok(RunOutput { state, history, final_eval })
}

impl RunOutput {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.state.config.seed,
            config: self.state.config.clone(),
            steps_run: self.state.step,
            param_count: self.state.student.param_count(),
            params_sha256: params_hash(&self.state.student),
            final_eval: Some(self.final_eval.clone()),
            notes: standard_notes(&self.state.config),
        }
    }

    /// Writes `metrics.csv`, `manifest.json` and `checkpoint.json`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        if !self.history.is_empty() {
            write_csv(&self.history, std::fs::File::create(dir.join("metrics.csv"))?)?;
        }
        self.manifest().write(&dir.join("manifest.json"))?;
        save_checkpoint(&self.state, &dir.join("checkpoint.json"))
    }
}

const CHECKPOINT_FORMAT: &str = "mole-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: RunConfig,
    step: usize,
    student: BTreeMap<String, Vec<f64>>,
    teacher: BTreeMap<String, Vec<f64>>,
}

fn values<T: ParamTree>(tree: &T) -> BTreeMap<String, Vec<f64>> {
    tree.named_params().into_iter().map(|(n, t)| (n, t.data().to_vec())).collect()
}

fn load_values<T: ParamTree>(tree: &mut T, values: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let mut failure = None;
    tree.visit_mut("", &mut |name, t| match values.get(&name) {
        Some(v) if v.len() == t.numel() => *t = t.with_data(v.clone()).expect("length checked"),
        _ => {
            failure.get_or_insert(name);
        }
    });
    match failure {
        Some(name) => Err(Error::Input(format!("checkpoint lacks a usable value for {name}"))),
        None => Ok(()),
    }
}

/// Saves parameters (not optimizer moments) with a versioned header.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        step: state.step,
        student: values(&state.student),
        teacher: values(&state.teacher),
    };
    std::fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

/// Rebuilds a state for evaluation from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::Input(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
    }
    let mut state = TrainState::new(&ck.config)?;
    load_values(&mut state.student, &ck.student)?;
    load_values(&mut state.teacher, &ck.teacher)?;
    state.teacher.visit_mut("", &mut |_, t| *t = t.detach());
    state.step = ck.step;
    Ok(state)
}

/// One cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k_active: usize,
    pub seed: u64,
    pub eval_mse: f64,
    pub gripper_accuracy: f64,
    pub flops: f64,
}

/// Trains one run per `(k_active, seed)` and reports final evaluations.
pub fn sweep(base: &RunConfig, k_values: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(k_values.len() * seeds.len());
    for &k_active in k_values {
        for &seed in seeds {
            let config = RunConfig { k_active, seed, ..base.clone() };
            let out = run_training(&config, |_| {})?;
            rows.push(SweepRow {
                k_active,
                seed,
                eval_mse: out.final_eval.action_mse,
                gripper_accuracy: out.final_eval.gripper_accuracy,
                flops: out.final_eval.flops_per_sample,
            });
        }
    }
    Ok(rows)
}

/// Mean eval MSE per `k_active`, in the order given.
pub fn sweep_means(rows: &[SweepRow], k_values: &[usize]) -> Vec<f64> {
    k_values
        .iter()
        .map(|&k| {
            let v: Vec<f64> = rows.iter().filter(|r| r.k_active == k).map(|r| r.eval_mse).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Element-wise identity of two parameter trees.
pub fn same_values<T: ParamTree>(a: &T, b: &T) -> bool {
    let (pa, pb): (Vec<(String, Tensor)>, _) = (a.named_params(), b.named_params());
    pa.len() == pb.len()
        && pa.iter().zip(&pb).all(|((na, ta), (nb, tb))| {
            na == nb && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}
