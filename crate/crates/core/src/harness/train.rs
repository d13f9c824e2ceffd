//! One optimizer step of routed training, and the state it advances.

use serde::{Deserialize, Serialize};

use crate::action::{DiffusionSchedule, ACTION_DIM};
use crate::cogkd::{cog_loss, ema_update, DistillPair};
use crate::error::{Error, Result};
use crate::mole::{full_forward, skip_forward};
use crate::params::ParamTree;
use crate::rng::Rng;
use crate::router::{gate, load_balance_loss, GateDecision};
use crate::tensor::{mac_count, Tensor};

use super::config::{Baseline, RunConfig};
use super::model::{AdamW, Student, Teacher};
use super::task::{batch_tokens, gen_batch, ActionNormalizer, SyntheticTask};

/// RNG stream ids forked from the run seed.
pub(crate) mod stream {
    pub const INIT: u64 = 0;
    pub const DATA: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const GATE: u64 = 3;
    pub const EVAL_DATA: u64 = 4;
    pub const EVAL_GATE: u64 = 5;
}

/// Phases of a training step in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Embed,
    Gate,
    StudentStack,
    TeacherStack,
    Distill,
    Action,
    Update,
    Ema,
}

/// A phase boundary with the multiply-accumulates spent so far in the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub phase: Phase,
    pub macs: u64,
}

/// Losses and bookkeeping from one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub task: f64,
    pub cog: f64,
    pub lb: f64,
    pub total: f64,
    /// Samples that ran each layer in this batch.
    pub usage: Vec<usize>,
    pub events: Vec<Event>,
    /// Gradient entries that landed on teacher tensors (always 0).
    pub teacher_grads: usize,
}

/// Student, teacher, optimizer and RNG streams of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: RunConfig,
    pub student: Student,
    pub teacher: Teacher,
    pub optimizer: AdamW,
    pub schedule: DiffusionSchedule,
    pub normalizer: ActionNormalizer,
    pub step: usize,
    data_rng: Rng,
    noise_rng: Rng,
    gate_rng: Rng,
}

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<TrainState> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let student = Student::init(config, &mut root.fork(stream::INIT));
        let teacher = Teacher::from_student(&student);
        Ok(TrainState {
            config: config.clone(),
            teacher,
            optimizer: AdamW::new(config),
            schedule: config.schedule()?,
            normalizer: ActionNormalizer::for_task(&config.task()),
            student,
            step: 0,
            data_rng: root.fork(stream::DATA),
            noise_rng: root.fork(stream::NOISE),
            gate_rng: root.fork(stream::GATE),
        })
    }

    /// Draws the next training batch from the data stream.
    pub fn next_batch(&mut self) -> Vec<SyntheticTask> {
        gen_batch(&self.config.task(), self.config.batch, &mut self.data_rng)
    }

    /// Embedded student input `[b, n, d]` with the student's cognition token.
    pub(crate) fn embed(&self, tasks: &[SyntheticTask], cognition: &Tensor) -> Result<Tensor> {
        let (image, text, _) = batch_tokens(tasks);
        self.student.embed.embed(&image, &text, cognition)
    }
}

/// Layer masks from the configured policy. Only the routed policy returns a
/// decision; the others return a constant mask.
pub(crate) fn select_layers(
    student: &Student,
    config: &RunConfig,
    h0: &Tensor,
    rng: &mut Rng,
    train: bool,
) -> Result<(Tensor, Option<GateDecision>)> {
    let (b, k) = (h0.shape()[0], config.layers);
    let constant = |rows: Vec<Vec<usize>>| -> Result<Tensor> {
        let mut mask = vec![0.0; b * k];
        for (i, row) in rows.iter().enumerate() {
            for &j in row {
                mask[i * k + j] = 1.0;
            }
        }
        Tensor::new(&[b, k], mask)
    };
    match config.baseline {
        Baseline::Mole => {
            // The router reads the embeddings but does not train them.
            let n_img = config.grid * config.grid;
            let h = h0.detach();
            let visual = h.slice(1, 0, n_img)?;
            let text = h.slice(1, n_img, config.n_text)?;
            let out = student.router.route(&visual, &text, config.router_heads)?;
            let decision =
                gate(&out.spatial, &out.temporal, &out.alpha, config.k_active, config.gumbel_tau, rng, train)?;
            Ok((decision.hard.clone(), Some(decision)))
        }
        Baseline::Full => Ok((constant(vec![(0..k).collect(); b])?, None)),
        Baseline::EarlyExit => Ok((constant(vec![(0..config.k_active).collect(); b])?, None)),
        Baseline::RandomSkip => {
            let rows = (0..b).map(|_| rng.subset(k, config.k_active)).collect();
            Ok((constant(rows)?, None))
        }
    }
}

fn gate_diagnostics(decision: Option<&GateDecision>, usage: &[usize]) -> String {
    let Some(d) = decision else {
        return format!("usage {usage:?}, no router");
    };
    let stats = |v: &[f64]| {
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        format!("min {min} mean {mean} max {max}")
    };
    format!(
        "usage {usage:?}; alpha {}; soft {}; non-finite soft entries {}",
        stats(d.alpha.data()),
        stats(d.soft.data()),
        d.soft.data().iter().filter(|v| !v.is_finite()).count()
    )
}

/// Runs one step: route, execute the student, execute the teacher and
/// distill, predict noise, update the student, then move the teacher.
pub fn train_step(state: &mut TrainState, batch: &[SyntheticTask]) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    let config = state.config.clone();
    let b = batch.len();
    let start = mac_count();
    let mut events = Vec::with_capacity(8);
    let mut mark = |phase| events.push(Event { phase, macs: mac_count() - start });

    let h0 = state.embed(batch, &state.student.cognition)?;
    mark(Phase::Embed);

    let (mask, decision) = select_layers(&state.student, &config, &h0, &mut state.gate_rng, true)?;
    mark(Phase::Gate);

    let student_trace = skip_forward(&h0, &state.student.stack, &mask, config.heads)?;
    mark(Phase::StudentStack);

    let routed = config.baseline == Baseline::Mole;
    let mut cog = None;
    if routed {
        let (image, text, _) = batch_tokens(batch);
        let h0_teacher = state.student.embed.embed(&image, &text, &state.teacher.cognition)?;
        let teacher_trace = full_forward(&h0_teacher, &state.teacher.stack, config.heads)?;
        mark(Phase::TeacherStack);
        let pair = DistillPair::new(
            &student_trace.features,
            &teacher_trace.features,
            &state.student.cognition,
            &state.teacher.cognition,
            &config.distill(),
        )?;
        cog = Some(cog_loss(&pair, config.lambda1, state.student.projector.as_ref())?);
        mark(Phase::Distill);
    }

    let (_, _, actions) = batch_tokens(batch);
    let mut noisy = Vec::with_capacity(b * ACTION_DIM);
    let mut eps = Vec::with_capacity(b * ACTION_DIM);
    let mut steps = Vec::with_capacity(b);
    for a in &actions {
        let step = state.noise_rng.below(state.schedule.steps());
        let (x, e) = state.schedule.noised_action(&state.normalizer.normalize(a), step, &mut state.noise_rng)?;
        noisy.extend_from_slice(&x);
        eps.extend_from_slice(&e);
        steps.push(step);
    }
    let noisy = Tensor::new(&[b, ACTION_DIM], noisy)?;
    let eps = Tensor::new(&[b, ACTION_DIM], eps)?;
    let predicted = state.student.head.predict_noise(&student_trace.cognition, &noisy, &steps)?;
    let task = crate::action::task_loss(&predicted, &eps)?;

    let lb = match &decision {
        Some(d) => Some(load_balance_loss(d, config.balance)?),
        None => None,
    };
    // Zero-weighted terms stay out of the graph so they cannot perturb the
    // task gradient, not even by the sign of a zero.
    let mut total = task.clone();
    if let Some(c) = cog.as_ref().filter(|_| config.lambda2 != 0.0) {
        total = total.add(&c.scale(config.lambda2))?;
    }
    if let Some(l) = lb.as_ref().filter(|_| config.lambda3 != 0.0) {
        total = total.add(&l.scale(config.lambda3))?;
    }
    mark(Phase::Action);

    let value = |t: &Option<Tensor>| t.as_ref().map_or(Ok(0.0), Tensor::item);
    let usage = student_trace.executed.iter().fold(vec![0; config.layers], |mut acc, row| {
        acc.iter_mut().zip(row).for_each(|(c, &on)| *c += on as usize);
        acc
    });
    let metrics = StepMetrics {
        step: state.step,
        task: task.item()?,
        cog: value(&cog)?,
        lb: value(&lb)?,
        total: total.item()?,
        usage,
        events: Vec::new(),
        teacher_grads: 0,
    };
    if !metrics.total.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            diagnostics: gate_diagnostics(decision.as_ref(), &metrics.usage),
        });
    }

    let grads = total.backward()?;
    let mut teacher_grads = 0;
    state.teacher.visit("", &mut |_, t| teacher_grads += grads.get(t).map_or(0, <[f64]>::len));
    state.optimizer.step(&mut state.student, &grads)?;
    mark(Phase::Update);

    if routed {
        ema_update(&mut state.teacher, &state.student.shadow_view(), config.ema_alpha)?;
        mark(Phase::Ema);
    }
    state.step += 1;
    Ok(StepMetrics { events, teacher_grads, ..metrics })
}
