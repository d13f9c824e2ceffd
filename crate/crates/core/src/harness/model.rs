//! Student and teacher parameter sets and the optimizer.

use crate::action::ActionHead;
use crate::error::{Error, Result};
use crate::params::{param_tree, ParamTree};
use crate::rng::Rng;
use crate::router::RouterParams;
use crate::tensor::{Gradients, Tensor};
use crate::transformer::{Embeddings, LayerStack};

use super::config::RunConfig;

/// Everything the student learns.
#[derive(Debug, Clone)]
pub struct Student {
    pub embed: Embeddings,
    /// The learnable cognition token `e^c`.
    pub cognition: Tensor,
    pub stack: LayerStack,
    pub router: RouterParams,
    pub head: ActionHead,
    pub projector: Option<Tensor>,
}

param_tree!(Student { embed, cognition, stack, router, head, projector });

/// EMA shadow of the student's stack and cognition token. Holds constants
/// only.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub stack: LayerStack,
    pub cognition: Tensor,
}

param_tree!(Teacher { stack, cognition });

impl Student {
    /// Initialization order is fixed so every baseline starts from the same
    /// weights under one seed.
    pub fn init(config: &RunConfig, rng: &mut Rng) -> Student {
        let stack_cfg = config.stack();
        let embed = Embeddings::init(&stack_cfg, rng);
        let cognition = Tensor::param(&[config.width], rng.normals(config.width, 0.02)).expect("width");
        let stack = LayerStack::init(&stack_cfg, rng);
        let router = RouterParams::init(config.width, config.layers, &config.router(), rng);
        let head = ActionHead::init(config.width, &config.head(), rng);
        let projector = config.projector.then(|| {
            let d = config.width;
            let eye = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
            Tensor::param(&[d, d], eye).expect("square")
        });
        Student { embed, cognition, stack, router, head, projector }
    }

    /// The student's stack and token viewed with the teacher's layout.
    pub fn shadow_view(&self) -> Teacher {
        Teacher { stack: self.stack.clone(), cognition: self.cognition.clone() }
    }
}

impl Teacher {
    /// A detached copy of the student's stack and token.
    pub fn from_student(student: &Student) -> Teacher {
        let mut t = student.shadow_view();
        t.visit_mut("", &mut |_, p| *p = p.detach());
        t
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: &RunConfig) -> AdamW {
        AdamW {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            warmup_steps: config.warmup_steps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate for the next update.
    pub fn current_lr(&self) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((self.step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// One update of every parameter in `params`. Parameters that received
    /// no gradient see a zero gradient (weight decay still applies).
    pub fn step<T: ParamTree>(&mut self, params: &mut T, grads: &Gradients) -> Result<()> {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let first = self.m.is_empty();
        let mut i = 0;
        let mut failure = None;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let (eps, wd) = (self.eps, self.weight_decay);
        params.visit_mut("", &mut |name, p| {
            if first {
                m_all.push(vec![0.0; p.numel()]);
                v_all.push(vec![0.0; p.numel()]);
            }
            let (Some(m), Some(v)) = (m_all.get_mut(i), v_all.get_mut(i)) else {
                failure.get_or_insert(name);
                return;
            };
            if m.len() != p.numel() {
                failure.get_or_insert(name);
                return;
            }
            let g = grads.wrt(p);
            let data = p
                .data()
                .iter()
                .enumerate()
                .map(|(j, &w)| {
                    m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                    v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    w - lr * update - lr * wd * w
                })
                .collect();
            *p = p.with_data(data).expect("same shape");
            i += 1;
        });
        if failure.is_some() || i != self.m.len() {
            return Err(Error::Contract(format!("optimizer state does not match parameters at {failure:?}")));
        }
        Ok(())
    }

    /// First and second moments, flattened in parameter order.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_starts_as_detached_copy() {
        let c = RunConfig::default();
        let s = Student::init(&c, &mut Rng::new(0));
        let t = Teacher::from_student(&s);
        let (sp, tp) = (s.shadow_view().named_params(), t.named_params());
        assert_eq!(sp.len(), tp.len());
        for ((ns, a), (nt, b)) in sp.iter().zip(&tp) {
            assert_eq!(ns, nt);
            assert_eq!(a.data(), b.data());
            assert!(!b.requires_grad());
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let c = RunConfig { weight_decay: 0.0, lr: 0.1, ..RunConfig::default() };
        let mut opt = AdamW::new(&c);
        let mut p = vec![Tensor::param(&[2], vec![1.0, -1.0]).unwrap()];
        let loss = p[0].mul(&p[0]).unwrap().sum_all();
        let g = loss.backward().unwrap();
        opt.step(&mut p, &g).unwrap();
        // Bias-corrected first step is lr · sign(g).
        assert!((p[0].data()[0] - 0.9).abs() < 1e-7);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-7);
        assert!(p[0].requires_grad());
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        let c = RunConfig { lr: 0.0, ..RunConfig::default() };
        let mut opt = AdamW::new(&c);
        let mut p = vec![Tensor::param(&[3], vec![0.3, -2.0, 5.0]).unwrap()];
        let g = p[0].mul(&p[0]).unwrap().sum_all().backward().unwrap();
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[0.3, -2.0, 5.0]);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let c = RunConfig { warmup_steps: 4, lr: 1.0, ..RunConfig::default() };
        let mut opt = AdamW::new(&c);
        let mut p = vec![Tensor::param(&[1], vec![0.0]).unwrap()];
        let mut seen = Vec::new();
        for _ in 0..6 {
            seen.push(opt.current_lr());
            opt.step(&mut p, &Gradients::default()).unwrap();
        }
        assert_eq!(seen, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn mismatched_tree_is_contract_error() {
        let c = RunConfig::default();
        let mut opt = AdamW::new(&c);
        let mut a = vec![Tensor::param(&[1], vec![0.0]).unwrap()];
        opt.step(&mut a, &Gradients::default()).unwrap();
        let mut b = vec![Tensor::param(&[2], vec![0.0; 2]).unwrap()];
        assert!(matches!(opt.step(&mut b, &Gradients::default()), Err(Error::Contract(_))));
    }
}
