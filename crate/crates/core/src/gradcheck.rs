//! Central finite-difference checks of every differentiable component.
//!
//! Each case builds random parameters and inputs from a seed, reduces the
//! component's output to a scalar with fixed random weights, and compares
//! reverse-mode gradients against `(f(x + h) − f(x − h)) / 2h` for every
//! trainable element (or a random sample of them in large tensors).

use serde::{Deserialize, Serialize};

use crate::action::{task_loss, ActionHead, HeadConfig, ACTION_DIM};
use crate::cogkd::{cog_loss, cog_mimic_loss, reverse_kl_loss, toi_mask, DistillOptions, DistillPair};
use crate::error::Result;
use crate::params::ParamTree;
use crate::rng::Rng;
use crate::router::{gate, load_balance_loss, BalanceFormulation, RouterConfig, RouterParams};
use crate::tensor::Tensor;
use crate::transformer::{layer_forward, self_attention, Embeddings, LayerParams, LayerStack, StackConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Relative errors use `max(|analytic|, |numeric|, FLOOR)` as denominator.
pub const FLOOR: f64 = 1e-6;
/// Coordinates sampled per tensor.
const MAX_COORDS: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub case: String,
    pub seed: u64,
    pub coords: usize,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// A model plus free input tensors, all perturbed by the checker.
#[derive(Debug, Clone)]
pub struct Case<T> {
    pub model: T,
    pub inputs: Vec<Tensor>,
}

impl<T: ParamTree> ParamTree for Case<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.model.visit(&crate::params::join(prefix, "model"), f);
        self.inputs.visit(&crate::params::join(prefix, "inputs"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.model.visit_mut(&crate::params::join(prefix, "model"), f);
        self.inputs.visit_mut(&crate::params::join(prefix, "inputs"), f);
    }
}

fn perturbed<T: ParamTree + Clone>(tree: &T, leaf: usize, coord: usize, delta: f64) -> T {
    let mut out = tree.clone();
    let mut i = 0;
    out.visit_mut("", &mut |_, t| {
        if i == leaf {
            let mut data = t.data().to_vec();
            data[coord] += delta;
            *t = t.with_data(data).expect("same length");
        }
        i += 1;
    });
    out
}

/// Compares gradients of `f` with central differences over the trainable
/// leaves of `tree`.
pub fn check_tree<T, F>(case: &str, seed: u64, tree: &T, f: F) -> Result<CheckReport>
where
    T: ParamTree + Clone,
    F: Fn(&T) -> Result<Tensor>,
{
    let grads = f(tree)?.backward()?;
    let leaves = tree.named_params();
    let mut rng = Rng::new(seed).fork(99);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for (leaf, (_, t)) in leaves.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let analytic = grads.wrt(t);
        let picks: Vec<usize> = if t.numel() <= MAX_COORDS {
            (0..t.numel()).collect()
        } else {
            rng.subset(t.numel(), MAX_COORDS)
        };
        for c in picks {
            let fp = f(&perturbed(tree, leaf, c, STEP))?.item()?;
            let fm = f(&perturbed(tree, leaf, c, -STEP))?.item()?;
            let numeric = (fp - fm) / (2.0 * STEP);
            let denom = analytic[c].abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max((analytic[c] - numeric).abs() / denom);
            coords += 1;
        }
    }
    Ok(CheckReport { case: case.to_string(), seed, coords, max_rel_error: worst })
}

fn randomize<T: ParamTree>(tree: &mut T, rng: &mut Rng, std: f64) {
    tree.visit_mut("", &mut |name, t| {
        let data = if name.ends_with("gain") {
            (0..t.numel()).map(|_| 1.0 + std * rng.normal()).collect()
        } else {
            rng.normals(t.numel(), std)
        };
        *t = t.with_data(data).expect("same length");
    });
}

fn param(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::param(shape, rng.normals(shape.iter().product(), std)).expect("shape")
}

/// Fixed random weights so every output element reaches the loss.
fn weighted(t: &Tensor, seed: u64) -> Result<Tensor> {
    let w = Tensor::new(t.shape(), Rng::new(seed ^ 0x5eed).normals(t.numel(), 1.0))?;
    Ok(t.mul(&w)?.sum_all())
}

const WIDTH: usize = 8;
const HEADS: usize = 2;
const TOKENS: usize = 5;
const BATCH: usize = 2;
const LAYERS: usize = 4;

fn small_stack() -> StackConfig {
    StackConfig { layers: 2, width: WIDTH, heads: HEADS, n_img: 3, n_text: 2, vocab: 7 }
}

fn router_config() -> RouterConfig {
    RouterConfig::for_width(WIDTH)
}

/// Names of every case, in run order.
pub const CASES: [&str; 16] = [
    "self_attention",
    "layer_forward",
    "stack_forward",
    "embeddings",
    "gate_residual",
    "router_spatial",
    "router_temporal",
    "router_temperature",
    "gate_soft",
    "load_balance_fraction",
    "toi_mask",
    "cog_mimic",
    "reverse_kl",
    "cog_loss",
    "predict_noise",
    "task_loss",
];

/// Runs one named case for one seed.
pub fn run_case(case: &str, seed: u64) -> Result<CheckReport> {
    let mut rng = Rng::new(seed);
    let x = |rng: &mut Rng, shape: &[usize]| param(rng, shape, 1.0);
    match case {
        "self_attention" | "layer_forward" => {
            let mut layer = LayerParams::init(WIDTH, &mut rng);
            randomize(&mut layer, &mut rng, 0.4);
            let tree = Case { model: layer, inputs: vec![x(&mut rng, &[BATCH, TOKENS, WIDTH])] };
            let attention = case == "self_attention";
            check_tree(case, seed, &tree, |c| {
                let out = if attention {
                    self_attention(&c.inputs[0], &c.model, HEADS)?
                } else {
                    layer_forward(&c.inputs[0], &c.model, HEADS)?
                };
                weighted(&out, seed)
            })
        }
        "stack_forward" => {
            let mut stack = LayerStack::init(&small_stack(), &mut rng);
            randomize(&mut stack, &mut rng, 0.4);
            let tree = Case { model: stack, inputs: vec![x(&mut rng, &[BATCH, TOKENS, WIDTH])] };
            check_tree(case, seed, &tree, |c| weighted(&c.model.forward(&c.inputs[0], HEADS)?, seed))
        }
        "embeddings" => {
            let cfg = small_stack();
            let mut emb = Embeddings::init(&cfg, &mut rng);
            randomize(&mut emb, &mut rng, 1.0);
            let image = vec![vec![1, 0, 3], vec![6, 6, 2]];
            let text = vec![vec![4, 5], vec![5, 1]];
            let tree = Case { model: emb, inputs: vec![x(&mut rng, &[WIDTH])] };
            check_tree(case, seed, &tree, |c| weighted(&c.model.embed(&image, &text, &c.inputs[0])?, seed))
        }
        "gate_residual" => {
            let g = Tensor::param(&[1], vec![0.2 + 0.6 * rng.uniform()])?;
            let tree = Case { model: g, inputs: vec![x(&mut rng, &[1, TOKENS, WIDTH]), x(&mut rng, &[1, TOKENS, WIDTH])] };
            check_tree(case, seed, &tree, |c| {
                weighted(&Tensor::gate_residual(&c.inputs[0], &c.inputs[1], &c.model)?, seed)
            })
        }
        "router_spatial" | "router_temporal" | "router_temperature" => {
            let cfg = router_config();
            let mut router = RouterParams::init(WIDTH, LAYERS, &cfg, &mut rng);
            randomize(&mut router, &mut rng, 0.5);
            let tree = Case {
                model: router,
                inputs: vec![x(&mut rng, &[BATCH, 3, WIDTH]), x(&mut rng, &[BATCH, 2, WIDTH])],
            };
            check_tree(case, seed, &tree, |c| {
                let (h_img, h_text) = c.model.project_shared(&c.inputs[0], &c.inputs[1])?;
                let out = match case {
                    "router_spatial" => c.model.spatial_weights(&h_img)?,
                    "router_temporal" => c.model.temporal_weights(&h_text, cfg.heads)?,
                    _ => c.model.temperature(&h_text, cfg.heads)?,
                };
                weighted(&out, seed)
            })
        }
        "gate_soft" | "load_balance_fraction" => {
            let tree = Case {
                model: Tensor::param(&[BATCH], (0..BATCH).map(|_| 0.2 + 0.7 * rng.uniform()).collect())?,
                inputs: vec![x(&mut rng, &[BATCH, LAYERS]), x(&mut rng, &[BATCH, LAYERS])],
            };
            let balance = case == "load_balance_fraction";
            check_tree(case, seed, &tree, |c| {
                // The same Gumbel draw on every evaluation.
                let mut noise = Rng::new(seed).fork(7);
                let d = gate(&c.inputs[0], &c.inputs[1], &c.model, 2, 0.7, &mut noise, true)?;
                if balance {
                    load_balance_loss(&d, BalanceFormulation::Fraction)
                } else {
                    weighted(&d.soft, seed)
                }
            })
        }
        "toi_mask" => {
            let tree = Case { model: x(&mut rng, &[WIDTH]), inputs: vec![x(&mut rng, &[BATCH, TOKENS, WIDTH])] };
            check_tree(case, seed, &tree, |c| weighted(&toi_mask(&c.model, &c.inputs[0])?, seed))
        }
        "cog_mimic" | "reverse_kl" | "cog_loss" => {
            let eye = (0..WIDTH * WIDTH).map(|i| if i % (WIDTH + 1) == 0 { 1.0 } else { 0.0 });
            let projector: Vec<f64> = eye.zip(rng.normals(WIDTH * WIDTH, 0.1)).map(|(a, b)| a + b).collect();
            let tree = Case {
                model: Tensor::param(&[WIDTH, WIDTH], projector)?,
                inputs: vec![
                    x(&mut rng, &[BATCH, TOKENS, WIDTH]),
                    x(&mut rng, &[WIDTH]),
                ],
            };
            let teacher = Tensor::new(&[BATCH, TOKENS, WIDTH], rng.normals(BATCH * TOKENS * WIDTH, 1.0))?;
            let teacher_token = Tensor::new(&[WIDTH], rng.normals(WIDTH, 1.0))?;
            let options = DistillOptions { detach_masks: false, ..Default::default() };
            check_tree(case, seed, &tree, |c| {
                let pair = DistillPair::new(&c.inputs[0], &teacher, &c.inputs[1], &teacher_token, &options)?;
                match case {
                    "cog_mimic" => cog_mimic_loss(&pair, Some(&c.model)),
                    "reverse_kl" => reverse_kl_loss(&pair),
                    _ => cog_loss(&pair, 0.5, Some(&c.model)),
                }
            })
        }
        "predict_noise" | "task_loss" => {
            let cfg = HeadConfig { hidden: 6, step_embed: 4 };
            let mut head = ActionHead::init(WIDTH, &cfg, &mut rng);
            randomize(&mut head, &mut rng, 0.5);
            let tree = Case {
                model: head,
                inputs: vec![x(&mut rng, &[BATCH, WIDTH]), x(&mut rng, &[BATCH, ACTION_DIM])],
            };
            let target = Tensor::new(&[BATCH, ACTION_DIM], rng.normals(BATCH * ACTION_DIM, 1.0))?;
            let steps: Vec<usize> = (0..BATCH).map(|i| (seed as usize + i) % 8).collect();
            let loss = case == "task_loss";
            check_tree(case, seed, &tree, |c| {
                let eps = c.model.predict_noise(&c.inputs[0], &c.inputs[1], &steps)?;
                if loss {
                    task_loss(&eps, &target)
                } else {
                    weighted(&eps, seed)
                }
            })
        }
        other => Err(crate::error::Error::Input(format!("unknown gradient case {other:?}"))),
    }
}

/// Every case over `seeds`.
pub fn run_all(seeds: impl IntoIterator<Item = u64> + Clone) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for case in CASES {
        for seed in seeds.clone() {
            out.push(run_case(case, seed)?);
        }
    }
    Ok(out)
}
