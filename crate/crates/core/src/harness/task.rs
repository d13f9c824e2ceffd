//! Synthetic grid-world instructions with analytic 7-DoF targets.
//!
//! A `G×G` grid holds a few distinct objects; each cell becomes one image
//! token carrying the object code (0 for empty). The instruction is
//! `[verb, object, pad, …]`. The target translation points from the grid
//! centre to the named object's cell, normalized to `[-1, 1]`; rotation,
//! height offset and gripper depend on the verb alone.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::action::{ActionVector, ACTION_DIM};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `(rotation, dz, gripper)` per verb.
const VERBS: [([f64; 3], f64, f64); 6] = [
    ([0.0, 0.0, PI / 2.0], -0.5, 1.0),
    ([0.0, PI / 4.0, 0.0], 0.0, 0.0),
    ([PI / 6.0, 0.0, -PI / 4.0], 0.5, 0.0),
    ([-PI / 3.0, 0.0, PI / 3.0], 0.25, 1.0),
    ([0.0, -PI / 4.0, PI], -0.25, 1.0),
    ([PI / 2.0, PI / 6.0, 0.0], 0.75, 0.0),
];

pub const MAX_VERBS: usize = VERBS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Grid side `G`; the image has `G²` tokens.
    pub grid: usize,
    /// Distinct object codes, `1..=codes`.
    pub codes: usize,
    /// Objects placed per scene.
    pub objects: usize,
    pub verbs: usize,
    /// Instruction length including padding.
    pub n_text: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { grid: 4, codes: 8, objects: 4, verbs: 4, n_text: 8 }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.grid == 0 {
            return fail("grid must be at least 1".into());
        }
        if self.objects == 0 || self.objects > self.codes || self.objects > self.cells() {
            return fail(format!(
                "cannot place {} objects with {} codes on {} cells",
                self.objects,
                self.codes,
                self.cells()
            ));
        }
        if self.verbs == 0 || self.verbs > MAX_VERBS {
            return fail(format!("verbs must be in 1..={MAX_VERBS}, got {}", self.verbs));
        }
        if self.n_text < 2 {
            return fail("instructions need at least a verb and an object".into());
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn verb_token(&self, verb: usize) -> usize {
        self.codes + 1 + verb
    }

    pub fn pad_token(&self) -> usize {
        self.codes + self.verbs + 1
    }

    /// Empty cell, object codes, verbs, padding.
    pub fn vocab(&self) -> usize {
        self.codes + self.verbs + 2
    }

    /// Normalized offset of a cell centre from the grid centre.
    pub fn offset(&self, index: usize) -> f64 {
        let half = self.grid as f64 / 2.0;
        (index as f64 + 0.5 - half) / half
    }

    /// The analytic target for `verb` applied to the object at `(row, col)`.
    pub fn target(&self, verb: usize, row: usize, col: usize) -> ActionVector {
        let (rotation, dz, gripper) = VERBS[verb];
        ActionVector::new([self.offset(col), self.offset(row), dz], rotation, gripper)
    }
}

/// One scene, its instruction and the action that solves it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    /// Row-major cell codes, length `G²`.
    pub grid: Vec<usize>,
    pub instruction: Vec<usize>,
    pub verb: usize,
    pub target_cell: (usize, usize),
    pub action: ActionVector,
}

/// Draws `size` independent tasks.
pub fn gen_batch(config: &TaskConfig, size: usize, rng: &mut Rng) -> Vec<SyntheticTask> {
    (0..size).map(|_| gen_task(config, rng)).collect()
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.below(i + 1));
    }
    v
}

fn gen_task(config: &TaskConfig, rng: &mut Rng) -> SyntheticTask {
    let cells = rng.subset(config.cells(), config.objects);
    let codes: Vec<usize> = shuffled(config.codes, rng).into_iter().take(config.objects).map(|c| c + 1).collect();
    let mut grid = vec![0; config.cells()];
    for (&cell, &code) in cells.iter().zip(&codes) {
        grid[cell] = code;
    }
    let pick = rng.below(config.objects);
    let verb = rng.below(config.verbs);
    let cell = cells[pick];
    let (row, col) = (cell / config.grid, cell % config.grid);
    let mut instruction = vec![config.pad_token(); config.n_text];
    instruction[0] = config.verb_token(verb);
    instruction[1] = codes[pick];
    SyntheticTask {
        grid,
        instruction,
        verb,
        target_cell: (row, col),
        action: config.target(verb, row, col),
    }
}

/// Token lists and raw target actions for a batch.
pub fn batch_tokens(tasks: &[SyntheticTask]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<[f64; ACTION_DIM]>) {
    let image = tasks.iter().map(|t| t.grid.clone()).collect();
    let text = tasks.iter().map(|t| t.instruction.clone()).collect();
    let actions = tasks.iter().map(|t| t.action.to_array()).collect();
    (image, text, actions)
}

/// Per-component affine map between raw actions and the unit-variance space
/// the head is trained in. Statistics are exact: target cells are uniform
/// over the grid and verbs are uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionNormalizer {
    pub mean: [f64; ACTION_DIM],
    /// Unit where a component is constant.
    pub std: [f64; ACTION_DIM],
    pub variance: [f64; ACTION_DIM],
}

impl ActionNormalizer {
    pub fn for_task(config: &TaskConfig) -> ActionNormalizer {
        let mut mean = [0.0; ACTION_DIM];
        let mut sq = [0.0; ACTION_DIM];
        let count = (config.cells() * config.verbs) as f64;
        for verb in 0..config.verbs {
            for row in 0..config.grid {
                for col in 0..config.grid {
                    for (j, v) in config.target(verb, row, col).to_array().iter().enumerate() {
                        mean[j] += v / count;
                        sq[j] += v * v / count;
                    }
                }
            }
        }
        let variance: [f64; ACTION_DIM] = std::array::from_fn(|j| (sq[j] - mean[j] * mean[j]).max(0.0));
        let std = variance.map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
        ActionNormalizer { mean, std, variance }
    }

    pub fn normalize(&self, a: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        std::array::from_fn(|j| (a[j] - self.mean[j]) / self.std[j])
    }

    pub fn denormalize(&self, a: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        std::array::from_fn(|j| a[j] * self.std[j] + self.mean[j])
    }

    /// Mean over components of the per-component target variance.
    pub fn mean_variance(&self) -> f64 {
        self.variance.iter().sum::<f64>() / ACTION_DIM as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_batch() {
        let c = TaskConfig::default();
        assert_eq!(gen_batch(&c, 32, &mut Rng::new(9)), gen_batch(&c, 32, &mut Rng::new(9)));
        assert_ne!(gen_batch(&c, 32, &mut Rng::new(9)), gen_batch(&c, 32, &mut Rng::new(10)));
    }

    #[test]
    fn instruction_names_a_present_object_and_target_follows() {
        let c = TaskConfig::default();
        for t in gen_batch(&c, 500, &mut Rng::new(1)) {
            let (row, col) = t.target_cell;
            assert_eq!(t.grid[row * c.grid + col], t.instruction[1]);
            assert_ne!(t.instruction[1], 0);
            assert_eq!(t.grid.iter().filter(|&&v| v != 0).count(), c.objects);
            assert_eq!(t.action, c.target(t.verb, row, col));
            assert!(t.grid.iter().chain(&t.instruction).all(|&v| v < c.vocab()));
        }
    }

    #[test]
    fn corner_cell_points_to_corner() {
        let c = TaskConfig::default();
        let a = c.target(0, 0, 0);
        assert_eq!(a.translation[0], -0.75);
        assert_eq!(a.translation[1], -0.75);
        let a = c.target(0, 3, 3);
        assert_eq!(a.translation[..2], [0.75, 0.75]);
    }

    #[test]
    fn normalizer_round_trips() {
        let c = TaskConfig::default();
        let n = ActionNormalizer::for_task(&c);
        let a = c.target(2, 1, 3).to_array();
        let back = n.denormalize(&n.normalize(&a));
        for j in 0..ACTION_DIM {
            assert!((back[j] - a[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(TaskConfig { objects: 20, ..Default::default() }.validate().is_err());
        assert!(TaskConfig { verbs: 0, ..Default::default() }.validate().is_err());
        assert!(TaskConfig { n_text: 1, ..Default::default() }.validate().is_err());
    }
}
