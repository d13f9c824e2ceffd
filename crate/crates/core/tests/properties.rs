//! Statistical and algebraic properties checked against independent oracles.

use mole::action::{DiffusionSchedule, ACTION_DIM};
use mole::cogkd::{cog_loss, cog_mimic_loss, reverse_kl_loss, DistillPair};
use mole::harness::{gen_batch, TaskConfig};
use mole::router::{gate, load_balance_loss, BalanceFormulation, GateDecision};
use mole::{Rng, Tensor};

fn random_pair(rng: &mut Rng, b: usize, n: usize, d: usize) -> (Tensor, Tensor, Tensor) {
    let scale = 0.1 + 3.0 * rng.uniform();
    let s = Tensor::new(&[b, n, d], rng.normals(b * n * d, scale)).unwrap();
    let t = Tensor::new(&[b, n, d], rng.normals(b * n * d, scale)).unwrap();
    let m = Tensor::new(&[b, n], (0..b * n).map(|_| rng.uniform()).collect()).unwrap();
    (s, t, m)
}

#[test]
fn reverse_kl_non_negative_and_zero_at_equality() {
    let mut rng = Rng::new(11);
    for _ in 0..1000 {
        let (s, t, m) = random_pair(&mut rng, 2, 3, 5);
        let kl = reverse_kl_loss(&DistillPair::with_mask(&s, &t, &m).unwrap()).unwrap().item().unwrap();
        assert!(kl >= 0.0, "reverse KL {kl} < 0");
        let same = reverse_kl_loss(&DistillPair::with_mask(&s, &s, &m).unwrap()).unwrap().item().unwrap();
        assert!(same.abs() < 1e-15, "reverse KL at equality {same}");
    }
}

#[test]
fn mimic_zero_at_equality_and_quadratic_in_scale() {
    let mut rng = Rng::new(12);
    for _ in 0..200 {
        let (s, t, m) = random_pair(&mut rng, 2, 4, 3);
        let same = DistillPair::with_mask(&s, &s, &m).unwrap();
        assert_eq!(cog_mimic_loss(&same, None).unwrap().item().unwrap(), 0.0);
        let base = cog_mimic_loss(&DistillPair::with_mask(&s, &t, &m).unwrap(), None).unwrap().item().unwrap();
        let c = 0.5 + 2.0 * rng.uniform();
        let scaled =
            cog_mimic_loss(&DistillPair::with_mask(&s.scale(c), &t.scale(c), &m).unwrap(), None).unwrap().item().unwrap();
        assert!((scaled - c * c * base).abs() <= 1e-12 * scaled.max(1.0));
    }
}

#[test]
fn cog_loss_is_convex_combination() {
    let mut rng = Rng::new(13);
    for _ in 0..200 {
        let (s, t, m) = random_pair(&mut rng, 1, 4, 6);
        let pair = DistillPair::with_mask(&s, &t, &m).unwrap();
        let l1 = rng.uniform();
        let mimic = cog_mimic_loss(&pair, None).unwrap().item().unwrap();
        let kl = reverse_kl_loss(&pair).unwrap().item().unwrap();
        let total = cog_loss(&pair, l1, None).unwrap().item().unwrap();
        assert!((total - ((1.0 - l1) * mimic + l1 * kl)).abs() < 1e-12);
    }
}

fn logits(rng: &mut Rng, b: usize, k: usize) -> (Tensor, Tensor, Tensor) {
    let s = Tensor::new(&[b, k], rng.normals(b * k, 1.0)).unwrap();
    let t = Tensor::new(&[b, k], rng.normals(b * k, 1.0)).unwrap();
    let a = Tensor::new(&[b], (0..b).map(|_| 0.05 + rng.uniform()).collect()).unwrap();
    (s, t, a)
}

#[test]
fn hard_rows_sum_to_k_over_many_draws() {
    let mut rng = Rng::new(14);
    let (layers, chunk) = (8, 10_000);
    for k in [1, 4, 7] {
        let mut rows = 0;
        while rows < 100_000 {
            let (s, t, a) = logits(&mut rng, chunk, layers);
            let d = gate(&s, &t, &a, k, 1.0, &mut rng, true).unwrap();
            for row in d.hard.data().chunks(layers) {
                assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
                assert_eq!(row.iter().sum::<f64>(), k as f64);
            }
            rows += chunk;
        }
    }
}

#[test]
fn eval_selection_invariant_to_positive_rescaling() {
    let mut rng = Rng::new(15);
    for _ in 0..200 {
        let (s, t, a) = logits(&mut rng, 4, 8);
        let c = 0.01 + 50.0 * rng.uniform();
        let base = gate(&s, &t, &a, 3, 1.0, &mut rng, false).unwrap();
        let scaled = gate(&s.scale(c), &t.scale(c), &a, 3, 1.0, &mut rng, false).unwrap();
        assert_eq!(base.mask(), scaled.mask());
    }
}

fn gate_frequencies(z: &[f64], k: usize, draws: usize, rng: &mut Rng) -> Vec<f64> {
    let layers = z.len();
    let s = Tensor::new(&[draws, layers], z.repeat(draws)).unwrap();
    let t = Tensor::zeros(&[draws, layers]);
    let a = Tensor::full(&[draws], 1.0);
    let d = gate(&s, &t, &a, k, 0.7, rng, true).unwrap();
    d.usage_counts().iter().map(|&c| c as f64 / draws as f64).collect()
}

/// Inclusion frequency of each index in the top-k of `z + Gumbel`.
fn gumbel_oracle(z: &[f64], k: usize, draws: usize, rng: &mut Rng) -> Vec<f64> {
    let mut counts = vec![0usize; z.len()];
    for _ in 0..draws {
        let mut perturbed: Vec<(f64, usize)> = z.iter().enumerate().map(|(i, &v)| (v + rng.gumbel(), i)).collect();
        perturbed.sort_by(|x, y| y.0.total_cmp(&x.0));
        for &(_, i) in &perturbed[..k] {
            counts[i] += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / draws as f64).collect()
}

#[test]
fn train_frequencies_match_gumbel_oracle() {
    let z = [1.2, -0.3, 0.4, 0.0, -1.0, 0.8, 0.1, -0.6];
    let draws = 100_000;
    for k in [1, 2, 4] {
        let got = gate_frequencies(&z, k, draws, &mut Rng::new(16));
        let want = gumbel_oracle(&z, k, draws, &mut Rng::new(17));
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 0.01, "k={k}: gate {got:?} oracle {want:?}");
        }
    }
    // For a single pick the Gumbel-max trick gives softmax probabilities exactly.
    let got = gate_frequencies(&z, 1, draws, &mut Rng::new(18));
    let norm: f64 = z.iter().map(|v| v.exp()).sum();
    for (g, v) in got.iter().zip(z) {
        assert!((g - v.exp() / norm).abs() < 0.01);
    }
}

#[test]
fn fraction_balance_brute_force_minimizers_are_most_balanced() {
    let (b, layers): (usize, usize) = (4, 3);
    let mut best = f64::INFINITY;
    let mut results = Vec::new();
    for code in 0..layers.pow(b as u32) {
        let picks: Vec<usize> = (0..b).map(|i| code / layers.pow(i as u32) % layers).collect();
        let mut onehot = vec![0.0; b * layers];
        for (i, &p) in picks.iter().enumerate() {
            onehot[i * layers + p] = 1.0;
        }
        let soft = Tensor::new(&[b, layers], onehot.clone()).unwrap();
        let decision = GateDecision {
            soft,
            hard: Tensor::new(&[b, layers], onehot).unwrap(),
            alpha: Tensor::full(&[b], 1.0),
            k_active: 1,
        };
        let loss = load_balance_loss(&decision, BalanceFormulation::Fraction).unwrap().item().unwrap();
        let mut counts = decision.usage_counts();
        counts.sort();
        best = f64::min(best, loss);
        results.push((loss, counts));
    }
    for (loss, counts) in results {
        assert_eq!((loss - best).abs() < 1e-12, counts == [1, 1, 2], "{counts:?} -> {loss}");
    }
}

#[test]
fn noised_action_moments() {
    let schedule = DiffusionSchedule::linear(8, 0.05, 0.5).unwrap();
    let clean = [0.5, -1.0, 0.25, 0.0, 2.0, -0.5, 1.0];
    let mut rng = Rng::new(19);
    let n = 100_000;
    for step in [0, 3, 7] {
        let ab = schedule.alpha_bar(step).unwrap();
        let mut sum = [0.0; ACTION_DIM];
        let mut sq = [0.0; ACTION_DIM];
        for _ in 0..n {
            let (x, _) = schedule.noised_action(&clean, step, &mut rng).unwrap();
            for j in 0..ACTION_DIM {
                sum[j] += x[j];
                sq[j] += x[j] * x[j];
            }
        }
        for j in 0..ACTION_DIM {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            assert!((mean - ab.sqrt() * clean[j]).abs() < 0.02, "step {step} mean {mean}");
            assert!((var / (1.0 - ab) - 1.0).abs() < 0.02, "step {step} var {var}");
        }
    }
}

#[test]
fn target_cells_uniform() {
    let config = TaskConfig::default();
    let mut rng = Rng::new(20);
    let n = 100_000;
    let mut counts = vec![0usize; config.cells()];
    for t in gen_batch(&config, n, &mut rng) {
        counts[t.target_cell.0 * config.grid + t.target_cell.1] += 1;
        assert!(t.grid[t.target_cell.0 * config.grid + t.target_cell.1] == t.instruction[1]);
    }
    let expected = 1.0 / config.cells() as f64;
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let tv = freq.iter().map(|f| (f - expected).abs()).sum::<f64>() / 2.0;
    assert!(tv < 0.02, "total variation {tv}");
    // Chi-square with cells - 1 degrees of freedom, five standard deviations out.
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - n as f64 * expected).powi(2) / (n as f64 * expected)).sum();
    let df = (config.cells() - 1) as f64;
    assert!(chi2 < df + 5.0 * (2.0 * df).sqrt(), "chi-square {chi2}");
}
