use mole::harness::run::same_values;
use mole::harness::{run_training, train_step, write_csv, Baseline, RunConfig, TrainState};

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_preset("desk").unwrap();
    RunConfig { steps: 30, batch: 8, layers: 4, k_active: 2, eval_size: 32, log_every: 10, ..c }
}

fn csv_bytes(config: &RunConfig) -> Vec<u8> {
    let out = run_training(config, |_| {}).unwrap();
    let mut buf = Vec::new();
    write_csv(&out.history, &mut buf).unwrap();
    buf
}

#[test]
fn same_seed_same_csv_bytes() {
    for baseline in [Baseline::Mole, Baseline::RandomSkip] {
        let c = RunConfig { baseline, ..small() };
        assert_eq!(csv_bytes(&c), csv_bytes(&c));
    }
    let a = csv_bytes(&small());
    let b = csv_bytes(&RunConfig { seed: 1, ..small() });
    assert_ne!(a, b);
}

#[test]
fn all_layers_without_aux_losses_reduces_to_full_depth() {
    let routed = RunConfig { k_active: 4, lambda2: 0.0, lambda3: 0.0, ..small() };
    let full = RunConfig { baseline: Baseline::Full, ..routed.clone() };
    let mut a = TrainState::new(&routed).unwrap();
    let mut b = TrainState::new(&full).unwrap();
    for _ in 0..20 {
        let batch = a.next_batch();
        assert_eq!(batch, b.next_batch());
        let ma = train_step(&mut a, &batch).unwrap();
        let mb = train_step(&mut b, &batch).unwrap();
        assert_eq!(ma.task.to_bits(), mb.task.to_bits());
        assert!(same_values(&a.student.stack, &b.student.stack));
        assert!(same_values(&a.student.head, &b.student.head));
        assert!(same_values(&a.student.embed, &b.student.embed));
    }
}

#[test]
fn teacher_never_receives_gradient() {
    let mut s = TrainState::new(&small()).unwrap();
    for _ in 0..10 {
        let batch = s.next_batch();
        assert_eq!(train_step(&mut s, &batch).unwrap().teacher_grads, 0);
    }
}

#[test]
fn early_exit_uses_the_first_layers() {
    let c = RunConfig { baseline: Baseline::EarlyExit, steps: 3, ..small() };
    let out = run_training(&c, |m| assert_eq!(m.usage, vec![8, 8, 0, 0])).unwrap();
    assert_eq!(out.final_eval.usage, vec![32, 32, 0, 0]);
    assert_eq!(out.final_eval.mean_layers, 2.0);
}
