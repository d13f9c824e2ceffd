use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mole::gradcheck;
use mole::harness::run::{sweep, write_sweep_csv};
use mole::harness::{eval_set, evaluate, load_checkpoint, run_training, Baseline, RunConfig};
use mole::mole::{adjacent_layer_similarity, write_similarity_csv};

#[derive(Parser)]
#[command(name = "mole", version, about = "Mixture-of-Layers training harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat TOML config; keys override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_active: Option<usize>,
    /// mole, full, random_skip or early_exit.
    #[arg(long)]
    baseline: Option<Baseline>,
    /// default, appendix-best or desk.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "runs/latest")]
    out_dir: PathBuf,
}

impl RunArgs {
    fn resolve(&self) -> mole::Result<RunConfig> {
        let mut c = RunConfig::resolve(self.preset.as_deref(), self.config.as_deref())?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(k) = self.k_active {
            c.k_active = k;
        }
        if let Some(b) = self.baseline {
            c.baseline = b;
        }
        if let Some(s) = self.steps {
            c.steps = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics.csv, manifest.json and checkpoint.json.
    Train(RunArgs),
    /// Evaluate a checkpoint on its held-out set.
    Eval {
        #[arg(long, default_value = "runs/latest/checkpoint.json")]
        checkpoint: PathBuf,
        /// Evaluate with a different number of active layers.
        #[arg(long)]
        k_active: Option<usize>,
        /// Also write per-layer adjacent cosine similarity to this CSV.
        #[arg(long)]
        similarity_csv: Option<PathBuf>,
    },
    /// Train every (k_active, seed) pair and write sweep.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [8usize, 6, 4, 2, 1])]
        k_values: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn run(cli: Cli) -> mole::Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let config = args.resolve()?;
            let out = run_training(&config, |m| {
                if (m.step + 1) % config.log_every == 0 {
                    eprintln!("step {:>6}  total {:.5}  task {:.5}  cog {:.5}  lb {:.5}", m.step + 1, m.total, m.task, m.cog, m.lb);
                }
            })?;
            out.export(&args.out_dir)?;
            let e = &out.final_eval;
            println!(
                "{} seed {} k_active {}: eval_mse {:.6} gripper {:.3} layers {:.2} flops {:.0} -> {}",
                config.baseline,
                config.seed,
                config.k_active,
                e.action_mse,
                e.gripper_accuracy,
                e.mean_layers,
                e.flops_per_sample,
                args.out_dir.display()
            );
            Ok(true)
        }
        Command::Eval { checkpoint, k_active, similarity_csv } => {
            let mut state = load_checkpoint(&checkpoint)?;
            if let Some(k) = k_active {
                state.config.k_active = k;
                state.config.validate()?;
            }
            let set = eval_set(&state);
            let metrics = evaluate(&state, &set)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            if let Some(path) = similarity_csv {
                let h0 = state.student.embed.embed(
                    &set.iter().map(|t| t.grid.clone()).collect::<Vec<_>>(),
                    &set.iter().map(|t| t.instruction.clone()).collect::<Vec<_>>(),
                    &state.student.cognition,
                )?;
                let sims = adjacent_layer_similarity(&h0, &state.student.stack, state.config.heads)?;
                write_similarity_csv(&sims, &mut std::fs::File::create(path)?)?;
            }
            Ok(true)
        }
        Command::Sweep { run, k_values, seeds } => {
            let base = run.resolve()?;
            let rows = sweep(&base, &k_values, &seeds)?;
            std::fs::create_dir_all(&run.out_dir)?;
            write_sweep_csv(&rows, std::fs::File::create(run.out_dir.join("sweep.csv"))?)?;
            for r in &rows {
                println!("k_active {} seed {}: eval_mse {:.6} flops {:.0}", r.k_active, r.seed, r.eval_mse, r.flops);
            }
            Ok(true)
        }
        Command::Gradcheck { seeds } => {
            let reports = gradcheck::run_all(0..seeds)?;
            let mut ok = true;
            for case in gradcheck::CASES {
                let rows: Vec<_> = reports.iter().filter(|r| r.case == case).collect();
                let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
                let pass = rows.iter().all(|r| r.passed());
                ok &= pass;
                println!("{} {case:<24} max rel error {worst:.2e} over {} seeds", if pass { "PASS" } else { "FAIL" }, rows.len());
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
