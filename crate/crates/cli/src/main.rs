//! `qdc` command line: dataset generation, training, evaluation, ablation
//! suites and SVG charts.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use qdc::ablation::{self, CellResult};
use qdc::data::{save_trajectories, Dataset};
use qdc::envs::{generate_dataset, BehaviorSpec, Env};
use qdc::inference::{evaluate, threads_from_env, CandidateMode, EvalReport};
use qdc::trainer::{train_to_dir, write_atomic, Checkpoint, TrainConfig};
use qdc::Error;

#[derive(Parser)]
#[command(
    name = "qdc",
    version,
    about = "Q-regularized convolutional sequence policies for offline RL"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a behavior policy and write a JSON-Lines dataset.
    GenData {
        #[arg(long)]
        env: String,
        /// random, expert, noisy_expert[:p], segment_a, segment_b or stitch-mix
        #[arg(long)]
        policy: String,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config and dataset; writes metrics.csv and checkpoint.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        total_steps: Option<usize>,
    },
    /// Greedy rollouts of a checkpoint; prints and writes a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to the environment the checkpoint was trained on.
        #[arg(long)]
        env: Option<String>,
        #[arg(long, default_value_t = 30)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of return-to-go candidates; 1 disables Q scoring.
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long, value_enum)]
        candidate_mode: Option<ModeArg>,
        /// Report path; defaults to eval.json next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation suite and write its comparison CSV.
    Ablate {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        /// Overrides the training length of every cell.
        #[arg(long)]
        total_steps: Option<usize>,
    },
    /// Render a CSV as an SVG line chart.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Column for the horizontal axis; defaults to the first numeric one.
        #[arg(long)]
        x: Option<String>,
        /// Column for the vertical axis; defaults to the last numeric one.
        #[arg(long)]
        y: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Stitching,
    Horizon,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    EveryStep,
    Once,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::NumericalAbort { .. } => 2,
                _ => 1,
            })
        }
    }
}

fn run(command: Command) -> qdc::Result<()> {
    match command {
        Command::GenData {
            env,
            policy,
            episodes,
            seed,
            out,
        } => {
            let env = Env::resolve(&env)?;
            let spec = BehaviorSpec::parse(&policy)?;
            let trajs = generate_dataset(&env, spec, episodes, seed)?;
            save_trajectories(&trajs, &out)?;
            let returns = trajs.iter().map(|t| t.episode_return());
            let lo = returns.clone().fold(f64::INFINITY, f64::min);
            let hi = returns.fold(f64::NEG_INFINITY, f64::max);
            println!(
                "wrote {} episodes to {} (return min {lo}, max {hi})",
                trajs.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            eta,
            seed,
            total_steps,
        } => {
            let mut cfg = TrainConfig::from_json_file(&config)?;
            cfg.eta = eta.unwrap_or(cfg.eta);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.total_steps = total_steps.unwrap_or(cfg.total_steps);
            cfg.validate()?;
            let dataset = Dataset::load(&data)?;
            let rows = train_to_dir(cfg, &dataset, &out)?;
            match rows.last() {
                Some(r) => println!(
                    "trained {} steps: bc_loss {:.5}, eval return {:.3} ± {:.3}",
                    r.step, r.bc_loss, r.eval_return_mean, r.eval_return_std
                ),
                None => println!("no steps logged"),
            }
            println!("outputs in {}", out.display());
        }
        Command::Eval {
            ckpt,
            env,
            episodes,
            seed,
            candidates,
            candidate_mode,
            out,
        } => {
            let restored = Checkpoint::load(&ckpt)?.restore()?;
            let env = Env::resolve(env.as_deref().unwrap_or(&restored.config.env))?;
            let mut rollout = restored.config.rollout_config();
            rollout.candidates.count = candidates.unwrap_or(rollout.candidates.count);
            if let Some(m) = candidate_mode {
                rollout.candidates.mode = match m {
                    ModeArg::EveryStep => CandidateMode::EveryStep,
                    ModeArg::Once => CandidateMode::Once,
                };
            }
            if episodes == 0 {
                return Err(Error::Config("episodes must be positive".into()));
            }
            let outcomes = evaluate(
                &restored.model,
                Some(&restored.ensemble),
                &env,
                &rollout,
                &restored.stats,
                episodes,
                seed,
                threads_from_env(),
            )?;
            let report = EvalReport::from_outcomes(&outcomes, &env)?;
            let text = serde_json::to_string_pretty(&report)?;
            let path = out.unwrap_or_else(|| sibling(&ckpt, "eval.json"));
            write_atomic(&path, format!("{text}\n").as_bytes())?;
            println!("{text}");
        }
        Command::Ablate {
            suite,
            out,
            seed_base,
            total_steps,
        } => {
            let opts = ablation::SuiteOptions { seed_base, total_steps };
            std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
            let progress = |c: &CellResult| {
                eprintln!(
                    "{} seed {} K {}: normalized score {:.1}, success {:.2}",
                    c.method.label(),
                    c.seed,
                    c.context_len,
                    c.report.normalized_score_mean,
                    c.report.success_rate
                )
            };
            let (name, csv) = match suite {
                Suite::Stitching => (
                    "stitching.csv",
                    ablation::stitching_csv(&ablation::stitching_suite(opts, progress)?),
                ),
                Suite::Horizon => (
                    "horizon.csv",
                    ablation::horizon_csv(&ablation::horizon_suite(opts, progress)?),
                ),
            };
            let path = out.join(name);
            ablation::write_text(&path, &csv)?;
            print!("{csv}");
        }
        Command::Plot { csv, out, x, y } => {
            let text = std::fs::read_to_string(&csv).map_err(|e| io_error(&csv, e))?;
            let table = plot::Table::parse(&text).map_err(Error::Schema)?;
            let svg = plot::render(&table, x.as_deref(), y.as_deref()).map_err(Error::Config)?;
            write_atomic(&out, svg.as_bytes())?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from(name), |p| p.join(name))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
