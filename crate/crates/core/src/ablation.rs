//! Toy reproductions of the two ablations: Q-guided stitching against a
//! pure return-conditioned baseline, and sensitivity to the context length.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::critic::QSelect;
use crate::data::Dataset;
use crate::envs::{generate_dataset, stitching_precondition, BehaviorSpec, Env};
use crate::error::{Error, Result};
use crate::inference::{evaluate, mean_std, threads_from_env, CandidateMode, EvalReport};
use crate::trainer::{write_atomic, TrainConfig, Trainer};

pub const STITCH_ENV: &str = "maze7x7-umaze";
pub const STITCH_EPISODES: usize = 200;
pub const SEEDS_PER_METHOD: u64 = 3;
pub const EVAL_EPISODES: usize = 30;
pub const HORIZON_CONTEXTS: [usize; 3] = [4, 8, 16];
pub const REFERENCE_CONTEXT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Qdc,
    /// Same network and data with `eta = 0` and a single return candidate.
    Baseline,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Qdc => "qdc",
            Method::Baseline => "baseline",
        }
    }
}

/// Training configuration of the stitching task.
pub fn stitch_config(seed: u64, context_len: usize) -> TrainConfig {
    TrainConfig {
        env: STITCH_ENV.into(),
        context_len,
        embed_dim: 24,
        n_blocks: 1,
        conv_window: 4,
        q_hidden: 64,
        batch_size: 32,
        total_steps: 3000,
        policy_lr: 1e-3,
        critic_lr: 1e-3,
        gamma: 0.9,
        polyak_tau: 0.01,
        eta: 1.5,
        q_select: QSelect::Min,
        rtg_scale: 1.0,
        candidate_count: 8,
        candidate_max_multiplier: 1.2,
        candidate_mode: CandidateMode::EveryStep,
        seed,
        eval_every: 3000,
        eval_episodes: EVAL_EPISODES,
        grad_clip: 1.0,
    }
}

/// The ablation twin of `cfg`.
pub fn baseline_of(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        eta: 0.0,
        candidate_count: 1,
        ..cfg.clone()
    }
}

pub fn config_for(method: Method, seed: u64, context_len: usize) -> TrainConfig {
    let cfg = stitch_config(seed, context_len);
    match method {
        Method::Qdc => cfg,
        Method::Baseline => baseline_of(&cfg),
    }
}

/// Stitch-mix dataset for the suite, after checking that no logged
/// episode from the start region is optimal while the logged transitions
/// still connect start and goal.
pub fn stitch_dataset(seed: u64) -> Result<Dataset> {
    let env = Env::resolve(STITCH_ENV)?;
    let spec = BehaviorSpec::parse("stitch-mix")?;
    let trajs = generate_dataset(&env, spec, STITCH_EPISODES, seed)?;
    let report = stitching_precondition(env.model(), &trajs)?;
    if !report.holds() {
        return Err(Error::Config(format!("stitching precondition violated: {report:?}")));
    }
    Dataset::new(trajs)
}

/// Trains `cfg` to completion and scores it over `episodes` rollouts.
pub fn train_and_score(cfg: TrainConfig, dataset: &Dataset, episodes: usize) -> Result<EvalReport> {
    let mut trainer = Trainer::new(cfg, dataset)?;
    while trainer.steps_done() < trainer.config.total_steps {
        trainer.step_once()?;
    }
    let outcomes = evaluate(
        &trainer.model,
        Some(trainer.ensemble()),
        &trainer.env,
        &trainer.config.rollout_config(),
        &dataset.stats,
        episodes,
        trainer.config.seed,
        threads_from_env(),
    )?;
    EvalReport::from_outcomes(&outcomes, &trainer.env)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub context_len: usize,
    pub report: EvalReport,
}

/// Seeds `seed_base+1 ..= seed_base+3`; the dataset uses `seed_base`.
pub fn suite_seeds(seed_base: u64) -> Vec<u64> {
    (1..=SEEDS_PER_METHOD).map(|i| seed_base + i).collect()
}

/// Overrides shared by every cell of a suite.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SuiteOptions {
    pub seed_base: u64,
    /// Replaces the configured training length when set.
    pub total_steps: Option<usize>,
}

pub fn run_cell(
    method: Method,
    seed: u64,
    context_len: usize,
    dataset: &Dataset,
    total_steps: Option<usize>,
) -> Result<CellResult> {
    let mut cfg = config_for(method, seed, context_len);
    if let Some(steps) = total_steps {
        cfg.total_steps = steps;
    }
    let report = train_and_score(cfg, dataset, EVAL_EPISODES)?;
    Ok(CellResult {
        method,
        seed,
        context_len,
        report,
    })
}

/// Both methods on every seed at the reference context length.
pub fn stitching_suite(opts: SuiteOptions, mut progress: impl FnMut(&CellResult)) -> Result<Vec<CellResult>> {
    let dataset = stitch_dataset(opts.seed_base)?;
    let mut out = Vec::new();
    for method in [Method::Qdc, Method::Baseline] {
        for seed in suite_seeds(opts.seed_base) {
            let cell = run_cell(method, seed, REFERENCE_CONTEXT, &dataset, opts.total_steps)?;
            progress(&cell);
            out.push(cell);
        }
    }
    Ok(out)
}

/// Both methods on every seed and context length.
pub fn horizon_suite(opts: SuiteOptions, mut progress: impl FnMut(&CellResult)) -> Result<Vec<CellResult>> {
    let dataset = stitch_dataset(opts.seed_base)?;
    let mut out = Vec::new();
    for method in [Method::Qdc, Method::Baseline] {
        for k in HORIZON_CONTEXTS {
            for seed in suite_seeds(opts.seed_base) {
                let cell = run_cell(method, seed, k, &dataset, opts.total_steps)?;
                progress(&cell);
                out.push(cell);
            }
        }
    }
    Ok(out)
}

/// `method,seed,normalized_score,success_rate`.
pub fn stitching_csv(cells: &[CellResult]) -> String {
    let mut s = String::from("method,seed,normalized_score,success_rate\n");
    for c in cells {
        s += &format!(
            "{},{},{},{}\n",
            c.method.label(),
            c.seed,
            c.report.normalized_score_mean,
            c.report.success_rate
        );
    }
    s
}

/// Seed mean and standard deviation of the normalized score per method
/// and context length: `method,K,mean,std`.
pub fn horizon_csv(cells: &[CellResult]) -> String {
    let mut s = String::from("method,K,mean,std\n");
    for method in [Method::Qdc, Method::Baseline] {
        for k in HORIZON_CONTEXTS {
            let scores: Vec<f64> = cells
                .iter()
                .filter(|c| c.method == method && c.context_len == k)
                .map(|c| c.report.normalized_score_mean)
                .collect();
            if scores.is_empty() {
                continue;
            }
            let (m, sd) = mean_std(&scores);
            s += &format!("{},{k},{m},{sd}\n", method.label());
        }
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}
