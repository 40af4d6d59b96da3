//! Rollouts: rolling context, candidate return-to-go grid and
//! Q-scored action selection.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{QEnsemble, QSelect};
use crate::data::{ContextWindow, DatasetStats};
use crate::envs::{normalized_score, Env};
use crate::error::{Error, Result};
use crate::policy::PolicyModel;

/// Environment variable capping evaluation worker threads.
pub const THREADS_VAR: &str = "QDC_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMode {
    /// Re-score the whole grid at every step.
    #[default]
    EveryStep,
    /// Choose once at the first step, then follow that return.
    Once,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub count: usize,
    pub max_multiplier: f64,
    pub mode: CandidateMode,
}

/// Evenly spaced grid from `return_min` to `max_multiplier·return_max`
/// inclusive; a single candidate sits at the top.
pub fn candidate_rtgs(stats: &DatasetStats, count: usize, max_multiplier: f64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::Config("candidate_count must be positive".into()));
    }
    if !(max_multiplier >= 1.0) {
        return Err(Error::Config(format!(
            "candidate_max_multiplier must be at least 1, got {max_multiplier}"
        )));
    }
    let hi = max_multiplier * stats.return_max;
    if count == 1 {
        return Ok(vec![hi]);
    }
    let lo = stats.return_min;
    let step = (hi - lo) / (count - 1) as f64;
    Ok((0..count)
        .map(|i| if i + 1 == count { hi } else { lo + step * i as f64 })
        .collect())
}

/// History of realized steps for one episode, at most `K−1` of them, plus
/// the current state. States are kept raw.
#[derive(Clone, Debug)]
pub struct RolloutContext {
    context_len: usize,
    rtgs: VecDeque<f64>,
    states: VecDeque<Vec<f64>>,
    actions: VecDeque<Vec<f64>>,
    timesteps: VecDeque<usize>,
    current: Vec<f64>,
    t: usize,
    realized: f64,
}

impl RolloutContext {
    pub fn new(context_len: usize, state: Vec<f64>) -> Result<Self> {
        if context_len == 0 {
            return Err(Error::Config("context length must be positive".into()));
        }
        Ok(Self {
            context_len,
            rtgs: VecDeque::new(),
            states: VecDeque::new(),
            actions: VecDeque::new(),
            timesteps: VecDeque::new(),
            current: state,
            t: 0,
            realized: 0.0,
        })
    }

    pub fn history_len(&self) -> usize {
        self.states.len()
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn current_state(&self) -> &[f64] {
        &self.current
    }

    /// Sum of rewards realized so far.
    pub fn realized_return(&self) -> f64 {
        self.realized
    }

    /// Conditioning values of the retained history, oldest first.
    pub fn history_rtgs(&self) -> impl Iterator<Item = &f64> {
        self.rtgs.iter()
    }

    /// Records the executed action with its conditioning return, then moves
    /// to `next_state`.
    pub fn push(&mut self, rtg: f64, action: Vec<f64>, reward: f64, next_state: Vec<f64>) {
        if self.context_len == 1 {
            self.current = next_state;
            self.t += 1;
            self.realized += reward;
            return;
        }
        if self.states.len() == self.context_len - 1 {
            self.rtgs.pop_front();
            self.states.pop_front();
            self.actions.pop_front();
            self.timesteps.pop_front();
        }
        self.rtgs.push_back(rtg);
        self.states.push_back(std::mem::replace(&mut self.current, next_state));
        self.actions.push_back(action);
        self.timesteps.push_back(self.t);
        self.t += 1;
        self.realized += reward;
    }

    /// Window whose final slot holds the current state conditioned on `rtg`.
    pub fn window(&self, rtg: f64, stats: &DatasetStats, action_dim: usize) -> ContextWindow {
        let k = self.context_len;
        let valid_len = self.states.len() + 1;
        let pad = k - valid_len;
        let sd = self.current.len();
        let mut w = ContextWindow {
            rtgs: vec![0.0; k],
            states: vec![vec![0.0; sd]; k],
            actions: vec![vec![0.0; action_dim]; k],
            rewards: vec![0.0; k],
            timesteps: vec![0; k],
            valid_len,
            terminal_end: false,
        };
        for (i, slot) in (pad..k - 1).enumerate() {
            w.rtgs[slot] = self.rtgs[i];
            w.states[slot] = stats.normalize(&self.states[i]);
            w.actions[slot] = self.actions[i].clone();
            w.timesteps[slot] = self.timesteps[i];
        }
        w.rtgs[k - 1] = rtg;
        w.states[k - 1] = stats.normalize(&self.current);
        w.timesteps[k - 1] = self.t;
        w
    }
}

/// Chosen action with the index of its candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub action: Vec<f64>,
    pub candidate: usize,
}

/// Predicts one action per candidate in a single batched forward pass and
/// keeps the one with the largest min-Q score; ties go to the larger
/// candidate. A single candidate, or no critic, skips scoring.
pub fn select_action(
    model: &PolicyModel,
    ensemble: Option<&QEnsemble>,
    ctx: &RolloutContext,
    candidates: &[f64],
    stats: &DatasetStats,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Config("no return-to-go candidates".into()));
    }
    let ad = model.config.action_dim;
    let windows: Vec<ContextWindow> = candidates.iter().map(|&c| ctx.window(c, stats, ad)).collect();
    let mut actions: Vec<Vec<f64>> = model
        .predict(&windows)?
        .into_iter()
        .map(|mut p| p.pop().unwrap())
        .collect();
    let candidate = match ensemble {
        Some(q) if candidates.len() > 1 => {
            let state = stats.normalize(ctx.current_state());
            let states = vec![state; candidates.len()];
            let scores = q.q_values(&states, &actions, QSelect::Min)?;
            argmax_prefer_larger(&scores, candidates)
        }
        _ => argmax_prefer_larger(&vec![0.0; candidates.len()], candidates),
    };
    Ok(Selection {
        action: actions.swap_remove(candidate),
        candidate,
    })
}

/// Index of the top score; equal scores resolve to the larger candidate.
pub fn argmax_prefer_larger(scores: &[f64], candidates: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] || (scores[i] == scores[best] && candidates[i] > candidates[best]) {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode_return: f64,
    pub steps: usize,
    pub success: bool,
}

/// Rollout settings. `max_steps` caps episodes below the environment
/// horizon.
#[derive(Clone, Debug)]
pub struct RolloutConfig {
    pub candidates: CandidateConfig,
    pub max_steps: Option<usize>,
}

/// Greedy episode. In every-step mode each candidate is a grid value minus
/// the return realized so far; in once mode the first choice is kept and
/// decremented by realized rewards.
pub fn run_episode(
    model: &PolicyModel,
    ensemble: Option<&QEnsemble>,
    env: &mut Env,
    cfg: &RolloutConfig,
    stats: &DatasetStats,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeOutcome> {
    let mut outcome = EpisodeOutcome {
        episode_return: 0.0,
        steps: 0,
        success: false,
    };
    let limit = cfg.max_steps.map_or(env.horizon(), |m| m.min(env.horizon()));
    if limit == 0 {
        return Ok(outcome);
    }
    if env.state_dim() != model.config.state_dim || env.action_dim() != model.config.action_dim {
        return Err(Error::Config(format!(
            "environment {} has state/action dims {}/{}, model expects {}/{}",
            env.name(),
            env.state_dim(),
            env.action_dim(),
            model.config.state_dim,
            model.config.action_dim
        )));
    }
    let grid = candidate_rtgs(stats, cfg.candidates.count, cfg.candidates.max_multiplier)?;
    let mut ctx = RolloutContext::new(model.config.context_len, env.reset(rng))?;
    let mut chosen: Option<f64> = None;
    while outcome.steps < limit {
        let realized = ctx.realized_return();
        let candidates: Vec<f64> = match (cfg.candidates.mode, chosen) {
            (CandidateMode::Once, Some(c)) => vec![c - realized],
            _ => grid.iter().map(|g| g - realized).collect(),
        };
        let sel = select_action(model, ensemble, &ctx, &candidates, stats)?;
        let rtg = candidates[sel.candidate];
        chosen.get_or_insert(grid[sel.candidate.min(grid.len() - 1)]);
        let tr = env.step(&sel.action)?;
        outcome.episode_return += tr.reward;
        outcome.steps += 1;
        outcome.success |= tr.terminal;
        ctx.push(rtg, sel.action, tr.reward, tr.state);
        if tr.done {
            break;
        }
    }
    Ok(outcome)
}

/// Number of evaluation workers from [`THREADS_VAR`], default 1.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Runs `episodes` rollouts over frozen parameters. Episode `i` draws from
/// its own stream of `seed`, so results do not depend on `threads`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &PolicyModel,
    ensemble: Option<&QEnsemble>,
    env: &Env,
    cfg: &RolloutConfig,
    stats: &DatasetStats,
    episodes: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<EpisodeOutcome>> {
    let run = |i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        run_episode(model, ensemble, &mut env.clone(), cfg, stats, &mut rng)
    };
    let threads = threads.clamp(1, episodes.max(1));
    if threads == 1 {
        return (0..episodes).map(run).collect();
    }
    let chunks: Vec<Result<Vec<EpisodeOutcome>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let run = &run;
                scope.spawn(move || (w..episodes).step_by(threads).map(run).collect::<Result<Vec<_>>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let chunks = chunks.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(episodes);
    for i in 0..episodes {
        out.push(chunks[i % threads][i / threads]);
    }
    Ok(out)
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub raw_return_mean: f64,
    pub raw_return_std: f64,
    pub normalized_score_mean: f64,
    pub normalized_score_std: f64,
    pub success_rate: f64,
}

impl EvalReport {
    pub fn from_outcomes(outcomes: &[EpisodeOutcome], env: &Env) -> Result<Self> {
        let optimal = env.model().optimal_return()?;
        let random = env.model().random_return()?;
        let raw: Vec<f64> = outcomes.iter().map(|o| o.episode_return).collect();
        let norm = raw
            .iter()
            .map(|&r| normalized_score(r, optimal, random))
            .collect::<Result<Vec<_>>>()?;
        let (raw_return_mean, raw_return_std) = mean_std(&raw);
        let (normalized_score_mean, normalized_score_std) = mean_std(&norm);
        let successes = outcomes.iter().filter(|o| o.success).count();
        Ok(Self {
            raw_return_mean,
            raw_return_std,
            normalized_score_mean,
            normalized_score_std,
            success_rate: successes as f64 / outcomes.len().max(1) as f64,
        })
    }
}
