//! Trajectories, return-to-go, dataset files and context-window sampling.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum per-dimension state standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Undiscounted suffix sums: `rtg[t] = rewards[t] + rtg[t+1]`.
pub fn compute_rtg(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let mut rtg = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc += r;
        rtg[t] = acc;
    }
    Ok(rtg)
}

/// One logged episode. `terminal` is true when the episode ended in a
/// terminal state and false on timeout.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub terminal: bool,
    pub rtg: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    terminal: bool,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>, rewards: Vec<f64>, terminal: bool) -> Result<Self> {
        let n = rewards.len();
        if states.len() != n || actions.len() != n {
            return Err(Error::Schema(format!(
                "episode lengths differ: {} states, {} actions, {} rewards",
                states.len(),
                actions.len(),
                n
            )));
        }
        let rtg = compute_rtg(&rewards)?;
        Ok(Self {
            states,
            actions,
            rewards,
            terminal,
            rtg,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rtg[0]
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn action_dim(&self) -> usize {
        self.actions[0].len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub return_max: f64,
    pub return_min: f64,
}

impl DatasetStats {
    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        let first = trajs.first().ok_or(Error::EmptyDataset)?;
        let dim = first.state_dim();
        let mut sum = vec![0.0; dim];
        let mut count = 0usize;
        for s in trajs.iter().flat_map(|t| &t.states) {
            sum.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            count += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; dim];
        for s in trajs.iter().flat_map(|t| &t.states) {
            for j in 0..dim {
                var[j] += (s[j] - mean[j]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / count as f64).sqrt().max(STD_FLOOR)).collect();
        let returns = trajs.iter().map(Trajectory::episode_return);
        let return_max = returns.clone().fold(f64::NEG_INFINITY, f64::max);
        let return_min = returns.fold(f64::INFINITY, f64::min);
        Ok(Self {
            state_mean: mean,
            state_std: std,
            return_max,
            return_min,
        })
    }

    pub fn normalize(&self, state: &[f64]) -> Vec<f64> {
        state
            .iter()
            .zip(&self.state_mean)
            .zip(&self.state_std)
            .map(|((s, m), d)| (s - m) / d)
            .collect()
    }
}

/// A validated, immutable collection of episodes with shared dimensions.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub stats: DatasetStats,
    /// Prefix sums of episode lengths for uniform step sampling.
    offsets: Vec<usize>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories.first().ok_or(Error::EmptyDataset)?;
        let (sd, ad) = (first.state_dim(), first.action_dim());
        for (i, t) in trajectories.iter().enumerate() {
            let bad_state = t.states.iter().any(|s| s.len() != sd);
            let bad_action = t.actions.iter().any(|a| a.len() != ad);
            if bad_state || bad_action {
                return Err(Error::Schema(format!(
                    "episode {i}: expected state_dim {sd} and action_dim {ad}"
                )));
            }
        }
        let stats = DatasetStats::from_trajectories(&trajectories)?;
        let mut offsets = Vec::with_capacity(trajectories.len() + 1);
        offsets.push(0);
        for t in &trajectories {
            offsets.push(offsets.last().unwrap() + t.len());
        }
        Ok(Self {
            trajectories,
            stats,
            offsets,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.trajectories[0].state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.trajectories[0].action_dim()
    }

    pub fn total_steps(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn max_len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).max().unwrap_or(0)
    }

    /// Maps a flat step index to `(trajectory, t)`.
    pub fn locate(&self, flat: usize) -> (usize, usize) {
        let ep = self.offsets.partition_point(|&o| o <= flat) - 1;
        (ep, flat - self.offsets[ep])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut trajs = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let rec: EpisodeRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let traj = Trajectory::new(rec.states, rec.actions, rec.rewards, rec.terminal)
                .map_err(|e| parse_err(e.to_string()))?;
            trajs.push(traj);
        }
        Dataset::new(trajs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_trajectories(&self.trajectories, path)
    }
}

pub fn save_trajectories(trajs: &[Trajectory], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trajs {
        let rec = EpisodeRecord {
            states: t.states.clone(),
            actions: t.actions.clone(),
            rewards: t.rewards.clone(),
            terminal: t.terminal,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// K-step sub-trajectory ending at step `t`, left-padded at episode start.
///
/// Slots `0..K-valid_len` are padding (all zeros); the valid region is the
/// tail. States are normalized; rtgs are raw. The last slot's action is
/// the training target and never an input token. `terminal_end` marks a
/// window whose final step is the last step of a terminal episode.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindow {
    pub rtgs: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub valid_len: usize,
    pub terminal_end: bool,
}

impl ContextWindow {
    pub fn context_len(&self) -> usize {
        self.rtgs.len()
    }

    /// First valid slot.
    pub fn pad(&self) -> usize {
        self.context_len() - self.valid_len
    }

    pub fn is_valid_slot(&self, k: usize) -> bool {
        k >= self.pad() && k < self.context_len()
    }

    pub fn validate(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        let k = self.context_len();
        let ok = k >= 1
            && self.states.len() == k
            && self.actions.len() == k
            && self.rewards.len() == k
            && self.timesteps.len() == k
            && self.valid_len >= 1
            && self.valid_len <= k
            && self.states.iter().all(|s| s.len() == state_dim)
            && self.actions.iter().all(|a| a.len() == action_dim);
        if !ok {
            return Err(Error::Config(format!(
                "malformed context window (K={k}, valid_len={}, expected dims {state_dim}/{action_dim})",
                self.valid_len
            )));
        }
        let ts = &self.timesteps[self.pad()..];
        if ts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("window timesteps not increasing".into()));
        }
        Ok(())
    }
}

pub fn sample_context(traj: &Trajectory, t: usize, context_len: usize, stats: &DatasetStats) -> Result<ContextWindow> {
    if t >= traj.len() {
        return Err(Error::Index {
            index: t,
            len: traj.len(),
        });
    }
    if context_len == 0 {
        return Err(Error::Config("context length must be positive".into()));
    }
    let first = (t + 1).saturating_sub(context_len);
    let valid_len = t + 1 - first;
    let pad = context_len - valid_len;
    let (sd, ad) = (traj.state_dim(), traj.action_dim());
    let mut w = ContextWindow {
        rtgs: vec![0.0; context_len],
        states: vec![vec![0.0; sd]; context_len],
        actions: vec![vec![0.0; ad]; context_len],
        rewards: vec![0.0; context_len],
        timesteps: vec![0; context_len],
        valid_len,
        terminal_end: traj.terminal && t + 1 == traj.len(),
    };
    for (k, step) in (first..=t).enumerate() {
        let slot = pad + k;
        w.rtgs[slot] = traj.rtg[step];
        w.states[slot] = stats.normalize(&traj.states[step]);
        w.actions[slot] = traj.actions[step].clone();
        w.rewards[slot] = traj.rewards[step];
        w.timesteps[slot] = step;
    }
    Ok(w)
}

/// Windows drawn uniformly over all `(trajectory, t)` pairs.
pub fn sample_batch(
    dataset: &Dataset,
    batch_size: usize,
    context_len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ContextWindow>> {
    let total = dataset.total_steps();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    (0..batch_size)
        .map(|_| {
            let (ep, t) = dataset.locate(rng.random_range(0..total));
            sample_context(&dataset.trajectories[ep], t, context_len, &dataset.stats)
        })
        .collect()
}
