//! Twin Q-networks, their target copies, n-step Bellman targets over a
//! context window and Polyak averaging.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::data::ContextWindow;
use crate::error::{Error, Result};
use crate::policy::PolicyModel;

/// MLP `(state ‖ action) → h → h → 1` with ReLU.
#[derive(Clone, Debug)]
pub struct QNetwork {
    pub params: ParamSet,
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
}

impl QNetwork {
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let mut layer = |name: &str, i: usize, o: usize| {
            let bound = 1.0 / (i as f64).sqrt();
            params.push(format!("{name}.w"), Tensor::uniform(vec![i, o], bound, rng));
            params.push(format!("{name}.b"), Tensor::zeros(vec![o]));
        };
        layer("l1", state_dim + action_dim, hidden);
        layer("l2", hidden, hidden);
        layer("l3", hidden, 1);
        Self {
            params,
            state_dim,
            action_dim,
            hidden,
        }
    }

    /// `[n×1]` values for `states: [n×state_dim]`, `actions: [n×action_dim]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], states: Var, actions: Var) -> Result<Var> {
        if tape.shape(states).get(1) != Some(&self.state_dim) || tape.shape(actions).get(1) != Some(&self.action_dim) {
            return Err(Error::Config(format!(
                "Q-network expects state_dim {} and action_dim {}, got {:?} and {:?}",
                self.state_dim,
                self.action_dim,
                tape.shape(states),
                tape.shape(actions)
            )));
        }
        let x = tape.concat_cols(states, actions)?;
        let h = tape.linear(x, vars[0], vars[1])?;
        let h = tape.relu(h);
        let h = tape.linear(h, vars[2], vars[3])?;
        let h = tape.relu(h);
        tape.linear(h, vars[4], vars[5])
    }

    pub fn eval(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = tape.bind(&self.params, false);
        let (s, a) = pair_inputs(&mut tape, states, actions, self.state_dim, self.action_dim)?;
        let q = self.forward(&mut tape, &vars, s, a)?;
        Ok(tape.value(q).to_vec())
    }
}

/// Records row-stacked state and action constants.
pub fn pair_inputs(
    tape: &mut Tape,
    states: &[Vec<f64>],
    actions: &[Vec<f64>],
    state_dim: usize,
    action_dim: usize,
) -> Result<(Var, Var)> {
    if states.len() != actions.len() {
        return Err(Error::dim("q pairs", &[states.len()], &[actions.len()]));
    }
    let bad = |v: &[Vec<f64>], d: usize| v.iter().find(|x| x.len() != d).map(Vec::len);
    if let Some(got) = bad(states, state_dim) {
        return Err(Error::Config(format!("state has {got} dims, expected {state_dim}")));
    }
    if let Some(got) = bad(actions, action_dim) {
        return Err(Error::Config(format!("action has {got} dims, expected {action_dim}")));
    }
    let n = states.len();
    let s = tape.constant_from(vec![n, state_dim], states.concat())?;
    let a = tape.constant_from(vec![n, action_dim], actions.concat())?;
    Ok((s, a))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QSelect {
    Q1,
    Q2,
    /// Minimum of the two online networks.
    Min,
    /// Minimum of the two target networks.
    TargetMin,
}

#[derive(Clone, Debug)]
pub struct QEnsemble {
    pub q1: QNetwork,
    pub q2: QNetwork,
    pub q1_target: QNetwork,
    pub q2_target: QNetwork,
    pub policy_target: PolicyModel,
    pub gamma: f64,
    pub polyak_tau: f64,
}

/// One regression target: window slot `m` and its value.
pub type Target = (usize, f64);

/// n-step targets for one window given the bootstrap value
/// `min_i Q'_i(s_t, â_t)` at its final slot.
///
/// Non-terminal windows yield targets for every valid slot before the
/// last, bootstrapping at the last. A window whose final step ends a
/// terminal episode also yields a target for that final step and never
/// bootstraps.
pub fn window_targets(window: &ContextWindow, gamma: f64, bootstrap: f64) -> Vec<Target> {
    let k = window.context_len();
    let pad = window.pad();
    let (mut ret, last) = if window.terminal_end {
        (0.0, k)
    } else {
        if window.valid_len < 2 {
            return Vec::new();
        }
        (bootstrap, k - 1)
    };
    let mut out = Vec::with_capacity(last - pad);
    for m in (pad..last).rev() {
        ret = window.rewards[m] + gamma * ret;
        out.push((m, ret));
    }
    out.reverse();
    out
}

impl QEnsemble {
    pub fn new(q1: QNetwork, q2: QNetwork, policy: &PolicyModel, gamma: f64, polyak_tau: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0,1), got {gamma}")));
        }
        if !(polyak_tau > 0.0 && polyak_tau <= 1.0) {
            return Err(Error::Config(format!("polyak_tau must lie in (0,1], got {polyak_tau}")));
        }
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            policy_target: policy.clone(),
            gamma,
            polyak_tau,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.q1.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.q1.action_dim
    }

    pub fn q_values(&self, states: &[Vec<f64>], actions: &[Vec<f64>], which: QSelect) -> Result<Vec<f64>> {
        let pair = |a: &QNetwork, b: &QNetwork| -> Result<Vec<f64>> {
            let (x, y) = (a.eval(states, actions)?, b.eval(states, actions)?);
            Ok(x.iter().zip(&y).map(|(p, q)| p.min(*q)).collect())
        };
        match which {
            QSelect::Q1 => self.q1.eval(states, actions),
            QSelect::Q2 => self.q2.eval(states, actions),
            QSelect::Min => pair(&self.q1, &self.q2),
            QSelect::TargetMin => pair(&self.q1_target, &self.q2_target),
        }
    }

    pub fn q_value(&self, state: &[f64], action: &[f64], which: QSelect) -> Result<f64> {
        Ok(self.q_values(&[state.to_vec()], &[action.to_vec()], which)?[0])
    }

    /// Bootstrap values `min_i Q'_i(s_t, π'(τ)_t)` at each window's final
    /// slot, computed without gradient.
    pub fn bootstrap_values(&self, windows: &[ContextWindow]) -> Result<Vec<f64>> {
        let preds = self.policy_target.predict(windows)?;
        let states: Vec<Vec<f64>> = windows.iter().map(|w| w.states.last().unwrap().clone()).collect();
        let actions: Vec<Vec<f64>> = preds.into_iter().map(|p| p.last().unwrap().clone()).collect();
        self.q_values(&states, &actions, QSelect::TargetMin)
    }

    pub fn bellman_targets(&self, window: &ContextWindow) -> Result<Vec<Target>> {
        Ok(self.bellman_targets_batch(std::slice::from_ref(window))?.remove(0))
    }

    pub fn bellman_targets_batch(&self, windows: &[ContextWindow]) -> Result<Vec<Vec<Target>>> {
        let boot = self.bootstrap_values(windows)?;
        Ok(windows
            .iter()
            .zip(boot)
            .map(|(w, b)| window_targets(w, self.gamma, b))
            .collect())
    }

    /// Critic loss `½·Σ_i mean (Q̂ − Q_i(s_m, a_m))²` over all targets, at
    /// logged pairs. Returns `None` when the batch yields no target.
    pub fn critic_loss(
        &self,
        tape: &mut Tape,
        windows: &[ContextWindow],
        targets: &[Vec<Target>],
    ) -> Result<Option<CriticGraph>> {
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut values = Vec::new();
        for (w, ts) in windows.iter().zip(targets) {
            for &(m, y) in ts {
                states.push(w.states[m].clone());
                actions.push(w.actions[m].clone());
                values.push(y);
            }
        }
        if values.is_empty() {
            return Ok(None);
        }
        let n = values.len();
        let (s, a) = pair_inputs(tape, &states, &actions, self.state_dim(), self.action_dim())?;
        let y = tape.constant_from(vec![n, 1], values)?;
        let vars1 = tape.bind(&self.q1.params, true);
        let vars2 = tape.bind(&self.q2.params, true);
        let p1 = self.q1.forward(tape, &vars1, s, a)?;
        let p2 = self.q2.forward(tape, &vars2, s, a)?;
        let l1 = tape.mse(p1, y)?;
        let l2 = tape.mse(p2, y)?;
        let both = tape.add(l1, l2)?;
        let loss = tape.scale(both, 0.5);
        Ok(Some(CriticGraph { loss, vars1, vars2 }))
    }

    /// `target ← tau·online + (1−tau)·target` for both critics and the
    /// target policy.
    pub fn polyak_update(&mut self, policy: &PolicyModel, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Config(format!("polyak tau must lie in (0,1], got {tau}")));
        }
        self.q1_target.params.polyak_from(&self.q1.params, tau);
        self.q2_target.params.polyak_from(&self.q2.params, tau);
        self.policy_target.params.polyak_from(&policy.params, tau);
        Ok(())
    }
}

/// Handles into a recorded critic loss.
#[derive(Clone, Debug)]
pub struct CriticGraph {
    pub loss: Var,
    pub vars1: Vec<Var>,
    pub vars2: Vec<Var>,
}
