//! Training loop: critic regression on n-step targets, then a policy step
//! on behavior cloning minus a normalized Q term, then Polyak averaging.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{Adam, AdamConfig, Tape, Var};
use crate::critic::{QEnsemble, QNetwork, QSelect};
use crate::data::{sample_batch, ContextWindow, Dataset, DatasetStats};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::inference::{evaluate, mean_std, threads_from_env, CandidateConfig, CandidateMode, RolloutConfig};
use crate::policy::{bc_loss, PolicyConfig, PolicyModel};

/// Denominator floor of the Q-term coefficient.
pub const ALPHA_FLOOR: f64 = 1e-6;
pub const CHECKPOINT_FORMAT: &str = "qdc-ckpt-v1";
pub const METRICS_HEADER: &str = "step,bc_loss,q_term,alpha,critic_loss,eval_return_mean,eval_return_std";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Training configuration; the JSON form must contain exactly these keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub env: String,
    pub context_len: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub conv_window: usize,
    pub q_hidden: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub polyak_tau: f64,
    pub eta: f64,
    pub q_select: QSelect,
    pub rtg_scale: f64,
    pub candidate_count: usize,
    pub candidate_max_multiplier: f64,
    pub candidate_mode: CandidateMode,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("context_len", self.context_len),
            ("embed_dim", self.embed_dim),
            ("n_blocks", self.n_blocks),
            ("conv_window", self.conv_window),
            ("q_hidden", self.q_hidden),
            ("batch_size", self.batch_size),
            ("candidate_count", self.candidate_count),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        check(self.eta >= 0.0, format!("eta must be non-negative, got {}", self.eta))?;
        check(
            self.gamma > 0.0 && self.gamma < 1.0,
            format!("gamma must lie in (0,1), got {}", self.gamma),
        )?;
        check(
            self.polyak_tau > 0.0 && self.polyak_tau <= 1.0,
            format!("polyak_tau must lie in (0,1], got {}", self.polyak_tau),
        )?;
        check(
            self.policy_lr > 0.0,
            format!("policy_lr must be positive, got {}", self.policy_lr),
        )?;
        check(
            self.critic_lr > 0.0,
            format!("critic_lr must be positive, got {}", self.critic_lr),
        )?;
        check(
            self.rtg_scale > 0.0,
            format!("rtg_scale must be positive, got {}", self.rtg_scale),
        )?;
        check(
            self.candidate_max_multiplier >= 1.0,
            format!(
                "candidate_max_multiplier must be at least 1, got {}",
                self.candidate_max_multiplier
            ),
        )?;
        check(
            self.grad_clip >= 0.0,
            format!("grad_clip must be non-negative, got {}", self.grad_clip),
        )?;
        check(
            matches!(self.q_select, QSelect::Min | QSelect::Q1),
            "q_select must be \"min\" or \"q1\"".into(),
        )
    }

    pub fn policy_config(&self, state_dim: usize, action_dim: usize, max_timestep: usize) -> PolicyConfig {
        PolicyConfig {
            state_dim,
            action_dim,
            context_len: self.context_len,
            embed_dim: self.embed_dim,
            n_blocks: self.n_blocks,
            conv_window: self.conv_window,
            max_timestep,
            rtg_scale: self.rtg_scale,
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            candidates: CandidateConfig {
                count: self.candidate_count,
                max_multiplier: self.candidate_max_multiplier,
                mode: self.candidate_mode,
            },
            max_steps: None,
        }
    }
}

/// One logged row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub bc_loss: f64,
    pub q_term: f64,
    pub alpha: f64,
    pub critic_loss: f64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
}

impl TrainMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.bc_loss,
            self.q_term,
            self.alpha,
            self.critic_loss,
            self.eval_return_mean,
            self.eval_return_std
        )
    }
}

/// Valid logged `(state, action)` pairs of a batch, window-major.
fn logged_pairs(windows: &[ContextWindow]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut states = Vec::new();
    let mut actions = Vec::new();
    for w in windows {
        for slot in w.pad()..w.context_len() {
            states.push(w.states[slot].clone());
            actions.push(w.actions[slot].clone());
        }
    }
    (states, actions)
}

/// Coefficient `η / max(mean |Q(s,a)|, floor)` over valid logged pairs,
/// with the mean returned alongside.
pub fn compute_alpha(ensemble: &QEnsemble, windows: &[ContextWindow], eta: f64, which: QSelect) -> Result<(f64, f64)> {
    let (states, actions) = logged_pairs(windows);
    if states.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let q = ensemble.q_values(&states, &actions, which)?;
    let mean_abs = q.iter().map(|v| v.abs()).sum::<f64>() / q.len() as f64;
    Ok((eta / mean_abs.max(ALPHA_FLOOR), mean_abs))
}

/// Recorded policy objective.
#[derive(Clone, Debug)]
pub struct PolicyGraph {
    pub loss: Var,
    pub bc: Var,
    pub vars: Vec<Var>,
    /// Mean `Q(s_i, π(τ)_i)` over valid slots.
    pub q_term: f64,
    pub alpha: f64,
    /// Mean `|Q|` at logged pairs.
    pub mean_abs_q: f64,
}

/// `bc − α·mean Q(s_i, π(τ)_i)` with critic parameters held constant.
/// With `eta == 0` the loss is the behavior-cloning term itself.
pub fn policy_loss(
    model: &PolicyModel,
    ensemble: &QEnsemble,
    windows: &[ContextWindow],
    eta: f64,
    which: QSelect,
    tape: &mut Tape,
) -> Result<PolicyGraph> {
    let (preds, bc, vars) = bc_loss(model, tape, windows)?;
    let (states, _) = logged_pairs(windows);
    let picked = tape.gather_rows(preds, crate::policy::valid_rows(windows))?;
    if eta == 0.0 {
        let actions: Vec<Vec<f64>> = tape
            .value(picked)
            .chunks_exact(model.config.action_dim)
            .map(<[f64]>::to_vec)
            .collect();
        let q = ensemble.q_values(&states, &actions, which)?;
        return Ok(PolicyGraph {
            loss: bc,
            bc,
            vars,
            q_term: q.iter().sum::<f64>() / q.len() as f64,
            alpha: 0.0,
            mean_abs_q: compute_alpha(ensemble, windows, 0.0, which)?.1,
        });
    }
    let (alpha, mean_abs_q) = compute_alpha(ensemble, windows, eta, which)?;
    let n = states.len();
    let s = tape.constant_from(vec![n, model.config.state_dim], states.concat())?;
    let q_of = |tape: &mut Tape, net: &QNetwork| -> Result<Var> {
        let v = tape.bind(&net.params, false);
        net.forward(tape, &v, s, picked)
    };
    let q = match which {
        QSelect::Q1 => q_of(tape, &ensemble.q1)?,
        QSelect::Q2 => q_of(tape, &ensemble.q2)?,
        QSelect::Min => {
            let a = q_of(tape, &ensemble.q1)?;
            let b = q_of(tape, &ensemble.q2)?;
            tape.min_elementwise(a, b)?
        }
        QSelect::TargetMin => {
            let a = q_of(tape, &ensemble.q1_target)?;
            let b = q_of(tape, &ensemble.q2_target)?;
            tape.min_elementwise(a, b)?
        }
    };
    let q_mean = tape.mean(q)?;
    let q_term = tape.scalar(q_mean);
    let penalty = tape.scale(q_mean, -alpha);
    let loss = tape.add(bc, penalty)?;
    Ok(PolicyGraph {
        loss,
        bc,
        vars,
        q_term,
        alpha,
        mean_abs_q,
    })
}

/// Twin critics with their optimizers.
#[derive(Clone, Debug)]
pub struct CriticTrainer {
    pub ensemble: QEnsemble,
    q1_opt: Adam,
    q2_opt: Adam,
    grad_clip: f64,
}

impl CriticTrainer {
    pub fn new(ensemble: QEnsemble, lr: f64, grad_clip: f64) -> Self {
        let cfg = AdamConfig::with_lr(lr);
        Self {
            q1_opt: Adam::new(&ensemble.q1.params, cfg),
            q2_opt: Adam::new(&ensemble.q2.params, cfg),
            ensemble,
            grad_clip,
        }
    }

    /// One regression step toward fresh targets. Returns the pre-update
    /// loss, or `None` when the batch yields no target.
    pub fn update(&mut self, windows: &[ContextWindow]) -> Result<Option<f64>> {
        let targets = self.ensemble.bellman_targets_batch(windows)?;
        let mut tape = Tape::new();
        let Some(g) = self.ensemble.critic_loss(&mut tape, windows, &targets)? else {
            return Ok(None);
        };
        let loss = tape.scalar(g.loss);
        if !loss.is_finite() {
            return Ok(Some(loss));
        }
        tape.backward(g.loss)?;
        let e = &mut self.ensemble;
        tape.write_grads(&mut e.q1.params, &g.vars1);
        tape.write_grads(&mut e.q2.params, &g.vars2);
        if self.grad_clip > 0.0 {
            e.q1.params.clip_grad_norm(self.grad_clip);
            e.q2.params.clip_grad_norm(self.grad_clip);
        }
        self.q1_opt.step(&mut e.q1.params);
        self.q2_opt.step(&mut e.q2.params);
        Ok(Some(loss))
    }
}

/// Scalars from one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub bc_loss: f64,
    pub q_term: f64,
    pub alpha: f64,
    pub mean_abs_q: f64,
    /// Zero when the critic is disabled or the batch had no target.
    pub critic_loss: f64,
}

/// Stream ids carved out of the config seed.
const POLICY_INIT_STREAM: u64 = 0;
const CRITIC_INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub dataset: &'a Dataset,
    pub env: Env,
    pub model: PolicyModel,
    pub critic: CriticTrainer,
    policy_opt: Adam,
    batch_rng: ChaCha8Rng,
    critic_enabled: bool,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let env = Env::resolve(&config.env)?;
        let (sd, ad) = (dataset.state_dim(), dataset.action_dim());
        if (sd, ad) != (env.state_dim(), env.action_dim()) {
            return Err(Error::Config(format!(
                "dataset has state/action dims {sd}/{ad}, environment {} has {}/{}",
                env.name(),
                env.state_dim(),
                env.action_dim()
            )));
        }
        let max_timestep = dataset.max_len().max(env.horizon());
        let model = PolicyModel::new(
            config.policy_config(sd, ad, max_timestep),
            &mut stream(config.seed, POLICY_INIT_STREAM),
        )?;
        let mut qrng = stream(config.seed, CRITIC_INIT_STREAM);
        let q1 = QNetwork::new(sd, ad, config.q_hidden, &mut qrng);
        let q2 = QNetwork::new(sd, ad, config.q_hidden, &mut qrng);
        let ensemble = QEnsemble::new(q1, q2, &model, config.gamma, config.polyak_tau)?;
        Ok(Self {
            critic: CriticTrainer::new(ensemble, config.critic_lr, config.grad_clip),
            policy_opt: Adam::new(&model.params, AdamConfig::with_lr(config.policy_lr)),
            batch_rng: stream(config.seed, BATCH_STREAM),
            model,
            env,
            dataset,
            critic_enabled: true,
            step: 0,
            config,
        })
    }

    /// Disabling the critic turns training into pure behavior cloning;
    /// requires `eta == 0`.
    pub fn with_critic(mut self, enabled: bool) -> Result<Self> {
        if !enabled && self.config.eta != 0.0 {
            return Err(Error::Config("a run without critic needs eta = 0".into()));
        }
        self.critic_enabled = enabled;
        Ok(self)
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn ensemble(&self) -> &QEnsemble {
        &self.critic.ensemble
    }

    pub fn step_once(&mut self) -> Result<StepStats> {
        let step = self.step;
        let abort = |component: &str| Error::NumericalAbort {
            step,
            component: component.into(),
        };
        let windows = sample_batch(
            self.dataset,
            self.config.batch_size,
            self.config.context_len,
            &mut self.batch_rng,
        )?;
        let mut critic_loss = 0.0;
        if self.critic_enabled {
            if let Some(l) = self.critic.update(&windows)? {
                if !l.is_finite() {
                    return Err(abort("critic_loss"));
                }
                critic_loss = l;
            }
        }
        let mut tape = Tape::new();
        let g = if self.critic_enabled {
            policy_loss(
                &self.model,
                &self.critic.ensemble,
                &windows,
                self.config.eta,
                self.config.q_select,
                &mut tape,
            )?
        } else {
            let (_, bc, vars) = bc_loss(&self.model, &mut tape, &windows)?;
            PolicyGraph {
                loss: bc,
                bc,
                vars,
                q_term: 0.0,
                alpha: 0.0,
                mean_abs_q: 0.0,
            }
        };
        let stats = StepStats {
            bc_loss: tape.scalar(g.bc),
            q_term: g.q_term,
            alpha: g.alpha,
            mean_abs_q: g.mean_abs_q,
            critic_loss,
        };
        if !stats.bc_loss.is_finite() {
            return Err(abort("bc_loss"));
        }
        if !tape.scalar(g.loss).is_finite() || !stats.alpha.is_finite() {
            return Err(abort("policy_loss"));
        }
        tape.backward(g.loss)?;
        tape.write_grads(&mut self.model.params, &g.vars);
        if self.config.grad_clip > 0.0 {
            self.model.params.clip_grad_norm(self.config.grad_clip);
        }
        self.policy_opt.step(&mut self.model.params);
        if self.critic_enabled {
            self.critic
                .ensemble
                .polyak_update(&self.model, self.config.polyak_tau)?;
        }
        self.step += 1;
        Ok(stats)
    }

    /// Greedy rollouts of the current parameters; seeded by the config seed
    /// so every logged evaluation sees the same episode streams.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let ensemble = self.critic_enabled.then_some(&self.critic.ensemble);
        let outcomes = evaluate(
            &self.model,
            ensemble,
            &self.env,
            &self.config.rollout_config(),
            &self.dataset.stats,
            self.config.eval_episodes,
            self.config.seed,
            threads_from_env(),
        )?;
        let returns: Vec<f64> = outcomes.iter().map(|o| o.episode_return).collect();
        Ok(mean_std(&returns))
    }

    /// Runs the remaining steps, handing each logged row to `log`.
    pub fn run(&mut self, mut log: impl FnMut(&TrainMetrics) -> Result<()>) -> Result<Vec<TrainMetrics>> {
        let mut rows = Vec::new();
        while self.step < self.config.total_steps {
            let s = self.step_once()?;
            if self.step.is_multiple_of(self.config.eval_every) {
                let (mean, std) = self.evaluate()?;
                let row = TrainMetrics {
                    step: self.step,
                    bc_loss: s.bc_loss,
                    q_term: s.q_term,
                    alpha: s.alpha,
                    critic_loss: s.critic_loss,
                    eval_return_mean: mean,
                    eval_return_std: std,
                };
                log(&row)?;
                rows.push(row);
            }
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let e = &self.critic.ensemble;
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            model: ModelDims {
                state_dim: self.model.config.state_dim,
                action_dim: self.model.config.action_dim,
                max_timestep: self.model.config.max_timestep,
            },
            stats: self.dataset.stats.clone(),
            params: self.model.params.to_json(),
            q_params: json!({
                "q1": e.q1.params.to_json(),
                "q2": e.q2.params.to_json(),
                "q1_target": e.q1_target.params.to_json(),
                "q2_target": e.q2_target.params.to_json(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub state_dim: usize,
    pub action_dim: usize,
    pub max_timestep: usize,
}

/// Self-contained snapshot: config, normalization statistics, policy and
/// critic parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub model: ModelDims,
    pub stats: DatasetStats,
    pub params: Value,
    pub q_params: Value,
}

/// Policy and critics rebuilt from a checkpoint.
pub struct Restored {
    pub config: TrainConfig,
    pub stats: DatasetStats,
    pub model: PolicyModel,
    pub ensemble: QEnsemble,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!(
                "unsupported checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    pub fn restore(&self) -> Result<Restored> {
        let d = &self.model;
        let cfg = self.config.policy_config(d.state_dim, d.action_dim, d.max_timestep);
        let model = PolicyModel::from_params(cfg, &self.params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = |key: &str| -> Result<QNetwork> {
            let mut q = QNetwork::new(d.state_dim, d.action_dim, self.config.q_hidden, &mut rng);
            let v = self
                .q_params
                .get(key)
                .ok_or_else(|| Error::Schema(format!("checkpoint lacks q_params.{key}")))?;
            q.params.load_json(v)?;
            Ok(q)
        };
        let (q1, q2, q1t, q2t) = (net("q1")?, net("q2")?, net("q1_target")?, net("q2_target")?);
        let mut ensemble = QEnsemble::new(q1, q2, &model, self.config.gamma, self.config.polyak_tau)?;
        ensemble.q1_target = q1t;
        ensemble.q2_target = q2t;
        Ok(Restored {
            config: self.config.clone(),
            stats: self.stats.clone(),
            model,
            ensemble,
        })
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Trains and writes `metrics.csv` (streamed) and `checkpoint.json` into
/// `out_dir`.
pub fn train_to_dir(config: TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<Vec<TrainMetrics>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut csv = BufWriter::new(file);
    let io = |e| Error::io(&metrics_path, e);
    writeln!(csv, "{METRICS_HEADER}").map_err(io)?;
    let mut trainer = Trainer::new(config, dataset)?;
    let rows = trainer.run(|row| {
        writeln!(csv, "{}", row.csv_row()).map_err(io)?;
        csv.flush().map_err(io)
    })?;
    csv.flush().map_err(io)?;
    trainer.checkpoint().save(&out_dir.join(CHECKPOINT_FILE))?;
    Ok(rows)
}
