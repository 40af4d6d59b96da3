//! Convolutional return-conditioned sequence policy.
//!
//! A window of K steps becomes `3K−1` tokens (return-to-go, state, action
//! per step, without the action being predicted). The tokens pass through
//! `n_blocks` residual blocks, each a layer-normed depthwise causal
//! convolution followed by a layer-normed two-layer GELU MLP. A tanh head
//! reads the hidden vector at every state token.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::data::ContextWindow;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub conv_window: usize,
    pub max_timestep: usize,
    pub rtg_scale: f64,
}

impl PolicyConfig {
    pub fn tokens(&self) -> usize {
        3 * self.context_len - 1
    }

    fn validate(&self) -> Result<()> {
        let counts = [
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
            ("context_len", self.context_len),
            ("embed_dim", self.embed_dim),
            ("conv_window", self.conv_window),
            ("max_timestep", self.max_timestep),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.rtg_scale > 0.0) {
            return Err(Error::Config("rtg_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct LinearSlots {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockSlots {
    ln1_gain: usize,
    ln1_shift: usize,
    conv_kernel: usize,
    conv_bias: usize,
    ln2_gain: usize,
    ln2_shift: usize,
    ffn_in: LinearSlots,
    ffn_out: LinearSlots,
}

#[derive(Clone, Debug)]
struct Layout {
    emb_rtg: LinearSlots,
    emb_state: LinearSlots,
    emb_action: LinearSlots,
    emb_timestep: usize,
    blocks: Vec<BlockSlots>,
    head: LinearSlots,
}

#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub params: ParamSet,
    layout: Layout,
}

fn linear_params(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> LinearSlots {
    let bound = 1.0 / (fan_in as f64).sqrt();
    LinearSlots {
        w: params.push(format!("{name}.w"), Tensor::uniform(vec![fan_in, fan_out], bound, rng)),
        b: params.push(format!("{name}.b"), Tensor::zeros(vec![fan_out])),
    }
}

impl PolicyModel {
    pub fn new(config: PolicyConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut p = ParamSet::new();
        let emb_rtg = linear_params(&mut p, "emb_rtg", 1, d, rng);
        let emb_state = linear_params(&mut p, "emb_state", config.state_dim, d, rng);
        let emb_action = linear_params(&mut p, "emb_action", config.action_dim, d, rng);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut table = Tensor::zeros(vec![config.max_timestep, d]);
        table.data_mut().iter_mut().for_each(|x| *x = normal.sample(rng));
        let emb_timestep = p.push("emb_timestep", table);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let name = |s: &str| format!("blocks.{i}.{s}");
            let ln1_gain = p.push(name("ln1.gain"), Tensor::filled(vec![d], 1.0));
            let ln1_shift = p.push(name("ln1.shift"), Tensor::zeros(vec![d]));
            let mut kernel = Tensor::zeros(vec![config.conv_window, d]);
            let last = config.conv_window - 1;
            kernel.data_mut()[last * d..].fill(1.0);
            let conv_kernel = p.push(name("conv.kernel"), kernel);
            let conv_bias = p.push(name("conv.bias"), Tensor::zeros(vec![d]));
            let ln2_gain = p.push(name("ln2.gain"), Tensor::filled(vec![d], 1.0));
            let ln2_shift = p.push(name("ln2.shift"), Tensor::zeros(vec![d]));
            let ffn_in = linear_params(&mut p, &name("ffn.in"), d, 4 * d, rng);
            let ffn_out = linear_params(&mut p, &name("ffn.out"), 4 * d, d, rng);
            blocks.push(BlockSlots {
                ln1_gain,
                ln1_shift,
                conv_kernel,
                conv_bias,
                ln2_gain,
                ln2_shift,
                ffn_in,
                ffn_out,
            });
        }
        let head = linear_params(&mut p, "head", d, config.action_dim, rng);
        Ok(Self {
            config,
            params: p,
            layout: Layout {
                emb_rtg,
                emb_state,
                emb_action,
                emb_timestep,
                blocks,
                head,
            },
        })
    }

    /// Builds a structurally identical model and loads `params` into it.
    pub fn from_params(config: PolicyConfig, params: &serde_json::Value) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        model.params.load_json(params)?;
        Ok(model)
    }

    fn check_window(&self, w: &ContextWindow) -> Result<()> {
        if w.context_len() != self.config.context_len {
            return Err(Error::Config(format!(
                "window has K={} but model expects K={}",
                w.context_len(),
                self.config.context_len
            )));
        }
        w.validate(self.config.state_dim, self.config.action_dim)
    }

    /// Interleaved token matrix of shape `[B·(3K−1) × d]`.
    pub fn embed(&self, tape: &mut Tape, vars: &[Var], windows: &[ContextWindow]) -> Result<Var> {
        let cfg = &self.config;
        let (k, sd, ad) = (cfg.context_len, cfg.state_dim, cfg.action_dim);
        let b = windows.len();
        if b == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        let mut rtg = Vec::with_capacity(b * k);
        let mut states = Vec::with_capacity(b * k * sd);
        let mut actions = Vec::with_capacity(b * k * ad);
        let mut steps = Vec::with_capacity(b * k);
        for w in windows {
            self.check_window(w)?;
            for slot in 0..k {
                rtg.push(w.rtgs[slot] / cfg.rtg_scale);
                states.extend_from_slice(&w.states[slot]);
                actions.extend_from_slice(&w.actions[slot]);
                steps.push(w.timesteps[slot].min(cfg.max_timestep - 1));
            }
        }
        let l = &self.layout;
        let rtg = tape.constant_from(vec![b * k, 1], rtg)?;
        let states = tape.constant_from(vec![b * k, sd], states)?;
        let actions = tape.constant_from(vec![b * k, ad], actions)?;
        let time = tape.embedding_lookup(vars[l.emb_timestep], &steps)?;
        let r = tape.linear(rtg, vars[l.emb_rtg.w], vars[l.emb_rtg.b])?;
        let r = tape.add(r, time)?;
        let s = tape.linear(states, vars[l.emb_state.w], vars[l.emb_state.b])?;
        let s = tape.add(s, time)?;
        let a = tape.linear(actions, vars[l.emb_action.w], vars[l.emb_action.b])?;
        let a = tape.add(a, time)?;
        let all = tape.concat_rows(&[r, s, a])?;

        let mut index = Vec::with_capacity(b * cfg.tokens());
        for (bi, w) in windows.iter().enumerate() {
            for slot in 0..k {
                let row = bi * k + slot;
                let live = w.is_valid_slot(slot);
                index.push(live.then_some(row));
                index.push(live.then_some(b * k + row));
                if slot + 1 < k {
                    index.push(live.then_some(2 * b * k + row));
                }
            }
        }
        tape.gather_rows(all, index)
    }

    /// One residual conv block.
    fn block(&self, tape: &mut Tape, vars: &[Var], x: Var, slots: &BlockSlots) -> Result<Var> {
        let seq = self.config.tokens();
        let h = tape.layer_norm(x, vars[slots.ln1_gain], vars[slots.ln1_shift], LN_EPS)?;
        let c = tape.causal_conv1d(h, vars[slots.conv_kernel], vars[slots.conv_bias], seq)?;
        let x = tape.add(c, x)?;
        let h = tape.layer_norm(x, vars[slots.ln2_gain], vars[slots.ln2_shift], LN_EPS)?;
        let h = tape.linear(h, vars[slots.ffn_in.w], vars[slots.ffn_in.b])?;
        let h = tape.gelu(h);
        let h = tape.linear(h, vars[slots.ffn_out.w], vars[slots.ffn_out.b])?;
        tape.add(h, x)
    }

    /// Action predictions `[B·K × action_dim]`, one per state token, in
    /// window-major slot order. `vars` comes from binding `self.params`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], windows: &[ContextWindow]) -> Result<Var> {
        let mut x = self.embed(tape, vars, windows)?;
        for slots in &self.layout.blocks {
            x = self.block(tape, vars, x, slots)?;
        }
        let (k, seq) = (self.config.context_len, self.config.tokens());
        let state_rows = (0..windows.len())
            .flat_map(|b| (0..k).map(move |slot| Some(b * seq + 3 * slot + 1)))
            .collect();
        let h = tape.gather_rows(x, state_rows)?;
        let head = self.layout.head;
        let y = tape.linear(h, vars[head.w], vars[head.b])?;
        Ok(tape.tanh(y))
    }

    /// Gradient-free predictions: `out[b][slot]` is the action vector.
    pub fn predict(&self, windows: &[ContextWindow]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut tape = Tape::new();
        let vars = tape.bind(&self.params, false);
        let y = self.forward(&mut tape, &vars, windows)?;
        let ad = self.config.action_dim;
        let k = self.config.context_len;
        Ok(tape
            .value(y)
            .chunks_exact(k * ad)
            .map(|w| w.chunks_exact(ad).map(<[f64]>::to_vec).collect())
            .collect())
    }
}

/// Rows of `preds` at valid slots, in window-major order.
pub fn valid_rows(windows: &[ContextWindow]) -> Vec<Option<usize>> {
    let k = windows.first().map_or(0, ContextWindow::context_len);
    windows
        .iter()
        .enumerate()
        .flat_map(|(b, w)| (w.pad()..k).map(move |slot| Some(b * k + slot)))
        .collect()
}

/// Behavior-cloning loss on predictions already recorded on `tape`: mean
/// over windows of the per-window squared error averaged over valid slots
/// and action dimensions.
pub fn bc_loss_from(tape: &mut Tape, preds: Var, windows: &[ContextWindow]) -> Result<Var> {
    if windows.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let ad = tape.shape(preds)[1];
    let picked = tape.gather_rows(preds, valid_rows(windows))?;
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let b = windows.len() as f64;
    for w in windows {
        let wt = 1.0 / (w.valid_len as f64 * ad as f64 * b);
        for slot in w.pad()..w.context_len() {
            targets.extend_from_slice(&w.actions[slot]);
            weights.extend(std::iter::repeat_n(wt, ad));
        }
    }
    let n = targets.len() / ad;
    let targets = tape.constant_from(vec![n, ad], targets)?;
    let weights = tape.constant_from(vec![n, ad], weights)?;
    let diff = tape.sub(picked, targets)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, weights)?;
    Ok(tape.sum(weighted))
}

/// Binds the model, runs it and returns `(preds, bc_loss, vars)`.
pub fn bc_loss(model: &PolicyModel, tape: &mut Tape, windows: &[ContextWindow]) -> Result<(Var, Var, Vec<Var>)> {
    let vars = tape.bind(&model.params, true);
    let preds = model.forward(tape, &vars, windows)?;
    let loss = bc_loss_from(tape, preds, windows)?;
    Ok((preds, loss, vars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{finite_difference, max_relative_error};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(k: usize, d: usize, n: usize) -> PolicyConfig {
        PolicyConfig {
            state_dim: 2,
            action_dim: 2,
            context_len: k,
            embed_dim: d,
            n_blocks: n,
            conv_window: 6,
            max_timestep: 20,
            rtg_scale: 1.0,
        }
    }

    fn random_window(rng: &mut ChaCha8Rng, cfg: &PolicyConfig, valid: usize) -> ContextWindow {
        let k = cfg.context_len;
        let pad = k - valid;
        let mut w = ContextWindow {
            rtgs: vec![0.0; k],
            states: vec![vec![0.0; cfg.state_dim]; k],
            actions: vec![vec![0.0; cfg.action_dim]; k],
            rewards: vec![0.0; k],
            timesteps: vec![0; k],
            valid_len: valid,
            terminal_end: false,
        };
        let t0 = rng.random_range(0..5);
        for slot in pad..k {
            w.rtgs[slot] = rng.random_range(-2.0..2.0);
            w.states[slot] = (0..cfg.state_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            w.actions[slot] = (0..cfg.action_dim).map(|_| rng.random_range(-0.9..0.9)).collect();
            w.rewards[slot] = rng.random_range(-1.0..1.0);
            w.timesteps[slot] = t0 + slot - pad;
        }
        w
    }

    /// Randomizes every parameter so no block is an exact identity.
    fn scramble(model: &mut PolicyModel, rng: &mut ChaCha8Rng) {
        for t in model.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
        }
    }

    #[test]
    fn token_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, rows) in [(4, 11), (1, 2)] {
            let cfg = tiny_config(k, 4, 1);
            let model = PolicyModel::new(cfg.clone(), &mut rng).unwrap();
            let w = random_window(&mut rng, &cfg, k);
            let mut tape = Tape::new();
            let vars = tape.bind(&model.params, false);
            let x = model.embed(&mut tape, &vars, &[w]).unwrap();
            assert_eq!(tape.shape(x), &[rows, 4]);
        }
    }

    #[test]
    fn zero_embeddings_leave_timestep_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny_config(3, 4, 1);
        let mut model = PolicyModel::new(cfg.clone(), &mut rng).unwrap();
        for name in [
            "emb_rtg.w",
            "emb_rtg.b",
            "emb_state.w",
            "emb_state.b",
            "emb_action.w",
            "emb_action.b",
        ] {
            model.params.by_name_mut(name).unwrap().data_mut().fill(0.0);
        }
        let mut w = random_window(&mut rng, &cfg, 2);
        w.rtgs.fill(0.0);
        w.states.iter_mut().for_each(|s| s.fill(0.0));
        w.actions.iter_mut().for_each(|a| a.fill(0.0));
        let mut tape = Tape::new();
        let vars = tape.bind(&model.params, false);
        let x = model.embed(&mut tape, &vars, std::slice::from_ref(&w)).unwrap();
        let table = model.params.by_name("emb_timestep").unwrap().data();
        let v = tape.value(x);
        // slot 0 is padding: two zero tokens (R, s) and one zero action token
        assert!(v[..3 * 4].iter().all(|&x| x == 0.0));
        for (tok, slot) in [(3, 1), (4, 1), (5, 1), (6, 2), (7, 2)] {
            let ts = w.timesteps[slot];
            assert_eq!(&v[tok * 4..(tok + 1) * 4], &table[ts * 4..(ts + 1) * 4]);
        }
    }

    #[test]
    fn last_action_is_not_an_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_config(3, 8, 2);
        let mut model = PolicyModel::new(cfg.clone(), &mut rng).unwrap();
        scramble(&mut model, &mut rng);
        let w = random_window(&mut rng, &cfg, 3);
        let mut w2 = w.clone();
        w2.actions[2] = vec![0.7, -0.7];
        assert_eq!(model.predict(&[w]).unwrap(), model.predict(&[w2]).unwrap());
    }

    #[test]
    fn predictions_are_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..100 {
            let k = 1 + case % 4;
            let cfg = tiny_config(k, 4, 1 + case % 2);
            let mut model = PolicyModel::new(cfg.clone(), &mut rng).unwrap();
            scramble(&mut model, &mut rng);
            let w = random_window(&mut rng, &cfg, k);
            let i = rng.random_range(0..k);
            let mut w2 = w.clone();
            for slot in i + 1..k {
                w2.rtgs[slot] += 3.0;
                w2.states[slot].iter_mut().for_each(|x| *x -= 2.0);
                w2.actions[slot].iter_mut().for_each(|x| *x *= -1.0);
            }
            w2.actions[i].iter_mut().for_each(|x| *x += 0.5);
            let (p1, p2) = (model.predict(&[w]).unwrap(), model.predict(&[w2]).unwrap());
            assert_eq!(p1[0][..=i], p2[0][..=i], "case {case}");
        }
    }

    #[test]
    fn residual_collapse_gives_head_of_state_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = tiny_config(2, 4, 2);
        cfg.conv_window = 1;
        let mut model = PolicyModel::new(cfg.clone(), &mut rng).unwrap();
        for i in 0..2 {
            for part in [
                "ffn.in.w",
                "ffn.in.b",
                "ffn.out.w",
                "ffn.out.b",
                "conv.kernel",
                "conv.bias",
            ] {
                model
                    .params
                    .by_name_mut(&format!("blocks.{i}.{part}"))
                    .unwrap()
                    .data_mut()
                    .fill(0.0);
            }
        }
        let w = random_window(&mut rng, &cfg, 2);
        let pred = model.predict(std::slice::from_ref(&w)).unwrap();
        let p = &model.params;
        let (ws, bs) = (
            p.by_name("emb_state.w").unwrap().data(),
            p.by_name("emb_state.b").unwrap().data(),
        );
        let (wh, bh) = (p.by_name("head.w").unwrap().data(), p.by_name("head.b").unwrap().data());
        let table = p.by_name("emb_timestep").unwrap().data();
        for (slot, out) in pred[0].iter().enumerate() {
            let ts = w.timesteps[slot];
            let emb: Vec<f64> = (0..4)
                .map(|c| bs[c] + table[ts * 4 + c] + (0..2).map(|j| w.states[slot][j] * ws[j * 4 + c]).sum::<f64>())
                .collect();
            for a in 0..2 {
                let expect = (bh[a] + (0..4).map(|c| emb[c] * wh[c * 2 + a]).sum::<f64>()).tanh();
                assert!((out[a] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bc_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = tiny_config(1, 4, 1);
        cfg.action_dim = 2;
        let mut model = PolicyModel::new(cfg.clone(), &mut rng).unwrap();
        // zero head → predictions exactly 0
        model.params.by_name_mut("head.w").unwrap().data_mut().fill(0.0);
        let mut w = random_window(&mut rng, &cfg, 1);
        w.actions[0] = vec![1.0, 1.0];
        let mut tape = Tape::new();
        let (_, loss, _) = bc_loss(&model, &mut tape, std::slice::from_ref(&w)).unwrap();
        assert_eq!(tape.scalar(loss), 1.0);

        let preds = model.predict(std::slice::from_ref(&w)).unwrap();
        let mut w0 = w.clone();
        w0.actions[0] = preds[0][0].clone();
        let mut tape = Tape::new();
        let (_, loss, _) = bc_loss(&model, &mut tape, &[w0]).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn bc_loss_ignores_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = tiny_config(4, 4, 1);
        let model = PolicyModel::new(cfg.clone(), &mut rng).unwrap();
        let w = random_window(&mut rng, &cfg, 2);
        let mut w2 = w.clone();
        w2.actions[0] = vec![0.3, 0.3];
        w2.states[1] = vec![5.0, 5.0];
        w2.rtgs[0] = 9.0;
        let loss = |w: ContextWindow| {
            let mut tape = Tape::new();
            let (_, l, _) = bc_loss(&model, &mut tape, &[w]).unwrap();
            tape.scalar(l)
        };
        assert_eq!(loss(w), loss(w2));
    }

    #[test]
    fn bc_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = tiny_config(2, 4, 1);
        let mut model = PolicyModel::new(cfg.clone(), &mut rng).unwrap();
        scramble(&mut model, &mut rng);
        let batch: Vec<_> = (0..3).map(|i| random_window(&mut rng, &cfg, 1 + i % 2)).collect();
        let mut tape = Tape::new();
        let (_, loss, vars) = bc_loss(&model, &mut tape, &batch).unwrap();
        assert!(tape.scalar(loss) >= 0.0);
        tape.backward(loss).unwrap();
        tape.write_grads(&mut model.params, &vars);
        let probe = model.clone();
        let num = finite_difference(&model.params, 1e-5, |p| {
            let m = PolicyModel {
                params: p.clone(),
                ..probe.clone()
            };
            let mut tape = Tape::new();
            let (_, l, _) = bc_loss(&m, &mut tape, &batch).unwrap();
            tape.scalar(l)
        });
        let err = max_relative_error(&model.params, &num);
        assert!(err < 1e-4, "relative error {err:.3e}");
    }

    #[test]
    fn window_dimension_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = tiny_config(3, 4, 1);
        let model = PolicyModel::new(cfg.clone(), &mut rng).unwrap();
        let mut w = random_window(&mut rng, &cfg, 3);
        w.states[2] = vec![0.0; 3];
        assert!(matches!(model.predict(&[w]), Err(Error::Config(_))));
        let other = random_window(&mut rng, &tiny_config(2, 4, 1), 2);
        assert!(matches!(model.predict(&[other]), Err(Error::Config(_))));
    }
}
