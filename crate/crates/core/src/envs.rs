//! Toy MDPs over discrete grids with continuous state/action encodings,
//! behavior-policy dataset generators and exact return oracles.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::error::{Error, Result};

/// Largest `(cell, steps remaining)` table the exact oracles will build.
pub const MAX_ORACLE_STATES: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Sparse,
    Dense,
}

/// JSON description of a maze. `start_radius` spreads resets over open
/// cells within that Manhattan distance of `start`; `waypoint` anchors
/// the segment behaviors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeSpec {
    pub width: usize,
    pub height: usize,
    pub walls: Vec<[usize; 2]>,
    pub start: [usize; 2],
    pub goal: [usize; 2],
    pub reward_mode: RewardMode,
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_radius: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub waypoint: Option<[usize; 2]>,
}

/// Validated maze. Cells are indexed `y·width + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMaze {
    spec: MazeSpec,
    open: Vec<bool>,
}

/// Move order: +x, −x, +y, −y.
const MOVES: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

impl GridMaze {
    pub fn new(spec: MazeSpec) -> Result<Self> {
        let (w, h) = (spec.width, spec.height);
        if w < 2 || h < 2 {
            return Err(Error::Config(format!("maze must be at least 2x2, got {w}x{h}")));
        }
        let inside = |c: [usize; 2]| c[0] < w && c[1] < h;
        let mut open = vec![true; w * h];
        for &c in &spec.walls {
            if !inside(c) {
                return Err(Error::Config(format!("wall {c:?} outside the {w}x{h} grid")));
            }
            open[c[1] * w + c[0]] = false;
        }
        for (what, c) in [
            ("start", Some(spec.start)),
            ("goal", Some(spec.goal)),
            ("waypoint", spec.waypoint),
        ] {
            if let Some(c) = c {
                if !inside(c) || !open[c[1] * w + c[0]] {
                    return Err(Error::Config(format!("{what} {c:?} is not an open cell")));
                }
            }
        }
        if spec.start == spec.goal {
            return Err(Error::Config("start and goal coincide".into()));
        }
        if spec.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        let maze = Self { spec, open };
        let dist = maze.distances_to(maze.goal_cell());
        if dist[maze.start_cell()].is_none() {
            return Err(Error::Config("goal unreachable from start".into()));
        }
        Ok(maze)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(serde_json::from_str(&text)?)
    }

    pub fn spec(&self) -> &MazeSpec {
        &self.spec
    }

    fn cell(&self, c: [usize; 2]) -> usize {
        c[1] * self.spec.width + c[0]
    }

    pub fn coords(&self, cell: usize) -> [usize; 2] {
        [cell % self.spec.width, cell / self.spec.width]
    }

    pub fn start_cell(&self) -> usize {
        self.cell(self.spec.start)
    }

    pub fn goal_cell(&self) -> usize {
        self.cell(self.spec.goal)
    }

    pub fn waypoint_cell(&self) -> Option<usize> {
        self.spec.waypoint.map(|c| self.cell(c))
    }

    pub fn is_open(&self, cell: usize) -> bool {
        self.open[cell]
    }

    fn neighbor(&self, cell: usize, dir: usize) -> usize {
        let [x, y] = self.coords(cell);
        let (dx, dy) = MOVES[dir];
        let (nx, ny) = (x as isize + dx, y as isize + dy);
        if nx < 0 || ny < 0 || nx >= self.spec.width as isize || ny >= self.spec.height as isize {
            return cell;
        }
        let next = self.cell([nx as usize, ny as usize]);
        if self.open[next] {
            next
        } else {
            cell
        }
    }

    /// BFS step counts to `target`; `None` for walls and unreachable cells.
    pub fn distances_to(&self, target: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.open.len()];
        dist[target] = Some(0);
        let mut queue = VecDeque::from([target]);
        while let Some(c) = queue.pop_front() {
            let d = dist[c].unwrap();
            for dir in 0..4 {
                let n = self.neighbor(c, dir);
                if dist[n].is_none() {
                    dist[n] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Open cells within Manhattan `radius` of `center`, ascending.
    pub fn cells_near(&self, center: usize, radius: usize) -> Vec<usize> {
        let [cx, cy] = self.coords(center);
        (0..self.open.len())
            .filter(|&c| {
                let [x, y] = self.coords(c);
                self.open[c] && x.abs_diff(cx) + y.abs_diff(cy) <= radius
            })
            .collect()
    }

    fn manhattan_to_goal(&self, cell: usize) -> usize {
        let [x, y] = self.coords(cell);
        let [gx, gy] = self.spec.goal;
        x.abs_diff(gx) + y.abs_diff(gy)
    }

    fn reward_at(&self, cell: usize) -> f64 {
        match self.spec.reward_mode {
            RewardMode::Sparse => f64::from(u8::from(cell == self.goal_cell())),
            RewardMode::Dense => -(self.manhattan_to_goal(cell) as f64) / (self.spec.width + self.spec.height) as f64,
        }
    }
}

/// Deterministic left/right chain: start at 0, reward 1 on reaching the
/// right end, which is terminal.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainMdp {
    pub n_states: usize,
    pub horizon: usize,
}

impl ChainMdp {
    pub fn new(n_states: usize, horizon: usize) -> Result<Self> {
        if n_states < 2 {
            return Err(Error::Config(format!("chain needs at least 2 states, got {n_states}")));
        }
        if horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(Self { n_states, horizon })
    }
}

/// Static dynamics shared by the episode runner and the exact oracles.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Maze(GridMaze),
    Chain(ChainMdp),
}

impl Model {
    pub fn n_cells(&self) -> usize {
        match self {
            Model::Maze(m) => m.open.len(),
            Model::Chain(c) => c.n_states,
        }
    }

    /// Discrete actions: moves +x, −x, +y, −y for mazes; right, left for
    /// chains.
    pub fn n_actions(&self) -> usize {
        match self {
            Model::Maze(_) => 4,
            Model::Chain(_) => 2,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Model::Maze(_) => 2,
            Model::Chain(_) => 1,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.state_dim()
    }

    pub fn horizon(&self) -> usize {
        match self {
            Model::Maze(m) => m.spec.horizon,
            Model::Chain(c) => c.horizon,
        }
    }

    /// Reset distribution, uniform over the returned cells.
    pub fn start_cells(&self) -> Vec<usize> {
        match self {
            Model::Maze(m) => m.cells_near(m.start_cell(), m.spec.start_radius.unwrap_or(0)),
            Model::Chain(_) => vec![0],
        }
    }

    pub fn goal_cell(&self) -> usize {
        match self {
            Model::Maze(m) => m.goal_cell(),
            Model::Chain(c) => c.n_states - 1,
        }
    }

    /// `(next cell, reward, reached goal)`; `None` means stay in place.
    pub fn transition(&self, cell: usize, action: Option<usize>) -> (usize, f64, bool) {
        match self {
            Model::Maze(m) => {
                let next = action.map_or(cell, |a| m.neighbor(cell, a));
                (next, m.reward_at(next), next == m.goal_cell())
            }
            Model::Chain(c) => {
                let next = match action {
                    Some(0) => (cell + 1).min(c.n_states - 1),
                    Some(_) => cell.saturating_sub(1),
                    None => cell,
                };
                let goal = next == c.n_states - 1;
                (next, f64::from(u8::from(goal)), goal)
            }
        }
    }

    /// Positions normalized to `[−1, 1]` per axis.
    pub fn encode(&self, cell: usize) -> Vec<f64> {
        let norm = |v: usize, n: usize| 2.0 * v as f64 / (n - 1) as f64 - 1.0;
        match self {
            Model::Maze(m) => {
                let [x, y] = m.coords(cell);
                vec![norm(x, m.spec.width), norm(y, m.spec.height)]
            }
            Model::Chain(c) => vec![norm(cell, c.n_states)],
        }
    }

    /// Inverse of [`Model::encode`] by rounding to the nearest cell.
    pub fn cell_of(&self, state: &[f64]) -> Result<usize> {
        if state.len() != self.state_dim() {
            return Err(Error::Config(format!(
                "state has {} dims, environment expects {}",
                state.len(),
                self.state_dim()
            )));
        }
        let denorm = |v: f64, n: usize| (((v + 1.0) * (n - 1) as f64 / 2.0).round().max(0.0) as usize).min(n - 1);
        Ok(match self {
            Model::Maze(m) => m.cell([denorm(state[0], m.spec.width), denorm(state[1], m.spec.height)]),
            Model::Chain(c) => denorm(state[0], c.n_states),
        })
    }

    /// Snaps a continuous action to a discrete move along its dominant
    /// axis; an all-zero maze action stays. Ties favor the x axis.
    pub fn decode(&self, action: &[f64]) -> Result<Option<usize>> {
        if action.len() != self.action_dim() || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config(format!(
                "action {action:?} is not a finite {}-vector",
                self.action_dim()
            )));
        }
        Ok(match self {
            Model::Maze(_) => {
                let (ax, ay) = (action[0], action[1]);
                if ax == 0.0 && ay == 0.0 {
                    None
                } else if ax.abs() >= ay.abs() {
                    Some(if ax > 0.0 { 0 } else { 1 })
                } else {
                    Some(if ay > 0.0 { 2 } else { 3 })
                }
            }
            Model::Chain(_) => Some(if action[0] > 0.0 { 0 } else { 1 }),
        })
    }

    /// A behavior-style continuous action for discrete move `a`: main axis
    /// magnitude in `[0.6, 1]`, off axis within [`OFF_AXIS`] times it, so it
    /// always decodes back to `a`.
    pub fn sample_action(&self, a: usize, rng: &mut impl Rng) -> Vec<f64> {
        let sign = if a.is_multiple_of(2) { 1.0 } else { -1.0 };
        let main: f64 = sign * rng.random_range(0.6..=1.0);
        match self {
            Model::Maze(_) => {
                let off = main.abs() * rng.random_range(-OFF_AXIS..=OFF_AXIS);
                if a < 2 {
                    vec![main, off]
                } else {
                    vec![off, main]
                }
            }
            Model::Chain(_) => vec![main],
        }
    }

    /// BFS distances to `target` over the discrete dynamics.
    fn distances_to(&self, target: usize) -> Vec<Option<usize>> {
        match self {
            Model::Maze(m) => m.distances_to(target),
            Model::Chain(c) => (0..c.n_states).map(|s| Some(s.abs_diff(target))).collect(),
        }
    }

    fn check_oracle_size(&self) -> Result<()> {
        let states = self.n_cells().saturating_mul(self.horizon() + 1);
        if states > MAX_ORACLE_STATES {
            return Err(Error::Capability(format!(
                "exact search needs {states} states, limit is {MAX_ORACLE_STATES}"
            )));
        }
        Ok(())
    }

    /// Finite-horizon backup `V_h(c) = agg_a [r + V_{h−1}(c')]`, with no
    /// continuation past the goal. Returns `V_horizon` averaged over the
    /// reset distribution.
    fn backup(&self, aggregate: impl Fn(&[f64]) -> f64) -> Result<f64> {
        self.check_oracle_size()?;
        let n = self.n_cells();
        let mut value = vec![0.0; n];
        let mut q = vec![0.0; self.n_actions()];
        for _ in 0..self.horizon() {
            let next: Vec<f64> = (0..n)
                .map(|c| {
                    for (a, slot) in q.iter_mut().enumerate() {
                        let (nc, r, goal) = self.transition(c, Some(a));
                        *slot = r + if goal { 0.0 } else { value[nc] };
                    }
                    aggregate(&q)
                })
                .collect();
            value = next;
        }
        let starts = self.start_cells();
        Ok(starts.iter().map(|&c| value[c]).sum::<f64>() / starts.len() as f64)
    }

    /// Exact optimal undiscounted return from the reset distribution.
    pub fn optimal_return(&self) -> Result<f64> {
        self.backup(|q| q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Exact expected return of the uniformly random policy.
    pub fn random_return(&self) -> Result<f64> {
        self.backup(|q| q.iter().sum::<f64>() / q.len() as f64)
    }
}

/// `100·(raw − random)/(optimal − random)`.
pub fn normalized_score(raw: f64, optimal: f64, random: f64) -> Result<f64> {
    if !(optimal > random) {
        return Err(Error::Config(format!(
            "degenerate score bounds: optimal {optimal} must exceed random {random}"
        )));
    }
    Ok(100.0 * (raw - random) / (optimal - random))
}

/// Result of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub reward: f64,
    /// Episode over: goal reached or horizon exhausted.
    pub done: bool,
    /// Ended in the goal state (false on timeout).
    pub terminal: bool,
}

/// One running episode over a [`Model`].
#[derive(Clone, Debug)]
pub struct Env {
    name: String,
    model: Model,
    cell: usize,
    t: usize,
    done: bool,
}

/// Built-in environment names.
pub const BUILTIN_ENVS: [&str; 4] = ["maze5x5-open", "maze7x7-umaze", "maze9x9-medium", "chain-<n>"];

fn builtin_maze(name: &str) -> Option<MazeSpec> {
    let (base, mode) = match name.strip_suffix("-dense") {
        Some(b) => (b, RewardMode::Dense),
        None => (name, RewardMode::Sparse),
    };
    let wall_column = |x: usize, ys: std::ops::RangeInclusive<usize>| ys.map(move |y| [x, y]);
    let spec = match base {
        "maze5x5-open" => MazeSpec {
            width: 5,
            height: 5,
            walls: vec![],
            start: [0, 0],
            goal: [4, 4],
            reward_mode: mode,
            horizon: 20,
            start_radius: None,
            waypoint: Some([2, 2]),
        },
        // U shape: up the left arm, across the top corridor, down the right arm.
        "maze7x7-umaze" => MazeSpec {
            width: 7,
            height: 7,
            walls: (2..=4).flat_map(|x| wall_column(x, 0..=4)).collect(),
            start: [0, 0],
            goal: [6, 0],
            reward_mode: mode,
            horizon: 40,
            start_radius: Some(1),
            waypoint: Some([3, 5]),
        },
        "maze9x9-medium" => MazeSpec {
            width: 9,
            height: 9,
            walls: wall_column(2, 0..=6).chain(wall_column(5, 2..=8)).collect(),
            start: [0, 0],
            goal: [8, 8],
            reward_mode: mode,
            horizon: 60,
            start_radius: Some(1),
            waypoint: Some([3, 7]),
        },
        _ => return None,
    };
    Some(spec)
}

impl Env {
    pub fn new(name: impl Into<String>, model: Model) -> Self {
        let cell = model.start_cells()[0];
        Self {
            name: name.into(),
            model,
            cell,
            t: 0,
            done: false,
        }
    }

    /// Resolves a built-in name (`maze…`, `maze…-dense`, `chain-<n>`) or a
    /// path to a maze JSON document.
    pub fn resolve(name: &str) -> Result<Self> {
        if let Some(spec) = builtin_maze(name) {
            return Ok(Self::new(name, Model::Maze(GridMaze::new(spec)?)));
        }
        if let Some(n) = name.strip_prefix("chain-") {
            let n: usize = n
                .parse()
                .map_err(|_| Error::Config(format!("bad chain length in {name:?}")))?;
            return Ok(Self::new(name, Model::Chain(ChainMdp::new(n, 4 * n)?)));
        }
        let path = Path::new(name);
        if path.is_file() {
            return Ok(Self::new(name, Model::Maze(GridMaze::from_json_file(path)?)));
        }
        Err(Error::Config(format!(
            "unknown environment {name:?}; built-ins are {} (optionally with -dense) or a maze JSON path",
            BUILTIN_ENVS.join(", ")
        )))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.model.action_dim()
    }

    pub fn horizon(&self) -> usize {
        self.model.horizon()
    }

    pub fn cell(&self) -> usize {
        self.cell
    }

    pub fn elapsed(&self) -> usize {
        self.t
    }

    pub fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let starts = self.model.start_cells();
        let cell = starts[rng.random_range(0..starts.len())];
        self.reset_to(cell)
    }

    pub fn reset_to(&mut self, cell: usize) -> Vec<f64> {
        self.cell = cell;
        self.t = 0;
        self.done = false;
        self.model.encode(cell)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if self.done {
            return Err(Error::Usage("step called after the episode ended".into()));
        }
        let (next, reward, goal) = self.model.transition(self.cell, self.model.decode(action)?);
        self.cell = next;
        self.t += 1;
        self.done = goal || self.t >= self.model.horizon();
        Ok(Transition {
            state: self.model.encode(next),
            reward,
            done: self.done,
            terminal: goal,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BehaviorKind {
    /// Uniform over discrete moves.
    Random,
    /// Shortest-path moves to the goal, random with probability `noise`.
    NoisyExpert,
    /// Start region to the waypoint, then a wander that never enters the
    /// goal.
    SegmentA,
    /// Waypoint region to the goal.
    SegmentB,
    /// Alternating `SegmentA` and `SegmentB` episodes.
    StitchMix,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BehaviorSpec {
    pub kind: BehaviorKind,
    pub noise: f64,
}

/// Largest off-axis to main-axis ratio of a behavior action.
pub const OFF_AXIS: f64 = 0.3;

/// Noise of the segment behaviors unless overridden.
pub const SEGMENT_NOISE: f64 = 0.3;
/// Probability that a wander step retreats toward the start.
pub const WANDER_RETREAT: f64 = 0.5;

impl BehaviorSpec {
    /// `random`, `expert`, `noisy_expert[:p]`, `segment_a[:p]`,
    /// `segment_b[:p]` or `stitch-mix[:p]`.
    pub fn parse(text: &str) -> Result<Self> {
        let (head, noise) = match text.split_once(':') {
            Some((h, p)) => {
                let p: f64 = p
                    .parse()
                    .map_err(|_| Error::Config(format!("bad noise level in policy {text:?}")))?;
                (h, Some(p))
            }
            None => (text, None),
        };
        let (kind, default) = match head {
            "random" => (BehaviorKind::Random, 1.0),
            "expert" => (BehaviorKind::NoisyExpert, 0.0),
            "noisy_expert" => (BehaviorKind::NoisyExpert, 0.2),
            "segment_a" => (BehaviorKind::SegmentA, SEGMENT_NOISE),
            "segment_b" => (BehaviorKind::SegmentB, SEGMENT_NOISE),
            "stitch-mix" => (BehaviorKind::StitchMix, SEGMENT_NOISE),
            _ => {
                return Err(Error::Config(format!(
                    "unknown policy {head:?}; expected random, expert, noisy_expert, segment_a, segment_b or stitch-mix"
                )))
            }
        };
        let noise = noise.unwrap_or(default);
        if !(0.0..=1.0).contains(&noise) {
            return Err(Error::Config(format!("noise must lie in [0,1], got {noise}")));
        }
        Ok(Self { kind, noise })
    }
}

/// Rolls out `episodes` behavior episodes; identical inputs give identical
/// trajectories.
pub fn generate_dataset(env: &Env, spec: BehaviorSpec, episodes: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be positive".into()));
    }
    let model = env.model();
    let segment_cells = match (spec.kind, model) {
        (BehaviorKind::Random | BehaviorKind::NoisyExpert, _) => None,
        (_, Model::Maze(m)) => {
            let wp = m
                .waypoint_cell()
                .ok_or_else(|| Error::Config(format!("maze {} has no waypoint", env.name())))?;
            Some((wp, m.cells_near(wp, 1)))
        }
        (_, Model::Chain(_)) => {
            return Err(Error::Capability(
                "segment behaviors need a maze with a waypoint".into(),
            ))
        }
    };
    let to_goal = model.distances_to(model.goal_cell());
    let to_start = model.distances_to(model.start_cells()[0]);
    let to_waypoint = segment_cells.as_ref().map(|(wp, _)| model.distances_to(*wp));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = env.clone();
    let mut out = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let kind = match spec.kind {
            BehaviorKind::StitchMix if i % 2 == 0 => BehaviorKind::SegmentA,
            BehaviorKind::StitchMix => BehaviorKind::SegmentB,
            k => k,
        };
        let mut state = match kind {
            BehaviorKind::SegmentB => {
                let region = &segment_cells.as_ref().unwrap().1;
                env.reset_to(*region.choose(&mut rng).unwrap())
            }
            _ => env.reset(&mut rng),
        };
        let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
        let mut reached_waypoint = false;
        loop {
            let cell = env.cell();
            let a = match kind {
                BehaviorKind::Random => rng.random_range(0..model.n_actions()),
                BehaviorKind::NoisyExpert | BehaviorKind::SegmentB => {
                    noisy_greedy(model, cell, &to_goal, spec.noise, None, &mut rng)
                }
                BehaviorKind::SegmentA => {
                    let wp = segment_cells.as_ref().unwrap().0;
                    reached_waypoint |= cell == wp;
                    let goal = Some(model.goal_cell());
                    if reached_waypoint {
                        noisy_greedy(model, cell, &to_start, 1.0 - WANDER_RETREAT, goal, &mut rng)
                    } else {
                        noisy_greedy(model, cell, to_waypoint.as_ref().unwrap(), spec.noise, goal, &mut rng)
                    }
                }
                BehaviorKind::StitchMix => unreachable!(),
            };
            let action = model.sample_action(a, &mut rng);
            let tr = env.step(&action)?;
            states.push(std::mem::replace(&mut state, tr.state));
            actions.push(action);
            rewards.push(tr.reward);
            if tr.done {
                out.push(Trajectory::new(states, actions, rewards, tr.terminal)?);
                break;
            }
        }
    }
    Ok(out)
}

/// A uniformly chosen move among those that shorten the distance in `dist`;
/// with probability `noise` a uniformly random move instead. Moves into
/// `forbidden` are never chosen.
fn noisy_greedy(
    model: &Model,
    cell: usize,
    dist: &[Option<usize>],
    noise: f64,
    forbidden: Option<usize>,
    rng: &mut impl Rng,
) -> usize {
    let allowed: Vec<usize> = (0..model.n_actions())
        .filter(|&a| Some(model.transition(cell, Some(a)).0) != forbidden)
        .collect();
    if rng.random_bool(noise) {
        return *allowed.choose(rng).unwrap();
    }
    let d = |a: usize| dist[model.transition(cell, Some(a)).0].unwrap_or(usize::MAX);
    let best = allowed.iter().map(|&a| d(a)).min().unwrap();
    let bests: Vec<usize> = allowed.into_iter().filter(|&a| d(a) == best).collect();
    *bests.choose(rng).unwrap()
}

/// Checks the two stitching preconditions on a logged dataset: no episode
/// that starts in the reset region attains the optimal return, and the
/// logged cell transitions connect a reset cell to the goal.
pub fn stitching_precondition(model: &Model, trajs: &[Trajectory]) -> Result<StitchReport> {
    let optimal = model.optimal_return()?;
    let starts = model.start_cells();
    let mut edges = vec![Vec::new(); model.n_cells()];
    let mut optimal_from_start = 0;
    for tr in trajs {
        let cells = tr.states.iter().map(|s| model.cell_of(s)).collect::<Result<Vec<_>>>()?;
        if starts.contains(&cells[0]) && tr.episode_return() >= optimal - 1e-9 {
            optimal_from_start += 1;
        }
        for (t, &c) in cells.iter().enumerate() {
            let a = model.decode(&tr.actions[t])?;
            let next = model.transition(c, a).0;
            if !edges[c].contains(&next) {
                edges[c].push(next);
            }
        }
    }
    let mut seen = vec![false; model.n_cells()];
    let mut queue: VecDeque<usize> = starts.iter().copied().collect();
    for &s in &starts {
        seen[s] = true;
    }
    while let Some(c) = queue.pop_front() {
        for &n in &edges[c] {
            if !seen[n] {
                seen[n] = true;
                queue.push_back(n);
            }
        }
    }
    Ok(StitchReport {
        optimal_from_start,
        logged_path_to_goal: seen[model.goal_cell()],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StitchReport {
    /// Episodes starting in the reset region that attain the optimum.
    pub optimal_from_start: usize,
    /// Logged transitions connect a reset cell to the goal.
    pub logged_path_to_goal: bool,
}

impl StitchReport {
    pub fn holds(&self) -> bool {
        self.optimal_from_start == 0 && self.logged_path_to_goal
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maze(name: &str) -> Env {
        Env::resolve(name).unwrap()
    }

    fn act(a: usize) -> Vec<f64> {
        let mut v = vec![0.0, 0.0];
        v[a / 2] = if a.is_multiple_of(2) { 1.0 } else { -1.0 };
        v
    }

    #[test]
    fn builtins_validate_and_have_expected_optima() {
        for name in ["maze5x5-open", "maze7x7-umaze", "maze9x9-medium"] {
            let env = maze(name);
            assert_eq!(env.model().optimal_return().unwrap(), 1.0, "{name}");
        }
        assert_eq!(maze("chain-5").model().optimal_return().unwrap(), 1.0);
        let Model::Maze(m) = maze("maze7x7-umaze").model().clone() else {
            panic!()
        };
        assert_eq!(m.distances_to(m.goal_cell())[m.start_cell()], Some(16));
    }

    #[test]
    fn unreachable_goal_rejected() {
        let spec = MazeSpec {
            width: 3,
            height: 3,
            walls: vec![[1, 0], [1, 1], [1, 2]],
            start: [0, 0],
            goal: [2, 2],
            reward_mode: RewardMode::Sparse,
            horizon: 10,
            start_radius: None,
            waypoint: None,
        };
        assert!(matches!(GridMaze::new(spec), Err(Error::Config(m)) if m.contains("unreachable")));
    }

    #[test]
    fn maze_json_round_trip_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(
            &path,
            r#"{"width":3,"height":2,"walls":[[1,0]],"start":[0,0],"goal":[2,0],"reward_mode":"dense","horizon":9}"#,
        )
        .unwrap();
        let env = Env::resolve(path.to_str().unwrap()).unwrap();
        assert_eq!(env.horizon(), 9);
        std::fs::write(&path, r#"{"width":3,"height":2,"walls":[],"start":[0,0],"goal":[2,0],"reward_mode":"dense","horizon":9,"colour":1}"#).unwrap();
        assert!(Env::resolve(path.to_str().unwrap()).is_err());
        assert!(Env::resolve("maze3x3-nowhere").is_err());
    }

    #[test]
    fn wall_bump_and_goal_rewards() {
        let mut env = maze("maze5x5-open-dense");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        let tr = env.step(&act(1)).unwrap();
        assert_eq!(env.cell(), 0);
        assert_eq!(tr.reward, -8.0 / 10.0);

        let mut env = maze("maze5x5-open");
        env.reset(&mut rng);
        let mut last = None;
        for a in [0, 0, 0, 0, 2, 2, 2, 2] {
            last = Some(env.step(&act(a)).unwrap());
        }
        let last = last.unwrap();
        assert_eq!((last.reward, last.done, last.terminal), (1.0, true, true));
        assert!(matches!(env.step(&act(0)), Err(Error::Usage(_))));
    }

    #[test]
    fn horizon_exhaustion_is_a_timeout() {
        let mut env = maze("maze5x5-open");
        env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        for t in 0..20 {
            let tr = env.step(&act(1)).unwrap();
            assert_eq!(tr.done, t == 19);
            assert!(!tr.terminal);
        }
        let trajs = generate_dataset(&maze("maze5x5-open"), BehaviorSpec::parse("random").unwrap(), 20, 1).unwrap();
        for tr in &trajs {
            assert_eq!(tr.terminal, tr.episode_return() == 1.0);
        }
    }

    #[test]
    fn decode_snaps_to_dominant_axis() {
        let m = maze("maze5x5-open").model().clone();
        assert_eq!(m.decode(&[0.5, -0.2]).unwrap(), Some(0));
        assert_eq!(m.decode(&[-0.1, 0.9]).unwrap(), Some(2));
        assert_eq!(m.decode(&[0.0, 0.0]).unwrap(), None);
        assert!(m.decode(&[f64::NAN, 0.0]).is_err());
        assert!(m.decode(&[1.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for a in 0..4 {
            for _ in 0..50 {
                assert_eq!(m.decode(&m.sample_action(a, &mut rng)).unwrap(), Some(a));
            }
        }
        for c in 0..m.n_cells() {
            assert_eq!(m.cell_of(&m.encode(c)).unwrap(), c);
        }
    }

    #[test]
    fn dense_optimum_matches_exhaustive_search() {
        let spec = MazeSpec {
            horizon: 8,
            ..builtin_maze("maze5x5-open-dense").unwrap()
        };
        let model = Model::Maze(GridMaze::new(spec).unwrap());
        let mut best = f64::NEG_INFINITY;
        for code in 0..4usize.pow(8) {
            let (mut cell, mut ret) = (model.start_cells()[0], 0.0);
            for step in 0..8 {
                let (n, r, goal) = model.transition(cell, Some(code / 4usize.pow(step) % 4));
                cell = n;
                ret += r;
                if goal {
                    break;
                }
            }
            best = best.max(ret);
        }
        assert!((model.optimal_return().unwrap() - best).abs() < 1e-12);
    }

    #[test]
    fn random_return_matches_monte_carlo() {
        let env = maze("chain-5");
        let exact = env.model().random_return().unwrap();
        let trajs = generate_dataset(&env, BehaviorSpec::parse("random").unwrap(), 20_000, 3).unwrap();
        let mc = trajs.iter().map(Trajectory::episode_return).sum::<f64>() / trajs.len() as f64;
        assert!((mc - exact).abs() < 0.02, "exact {exact}, monte carlo {mc}");
    }

    #[test]
    fn oracle_size_limit() {
        let spec = MazeSpec {
            width: 200,
            height: 200,
            walls: vec![],
            start: [0, 0],
            goal: [199, 199],
            reward_mode: RewardMode::Sparse,
            horizon: 100,
            start_radius: None,
            waypoint: None,
        };
        let m = Model::Maze(GridMaze::new(spec).unwrap());
        assert!(matches!(m.optimal_return(), Err(Error::Capability(_))));
    }

    #[test]
    fn normalized_score_examples() {
        assert_eq!(normalized_score(1.0, 1.0, 0.2).unwrap(), 100.0);
        assert_eq!(normalized_score(0.2, 1.0, 0.2).unwrap(), 0.0);
        assert!((normalized_score(0.6, 1.0, 0.2).unwrap() - 50.0).abs() < 1e-12);
        assert!(normalized_score(0.5, 0.2, 0.2).is_err());
    }

    #[test]
    fn expert_on_chain_is_optimal() {
        let env = maze("chain-5");
        let trajs = generate_dataset(&env, BehaviorSpec::parse("expert").unwrap(), 10, 0).unwrap();
        let opt = env.model().optimal_return().unwrap();
        assert!(trajs
            .iter()
            .all(|t| t.episode_return() == opt && t.len() == 4 && t.terminal));
    }

    #[test]
    fn stitch_mix_meets_preconditions() {
        let env = maze("maze7x7-umaze");
        let trajs = generate_dataset(&env, BehaviorSpec::parse("stitch-mix").unwrap(), 200, 7).unwrap();
        let report = stitching_precondition(env.model(), &trajs).unwrap();
        assert!(report.holds(), "{report:?}");
        assert!(trajs.iter().skip(1).step_by(2).filter(|t| t.terminal).count() > 80);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let env = maze("maze7x7-umaze");
        let spec = BehaviorSpec::parse("stitch-mix").unwrap();
        let a = generate_dataset(&env, spec, 10, 42).unwrap();
        assert_eq!(a, generate_dataset(&env, spec, 10, 42).unwrap());
        assert_ne!(a, generate_dataset(&env, spec, 10, 43).unwrap());
    }

    #[test]
    fn environment_is_deterministic_under_fixed_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let actions: Vec<Vec<f64>> = (0..30)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let run = || {
            let mut env = maze("maze9x9-medium");
            env.reset_to(0);
            actions.iter().map_while(|a| env.step(a).ok()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(BehaviorSpec::parse("noisy_expert:0.3").unwrap().noise, 0.3);
        assert!(BehaviorSpec::parse("noisy_expert:1.5").is_err());
        assert!(BehaviorSpec::parse("greedy").is_err());
        assert!(generate_dataset(&maze("chain-4"), BehaviorSpec::parse("segment_a").unwrap(), 1, 0).is_err());
    }
}
