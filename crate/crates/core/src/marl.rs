//! Cooperative multi-agent tabular Q-learning over discretised UAV states.
//!
//! Every agent keeps a table over its own state and the 21 joint move/power
//! actions. Under the summed selection rule all agents share their current
//! Q-rows and each takes the argmax of the element-wise sum, so the agents move
//! in lockstep; [`SelectionRule::Independent`] lets each agent use its own row.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{self, ChannelParams, ConstraintReport, Limits, UavState};
use crate::mobility::WorldExtent;
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarlError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid learning parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Channel(#[from] channel::ChannelError),
}

pub type Result<T> = std::result::Result<T, MarlError>;

pub const N_MOVES: usize = 7;
pub const N_POWER_CHANGES: usize = 3;
pub const N_ACTIONS: usize = N_MOVES * N_POWER_CHANGES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Move {
    Right,
    Left,
    Forward,
    Backward,
    Up,
    Down,
    Stay,
}

impl Move {
    pub const ALL: [Move; N_MOVES] = [
        Move::Right,
        Move::Left,
        Move::Forward,
        Move::Backward,
        Move::Up,
        Move::Down,
        Move::Stay,
    ];

    /// Unit step in (x, y, altitude level).
    pub fn delta(self) -> (i64, i64, i64) {
        match self {
            Move::Right => (1, 0, 0),
            Move::Left => (-1, 0, 0),
            Move::Forward => (0, 1, 0),
            Move::Backward => (0, -1, 0),
            Move::Up => (0, 0, 1),
            Move::Down => (0, 0, -1),
            Move::Stay => (0, 0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerChange {
    Increase,
    Decrease,
    Maintain,
}

impl PowerChange {
    pub const ALL: [PowerChange; N_POWER_CHANGES] = [PowerChange::Increase, PowerChange::Decrease, PowerChange::Maintain];

    fn delta(self) -> i64 {
        match self {
            PowerChange::Increase => 1,
            PowerChange::Decrease => -1,
            PowerChange::Maintain => 0,
        }
    }
}

/// One of the 21 move/power combinations, indexed `move * 3 + power`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionId(pub usize);

impl ActionId {
    pub fn new(m: Move, p: PowerChange) -> Self {
        let mi = Move::ALL.iter().position(|&x| x == m).expect("listed move");
        let pi = PowerChange::ALL.iter().position(|&x| x == p).expect("listed power change");
        ActionId(mi * N_POWER_CHANGES + pi)
    }

    pub fn movement(self) -> Move {
        Move::ALL[self.0 / N_POWER_CHANGES]
    }

    pub fn power(self) -> PowerChange {
        PowerChange::ALL[self.0 % N_POWER_CHANGES]
    }

    pub fn all() -> impl Iterator<Item = ActionId> {
        (0..N_ACTIONS).map(ActionId)
    }

    /// The seven moves with power held, for controllers without power control.
    pub fn without_power_control() -> Vec<usize> {
        Move::ALL
            .iter()
            .map(|&m| ActionId::new(m, PowerChange::Maintain).0)
            .collect()
    }
}

/// Discretisation of the UAV state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub cell_meters: f64,
    pub x_cells: usize,
    pub y_cells: usize,
    pub altitude_levels: Vec<f64>,
    pub power_levels: Vec<f64>,
}

impl GridSpec {
    /// Square cells of `cell_meters` covering the extent.
    pub fn covering(extent: &WorldExtent, cell_meters: f64, altitude_levels: Vec<f64>, power_levels: Vec<f64>) -> Self {
        Self {
            cell_meters,
            x_cells: (extent.x_max / cell_meters).ceil().max(1.0) as usize,
            y_cells: (extent.y_max / cell_meters).ceil().max(1.0) as usize,
            altitude_levels,
            power_levels,
        }
    }

    pub fn validate(&self, limits: &Limits) -> Result<()> {
        let bad = |m: String| Err(MarlError::InvalidGrid(m));
        if !(self.cell_meters > 0.0) || self.x_cells == 0 || self.y_cells == 0 {
            return bad("cell size and cell counts must be positive".into());
        }
        if self.altitude_levels.is_empty() || self.power_levels.is_empty() {
            return bad("altitude and power level lists must be non-empty".into());
        }
        if self.power_levels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("power levels must be strictly ascending: {:?}", self.power_levels));
        }
        if self.altitude_levels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("altitude levels must be strictly ascending: {:?}", self.altitude_levels));
        }
        if let Some(h) = self.altitude_levels.iter().find(|h| !(limits.h_min..=limits.h_max).contains(*h)) {
            return bad(format!("altitude level {h} outside [{}, {}]", limits.h_min, limits.h_max));
        }
        if let Some(p) = self.power_levels.iter().find(|p| !(0.0..=limits.p_max).contains(*p)) {
            return bad(format!("power level {p} outside [0, {}]", limits.p_max));
        }
        Ok(())
    }

    /// Per-agent state count `|S|`.
    pub fn n_states(&self) -> usize {
        self.x_cells * self.y_cells * self.altitude_levels.len() * self.power_levels.len()
    }

    pub fn index(&self, s: &AgentState) -> usize {
        ((s.cell_x * self.y_cells + s.cell_y) * self.altitude_levels.len() + s.h_idx) * self.power_levels.len() + s.p_idx
    }

    pub fn state(&self, mut index: usize) -> AgentState {
        let np = self.power_levels.len();
        let nh = self.altitude_levels.len();
        let p_idx = index % np;
        index /= np;
        let h_idx = index % nh;
        index /= nh;
        AgentState {
            cell_x: index / self.y_cells,
            cell_y: index % self.y_cells,
            h_idx,
            p_idx,
        }
    }

    pub fn cell_center(&self, cell_x: usize, cell_y: usize) -> [f64; 2] {
        [
            (cell_x as f64 + 0.5) * self.cell_meters,
            (cell_y as f64 + 0.5) * self.cell_meters,
        ]
    }

    pub fn cell_of(&self, p: [f64; 2]) -> (usize, usize) {
        let c = |v: f64, n: usize| ((v / self.cell_meters).floor().max(0.0) as usize).min(n - 1);
        (c(p[0], self.x_cells), c(p[1], self.y_cells))
    }

    pub fn uav(&self, s: &AgentState) -> UavState {
        let [x, y] = self.cell_center(s.cell_x, s.cell_y);
        UavState {
            x,
            y,
            h: self.altitude_levels[s.h_idx],
            p_total: self.power_levels[s.p_idx],
        }
    }

    pub fn middle_altitude(&self) -> usize {
        self.altitude_levels.len() / 2
    }
}

/// Discrete UAV state: cell, altitude level and power level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentState {
    pub cell_x: usize,
    pub cell_y: usize,
    pub h_idx: usize,
    pub p_idx: usize,
}

fn saturating_step(v: usize, d: i64, len: usize) -> usize {
    let next = v as i64 + d;
    if next < 0 || next >= len as i64 {
        v
    } else {
        next as usize
    }
}

/// Next state under `action`; a step that would leave the grid leaves that coordinate unchanged.
pub fn apply_action(s: &AgentState, action: ActionId, grid: &GridSpec) -> AgentState {
    let (dx, dy, dh) = action.movement().delta();
    AgentState {
        cell_x: saturating_step(s.cell_x, dx, grid.x_cells),
        cell_y: saturating_step(s.cell_y, dy, grid.y_cells),
        h_idx: saturating_step(s.h_idx, dh, grid.altitude_levels.len()),
        p_idx: saturating_step(s.p_idx, action.power().delta(), grid.power_levels.len()),
    }
}

/// +1 when the sum rate strictly improved, -1 otherwise (ties included).
pub fn global_reward(sum_rate_new: f64, sum_rate_old: f64) -> f64 {
    if sum_rate_new > sum_rate_old {
        1.0
    } else {
        -1.0
    }
}

/// One agent's state-action value table.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_actions: usize,
    values: Vec<f64>,
    visits: Vec<u32>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            values: vec![0.0; n_states * n_actions],
            visits: vec![0; n_states * n_actions],
        }
    }

    pub fn n_states(&self) -> usize {
        self.values.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn visits(&self, s: usize, a: usize) -> u32 {
        self.visits[s * self.n_actions + a]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_value(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action over `allowed`, lowest index on ties.
    pub fn argmax(&self, s: usize, allowed: &[usize]) -> usize {
        argmax_over(self.row(s), allowed)
    }
}

fn argmax_over(row: &[f64], allowed: &[usize]) -> usize {
    let mut best = allowed[0];
    for &a in &allowed[1..] {
        if row[a] > row[best] {
            best = a;
        }
    }
    best
}

/// `Q(s,a) <- (1 - alpha) Q(s,a) + alpha (r + beta max_b Q(s', b))`; returns the new value.
pub fn q_update(table: &mut QTable, s: usize, a: usize, r: f64, s_next: usize, alpha: f64, beta: f64) -> f64 {
    let target = r + beta * table.max_value(s_next);
    let v = (1.0 - alpha) * table.get(s, a) + alpha * target;
    table.set(s, a, v);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearningRate {
    Constant { alpha: f64 },
    /// `1 / (1 + n)` with `n` the prior visits of the updated pair.
    VisitHarmonic,
    /// `1 / (1 + n)^omega`, `omega` in (0.5, 1].
    VisitPolynomial { omega: f64 },
}

impl LearningRate {
    pub fn rate(&self, visits: u32) -> f64 {
        match *self {
            LearningRate::Constant { alpha } => alpha,
            LearningRate::VisitHarmonic => 1.0 / (1.0 + f64::from(visits)),
            LearningRate::VisitPolynomial { omega } => (1.0 + f64::from(visits)).powf(-omega),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LearningRate::Constant { alpha } if !(alpha > 0.0 && alpha <= 1.0) => {
                Err(MarlError::InvalidParams(format!("learning rate must be in (0, 1], got {alpha}")))
            }
            LearningRate::VisitPolynomial { omega } if !(omega > 0.5 && omega <= 1.0) => {
                Err(MarlError::InvalidParams(format!("omega must be in (0.5, 1], got {omega}")))
            }
            _ => Ok(()),
        }
    }
}

/// Exploration rate per episode: `max(floor, start * decay^episode)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 0.5,
            decay: 0.995,
            floor: 0.05,
        }
    }
}

impl EpsilonSchedule {
    pub fn constant(eps: f64) -> Self {
        Self {
            start: eps,
            decay: 1.0,
            floor: eps,
        }
    }

    pub fn at(&self, episode: usize) -> f64 {
        (self.start * self.decay.powi(episode as i32)).max(self.floor).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Every agent takes the argmax of the summed Q-rows of all agents.
    #[default]
    Summed,
    /// Every agent takes the argmax of its own Q-row.
    Independent,
}

/// One table per agent plus the shared hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QTableSet {
    pub tables: Vec<QTable>,
    pub learning_rate: LearningRate,
    pub discount: f64,
    pub epsilon: EpsilonSchedule,
    pub episodes_done: usize,
}

impl QTableSet {
    pub fn new(
        n_agents: usize,
        n_states: usize,
        n_actions: usize,
        learning_rate: LearningRate,
        discount: f64,
        epsilon: EpsilonSchedule,
    ) -> Result<Self> {
        learning_rate.validate()?;
        if !(0.0..1.0).contains(&discount) {
            return Err(MarlError::InvalidParams(format!("discount must be in [0, 1), got {discount}")));
        }
        if !(0.0..=1.0).contains(&epsilon.start) || !(0.0..=1.0).contains(&epsilon.floor) || !(epsilon.decay > 0.0) {
            return Err(MarlError::InvalidParams(format!("bad epsilon schedule {epsilon:?}")));
        }
        Ok(Self {
            tables: (0..n_agents).map(|_| QTable::zeros(n_states, n_actions)).collect(),
            learning_rate,
            discount,
            epsilon,
            episodes_done: 0,
        })
    }

    /// Total stored values: agents x states x actions.
    pub fn storage_entries(&self) -> usize {
        self.tables.iter().map(|t| t.values.len()).sum()
    }

    /// Applies the update rule to agent `n` and bumps the visit count.
    pub fn update(&mut self, n: usize, s: usize, a: usize, r: f64, s_next: usize) -> f64 {
        let table = &mut self.tables[n];
        let k = s * table.n_actions + a;
        let alpha = self.learning_rate.rate(table.visits[k]);
        table.visits[k] = table.visits[k].saturating_add(1);
        q_update(table, s, a, r, s_next, alpha, self.discount)
    }

    pub fn greedy(&self, states: &[usize], rule: SelectionRule, allowed: &[usize]) -> Vec<usize> {
        match rule {
            SelectionRule::Summed => {
                let n_actions = self.tables[0].n_actions;
                let mut sum = vec![0.0; n_actions];
                for (t, &s) in self.tables.iter().zip(states) {
                    for (acc, v) in sum.iter_mut().zip(t.row(s)) {
                        *acc += v;
                    }
                }
                vec![argmax_over(&sum, allowed); states.len()]
            }
            SelectionRule::Independent => self
                .tables
                .iter()
                .zip(states)
                .map(|(t, &s)| t.argmax(s, allowed))
                .collect(),
        }
    }
}

/// Epsilon-greedy joint action: each agent independently explores with probability
/// `epsilon` (uniform over `allowed`), otherwise follows the greedy rule.
pub fn select_joint_action(
    tables: &QTableSet,
    states: &[usize],
    epsilon: f64,
    rule: SelectionRule,
    allowed: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let greedy = tables.greedy(states, rule, allowed);
    greedy
        .into_iter()
        .map(|g| {
            if rng.gen::<f64>() < epsilon {
                allowed[rng.gen_range(0..allowed.len())]
            } else {
                g
            }
        })
        .collect()
}

/// Outcome of one joint step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next_states: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Task metric after the step (sum rate for the UAV environment).
    pub metric: f64,
}

/// A cooperative environment with per-agent discrete states and actions.
pub trait MultiAgentEnv {
    fn n_agents(&self) -> usize;
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Re-initialises the episode and returns the starting states.
    fn reset(&mut self) -> Vec<usize>;
    fn step(&mut self, actions: &[usize]) -> Transition;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub selection: SelectionRule,
    /// Actions agents may take; all actions when empty.
    pub allowed_actions: Vec<usize>,
    /// Learning-curve sampling interval in steps (0 records nothing per step).
    pub record_every: usize,
    pub seed: u64,
}

/// One sampled point of the learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub trial: usize,
    pub iteration: usize,
    pub metric: f64,
    pub cum_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub final_metric: f64,
    pub best_metric: f64,
    /// Mean over agents of the undiscounted episode return.
    pub cum_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutcome {
    pub episodes: Vec<EpisodeSummary>,
    pub curve: Vec<CurvePoint>,
    /// Best metric seen anywhere in training and the joint state that produced it.
    pub best: Option<(Vec<usize>, f64)>,
}

impl TrainOutcome {
    /// Running maximum of the per-episode best metric.
    pub fn running_best(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.episodes
            .iter()
            .map(|e| {
                best = best.max(e.best_metric);
                best
            })
            .collect()
    }
}

fn allowed_or_all(allowed: &[usize], n_actions: usize) -> Vec<usize> {
    if allowed.is_empty() {
        (0..n_actions).collect()
    } else {
        allowed.to_vec()
    }
}

/// Episodic epsilon-greedy Q-learning: each step shares rows, selects a joint
/// action, observes rewards and next states, then updates every agent's table
/// in agent order.
pub fn train<E: MultiAgentEnv>(env: &mut E, tables: &mut QTableSet, cfg: &TrainConfig) -> TrainOutcome {
    let allowed = allowed_or_all(&cfg.allowed_actions, env.n_actions());
    let n = env.n_agents();
    let mut out = TrainOutcome::default();
    for ep in 0..cfg.episodes {
        let episode_index = tables.episodes_done;
        let eps = tables.epsilon.at(episode_index);
        let mut r = rng::stream(cfg.seed, "q-episode", episode_index as u64);
        let mut states = env.reset();
        let mut cum = vec![0.0; n];
        let mut best = f64::NEG_INFINITY;
        let mut last = f64::NAN;
        for it in 0..cfg.steps_per_episode {
            let actions = select_joint_action(tables, &states, eps, cfg.selection, &allowed, &mut r);
            let tr = env.step(&actions);
            for agent in 0..n {
                tables.update(agent, states[agent], actions[agent], tr.rewards[agent], tr.next_states[agent]);
                cum[agent] += tr.rewards[agent];
            }
            if tr.metric > best {
                best = tr.metric;
            }
            if out.best.as_ref().is_none_or(|(_, m)| tr.metric > *m) {
                out.best = Some((tr.next_states.clone(), tr.metric));
            }
            last = tr.metric;
            states = tr.next_states;
            if cfg.record_every > 0 && (it + 1) % cfg.record_every == 0 {
                out.curve.push(CurvePoint {
                    trial: ep,
                    iteration: it + 1,
                    metric: tr.metric,
                    cum_reward: cum.iter().sum::<f64>() / n as f64,
                });
            }
        }
        tables.episodes_done += 1;
        out.episodes.push(EpisodeSummary {
            final_metric: last,
            best_metric: best,
            cum_reward: cum.iter().sum::<f64>() / n as f64,
        });
    }
    out
}

/// UAV fleet over a sequence of user snapshots; step `t` of an episode scores
/// the move against snapshot `min(t, len - 1)`.
#[derive(Debug, Clone)]
pub struct UavEnv<'a> {
    pub grid: &'a GridSpec,
    pub channel: &'a ChannelParams,
    pub snapshots: &'a [Vec<[f64; 2]>],
    pub assignment: &'a [usize],
    pub start: Vec<AgentState>,
    current: Vec<AgentState>,
    t: usize,
}

impl<'a> UavEnv<'a> {
    pub fn new(
        grid: &'a GridSpec,
        channel: &'a ChannelParams,
        snapshots: &'a [Vec<[f64; 2]>],
        assignment: &'a [usize],
        start: Vec<AgentState>,
    ) -> Self {
        Self {
            grid,
            channel,
            snapshots,
            assignment,
            current: start.clone(),
            start,
            t: 0,
        }
    }

    pub fn sum_rate_at(&self, states: &[AgentState], snapshot: usize) -> f64 {
        let uavs: Vec<UavState> = states.iter().map(|s| self.grid.uav(s)).collect();
        // every UAV sits at a positive altitude, so the geometry is never degenerate
        channel::sum_rate(self.assignment, &uavs, &self.snapshots[snapshot], self.channel).unwrap_or(0.0)
    }

    pub fn states(&self) -> &[AgentState] {
        &self.current
    }
}

impl MultiAgentEnv for UavEnv<'_> {
    fn n_agents(&self) -> usize {
        self.start.len()
    }

    fn n_states(&self) -> usize {
        self.grid.n_states()
    }

    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn reset(&mut self) -> Vec<usize> {
        self.current = self.start.clone();
        self.t = 0;
        self.current.iter().map(|s| self.grid.index(s)).collect()
    }

    fn step(&mut self, actions: &[usize]) -> Transition {
        let snap = self.t.min(self.snapshots.len() - 1);
        let next: Vec<AgentState> = self
            .current
            .iter()
            .zip(actions)
            .map(|(s, &a)| apply_action(s, ActionId(a), self.grid))
            .collect();
        let old = self.sum_rate_at(&self.current, snap);
        let new = self.sum_rate_at(&next, snap);
        let reward = global_reward(new, old);
        self.current = next;
        self.t += 1;
        Transition {
            next_states: self.current.iter().map(|s| self.grid.index(s)).collect(),
            rewards: vec![reward; actions.len()],
            metric: new,
        }
    }
}

/// Learning parameters shared by placement and trajectory training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlParams {
    pub learning_rate: f64,
    pub discount: f64,
    #[serde(default)]
    pub epsilon: EpsilonSchedule,
    pub placement_episodes: usize,
    pub placement_steps: usize,
    pub trajectory_episodes: usize,
    #[serde(default)]
    pub selection: SelectionRule,
    /// Retrain fresh tables from the committed state before every slot instead of
    /// training once on the whole predicted episode.
    #[serde(default)]
    pub replan_every_slot: bool,
    /// Look-ahead slots per replanning episode.
    #[serde(default = "default_replan_horizon")]
    pub replan_horizon: usize,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_record_every() -> usize {
    50
}

fn default_replan_horizon() -> usize {
    10
}

impl Default for RlParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            discount: 0.7,
            epsilon: EpsilonSchedule::default(),
            placement_episodes: 30,
            placement_steps: 5000,
            trajectory_episodes: 200,
            selection: SelectionRule::Summed,
            replan_every_slot: false,
            replan_horizon: default_replan_horizon(),
            record_every: default_record_every(),
        }
    }
}

impl RlParams {
    pub fn tables(&self, n_agents: usize, grid: &GridSpec) -> Result<QTableSet> {
        QTableSet::new(
            n_agents,
            grid.n_states(),
            N_ACTIONS,
            LearningRate::Constant {
                alpha: self.learning_rate,
            },
            self.discount,
            self.epsilon,
        )
    }
}

/// Each UAV above its cluster centroid at the middle altitude and lowest power.
pub fn centroid_above(centroids: &[[f64; 2]], grid: &GridSpec) -> Vec<AgentState> {
    centroids
        .iter()
        .map(|&c| {
            let (cell_x, cell_y) = grid.cell_of(c);
            AgentState {
                cell_x,
                cell_y,
                h_idx: grid.middle_altitude(),
                p_idx: 0,
            }
        })
        .collect()
}

/// Greedy rollout from `start` under the learned tables; returns the visited joint
/// states (start included) with their sum rates on `snapshot`.
pub fn greedy_rollout(
    env: &UavEnv<'_>,
    tables: &QTableSet,
    start: &[AgentState],
    steps: usize,
    rule: SelectionRule,
    allowed: &[usize],
    snapshot: usize,
) -> Vec<(Vec<AgentState>, f64)> {
    let allowed = allowed_or_all(allowed, N_ACTIONS);
    let mut cur = start.to_vec();
    let mut out = vec![(cur.clone(), env.sum_rate_at(&cur, snapshot))];
    for _ in 0..steps {
        let idx: Vec<usize> = cur.iter().map(|s| env.grid.index(s)).collect();
        let actions = tables.greedy(&idx, rule, &allowed);
        cur = cur
            .iter()
            .zip(&actions)
            .map(|(s, &a)| apply_action(s, ActionId(a), env.grid))
            .collect();
        let rate = env.sum_rate_at(&cur, snapshot);
        out.push((cur.clone(), rate));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub states: Vec<AgentState>,
    pub sum_rate: f64,
    pub baseline_sum_rate: f64,
    pub constraints: ConstraintReport,
    pub training: TrainOutcome,
    pub tables: QTableSet,
}

/// Learns an initial deployment on the t = 0 snapshot.
///
/// Training starts every episode from the centroid-above placement; the result is
/// the best joint state met on the greedy rollout of the learned tables, so it is
/// never worse than the centroid-above baseline.
#[allow(clippy::too_many_arguments)]
pub fn initial_placement(
    users_t0: &[[f64; 2]],
    assignment: &[usize],
    centroids: &[[f64; 2]],
    grid: &GridSpec,
    channel: &ChannelParams,
    limits: &Limits,
    rl: &RlParams,
    allowed: &[usize],
    seed: u64,
) -> Result<Placement> {
    let snapshots = [users_t0.to_vec()];
    let start = centroid_above(centroids, grid);
    let mut env = UavEnv::new(grid, channel, &snapshots, assignment, start.clone());
    let mut tables = rl.tables(start.len(), grid)?;
    let cfg = TrainConfig {
        episodes: rl.placement_episodes,
        steps_per_episode: rl.placement_steps,
        selection: rl.selection,
        allowed_actions: allowed.to_vec(),
        record_every: rl.record_every,
        seed: rng::derive_seed(seed, "placement", 0),
    };
    let training = train(&mut env, &mut tables, &cfg);
    let rollout = greedy_rollout(&env, &tables, &start, rl.placement_steps.min(4 * (grid.x_cells + grid.y_cells)), rl.selection, allowed, 0);
    let baseline_sum_rate = rollout[0].1;
    let (states, sum_rate) = rollout
        .into_iter()
        .fold(None::<(Vec<AgentState>, f64)>, |best, cand| match best {
            Some(b) if b.1 >= cand.1 => Some(b),
            _ => Some(cand),
        })
        .expect("rollout holds the start state");
    let uavs: Vec<UavState> = states.iter().map(|s| grid.uav(s)).collect();
    let constraints = channel::check_constraints(&uavs, assignment, users_t0, channel, limits);
    if !constraints.is_feasible() {
        log::warn!(
            "initial placement violates {} constraint(s); best-effort state kept",
            constraints.violations.len()
        );
    }
    Ok(Placement {
        states,
        sum_rate,
        baseline_sum_rate,
        constraints,
        training,
        tables,
    })
}

/// Q-tables as a self-describing JSON document.
pub fn export_tables(tables: &QTableSet, grid: &GridSpec) -> serde_json::Value {
    let rows: Vec<Vec<Vec<f64>>> = tables
        .tables
        .iter()
        .map(|t| (0..t.n_states()).map(|s| t.row(s).to_vec()).collect())
        .collect();
    serde_json::json!({
        "header": {
            "grid": grid,
            "power_levels": grid.power_levels,
            "epsilon_schedule": tables.epsilon,
            "discount": tables.discount,
            "learning_rate": tables.learning_rate,
            "episodes_done": tables.episodes_done,
            "actions": ActionId::all().map(|a| format!("{:?}+{:?}", a.movement(), a.power()).to_lowercase()).collect::<Vec<_>>(),
        },
        "tables": rows,
    })
}
