//! Relative-value Q-learning over a keyed view of the system state.
//!
//! The learner sees states through a [`StateAbstraction`]: the full state
//! for plain Q-learning, `(Σq, E)` for the combined-nodes baseline, or
//! partition indices for the aggregated learner. Each abstraction also
//! turns its action indices into concrete allocations.

use rand::{Rng, SeedableRng};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    Action, ActionCatalog, ActionLaw, EnvError, Environment, Policy, StateCodec, SystemConfig, SystemState,
};
use crate::share::{share_distribution, share_units};
use crate::{derive_seed, SimRng};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("invalid learner settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Q-values and visit counters of one state.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub q: Vec<f64>,
    pub visits: Vec<u64>,
    /// Sum of `visits`.
    pub total: u64,
    acc: Vec<f64>,
    since: Vec<u64>,
}

impl Row {
    fn new(actions: usize, now: u64) -> Self {
        Self { q: vec![0.0; actions], visits: vec![0; actions], total: 0, acc: vec![0.0; actions], since: vec![now; actions] }
    }

    fn min(&self) -> f64 {
        self.q.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Sparse Q-table; rows are created on first visit and missing entries
/// read as zero.
///
/// The table can also keep the time average of every entry from a given
/// step onwards, for extracting a policy that is less sensitive to the
/// fluctuations of constant-step iterates.
#[derive(Clone, Debug, Default)]
pub struct QTable {
    rows: FxHashMap<u64, Row>,
    clock: u64,
    average_from: Option<u64>,
}

impl QTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Averages every entry over the steps from `start` onwards.
    pub fn with_averaging(start: u64) -> Self {
        Self { average_from: Some(start), ..Self::default() }
    }

    /// Sets the current step, used to weight entries in the time average.
    #[inline]
    pub fn set_clock(&mut self, step: u64) {
        self.clock = step;
    }

    /// Time average of `Q(key, ·)` over the averaging window up to the
    /// current step, or the current values when averaging is off or the
    /// window is empty.
    pub fn averaged(&self, key: u64) -> Option<Vec<f64>> {
        let row = self.rows.get(&key)?;
        let Some(start) = self.average_from.filter(|&s| self.clock > s) else {
            return Some(row.q.clone());
        };
        let span = (self.clock - start) as f64;
        Some(
            row.q
                .iter()
                .zip(&row.acc)
                .zip(&row.since)
                .map(|((&q, &acc), &since)| (acc + q * (self.clock - since.max(start)) as f64) / span)
                .collect(),
        )
    }

    pub fn row(&self, key: u64) -> Option<&Row> {
        self.rows.get(&key)
    }

    pub fn row_mut(&mut self, key: u64, actions: usize) -> &mut Row {
        let now = self.clock;
        self.rows.entry(key).or_insert_with(|| Row::new(actions, now))
    }

    pub fn value(&self, key: u64, action: usize) -> f64 {
        self.rows.get(&key).map_or(0.0, |r| r.q[action])
    }

    /// `min_a Q(key, a)`, zero for an unvisited state.
    #[inline]
    pub fn min_value(&self, key: u64) -> f64 {
        self.rows.get(&key).map_or(0.0, Row::min)
    }

    /// Lowest-index minimizer of `Q(key, ·)`, 0 for an unvisited state.
    pub fn greedy_action(&self, key: u64) -> usize {
        self.rows.get(&key).map_or(0, |r| argmin(&r.q))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &Row)> {
        self.rows.iter().map(|(&k, r)| (k, r))
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.values().flat_map(|r| r.q.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSize {
    Constant { alpha: f64 },
    /// `c / ceil(k / stride)^exponent`.
    Polynomial { c: f64, exponent: f64, stride: u64 },
}

impl Default for StepSize {
    fn default() -> Self {
        StepSize::Constant { alpha: 0.1 }
    }
}

impl StepSize {
    /// Step size at iteration `k`, counted from 1.
    #[inline]
    pub fn value(&self, k: u64) -> f64 {
        match *self {
            StepSize::Constant { alpha } => alpha,
            StepSize::Polynomial { c, exponent, stride } => c / (k.div_ceil(stride.max(1)).max(1) as f64).powf(exponent),
        }
    }

    fn validate(&self) -> Result<(), LearnError> {
        let ok = match *self {
            StepSize::Constant { alpha } => alpha > 0.0 && alpha <= 1.0,
            StepSize::Polynomial { c, exponent, stride } => c > 0.0 && c <= 1.0 && exponent > 0.5 && exponent <= 1.0 && stride > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(LearnError::InvalidSettings(format!("invalid step size {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Exploration {
    EpsilonGreedy { epsilon: f64 },
    Ucb { beta: f64 },
}

impl Default for Exploration {
    fn default() -> Self {
        Exploration::EpsilonGreedy { epsilon: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    #[serde(default)]
    pub step_size: StepSize,
    #[serde(default)]
    pub exploration: Exploration,
    /// Key of the reference state; `None` uses the abstraction's default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_key: Option<u64>,
    pub iterations: u64,
    #[serde(default)]
    pub seed: u64,
    /// Iterations between learning-curve samples; 0 disables the curve.
    #[serde(default)]
    pub curve_stride: u64,
    /// Fraction of the run, counted back from its end, over which Q-values
    /// are time-averaged before extracting the greedy policy. 0 uses the
    /// final table.
    #[serde(default = "default_average_tail")]
    pub average_tail: f64,
}

fn default_average_tail() -> f64 {
    0.5
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            step_size: StepSize::default(),
            exploration: Exploration::default(),
            reference_key: None,
            iterations: 1_000_000,
            seed: 0,
            curve_stride: 0,
            average_tail: 0.5,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        self.step_size.validate()?;
        if !(0.0..=1.0).contains(&self.average_tail) {
            return Err(LearnError::InvalidSettings(format!("average_tail must lie in [0,1], got {}", self.average_tail)));
        }
        match self.exploration {
            Exploration::EpsilonGreedy { epsilon } if !(epsilon > 0.0 && epsilon < 1.0) => {
                Err(LearnError::InvalidSettings(format!("epsilon must lie in (0,1), got {epsilon}")))
            }
            Exploration::Ucb { beta } if !(beta > 0.0 && beta.is_finite()) => {
                Err(LearnError::InvalidSettings(format!("UCB beta must be positive, got {beta}")))
            }
            _ => Ok(()),
        }
    }
}

/// Picks an action index for state `key` with `actions` choices.
pub fn select_action(table: &QTable, key: u64, actions: usize, exploration: &Exploration, rng: &mut SimRng) -> usize {
    if actions <= 1 {
        return 0;
    }
    let row = table.row(key);
    match *exploration {
        Exploration::EpsilonGreedy { epsilon } => {
            let best = row.map_or(0, |r| argmin(&r.q));
            if rng.random::<f64>() >= epsilon {
                best
            } else {
                let r = rng.random_range(0..actions - 1);
                if r >= best {
                    r + 1
                } else {
                    r
                }
            }
        }
        Exploration::Ucb { beta } => {
            let Some(row) = row else { return 0 };
            if let Some(a) = row.visits.iter().position(|&v| v == 0) {
                return a;
            }
            let log_n = (row.total as f64).ln();
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (a, (&q, &v)) in row.q.iter().zip(&row.visits).enumerate() {
                let score = -q + beta * (log_n / v as f64).sqrt();
                if score > best_score {
                    best = a;
                    best_score = score;
                }
            }
            best
        }
    }
}

/// `Q(i,a) ← (1−α)Q(i,a) + α[c + min_b Q(j,b) − min_u Q(r,u)]`, then bumps
/// the visit counters of `(i, a)`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn q_update(table: &mut QTable, i: u64, actions_i: usize, a: usize, cost: f64, j: u64, reference: u64, alpha: f64) {
    let target = cost + table.min_value(j) - table.min_value(reference);
    let (now, start) = (table.clock, table.average_from);
    let row = table.row_mut(i, actions_i);
    if let Some(start) = start.filter(|&s| now > s) {
        let from = row.since[a].max(start);
        row.acc[a] += row.q[a] * (now - from) as f64;
        row.since[a] = now;
    }
    row.q[a] = (1.0 - alpha) * row.q[a] + alpha * target;
    row.visits[a] += 1;
    row.total += 1;
}

/// A keyed view of the system state with its own action set.
pub trait StateAbstraction {
    fn key(&self, state: &SystemState) -> u64;
    fn num_actions(&self, state: &SystemState) -> usize;
    /// Writes the allocation for `action` into `out`, which is overwritten.
    fn realize(&self, state: &SystemState, action: usize, out: &mut [u32], rng: &mut SimRng);
    /// Exact law of [`realize`](Self::realize).
    fn realize_law(&self, state: &SystemState, action: usize) -> Vec<(Action, f64)>;
    /// Reference state used when the learner names none: empty queues
    /// with a full energy buffer. This state recurs often under any
    /// reasonable policy, which keeps the subtracted value current.
    fn default_reference(&self) -> u64;
}

/// The full state with all feasible allocations, in lexicographic order.
#[derive(Clone, Debug)]
pub struct FullStates {
    codec: StateCodec,
    catalog: ActionCatalog,
    reference: u64,
}

impl FullStates {
    pub fn new(config: &SystemConfig) -> Self {
        let mut reference = config.initial_state();
        reference.e = config.e_max;
        let codec = config.codec();
        Self { reference: codec.encode(&reference), codec, catalog: ActionCatalog::new(config.nodes, config.e_max) }
    }

    pub fn codec(&self) -> &StateCodec {
        &self.codec
    }
}

impl StateAbstraction for FullStates {
    #[inline]
    fn key(&self, state: &SystemState) -> u64 {
        self.codec.encode(state)
    }

    #[inline]
    fn num_actions(&self, state: &SystemState) -> usize {
        self.catalog.count(state.e)
    }

    #[inline]
    fn realize(&self, state: &SystemState, action: usize, out: &mut [u32], _rng: &mut SimRng) {
        out.copy_from_slice(self.catalog.get(state.e, action));
    }

    fn realize_law(&self, state: &SystemState, action: usize) -> Vec<(Action, f64)> {
        vec![(Action(self.catalog.get(state.e, action).to_vec()), 1.0)]
    }

    fn default_reference(&self) -> u64 {
        self.reference
    }
}

/// `(Σq, E)` with a scalar energy budget `0..=E`, shared among nodes in
/// proportion to their queues.
#[derive(Clone, Debug)]
pub struct CombinedStates {
    e_max: u32,
}

impl CombinedStates {
    pub fn new(config: &SystemConfig) -> Self {
        Self { e_max: config.e_max }
    }

    /// `(total_q, e)` of a key.
    pub fn decode(&self, key: u64) -> (u64, u32) {
        (key / (self.e_max as u64 + 1), (key % (self.e_max as u64 + 1)) as u32)
    }
}

fn queue_weights(state: &SystemState) -> Vec<f64> {
    state.q.iter().map(|&q| q as f64).collect()
}

impl StateAbstraction for CombinedStates {
    #[inline]
    fn key(&self, state: &SystemState) -> u64 {
        state.queue_sum() * (self.e_max as u64 + 1) + state.e as u64
    }

    #[inline]
    fn num_actions(&self, state: &SystemState) -> usize {
        state.e as usize + 1
    }

    fn realize(&self, state: &SystemState, action: usize, out: &mut [u32], rng: &mut SimRng) {
        out.fill(0);
        if state.queue_sum() > 0 {
            share_units(action as u32, &queue_weights(state), None, out, rng);
        }
    }

    fn realize_law(&self, state: &SystemState, action: usize) -> Vec<(Action, f64)> {
        let zero = vec![0; state.q.len()];
        if state.queue_sum() == 0 {
            return vec![(Action(zero), 1.0)];
        }
        share_distribution(action as u32, &queue_weights(state), None, &zero)
            .into_iter()
            .map(|(a, p)| (Action(a), p))
            .collect()
    }

    fn default_reference(&self) -> u64 {
        self.e_max as u64
    }
}

/// Greedy policy `argmin_a Q(key, a)` over an abstraction. States missing
/// from the table use action 0.
#[derive(Clone, Debug)]
pub struct LearnedPolicy<A> {
    abstraction: A,
    choice: FxHashMap<u64, usize>,
}

pub type TabularPolicy = LearnedPolicy<FullStates>;
pub type CombinedPolicy = LearnedPolicy<CombinedStates>;

impl<A: StateAbstraction> LearnedPolicy<A> {
    /// Greedy with respect to the table, or its time average when the
    /// table keeps one.
    pub fn from_table(abstraction: A, table: &QTable) -> Self {
        let choice = table.iter().map(|(k, _)| (k, argmin(&table.averaged(k).expect("key from table")))).collect();
        Self { abstraction, choice }
    }

    pub fn from_entries(abstraction: A, entries: impl IntoIterator<Item = (u64, usize)>) -> Self {
        Self { abstraction, choice: entries.into_iter().collect() }
    }

    pub fn abstraction(&self) -> &A {
        &self.abstraction
    }

    pub fn choice(&self, key: u64) -> usize {
        self.choice.get(&key).copied().unwrap_or(0)
    }

    /// `(key, action index)` pairs sorted by key.
    pub fn entries(&self) -> Vec<(u64, usize)> {
        let mut v: Vec<_> = self.choice.iter().map(|(&k, &a)| (k, a)).collect();
        v.sort_unstable();
        v
    }
}

impl<A: StateAbstraction> Policy for LearnedPolicy<A> {
    fn act(&self, state: &SystemState, rng: &mut SimRng) -> Action {
        let a = self.choice(self.abstraction.key(state));
        let mut out = vec![0; state.q.len()];
        self.abstraction.realize(state, a, &mut out, rng);
        Action(out)
    }
}

impl<A: StateAbstraction> ActionLaw for LearnedPolicy<A> {
    fn action_law(&self, state: &SystemState) -> Vec<(Action, f64)> {
        self.abstraction.realize_law(state, self.choice(self.abstraction.key(state)))
    }
}

/// Running average of the training cost after `iteration` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub avg_cost: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<A> {
    pub table: QTable,
    pub policy: LearnedPolicy<A>,
    pub curve: Vec<CurvePoint>,
}

/// Runs one training trajectory from the all-empty state.
pub fn learn<A: StateAbstraction + Clone>(
    config: &SystemConfig,
    abstraction: A,
    learner: &LearnerConfig,
) -> Result<TrainOutcome<A>, LearnError> {
    learner.validate()?;
    let mut env = Environment::new(config.clone())?;
    let mut env_rng = SimRng::seed_from_u64(derive_seed(learner.seed, &[0]));
    let mut rng = SimRng::seed_from_u64(derive_seed(learner.seed, &[1]));
    let tail = (learner.iterations as f64 * learner.average_tail).floor() as u64;
    let mut table = if tail > 0 { QTable::with_averaging(learner.iterations - tail + 1) } else { QTable::new() };
    let mut curve = Vec::new();
    let mut state = env.initial_state();
    let mut alloc = vec![0; config.nodes];
    let mut i = abstraction.key(&state);
    let mut n_i = abstraction.num_actions(&state);
    let reference = learner.reference_key.unwrap_or_else(|| abstraction.default_reference());
    let mut total = 0.0;
    for k in 1..=learner.iterations {
        table.set_clock(k);
        let a = select_action(&table, i, n_i, &learner.exploration, &mut rng);
        abstraction.realize(&state, a, &mut alloc, &mut rng);
        let cost = env.stage_cost(&state, &alloc);
        env.advance(&mut state, &alloc, &mut env_rng)?;
        let j = abstraction.key(&state);
        q_update(&mut table, i, n_i, a, cost, j, reference, learner.step_size.value(k));
        total += cost;
        if learner.curve_stride > 0 && k % learner.curve_stride == 0 {
            curve.push(CurvePoint { iteration: k, avg_cost: total / k as f64 });
        }
        i = j;
        n_i = abstraction.num_actions(&state);
    }
    table.set_clock(learner.iterations + 1);
    let policy = LearnedPolicy::from_table(abstraction, &table);
    Ok(TrainOutcome { table, policy, curve })
}

/// Q-learning over the full state and all feasible allocations.
pub fn train(config: &SystemConfig, learner: &LearnerConfig) -> Result<TrainOutcome<FullStates>, LearnError> {
    learn(config, FullStates::new(config), learner)
}

/// Q-learning of the total energy budget over `(Σq, E)`.
pub fn train_combined(config: &SystemConfig, learner: &LearnerConfig) -> Result<TrainOutcome<CombinedStates>, LearnError> {
    learn(config, CombinedStates::new(config), learner)
}
