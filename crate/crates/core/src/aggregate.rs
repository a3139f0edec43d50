//! State aggregation: buffer levels are grouped into contiguous partitions
//! and the learner works with partition indices instead of exact levels.
//!
//! Partition indices are 1-based in the public types, as are the energy
//! levels an aggregate action assigns to each node.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, SystemConfig, SystemState};
use crate::qlearn::{learn, LearnError, LearnedPolicy, LearnerConfig, StateAbstraction, TrainOutcome};
use crate::share::{share_distribution, share_units};
use crate::SimRng;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("invalid partition scheme: {0}")]
    InvalidScheme(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
}

/// Contiguous intervals covering `0..=d_max` for data and `0..=e_max` for
/// energy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionScheme {
    data: Vec<(u32, u32)>,
    energy: Vec<(u32, u32)>,
    data_index: Vec<u32>,
    energy_index: Vec<u32>,
}

/// Near-equal integer intervals; the remainder widens the top intervals.
pub fn equal_width_cuts(cap: u32, count: u32) -> Vec<(u32, u32)> {
    let levels = cap + 1;
    let count = count.clamp(1, levels);
    let (base, extra) = (levels / count, levels % count);
    let mut lo = 0;
    (0..count)
        .map(|k| {
            let width = base + u32::from(k >= count - extra);
            let cut = (lo, lo + width - 1);
            lo += width;
            cut
        })
        .collect()
}

fn check_cuts(cuts: &[(u32, u32)], cap: u32, what: &str) -> Result<Vec<u32>, AggregateError> {
    let bad = |msg: String| Err(AggregateError::InvalidScheme(format!("{what} partitions: {msg}")));
    if cuts.is_empty() {
        return bad("need at least one interval".into());
    }
    if cuts[0].0 != 0 {
        return bad(format!("first interval must start at 0, starts at {}", cuts[0].0));
    }
    if cuts[cuts.len() - 1].1 != cap {
        return bad(format!("last interval must end at {cap}, ends at {}", cuts[cuts.len() - 1].1));
    }
    for (k, &(lo, hi)) in cuts.iter().enumerate() {
        if lo > hi {
            return bad(format!("interval {} is empty ({lo}..{hi})", k + 1));
        }
        if k + 1 < cuts.len() && hi + 1 != cuts[k + 1].0 {
            return bad(format!("intervals {} and {} are not contiguous", k + 1, k + 2));
        }
    }
    let mut index = vec![0; cap as usize + 1];
    for (k, &(lo, hi)) in cuts.iter().enumerate() {
        for v in lo..=hi {
            index[v as usize] = k as u32 + 1;
        }
    }
    Ok(index)
}

impl PartitionScheme {
    pub fn from_cuts(data: Vec<(u32, u32)>, energy: Vec<(u32, u32)>, d_max: u32, e_max: u32) -> Result<Self, AggregateError> {
        let data_index = check_cuts(&data, d_max, "data")?;
        let energy_index = check_cuts(&energy, e_max, "energy")?;
        Ok(Self { data, energy, data_index, energy_index })
    }

    pub fn equal_width(d_max: u32, data_parts: u32, e_max: u32, energy_parts: u32) -> Result<Self, AggregateError> {
        if data_parts == 0 || energy_parts == 0 || data_parts > d_max + 1 || energy_parts > e_max + 1 {
            return Err(AggregateError::InvalidScheme(format!(
                "{data_parts} data / {energy_parts} energy partitions do not fit capacities {d_max} / {e_max}"
            )));
        }
        Self::from_cuts(equal_width_cuts(d_max, data_parts), equal_width_cuts(e_max, energy_parts), d_max, e_max)
    }

    /// One partition per buffer level.
    pub fn singletons(d_max: u32, e_max: u32) -> Self {
        Self::equal_width(d_max, d_max + 1, e_max, e_max + 1).expect("singleton partitions are always valid")
    }

    pub fn data_cuts(&self) -> &[(u32, u32)] {
        &self.data
    }

    pub fn energy_cuts(&self) -> &[(u32, u32)] {
        &self.energy
    }

    /// Number of data partitions `s`.
    pub fn data_parts(&self) -> u32 {
        self.data.len() as u32
    }

    /// Number of energy partitions `r`.
    pub fn energy_parts(&self) -> u32 {
        self.energy.len() as u32
    }

    /// 1-based partition containing data level `q`.
    #[inline]
    pub fn data_level(&self, q: u32) -> u32 {
        self.data_index[q as usize]
    }

    /// 1-based partition containing energy level `e`.
    #[inline]
    pub fn energy_level(&self, e: u32) -> u32 {
        self.energy_index[e as usize]
    }

    /// `(lower, upper)` bounds of 1-based energy partition `level`.
    #[inline]
    pub fn energy_bounds(&self, level: u32) -> (u32, u32) {
        self.energy[level as usize - 1]
    }
}

/// How a partition scheme is written in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionSpec {
    /// Equal-width partitions with the given counts.
    Count { data: u32, energy: u32 },
    /// Explicit inclusive intervals.
    Cuts { data: Vec<(u32, u32)>, energy: Vec<(u32, u32)> },
    /// One partition per level.
    Singletons,
}

impl PartitionSpec {
    pub fn build(&self, d_max: u32, e_max: u32) -> Result<PartitionScheme, AggregateError> {
        match self {
            PartitionSpec::Count { data, energy } => PartitionScheme::equal_width(d_max, *data, e_max, *energy),
            PartitionSpec::Cuts { data, energy } => PartitionScheme::from_cuts(data.clone(), energy.clone(), d_max, e_max),
            PartitionSpec::Singletons => Ok(PartitionScheme::singletons(d_max, e_max)),
        }
    }
}

/// Data partition per node plus the energy partition, all 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AggregateState {
    pub levels: Vec<u32>,
    pub energy_level: u32,
}

/// Energy partition per node, each in `1..=energy_level` of the state.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AggregateAction(pub Vec<u32>);

pub fn aggregate(state: &SystemState, scheme: &PartitionScheme) -> AggregateState {
    AggregateState {
        levels: state.q.iter().map(|&q| scheme.data_level(q)).collect(),
        energy_level: scheme.energy_level(state.e),
    }
}

/// All `(l^{n+1})^n` aggregate actions, in lexicographic order.
pub fn feasible_aggregate_actions(state: &AggregateState) -> Vec<AggregateAction> {
    let n = state.levels.len();
    let l = state.energy_level as usize;
    (0..l.pow(n as u32)).map(|k| decode_action(k, n, state.energy_level)).collect()
}

/// Lexicographic rank `k` of an action with `n` components in `1..=l`.
fn decode_action(mut k: usize, n: usize, l: u32) -> AggregateAction {
    let mut t = vec![0; n];
    for slot in t.iter_mut().rev() {
        *slot = (k % l as usize) as u32 + 1;
        k /= l as usize;
    }
    AggregateAction(t)
}

/// Writes the per-node lower bounds into `out`, truncating them when their
/// sum exceeds `state.e`. Returns whether truncation happened.
///
/// Truncation serves nodes in descending order of queue length, ties to the
/// lower index: each gets its full lower bound while energy lasts, the first
/// node that cannot be fully served gets what is left, later nodes nothing.
fn lower_bounds(state: &SystemState, t: &[u32], scheme: &PartitionScheme, out: &mut [u32]) -> bool {
    for (o, &level) in out.iter_mut().zip(t) {
        *o = scheme.energy_bounds(level).0;
    }
    let need: u64 = out.iter().map(|&v| v as u64).sum();
    if need <= state.e as u64 {
        return false;
    }
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| state.q[b].cmp(&state.q[a]).then(a.cmp(&b)));
    let mut left = state.e;
    for i in order {
        let give = out[i].min(left);
        out[i] = give;
        left -= give;
    }
    true
}

fn upper_bounds(t: &[u32], scheme: &PartitionScheme) -> Vec<u32> {
    t.iter().map(|&level| scheme.energy_bounds(level).1).collect()
}

fn queue_weights(state: &SystemState) -> Vec<f64> {
    state.q.iter().map(|&q| q as f64).collect()
}

/// Materializes an aggregate action: lower bounds first, then the rest of
/// the buffer unit by unit in proportion to queue lengths, never above a
/// node's partition upper bound. Units no node can take stay in the buffer.
/// Returns whether lower bounds had to be truncated.
pub fn distribute_energy_into(state: &SystemState, t: &[u32], scheme: &PartitionScheme, out: &mut [u32], rng: &mut SimRng) -> bool {
    let truncated = lower_bounds(state, t, scheme, out);
    let used: u32 = out.iter().sum();
    let rem = state.e - used;
    if rem > 0 && !truncated && state.queue_sum() > 0 {
        share_units(rem, &queue_weights(state), Some(&upper_bounds(t, scheme)), out, rng);
    }
    truncated
}

/// Result of [`distribute_energy`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Distributed {
    pub action: Action,
    /// Lower bounds were unaffordable and had to be cut back.
    pub truncated: bool,
}

pub fn distribute_energy(state: &SystemState, t: &AggregateAction, scheme: &PartitionScheme, rng: &mut SimRng) -> Distributed {
    let mut out = vec![0; state.q.len()];
    let truncated = distribute_energy_into(state, &t.0, scheme, &mut out, rng);
    Distributed { action: Action(out), truncated }
}

/// Exact law of [`distribute_energy`].
pub fn distribute_energy_law(state: &SystemState, t: &AggregateAction, scheme: &PartitionScheme) -> Vec<(Action, f64)> {
    let mut base = vec![0; state.q.len()];
    let truncated = lower_bounds(state, &t.0, scheme, &mut base);
    let rem = state.e - base.iter().sum::<u32>();
    if rem == 0 || truncated || state.queue_sum() == 0 {
        return vec![(Action(base), 1.0)];
    }
    share_distribution(rem, &queue_weights(state), Some(&upper_bounds(&t.0, scheme)), &base)
        .into_iter()
        .map(|(a, p)| (Action(a), p))
        .collect()
}

/// Aggregate state-action view for the learner. Keys are the 0-based
/// partition indices in mixed radix, node 1 most significant, energy last.
#[derive(Debug)]
pub struct AggregateStates {
    scheme: PartitionScheme,
    nodes: usize,
    truncations: AtomicU64,
}

impl Clone for AggregateStates {
    fn clone(&self) -> Self {
        Self { scheme: self.scheme.clone(), nodes: self.nodes, truncations: AtomicU64::new(self.truncations()) }
    }
}

impl AggregateStates {
    pub fn new(config: &SystemConfig, scheme: PartitionScheme) -> Result<Self, AggregateError> {
        if scheme.data_index.len() != config.d_max as usize + 1 || scheme.energy_index.len() != config.e_max as usize + 1 {
            return Err(AggregateError::InvalidScheme("scheme does not match the buffer capacities".into()));
        }
        Ok(Self { scheme, nodes: config.nodes, truncations: AtomicU64::new(0) })
    }

    pub fn scheme(&self) -> &PartitionScheme {
        &self.scheme
    }

    /// How many materialized actions needed truncated lower bounds.
    pub fn truncations(&self) -> u64 {
        self.truncations.load(Ordering::Relaxed)
    }

    pub fn encode(&self, s: &AggregateState) -> u64 {
        let (sp, rp) = (self.scheme.data_parts() as u64, self.scheme.energy_parts() as u64);
        let key = s.levels.iter().fold(0u64, |k, &l| k * sp + (l - 1) as u64);
        key * rp + (s.energy_level - 1) as u64
    }

    pub fn decode(&self, mut key: u64) -> AggregateState {
        let (sp, rp) = (self.scheme.data_parts() as u64, self.scheme.energy_parts() as u64);
        let energy_level = (key % rp) as u32 + 1;
        key /= rp;
        let mut levels = vec![0; self.nodes];
        for slot in levels.iter_mut().rev() {
            *slot = (key % sp) as u32 + 1;
            key /= sp;
        }
        AggregateState { levels, energy_level }
    }

    /// Aggregate action with lexicographic rank `index` in `state`.
    pub fn action(&self, state: &SystemState, index: usize) -> AggregateAction {
        decode_action(index, self.nodes, self.scheme.energy_level(state.e))
    }
}

impl StateAbstraction for AggregateStates {
    #[inline]
    fn key(&self, state: &SystemState) -> u64 {
        let (sp, rp) = (self.scheme.data_parts() as u64, self.scheme.energy_parts() as u64);
        let key = state.q.iter().fold(0u64, |k, &q| k * sp + (self.scheme.data_level(q) - 1) as u64);
        key * rp + (self.scheme.energy_level(state.e) - 1) as u64
    }

    #[inline]
    fn num_actions(&self, state: &SystemState) -> usize {
        (self.scheme.energy_level(state.e) as usize).pow(self.nodes as u32)
    }

    fn realize(&self, state: &SystemState, action: usize, out: &mut [u32], rng: &mut SimRng) {
        let t = self.action(state, action);
        if distribute_energy_into(state, &t.0, &self.scheme, out, rng) {
            self.truncations.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn realize_law(&self, state: &SystemState, action: usize) -> Vec<(Action, f64)> {
        distribute_energy_law(state, &self.action(state, action), &self.scheme)
    }

    /// Lowest data partitions with the top energy partition.
    fn default_reference(&self) -> u64 {
        self.scheme.energy_parts() as u64 - 1
    }
}

pub type AggregatePolicy = LearnedPolicy<AggregateStates>;

/// Q-learning over aggregate states and actions.
pub fn train_qlsa(
    config: &SystemConfig,
    scheme: &PartitionScheme,
    learner: &LearnerConfig,
) -> Result<TrainOutcome<AggregateStates>, AggregateError> {
    let abstraction = AggregateStates::new(config, scheme.clone())?;
    Ok(learn(config, abstraction, learner)?)
}

/// Exact `|S′×A′| = s^n · Σ_{l=1..r} l^n`.
pub fn aggregate_pair_count(nodes: u32, data_parts: u32, energy_parts: u32) -> u128 {
    let states = (data_parts as u128).pow(nodes);
    states * (1..=energy_parts as u128).map(|l| l.pow(nodes)).sum::<u128>()
}

/// Box bound `s^n · r · r^n` on `|S′×A′|`.
pub fn aggregate_pair_bound(nodes: u32, data_parts: u32, energy_parts: u32) -> u128 {
    (data_parts as u128).pow(nodes) * (energy_parts as u128).pow(nodes + 1)
}

/// Box bound `(d_max+1)^n · (e_max+1) · (e_max+1)^n` on the unaggregated
/// `|S×A|`; the exact count is [`crate::exact::pair_count`].
pub fn full_pair_bound(nodes: u32, d_max: u32, e_max: u32) -> u128 {
    (d_max as u128 + 1).pow(nodes) * (e_max as u128 + 1).pow(nodes + 1)
}
