//! Discrete-time simulation of `n` data queues sharing one harvested energy
//! buffer.

mod arrival;
mod conversion;
mod state;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use arrival::{ArrivalModel, Distribution, MarkovArrivals};
pub(crate) use arrival::ArrivalSampler;
pub use conversion::{transmit_bits, ConversionFunction, ConversionTable};
pub(crate) use conversion::round_half_up;
pub use state::{feasible_actions, Action, ActionCatalog, StateCodec, SystemState};
pub(crate) use state::join;

use crate::{derive_seed, SimRng};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("infeasible action: total allocation {total} exceeds available energy {available} (sum of T > E)")]
    InfeasibleAction { total: u64, available: u32 },
    #[error("action has {got} components, system has {expected} nodes")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("policy returned an infeasible action at step {step}: total allocation {total} exceeds available energy {available}")]
    PolicyInfeasible { step: u64, total: u64, available: u32 },
}

/// Weights of the queue and energy terms in the stage cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub r1: f64,
    pub r2: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { r1: 1.0, r2: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub nodes: usize,
    pub d_max: u32,
    pub e_max: u32,
    #[serde(default)]
    pub conversion: ConversionFunction,
    #[serde(default)]
    pub cost_weights: CostWeights,
    pub arrival: ArrivalModel,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.nodes == 0 {
            return Err(EnvError::InvalidConfig("need at least one node".into()));
        }
        if self.d_max == 0 || self.e_max == 0 {
            return Err(EnvError::InvalidConfig("buffer capacities must be at least 1".into()));
        }
        let CostWeights { r1, r2 } = self.cost_weights;
        if !(0.0..=1.0).contains(&r1) || !(0.0..=1.0).contains(&r2) || (r1 + r2 - 1.0).abs() > 1e-9 {
            return Err(EnvError::InvalidConfig(format!(
                "cost weights must lie in [0,1] and sum to 1, got r1={r1}, r2={r2}"
            )));
        }
        self.conversion.validate(self.e_max)?;
        self.arrival.validate(self.nodes)
    }

    pub fn is_markov(&self) -> bool {
        self.arrival.is_markov()
    }

    pub fn initial_state(&self) -> SystemState {
        SystemState::empty(self.nodes, self.is_markov())
    }

    /// Key codec covering every reachable state of this system.
    pub fn codec(&self) -> StateCodec {
        let prev_caps = match &self.arrival {
            ArrivalModel::Iid { .. } => None,
            ArrivalModel::Markov(m) => Some((m.data_cap.unwrap_or(self.d_max), m.energy_cap.unwrap_or(self.e_max))),
        };
        StateCodec::new(self.nodes, self.d_max, self.e_max, prev_caps)
    }
}

/// `sum_i r1·(q_i − g(t_i))⁺ + r2·t_i`, with real-valued `g`.
pub fn stage_cost(state: &SystemState, action: &[u32], g: &ConversionFunction, weights: CostWeights) -> f64 {
    state
        .q
        .iter()
        .zip(action)
        .map(|(&q, &t)| weights.r1 * (q as f64 - g.eval(t as f64)).max(0.0) + weights.r2 * t as f64)
        .sum()
}

/// Arrivals realized during one slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arrivals {
    pub x: Vec<u32>,
    pub y: u32,
}

/// A simulated system: configuration, tabulated `g`, and arrival samplers.
///
/// Arrivals that do not fit in a buffer are dropped and counted.
#[derive(Clone, Debug)]
pub struct Environment {
    config: SystemConfig,
    table: ConversionTable,
    arrivals: ArrivalSampler,
    x: Vec<u32>,
    y: u32,
    pub dropped_data: u64,
    pub dropped_energy: u64,
}

impl Environment {
    pub fn new(config: SystemConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let table = ConversionTable::new(&config.conversion, config.e_max);
        let arrivals = ArrivalSampler::new(&config.arrival, config.d_max, config.e_max)?;
        let x = vec![0; config.nodes];
        Ok(Self { config, table, arrivals, x, y: 0, dropped_data: 0, dropped_energy: 0 })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn table(&self) -> &ConversionTable {
        &self.table
    }

    pub fn initial_state(&self) -> SystemState {
        self.config.initial_state()
    }

    /// Caps on the previous-arrival components of autoregressive states.
    pub fn arrival_caps(&self) -> Option<(u32, u32)> {
        self.arrivals.caps()
    }

    #[inline]
    pub fn stage_cost(&self, state: &SystemState, action: &[u32]) -> f64 {
        let w = self.config.cost_weights;
        state
            .q
            .iter()
            .zip(action)
            .map(|(&q, &t)| w.r1 * (q as f64 - self.table.real(t)).max(0.0) + w.r2 * t as f64)
            .sum()
    }

    pub fn check_action(&self, state: &SystemState, action: &[u32]) -> Result<(), EnvError> {
        if action.len() != self.config.nodes {
            return Err(EnvError::DimensionMismatch { expected: self.config.nodes, got: action.len() });
        }
        let total: u64 = action.iter().map(|&t| t as u64).sum();
        if total > state.e as u64 {
            return Err(EnvError::InfeasibleAction { total, available: state.e });
        }
        Ok(())
    }

    /// Applies `action` in place and samples the slot's arrivals.
    #[inline]
    pub fn advance(&mut self, state: &mut SystemState, action: &[u32], rng: &mut SimRng) -> Result<(), EnvError> {
        self.check_action(state, action)?;
        let y = self.arrivals.sample(state.prev_x.as_deref(), state.prev_y, &mut self.x, rng);
        self.y = y;
        let d_max = self.config.d_max;
        let mut spent = 0u32;
        for ((q, &t), &x) in state.q.iter_mut().zip(action).zip(&self.x) {
            spent += t;
            let level = q.saturating_sub(self.table.bits(t)) as u64 + x as u64;
            if level > d_max as u64 {
                self.dropped_data += level - d_max as u64;
            }
            *q = level.min(d_max as u64) as u32;
        }
        let level = (state.e - spent) as u64 + y as u64;
        let e_max = self.config.e_max as u64;
        if level > e_max {
            self.dropped_energy += level - e_max;
        }
        state.e = level.min(e_max) as u32;
        if let Some(prev) = state.prev_x.as_mut() {
            prev.copy_from_slice(&self.x);
            state.prev_y = Some(y);
        }
        Ok(())
    }

    /// Arrivals sampled by the most recent [`advance`](Self::advance).
    pub fn last_arrivals(&self) -> Arrivals {
        Arrivals { x: self.x.clone(), y: self.y }
    }

    pub fn step(&mut self, state: &SystemState, action: &Action, rng: &mut SimRng) -> Result<(SystemState, Arrivals), EnvError> {
        let mut next = state.clone();
        self.advance(&mut next, &action.0, rng)?;
        Ok((next, self.last_arrivals()))
    }
}

/// A stationary policy, deterministic or randomized.
pub trait Policy {
    fn act(&self, state: &SystemState, rng: &mut SimRng) -> Action;
}

impl<F> Policy for F
where
    F: Fn(&SystemState, &mut SimRng) -> Action,
{
    fn act(&self, state: &SystemState, rng: &mut SimRng) -> Action {
        self(state, rng)
    }
}

/// Policies whose per-state action law is known in closed form.
pub trait ActionLaw {
    /// `(action, probability)` pairs; probabilities sum to one.
    fn action_law(&self, state: &SystemState) -> Vec<(Action, f64)>;
}

/// Uniform choice among all feasible allocations.
#[derive(Clone, Debug, Default)]
pub struct UniformRandomPolicy;

impl Policy for UniformRandomPolicy {
    fn act(&self, state: &SystemState, rng: &mut SimRng) -> Action {
        let acts = feasible_actions(state);
        acts[rng.random_range(0..acts.len())].clone()
    }
}

impl ActionLaw for UniformRandomPolicy {
    fn action_law(&self, state: &SystemState) -> Vec<(Action, f64)> {
        let acts = feasible_actions(state);
        let p = 1.0 / acts.len() as f64;
        acts.into_iter().map(|a| (a, p)).collect()
    }
}

/// Long-run averages along one simulated trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub avg_cost: f64,
    pub avg_queue_sum: f64,
    pub dropped_data: u64,
    pub dropped_energy: u64,
}

/// Runs `policy` for `horizon` slots from the all-empty state.
///
/// Arrivals and policy randomization draw from separate streams derived
/// from `seed`, so two policies evaluated with one seed see identical
/// arrival sequences.
pub fn evaluate_policy(policy: &dyn Policy, config: &SystemConfig, horizon: u64, seed: u64) -> Result<Evaluation, EnvError> {
    if horizon == 0 {
        return Err(EnvError::InvalidConfig("horizon must be at least 1".into()));
    }
    let mut env = Environment::new(config.clone())?;
    let mut env_rng = SimRng::seed_from_u64(derive_seed(seed, &[0]));
    let mut policy_rng = SimRng::seed_from_u64(derive_seed(seed, &[1]));
    let mut state = env.initial_state();
    let (mut cost, mut queue) = (0.0, 0.0);
    for step in 0..horizon {
        let action = policy.act(&state, &mut policy_rng);
        if let Err(err) = env.check_action(&state, &action.0) {
            return Err(match err {
                EnvError::InfeasibleAction { total, available } => EnvError::PolicyInfeasible { step, total, available },
                other => other,
            });
        }
        cost += env.stage_cost(&state, &action.0);
        queue += state.queue_sum() as f64;
        env.advance(&mut state, &action.0, &mut env_rng)?;
    }
    Ok(Evaluation {
        avg_cost: cost / horizon as f64,
        avg_queue_sum: queue / horizon as f64,
        dropped_data: env.dropped_data,
        dropped_energy: env.dropped_energy,
    })
}
