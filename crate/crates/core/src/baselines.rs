//! Greedy allocation: spend what the current queues need, up to the buffer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{round_half_up, Action, ActionLaw, ConversionFunction, Policy, SystemState};
use crate::share::{share_distribution, share_units};
use crate::SimRng;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("greedy allocation needs an invertible conversion function, got {0:?}")]
    NonInvertible(ConversionFunction),
}

/// How the budget is split among nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// Proportional to the energy each queue needs, `g⁻¹(q_i)`.
    #[default]
    Requirement,
    /// Proportional to the queue lengths.
    Data,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyConfig {
    pub conversion: ConversionFunction,
    #[serde(default)]
    pub sharing: Sharing,
}

/// Myopic policy: budget `min(e, round(Σ g⁻¹(q_i)))`, shared unit by unit.
#[derive(Clone, Debug)]
pub struct GreedyPolicy {
    config: GreedyConfig,
}

impl GreedyPolicy {
    pub fn new(config: GreedyConfig) -> Result<Self, BaselineError> {
        match config.conversion.inverse(1.0) {
            Some(v) if v.is_finite() && v > 0.0 => Ok(Self { config }),
            _ => Err(BaselineError::NonInvertible(config.conversion)),
        }
    }

    pub fn config(&self) -> &GreedyConfig {
        &self.config
    }

    /// Per-node requirements `g⁻¹(q_i)`.
    pub fn requirements(&self, state: &SystemState) -> Vec<f64> {
        let g = &self.config.conversion;
        state.q.iter().map(|&q| g.inverse(q as f64).expect("checked at construction")).collect()
    }

    /// Budget and sharing weights for `state`.
    pub fn plan(&self, state: &SystemState) -> (u32, Vec<f64>) {
        let need = self.requirements(state);
        let budget = state.e.min(round_half_up(need.iter().sum()));
        let weights = match self.config.sharing {
            Sharing::Requirement => need,
            Sharing::Data => state.q.iter().map(|&q| q as f64).collect(),
        };
        (budget, weights)
    }
}

/// Greedy allocation for one state.
pub fn greedy_allocate(state: &SystemState, policy: &GreedyPolicy, rng: &mut SimRng) -> Action {
    let (budget, weights) = policy.plan(state);
    let mut alloc = vec![0; state.q.len()];
    share_units(budget, &weights, None, &mut alloc, rng);
    Action(alloc)
}

impl Policy for GreedyPolicy {
    fn act(&self, state: &SystemState, rng: &mut SimRng) -> Action {
        greedy_allocate(state, self, rng)
    }
}

impl ActionLaw for GreedyPolicy {
    fn action_law(&self, state: &SystemState) -> Vec<(Action, f64)> {
        let (budget, weights) = self.plan(state);
        let start = vec![0; state.q.len()];
        share_distribution(budget, &weights, None, &start)
            .into_iter()
            .map(|(a, p)| (Action(a), p))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ArrivalModel, CostWeights, SystemConfig};
    use crate::exact::{build_model, policy_average_cost, rvi_solve, ModelPolicy, RviSettings};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn greedy(g: ConversionFunction) -> GreedyPolicy {
        GreedyPolicy::new(GreedyConfig { conversion: g, sharing: Sharing::Requirement }).unwrap()
    }

    fn state(q: Vec<u32>, e: u32) -> SystemState {
        SystemState { q, e, prev_x: None, prev_y: None }
    }

    #[test]
    fn log_budget_example() {
        let p = greedy(ConversionFunction::ScaledLog { scale: 1.0 });
        let (budget, weights) = p.plan(&state(vec![1, 1], 10));
        assert_eq!(budget, 3);
        assert_eq!(weights[0], weights[1]);
        let mut rng = SimRng::seed_from_u64(0);
        assert_eq!(p.act(&state(vec![1, 1], 10), &mut rng).total(), 3);
    }

    #[test]
    fn empty_queues_or_buffer_allocate_nothing() {
        let p = greedy(ConversionFunction::ScaledLog { scale: 1.0 });
        let mut rng = SimRng::seed_from_u64(0);
        assert_eq!(p.act(&state(vec![0, 0], 9), &mut rng).0, vec![0, 0]);
        assert_eq!(p.act(&state(vec![5, 3], 0), &mut rng).0, vec![0, 0]);
        assert_eq!(p.action_law(&state(vec![0, 0], 9)), vec![(Action(vec![0, 0]), 1.0)]);
    }

    #[test]
    fn data_sharing_uses_queue_weights() {
        let p = GreedyPolicy::new(GreedyConfig { conversion: ConversionFunction::ScaledLog { scale: 1.0 }, sharing: Sharing::Data }).unwrap();
        let (_, w) = p.plan(&state(vec![2, 0], 5));
        assert_eq!(w, vec![2.0, 0.0]);
    }

    #[test]
    fn rejects_degenerate_conversion() {
        assert!(GreedyPolicy::new(GreedyConfig { conversion: ConversionFunction::Linear { slope: 0.0 }, sharing: Sharing::Requirement }).is_err());
    }

    #[test]
    fn law_matches_sampling() {
        let p = greedy(ConversionFunction::ScaledLog { scale: 2.0 });
        let s = state(vec![3, 1], 4);
        let law = p.action_law(&s);
        assert!((law.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-12);
        let n = 100_000;
        let mut rng = SimRng::seed_from_u64(5);
        let mut counts = std::collections::BTreeMap::new();
        for _ in 0..n {
            *counts.entry(p.act(&s, &mut rng)).or_insert(0u32) += 1;
        }
        for (action, prob) in law {
            let freq = counts.get(&action).copied().unwrap_or(0) as f64 / n as f64;
            assert!((freq - prob).abs() < 0.01, "{action:?}: {freq} vs {prob}");
        }
    }

    #[test]
    fn linear_conversion_greedy_optimal_with_ample_energy() {
        let cfg = SystemConfig {
            nodes: 1,
            d_max: 3,
            e_max: 3,
            conversion: ConversionFunction::Linear { slope: 0.5 },
            cost_weights: CostWeights::default(),
            arrival: ArrivalModel::iid_poisson(&[1.0], 5.0),
        };
        let model = build_model(&cfg).unwrap();
        let sol = rvi_solve(&model, RviSettings::default()).unwrap();
        let p = greedy(cfg.conversion.clone());
        let cost = policy_average_cost(&model, &ModelPolicy::from_law(&model, &p).unwrap()).unwrap().average;
        assert!(cost <= sol.lambda_star + 1e-9, "greedy {cost} vs {}", sol.lambda_star);
    }

    proptest! {
        #[test]
        fn allocation_within_energy(q0 in 0u32..15, q1 in 0u32..15, e in 0u32..20, seed in any::<u64>()) {
            let p = greedy(ConversionFunction::ScaledLog { scale: 1.0 });
            let s = state(vec![q0, q1], e);
            let mut rng = SimRng::seed_from_u64(seed);
            let a = p.act(&s, &mut rng);
            let need: f64 = p.requirements(&s).iter().sum();
            prop_assert!(a.total() <= e as u64);
            prop_assert_eq!(a.total(), p.plan(&s).0 as u64);
            if need >= e as f64 && q0 + q1 > 0 {
                prop_assert_eq!(a.total(), e as u64);
            }
        }
    }
}
