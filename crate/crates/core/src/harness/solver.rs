use serde::{Deserialize, Serialize};

use crate::aggregate::{train_qlsa, AggregatePolicy, AggregateStates, PartitionSpec};
use crate::baselines::{GreedyConfig, GreedyPolicy, Sharing};
use crate::crossent::{train_ce, BoltzmannPolicy, CeConfig, FeatureMap};
use crate::env::{Policy, SystemConfig, SystemState, UniformRandomPolicy};
use crate::exact::{build_model_with_limit, rvi_solve, ModelPolicy, RviSettings, TransitionModel, DEFAULT_PAIR_LIMIT};
use crate::qlearn::{train, train_combined, CombinedPolicy, Exploration, LearnerConfig, StateAbstraction, TabularPolicy};
use crate::SimRng;

use super::HarnessError;

/// Feature map of a cross-entropy solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    Hashed { dimension: usize, #[serde(default)] seed: u64 },
    Tabular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverKind {
    Greedy {
        #[serde(default)]
        sharing: Sharing,
    },
    Uniform,
    /// Optimal policy from relative value iteration on the full model.
    Exact {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pair_limit: Option<u64>,
    },
    Ql { learner: LearnerConfig },
    Combined { learner: LearnerConfig },
    Qlsa { partitions: PartitionSpec, learner: LearnerConfig },
    Ce { partitions: PartitionSpec, features: FeatureSpec, #[serde(default)] ce: CeConfig },
}

/// One solver of an experiment. The label defaults to the solver kind,
/// with `ql-eps` and `ql-ucb` distinguishing the exploration rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub kind: SolverKind,
}

impl SolverSpec {
    pub fn new(kind: SolverKind) -> Self {
        Self { name: None, kind }
    }

    pub fn named(name: &str, kind: SolverKind) -> Self {
        Self { name: Some(name.to_string()), kind }
    }

    pub fn label(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        match &self.kind {
            SolverKind::Greedy { .. } => "greedy".into(),
            SolverKind::Uniform => "uniform".into(),
            SolverKind::Exact { .. } => "exact".into(),
            SolverKind::Ql { learner } => match learner.exploration {
                Exploration::EpsilonGreedy { .. } => "ql-eps".into(),
                Exploration::Ucb { .. } => "ql-ucb".into(),
            },
            SolverKind::Combined { .. } => "combined".into(),
            SolverKind::Qlsa { .. } => "qlsa".into(),
            SolverKind::Ce { .. } => "ce".into(),
        }
    }
}

/// Exact optimal policy together with the model it indexes into.
#[derive(Debug)]
pub struct ExactPolicy {
    pub model: TransitionModel,
    pub policy: ModelPolicy,
    pub lambda_star: f64,
}

impl Policy for ExactPolicy {
    fn act(&self, state: &SystemState, rng: &mut SimRng) -> crate::env::Action {
        self.policy.bind(&self.model).act(state, rng)
    }
}

/// A policy ready for evaluation.
#[derive(Debug)]
pub enum TrainedPolicy {
    Greedy(GreedyPolicy),
    Uniform(UniformRandomPolicy),
    Exact(Box<ExactPolicy>),
    Tabular(TabularPolicy),
    Combined(CombinedPolicy),
    Aggregate(AggregatePolicy),
    Boltzmann(BoltzmannPolicy),
}

impl TrainedPolicy {
    pub fn as_policy(&self) -> &dyn Policy {
        match self {
            TrainedPolicy::Greedy(p) => p,
            TrainedPolicy::Uniform(p) => p,
            TrainedPolicy::Exact(p) => p.as_ref(),
            TrainedPolicy::Tabular(p) => p,
            TrainedPolicy::Combined(p) => p,
            TrainedPolicy::Aggregate(p) => p,
            TrainedPolicy::Boltzmann(p) => p,
        }
    }

    /// `(state, action)` labels for a snapshot; empty for policies without
    /// a table.
    pub fn snapshot_rows(&self) -> Vec<(String, String)> {
        let mut rng = <SimRng as rand::SeedableRng>::seed_from_u64(0);
        match self {
            TrainedPolicy::Greedy(_) | TrainedPolicy::Uniform(_) => Vec::new(),
            TrainedPolicy::Exact(p) => (0..p.model.num_states())
                .map(|i| {
                    let a = p.policy.law(i).into_iter().max_by(|x, y| x.1.total_cmp(&y.1)).map_or(0, |(a, _)| a);
                    (state_label(p.model.state(i)), list(p.model.action(i, a)))
                })
                .collect(),
            TrainedPolicy::Tabular(p) => p
                .entries()
                .into_iter()
                .map(|(key, a)| {
                    let s = p.abstraction().codec().decode(key);
                    let mut out = vec![0; s.q.len()];
                    p.abstraction().realize(&s, a, &mut out, &mut rng);
                    (state_label(&s), list(&out))
                })
                .collect(),
            TrainedPolicy::Combined(p) => p
                .entries()
                .into_iter()
                .map(|(key, a)| {
                    let (total, e) = p.abstraction().decode(key);
                    (format!("sum_q={total} e={e}"), format!("budget={a}"))
                })
                .collect(),
            TrainedPolicy::Aggregate(p) => p
                .entries()
                .into_iter()
                .map(|(key, a)| aggregate_row(p.abstraction(), key, a))
                .collect(),
            TrainedPolicy::Boltzmann(p) => {
                let agg = p.abstraction();
                let scheme = agg.scheme();
                let nodes = agg.decode(0).levels.len() as u32;
                let keys = (scheme.data_parts() as u64).pow(nodes) * scheme.energy_parts() as u64;
                (0..keys)
                    .map(|key| {
                        let s = representative(agg, key);
                        let probs = p.probabilities(&s);
                        let a = probs.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).map_or(0, |(a, _)| a);
                        aggregate_row(agg, key, a)
                    })
                    .collect()
            }
        }
    }
}

fn list(v: &[u32]) -> String {
    v.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn state_label(s: &SystemState) -> String {
    format!("q={} e={}", list(&s.q), s.e)
}

/// A concrete state whose aggregate key is `key`, using lower bounds.
fn representative(agg: &AggregateStates, key: u64) -> SystemState {
    let a = agg.decode(key);
    let scheme = agg.scheme();
    SystemState {
        q: a.levels.iter().map(|&l| scheme.data_cuts()[l as usize - 1].0).collect(),
        e: scheme.energy_bounds(a.energy_level).0,
        prev_x: None,
        prev_y: None,
    }
}

fn aggregate_row(agg: &AggregateStates, key: u64, action: usize) -> (String, String) {
    let a = agg.decode(key);
    let s = representative(agg, key);
    (format!("levels={} energy_level={}", list(&a.levels), a.energy_level), list(&agg.action(&s, action).0))
}

/// Trains (where needed) the policy of `spec` on `config`. `seed` replaces
/// any seed in the solver parameters.
pub fn prepare(spec: &SolverSpec, config: &SystemConfig, seed: u64) -> Result<TrainedPolicy, HarnessError> {
    let seeded = |learner: &LearnerConfig| LearnerConfig { seed, ..learner.clone() };
    Ok(match &spec.kind {
        SolverKind::Greedy { sharing } => {
            TrainedPolicy::Greedy(GreedyPolicy::new(GreedyConfig { conversion: config.conversion.clone(), sharing: *sharing })?)
        }
        SolverKind::Uniform => TrainedPolicy::Uniform(UniformRandomPolicy),
        SolverKind::Exact { pair_limit } => {
            let model = build_model_with_limit(config, pair_limit.unwrap_or(DEFAULT_PAIR_LIMIT))?;
            let sol = rvi_solve(&model, RviSettings::default())?;
            let policy = sol.greedy_policy(&model);
            TrainedPolicy::Exact(Box::new(ExactPolicy { model, policy, lambda_star: sol.lambda_star }))
        }
        SolverKind::Ql { learner } => TrainedPolicy::Tabular(train(config, &seeded(learner))?.policy),
        SolverKind::Combined { learner } => TrainedPolicy::Combined(train_combined(config, &seeded(learner))?.policy),
        SolverKind::Qlsa { partitions, learner } => {
            let scheme = partitions.build(config.d_max, config.e_max)?;
            TrainedPolicy::Aggregate(train_qlsa(config, &scheme, &seeded(learner))?.policy)
        }
        SolverKind::Ce { partitions, features, ce } => {
            let scheme = partitions.build(config.d_max, config.e_max)?;
            let features = match features {
                FeatureSpec::Hashed { dimension, seed } => FeatureMap::hashed(*dimension, *seed),
                FeatureSpec::Tabular => FeatureMap::tabular(&AggregateStates::new(config, scheme.clone())?),
            };
            let ce = CeConfig { seed, ..ce.clone() };
            TrainedPolicy::Boltzmann(train_ce(config, &scheme, &features, &ce)?.policy)
        }
    })
}
