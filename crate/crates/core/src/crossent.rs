//! Cross-entropy search over Boltzmann policies on the aggregate space.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{AggregateError, AggregateStates, PartitionScheme};
use crate::env::{evaluate_policy, Action, ActionLaw, EnvError, Policy, SystemConfig, SystemState};
use crate::qlearn::StateAbstraction;
use crate::{derive_seed, splitmix, SimRng};

#[derive(Debug, Error)]
pub enum CeError {
    #[error("invalid cross-entropy settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Maps an (aggregate state key, action index) pair to one of `dimension`
/// coordinates; the feature vector is the indicator of that coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    dimension: usize,
    mode: FeatureMode,
}

#[derive(Clone, Debug, PartialEq)]
enum FeatureMode {
    Hashed { seed: u64 },
    /// Offset of each state key's first action.
    Tabular { offsets: Vec<usize> },
}

impl FeatureMap {
    /// Seeded hashing of pairs into `dimension` buckets.
    pub fn hashed(dimension: usize, seed: u64) -> Self {
        Self { dimension: dimension.max(1), mode: FeatureMode::Hashed { seed } }
    }

    /// One coordinate per aggregate state-action pair.
    pub fn tabular(abstraction: &AggregateStates) -> Self {
        let scheme = abstraction.scheme();
        let nodes = abstraction.decode(0).levels.len() as u32;
        let keys = (scheme.data_parts() as u64).pow(nodes) * scheme.energy_parts() as u64;
        let mut offsets = Vec::with_capacity(keys as usize + 1);
        let mut total = 0usize;
        for k in 0..keys {
            offsets.push(total);
            total += (abstraction.decode(k).energy_level as usize).pow(nodes);
        }
        offsets.push(total);
        Self { dimension: total, mode: FeatureMode::Tabular { offsets } }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Coordinate set to one for the pair.
    #[inline]
    pub fn index(&self, key: u64, action: usize) -> usize {
        match &self.mode {
            FeatureMode::Hashed { seed } => {
                (splitmix(splitmix(key ^ seed.rotate_left(17)) ^ (action as u64).wrapping_mul(0x2545_f491_4f6c_dd1d))
                    % self.dimension as u64) as usize
            }
            FeatureMode::Tabular { offsets } => offsets[key as usize] + action,
        }
    }

    /// Full feature vector of a pair.
    pub fn vector(&self, key: u64, action: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        v[self.index(key, action)] = 1.0;
        v
    }
}

/// Softmax of `logits`, computed after subtracting the maximum.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `π(a) ∝ exp(θ·φ(key, a))` over `actions` choices.
pub fn policy_probabilities(theta: &[f64], key: u64, actions: usize, features: &FeatureMap) -> Vec<f64> {
    let logits: Vec<f64> = (0..actions).map(|a| theta[features.index(key, a)]).collect();
    softmax(&logits)
}

/// Stationary randomized policy: sample an aggregate action from the
/// Boltzmann law, then materialize it by energy distribution.
#[derive(Clone, Debug)]
pub struct BoltzmannPolicy {
    pub theta: Vec<f64>,
    features: FeatureMap,
    abstraction: AggregateStates,
}

impl BoltzmannPolicy {
    pub fn new(theta: Vec<f64>, features: FeatureMap, abstraction: AggregateStates) -> Self {
        assert_eq!(theta.len(), features.dimension(), "theta must match the feature dimension");
        Self { theta, features, abstraction }
    }

    pub fn probabilities(&self, state: &SystemState) -> Vec<f64> {
        let key = self.abstraction.key(state);
        policy_probabilities(&self.theta, key, self.abstraction.num_actions(state), &self.features)
    }

    pub fn abstraction(&self) -> &AggregateStates {
        &self.abstraction
    }
}

impl Policy for BoltzmannPolicy {
    fn act(&self, state: &SystemState, rng: &mut SimRng) -> Action {
        let probs = self.probabilities(state);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = a;
                break;
            }
        }
        let mut out = vec![0; state.q.len()];
        self.abstraction.realize(state, pick, &mut out, rng);
        Action(out)
    }
}

impl ActionLaw for BoltzmannPolicy {
    fn action_law(&self, state: &SystemState) -> Vec<(Action, f64)> {
        let mut merged: std::collections::BTreeMap<Action, f64> = std::collections::BTreeMap::new();
        for (a, p) in self.probabilities(state).into_iter().enumerate() {
            for (action, q) in self.abstraction.realize_law(state, a) {
                *merged.entry(action).or_default() += p * q;
            }
        }
        merged.into_iter().collect()
    }
}

/// Average cost of one trajectory under `π^θ`.
pub fn evaluate_theta(
    theta: &[f64],
    config: &SystemConfig,
    abstraction: &AggregateStates,
    features: &FeatureMap,
    horizon: u64,
    seed: u64,
) -> Result<f64, CeError> {
    let policy = BoltzmannPolicy::new(theta.to_vec(), features.clone(), abstraction.clone());
    Ok(evaluate_policy(&policy, config, horizon, seed)?.avg_cost)
}

/// Per-coordinate Gaussian over `θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub iteration: u64,
}

impl MetaParams {
    pub fn new(dimension: usize, mu: f64, sigma: f64) -> Self {
        Self { mu: vec![mu; dimension], sigma: vec![sigma; dimension], iteration: 0 }
    }

    pub fn mean_sigma(&self) -> f64 {
        self.sigma.iter().sum::<f64>() / self.sigma.len().max(1) as f64
    }

    pub fn max_sigma(&self) -> f64 {
        self.sigma.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeConfig {
    /// Samples per iteration `N`.
    pub samples: usize,
    /// Quantile `ρ`.
    pub rho: f64,
    /// Trajectory length per evaluation.
    pub horizon: u64,
    pub max_iters: u64,
    /// Stop once every `σ_i` falls below this.
    pub sigma_tol: f64,
    pub initial_sigma: f64,
    pub seed: u64,
}

impl Default for CeConfig {
    fn default() -> Self {
        Self { samples: 100, rho: 0.4, horizon: 10_000, max_iters: 1000, sigma_tol: 1e-3, initial_sigma: 2.0, seed: 0 }
    }
}

impl CeConfig {
    pub fn validate(&self) -> Result<(), CeError> {
        if self.samples < 2 {
            return Err(CeError::InvalidSettings(format!("need at least 2 samples, got {}", self.samples)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(CeError::InvalidSettings(format!("rho must lie in (0,1), got {}", self.rho)));
        }
        if self.horizon == 0 || !(self.initial_sigma >= 0.0) {
            return Err(CeError::InvalidSettings("horizon must be positive and sigma non-negative".into()));
        }
        Ok(())
    }

    /// 1-based position of the threshold in the descending sort.
    pub fn threshold_rank(&self) -> usize {
        (((1.0 - self.rho) * self.samples as f64).ceil() as usize).clamp(1, self.samples)
    }
}

/// Summary of one cross-entropy iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeRecord {
    pub iteration: u64,
    pub threshold: f64,
    pub best: f64,
    pub mean_sigma: f64,
}

/// Threshold `λ̂_c` and elite mask for costs `lambdas`.
pub fn elite_set(lambdas: &[f64], rank: usize) -> (f64, Vec<bool>) {
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[rank - 1];
    (threshold, lambdas.iter().map(|&l| l <= threshold).collect())
}

/// Samples `N` parameter vectors, evaluates them, and refits the Gaussian
/// to the elite set. `eval(θ, seed)` must be deterministic in its inputs.
pub fn ce_iterate<F>(meta: &MetaParams, config: &CeConfig, eval: &F) -> (MetaParams, CeRecord)
where
    F: Fn(&[f64], u64) -> f64 + Sync,
{
    let t = meta.iteration + 1;
    let samples: Vec<(Vec<f64>, f64)> = (0..config.samples)
        .into_par_iter()
        .map(|j| {
            let mut rng = SimRng::seed_from_u64(derive_seed(config.seed, &[t, j as u64, 0]));
            let theta: Vec<f64> = meta
                .mu
                .iter()
                .zip(&meta.sigma)
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let lambda = eval(&theta, derive_seed(config.seed, &[t, j as u64, 1]));
            (theta, lambda)
        })
        .collect();
    let lambdas: Vec<f64> = samples.iter().map(|(_, l)| *l).collect();
    let (threshold, elite) = elite_set(&lambdas, config.threshold_rank());
    let count = elite.iter().filter(|&&e| e).count();
    assert!(count > 0, "the threshold sample is always elite");
    let dim = meta.mu.len();
    let mut mu = vec![0.0; dim];
    for ((theta, _), _) in samples.iter().zip(&elite).filter(|(_, &e)| e) {
        for (m, v) in mu.iter_mut().zip(theta) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; dim];
    for ((theta, _), _) in samples.iter().zip(&elite).filter(|(_, &e)| e) {
        for ((s, v), m) in var.iter_mut().zip(theta).zip(&mu) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= count as f64);
    let next = MetaParams { mu, sigma: var.into_iter().map(f64::sqrt).collect(), iteration: t };
    let best = lambdas.iter().copied().fold(f64::INFINITY, f64::min);
    let record = CeRecord { iteration: t, threshold, best, mean_sigma: next.mean_sigma() };
    (next, record)
}

/// Iterates until every `σ_i < sigma_tol` or `max_iters` is reached.
pub fn run_ce<F>(initial: MetaParams, config: &CeConfig, eval: &F) -> Result<(MetaParams, Vec<CeRecord>), CeError>
where
    F: Fn(&[f64], u64) -> f64 + Sync,
{
    config.validate()?;
    let mut meta = initial;
    let mut history = Vec::new();
    while meta.iteration < config.max_iters && meta.max_sigma() >= config.sigma_tol {
        let (next, record) = ce_iterate(&meta, config, eval);
        meta = next;
        history.push(record);
    }
    Ok((meta, history))
}

#[derive(Clone, Debug)]
pub struct CeOutcome {
    pub policy: BoltzmannPolicy,
    pub meta: MetaParams,
    pub history: Vec<CeRecord>,
}

/// Cross-entropy search on the system; the returned policy uses the final
/// means as its parameter.
pub fn train_ce(
    config: &SystemConfig,
    scheme: &PartitionScheme,
    features: &FeatureMap,
    ce: &CeConfig,
) -> Result<CeOutcome, CeError> {
    config.validate()?;
    let abstraction = AggregateStates::new(config, scheme.clone())?;
    let eval = |theta: &[f64], seed: u64| {
        evaluate_theta(theta, config, &abstraction, features, ce.horizon, seed).expect("validated configuration")
    };
    let initial = MetaParams::new(features.dimension(), 0.0, ce.initial_sigma);
    let (meta, history) = run_ce(initial, ce, &eval)?;
    let policy = BoltzmannPolicy::new(meta.mu.clone(), features.clone(), abstraction);
    Ok(CeOutcome { policy, meta, history })
}

/// Writes `iteration,threshold,best,mean_sigma` rows.
pub fn write_history_csv<W: Write>(history: &[CeRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
