use std::fmt;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_pair_bound, aggregate_pair_count, full_pair_bound, train_qlsa, PartitionScheme, PartitionSpec};
use crate::baselines::{GreedyConfig, GreedyPolicy, Sharing};
use crate::crossent::{run_ce, CeConfig, MetaParams};
use crate::env::{Action, ActionLaw, ArrivalModel, ConversionFunction, CostWeights, Environment, Policy, SystemConfig, SystemState};
use crate::exact::{build_model, pair_count, policy_average_cost, rvi_solve, verify_monotonicity, ModelPolicy, RviSettings, TransitionModel};
use crate::qlearn::{train, Exploration, LearnerConfig};
use crate::{derive_seed, SimRng};

use super::experiment::{ExperimentOutcome, ExperimentSpec, Sweep, SweepVariable, SCHEMA_VERSION};
use super::solver::{SolverKind, SolverSpec};
use super::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyLevel {
    Quick,
    Full,
}

/// Deliberate faults used to confirm that checks can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tamper {
    /// Negates the stage cost seen by the identity check.
    CostSignFlip,
    /// Runs value iteration without subtracting the reference value.
    SkipReferenceSubtraction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: String,
    pub expected: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: measured {}, expected {}", self.name, self.measured, self.expected)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn poisson_config(nodes: usize, cap: u32, g: ConversionFunction, data: &[f64], energy: f64) -> SystemConfig {
    SystemConfig { nodes, d_max: cap, e_max: cap, conversion: g, cost_weights: CostWeights::default(), arrival: ArrivalModel::iid_poisson(data, energy) }
}

fn log_g() -> ConversionFunction {
    ConversionFunction::ScaledLog { scale: 1.0 }
}

/// Two nodes with `g(x) = x`: queues drain exactly by the allocated energy,
/// so the identity is not blurred by rounding. Energy is tight enough for
/// queues to build, which keeps the cost well away from zero.
pub fn identity_instance() -> SystemConfig {
    poisson_config(2, 14, ConversionFunction::Linear { slope: 1.0 }, &[1.0, 1.0], 2.5)
}

/// Splits the buffer evenly, never giving a node more than its queue.
pub fn split_policy(state: &SystemState, _rng: &mut SimRng) -> Action {
    let t0 = (state.e / 2).min(state.q[0]);
    let t1 = (state.e - t0).min(state.q[1]);
    Action(vec![t0, t1])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityEstimate {
    /// Mean stage cost.
    pub lambda: f64,
    /// Mean total queue.
    pub lambda_tilde: f64,
    pub arrival_mean: f64,
    /// `|λ − (λ̃ − Σ E[X^i])|`.
    pub gap: f64,
    /// Data dropped at full buffers per slot.
    pub drop_rate: f64,
}

impl IdentityEstimate {
    /// Gap after crediting dropped data, which the identity assumes away.
    pub fn corrected_gap(&self) -> f64 {
        (self.lambda - (self.lambda_tilde - self.arrival_mean + self.drop_rate)).abs()
    }
}

/// Compares the mean cost with the mean queue minus the mean arrivals
/// along one trajectory. `cost_sign` of -1 simulates a broken cost.
pub fn cost_identity(
    config: &SystemConfig,
    policy: &dyn Policy,
    horizon: u64,
    seed: u64,
    cost_sign: f64,
) -> Result<IdentityEstimate, HarnessError> {
    let arrival_mean: f64 = config
        .arrival
        .iid_data_means()
        .ok_or_else(|| HarnessError::InvalidSpec("the identity needs i.i.d. arrivals".into()))?
        .iter()
        .sum();
    let mut env = Environment::new(config.clone())?;
    let mut env_rng = SimRng::seed_from_u64(derive_seed(seed, &[0]));
    let mut policy_rng = SimRng::seed_from_u64(derive_seed(seed, &[1]));
    let mut state = env.initial_state();
    let (mut cost, mut queue) = (0.0, 0.0);
    for _ in 0..horizon {
        let action = policy.act(&state, &mut policy_rng);
        cost += cost_sign * env.stage_cost(&state, &action.0);
        queue += state.queue_sum() as f64;
        env.advance(&mut state, &action.0, &mut env_rng)?;
    }
    let (lambda, lambda_tilde) = (cost / horizon as f64, queue / horizon as f64);
    Ok(IdentityEstimate {
        lambda,
        lambda_tilde,
        arrival_mean,
        gap: (lambda - (lambda_tilde - arrival_mean)).abs(),
        drop_rate: env.dropped_data as f64 / horizon as f64,
    })
}

/// Instances for the monotone-value check.
pub fn monotonicity_instances() -> Vec<SystemConfig> {
    vec![poisson_config(1, 5, log_g(), &[1.0], 2.0), poisson_config(2, 3, log_g(), &[0.8, 0.8], 2.0)]
}

/// Small instance with an exactly computable optimum for learner checks.
pub fn learning_instance() -> SystemConfig {
    poisson_config(1, 2, log_g(), &[0.3], 1.0)
}

/// Linear conversion with energy supply matched to the data load.
pub fn greedy_linear_instance() -> SystemConfig {
    poisson_config(1, 3, ConversionFunction::Linear { slope: 0.5 }, &[1.0], 2.0)
}

/// Every instance solved exactly by the suite.
pub fn exact_instances() -> Vec<SystemConfig> {
    let mut v = monotonicity_instances();
    v.push(learning_instance());
    v.push(greedy_linear_instance());
    v
}

/// Total monotonicity violations of `h*` over `configs`.
pub fn monotonicity_violations(configs: &[SystemConfig], tol: f64) -> Result<usize, HarnessError> {
    let mut total = 0;
    for cfg in configs {
        let model = build_model(cfg)?;
        let sol = rvi_solve(&model, RviSettings::default())?;
        total += verify_monotonicity(&sol, &model, tol).len();
    }
    Ok(total)
}

/// Largest `max_i |λ* + h(i) − min_a Q(i,a)|` over `configs`. A solver
/// failure counts as an infinite residual.
pub fn max_bellman_residual(configs: &[SystemConfig], settings: RviSettings) -> Result<f64, HarnessError> {
    let mut worst: f64 = 0.0;
    for cfg in configs {
        let model = build_model(cfg)?;
        match rvi_solve(&model, settings.clone()) {
            Ok(sol) => worst = worst.max(sol.bellman_residual(&model)),
            Err(err) => {
                log::warn!("value iteration failed: {err}");
                return Ok(f64::INFINITY);
            }
        }
    }
    Ok(worst)
}

/// Exact average cost of a policy given by its action law.
pub fn exact_cost(model: &TransitionModel, policy: &dyn ActionLaw) -> Result<f64, HarnessError> {
    Ok(policy_average_cost(model, &ModelPolicy::from_law(model, policy)?)?.average)
}

/// Learned cost and optimum on the learning instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearnedVsOptimal {
    pub learned: f64,
    pub optimal: f64,
}

/// Trains ε-greedy Q-learning (α = 0.1, ε = 0.1) and evaluates its policy
/// exactly.
pub fn ql_vs_exact(iterations: u64, seed: u64) -> Result<LearnedVsOptimal, HarnessError> {
    let cfg = learning_instance();
    let model = build_model(&cfg)?;
    let optimal = rvi_solve(&model, RviSettings::default())?.lambda_star;
    let out = train(&cfg, &LearnerConfig { iterations, seed, ..Default::default() })?;
    Ok(LearnedVsOptimal { learned: exact_cost(&model, &out.policy)?, optimal })
}

/// Exact costs of plain Q-learning and singleton-partition QL-SA trained
/// with the same seed.
pub fn qlsa_reduction(iterations: u64, seed: u64) -> Result<(f64, f64), HarnessError> {
    let cfg = learning_instance();
    let model = build_model(&cfg)?;
    let learner = LearnerConfig { iterations, seed, ..Default::default() };
    let plain = train(&cfg, &learner)?;
    let agg = train_qlsa(&cfg, &PartitionScheme::singletons(cfg.d_max, cfg.e_max), &learner)?;
    Ok((exact_cost(&model, &plain.policy)?, exact_cost(&model, &agg.policy)?))
}

/// Greedy's exact cost and the optimum on the linear-conversion instance.
pub fn greedy_linear() -> Result<LearnedVsOptimal, HarnessError> {
    let cfg = greedy_linear_instance();
    let model = build_model(&cfg)?;
    let optimal = rvi_solve(&model, RviSettings::default())?.lambda_star;
    let greedy = GreedyPolicy::new(GreedyConfig { conversion: cfg.conversion.clone(), sharing: Sharing::Requirement })?;
    Ok(LearnedVsOptimal { learned: exact_cost(&model, &greedy)?, optimal })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeTrial {
    pub iterations: u64,
    pub mean_sigma: f64,
    pub distance: f64,
}

impl CeTrial {
    pub fn converged(&self, max_iters: u64) -> bool {
        self.iterations <= max_iters && self.mean_sigma < 1e-3 && self.distance < 0.05
    }
}

/// Cross-entropy on `λ(θ) = ‖θ − θ*‖²` with `θ*` uniform on `[-1, 1]^dim`.
pub fn ce_convex_trial(dimension: usize, samples: usize, max_iters: u64, seed: u64) -> Result<CeTrial, HarnessError> {
    let mut rng = SimRng::seed_from_u64(derive_seed(seed, &[7]));
    let target: Vec<f64> = (0..dimension).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eval = |theta: &[f64], _: u64| theta.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let cfg = CeConfig { samples, max_iters, seed, ..Default::default() };
    let (meta, _) = run_ce(MetaParams::new(dimension, 0.0, cfg.initial_sigma), &cfg, &eval)?;
    let distance = meta.mu.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(CeTrial { iterations: meta.iteration, mean_sigma: meta.mean_sigma(), distance })
}

/// Pair counts behind the aggregation claim.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cardinality {
    /// 4 nodes, 4 data and 4 energy partitions.
    pub aggregate_exact: u128,
    pub aggregate_bound: u128,
    /// 4 nodes, `d_max = e_max = 30`.
    pub full_exact: u128,
    pub full_bound: u128,
}

pub fn cardinality() -> Cardinality {
    Cardinality {
        aggregate_exact: aggregate_pair_count(4, 4, 4),
        aggregate_bound: aggregate_pair_bound(4, 4, 4),
        full_exact: pair_count(4, 30, 30),
        full_bound: full_pair_bound(4, 30, 30),
    }
}

/// Base system of the two-node rate sweep: `d_max = e_max = 14`,
/// `E[Y] = 13`, `E[X²] = 1`.
pub fn two_node_sweep_system() -> SystemConfig {
    poisson_config(2, 14, log_g(), &[1.0, 1.0], 13.0)
}

fn learner(iterations: u64, exploration: Exploration) -> LearnerConfig {
    LearnerConfig { iterations, exploration, ..Default::default() }
}

/// UCB exploration weight used by the sweep presets.
pub const UCB_BETA: f64 = 0.5;

/// Greedy, combined-nodes, ε-greedy and UCB Q-learning over `E[X¹]`.
pub fn ordering_spec(iterations: u64, replicas: u32, values: Vec<f64>) -> ExperimentSpec {
    let eps = Exploration::EpsilonGreedy { epsilon: 0.1 };
    ExperimentSpec {
        schema_version: SCHEMA_VERSION,
        name: "two-node solver ordering".into(),
        system: two_node_sweep_system(),
        solvers: vec![
            SolverSpec::new(SolverKind::Greedy { sharing: Sharing::Requirement }),
            SolverSpec::new(SolverKind::Combined { learner: learner(iterations, eps) }),
            SolverSpec::new(SolverKind::Ql { learner: learner(iterations, eps) }),
            SolverSpec::new(SolverKind::Ql { learner: learner(iterations, Exploration::Ucb { beta: UCB_BETA }) }),
        ],
        sweep: Some(Sweep { variable: SweepVariable::DataMean { node: 0 }, values }),
        replicas,
        horizon: 1_000_000,
        seed: 2024,
        output: None,
        record_timing: false,
    }
}

/// QL-SA with 3 and with 7 equal-width partitions per buffer.
pub fn refinement_spec(iterations: u64, replicas: u32, values: Vec<f64>) -> ExperimentSpec {
    let qlsa = |k: u32| {
        SolverSpec::named(
            &format!("qlsa-{k}"),
            SolverKind::Qlsa {
                partitions: PartitionSpec::Count { data: k, energy: k },
                learner: learner(iterations, Exploration::EpsilonGreedy { epsilon: 0.1 }),
            },
        )
    };
    ExperimentSpec {
        name: "partition refinement".into(),
        solvers: vec![qlsa(3), qlsa(7)],
        seed: 2025,
        ..ordering_spec(iterations, replicas, values)
    }
}

/// Mean of `worse − better` over paired replicas and its standard error.
pub fn paired_gap(better: &[f64], worse: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = better.iter().zip(worse).map(|(b, w)| w - b).collect();
    super::experiment::mean_and_stderr(&d)
}

/// Solver `lower` beats `upper` at every grid point by more than the
/// paired standard error. Returns the failing descriptions.
pub fn ordering_failures(spec: &ExperimentSpec, outcome: &ExperimentOutcome, chain: &[usize]) -> Vec<String> {
    let values = spec.sweep.as_ref().map_or(vec![0.0], |s| s.values.clone());
    let mut failures = Vec::new();
    for (p, v) in values.iter().enumerate() {
        for pair in chain.windows(2) {
            let (gap, se) = paired_gap(&outcome.costs(p, pair[0]), &outcome.costs(p, pair[1]));
            if !(gap > se) {
                failures.push(format!(
                    "at {v}: {} vs {} gap {gap:.4} <= se {se:.4}",
                    spec.solvers[pair[0]].label(),
                    spec.solvers[pair[1]].label()
                ));
            }
        }
    }
    failures
}

fn check(name: &str, passed: bool, measured: String, expected: &str) -> CheckResult {
    CheckResult { name: name.into(), passed, measured, expected: expected.into() }
}

fn failed(name: &str, err: HarnessError) -> CheckResult {
    check(name, false, format!("error: {err}"), "no error")
}

/// Runs the cross-module checks. Quick uses reduced learning budgets and
/// skips the sweeps; full runs everything at acceptance scale.
pub fn verify_suite(level: VerifyLevel, tamper: Option<Tamper>) -> VerifyReport {
    let full = level == VerifyLevel::Full;
    let mut checks = Vec::new();

    let sign = if tamper == Some(Tamper::CostSignFlip) { -1.0 } else { 1.0 };
    checks.push(match cost_identity(&identity_instance(), &split_policy, 1_000_000, 1, sign) {
        Ok(est) => check("cost identity", est.gap <= 0.02, format!("gap {:.5}", est.gap), "<= 0.02"),
        Err(e) => failed("cost identity", e),
    });

    checks.push(match monotonicity_violations(&monotonicity_instances(), 1e-9) {
        Ok(n) => check("value monotonicity", n == 0, format!("{n} violations"), "0 violations"),
        Err(e) => failed("value monotonicity", e),
    });

    let settings = RviSettings { subtract_reference: tamper != Some(Tamper::SkipReferenceSubtraction), ..Default::default() };
    checks.push(match max_bellman_residual(&exact_instances(), settings) {
        Ok(r) => check("bellman residual", r < 1e-8, format!("{r:.3e}"), "< 1e-8"),
        Err(e) => failed("bellman residual", e),
    });

    let iters = if full { 10_000_000 } else { 2_000_000 };
    checks.push(match ql_vs_exact(iters, 1) {
        Ok(r) => check(
            "q-learning vs exact",
            r.learned <= 1.05 * r.optimal,
            format!("{:.5} (optimum {:.5})", r.learned, r.optimal),
            "<= 1.05 x optimum",
        ),
        Err(e) => failed("q-learning vs exact", e),
    });

    checks.push(match qlsa_reduction(iters, 1) {
        Ok((plain, agg)) => check(
            "singleton aggregation",
            (agg - plain).abs() <= 0.02 * plain,
            format!("{agg:.5} vs {plain:.5}"),
            "within 2%",
        ),
        Err(e) => failed("singleton aggregation", e),
    });

    let trials: Result<Vec<CeTrial>, HarnessError> = (0..20).map(|s| ce_convex_trial(10, 50, 200, s)).collect();
    checks.push(match trials {
        Ok(t) => {
            let ok = t.iter().filter(|t| t.converged(200)).count();
            check("cross-entropy convex", ok >= 18, format!("{ok}/20 converged"), ">= 18/20")
        }
        Err(e) => failed("cross-entropy convex", e),
    });

    let c = cardinality();
    let log4 = (c.aggregate_exact as f64).ln() / 4f64.ln();
    let log30 = (c.full_bound as f64).ln() / 30f64.ln();
    checks.push(check(
        "aggregate cardinality",
        (log4 - 9.0).abs() <= 1.0 && c.aggregate_exact <= c.aggregate_bound && (log30 - 9.0).abs() <= 1.0 && c.full_exact <= c.full_bound,
        format!("log4 {log4:.2}, log30 {log30:.2}"),
        "both within 1 of 9",
    ));

    if full {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        let spec = ordering_spec(10_000_000, 5, vec![1.0, 1.5, 2.0]);
        checks.push(match super::experiment::run_experiment(&spec, workers, &mut |_| Ok(())) {
            Ok(out) => {
                let f = ordering_failures(&spec, &out, &[3, 2, 1, 0]);
                check("solver ordering", f.is_empty(), if f.is_empty() { "ordered".into() } else { f.join("; ") }, "ucb < eps < combined < greedy")
            }
            Err(e) => failed("solver ordering", e),
        });
        let spec = refinement_spec(10_000_000, 5, vec![1.0, 1.5, 2.0]);
        checks.push(match super::experiment::run_experiment(&spec, workers, &mut |_| Ok(())) {
            Ok(out) => {
                let bad: Vec<String> = (0..3)
                    .filter_map(|p| {
                        let (gap, se) = paired_gap(&out.costs(p, 1), &out.costs(p, 0));
                        (gap < -se).then(|| format!("point {p}: 7-partition worse by {:.4} (se {se:.4})", -gap))
                    })
                    .collect();
                check("partition refinement", bad.is_empty(), if bad.is_empty() { "refined no worse".into() } else { bad.join("; ") }, "7 <= 3 + se")
            }
            Err(e) => failed("partition refinement", e),
        });
    }
    VerifyReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_holds_and_sign_flip_breaks_it() {
        let est = cost_identity(&identity_instance(), &split_policy, 200_000, 3, 1.0).unwrap();
        assert!(est.gap <= 0.02, "{est:?}");
        let bad = cost_identity(&identity_instance(), &split_policy, 200_000, 3, -1.0).unwrap();
        assert!(bad.gap > 0.1, "{bad:?}");
    }

    #[test]
    fn skipping_reference_subtraction_is_detected() {
        let settings = RviSettings { subtract_reference: false, ..Default::default() };
        assert!(max_bellman_residual(&[learning_instance()], settings).unwrap() > 1e-8);
        assert!(max_bellman_residual(&[learning_instance()], RviSettings::default()).unwrap() < 1e-8);
    }

    #[test]
    fn cardinality_numbers() {
        let c = cardinality();
        assert_eq!(c.aggregate_exact, 90_624);
        assert_eq!(c.aggregate_bound, 4u128.pow(9));
        assert_eq!(c.full_bound, 31u128.pow(9));
        assert_eq!(c.full_exact, 31u128.pow(4) * 324_632);
    }

    #[test]
    fn paired_gap_uses_differences() {
        let (gap, se) = paired_gap(&[1.0, 2.0, 3.0], &[1.5, 2.5, 3.5]);
        assert!((gap - 0.5).abs() < 1e-12 && se < 1e-12);
    }

    #[test]
    fn ordering_specs_validate() {
        ordering_spec(1000, 2, vec![1.0]).validate().unwrap();
        let r = refinement_spec(1000, 2, vec![1.0, 2.0]);
        r.validate().unwrap();
        assert_eq!(r.solvers.iter().map(|s| s.label()).collect::<Vec<_>>(), ["qlsa-3", "qlsa-7"]);
    }
}
