//! Explicit transition model and exact average-cost solution for small
//! instances with i.i.d. arrivals.

use std::io::Write;

use log::warn;
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use thiserror::Error;

use crate::env::{
    ActionCatalog, ActionLaw, Action, ArrivalModel, ConversionTable, EnvError, Policy, StateCodec, SystemConfig,
    SystemState,
};
use crate::SimRng;

/// Default cap on the number of state-action pairs in a model.
pub const DEFAULT_PAIR_LIMIT: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum ExactError {
    #[error("exact solution does not support Markov arrivals (the augmented state space is out of scope)")]
    MarkovUnsupported,
    #[error("model too large: {pairs} state-action pairs exceed the limit of {limit}")]
    TooLarge { pairs: u128, limit: u64 },
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { what: &'static str, iterations: usize, residual: f64 },
    #[error("policy is defined on {got} states, model has {expected}")]
    PolicyShape { expected: usize, got: usize },
    #[error("policy puts mass on an infeasible action {action} in state {state}")]
    PolicyInfeasible { state: String, action: String },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Every state of the capacity box with its feasible actions, transition
/// laws and expected stage costs.
///
/// States are indexed by the dense codec key, so the all-empty state is 0.
/// Actions of state `i` are the catalog list for its energy level.
#[derive(Clone, Debug)]
pub struct TransitionModel {
    config: SystemConfig,
    codec: StateCodec,
    catalog: ActionCatalog,
    states: Vec<SystemState>,
    pair_offset: Vec<usize>,
    row_offset: Vec<usize>,
    next: Vec<u32>,
    prob: Vec<f64>,
    cost: Vec<f64>,
}

impl TransitionModel {
    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn codec(&self) -> &StateCodec {
        &self.codec
    }

    pub fn catalog(&self) -> &ActionCatalog {
        &self.catalog
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.cost.len()
    }

    pub fn states(&self) -> &[SystemState] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &SystemState {
        &self.states[i]
    }

    pub fn index_of(&self, state: &SystemState) -> usize {
        self.codec.encode(state) as usize
    }

    pub fn num_actions(&self, i: usize) -> usize {
        self.pair_offset[i + 1] - self.pair_offset[i]
    }

    pub fn action(&self, i: usize, a: usize) -> &[u32] {
        self.catalog.get(self.states[i].e, a)
    }

    /// Flat index of the pair `(i, a)`.
    #[inline]
    pub fn pair(&self, i: usize, a: usize) -> usize {
        self.pair_offset[i] + a
    }

    #[inline]
    pub fn cost(&self, i: usize, a: usize) -> f64 {
        self.cost[self.pair(i, a)]
    }

    /// `(next state, probability)` pairs of `(i, a)`, ascending by next state.
    #[inline]
    pub fn transitions(&self, i: usize, a: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let p = self.pair(i, a);
        let range = self.row_offset[p]..self.row_offset[p + 1];
        self.next[range.clone()].iter().zip(&self.prob[range]).map(|(&j, &pr)| (j as usize, pr))
    }

    #[inline]
    fn expectation(&self, pair: usize, values: &[f64]) -> f64 {
        let range = self.row_offset[pair]..self.row_offset[pair + 1];
        self.next[range.clone()].iter().zip(&self.prob[range]).map(|(&j, &p)| p * values[j as usize]).sum()
    }
}

/// Number of state-action pairs of an i.i.d. system:
/// `(d_max+1)^n · C(e_max+n+1, n+1)`.
pub fn pair_count(nodes: usize, d_max: u32, e_max: u32) -> u128 {
    let mut states: u128 = 1;
    for _ in 0..nodes {
        states = states.saturating_mul(d_max as u128 + 1);
    }
    let (top, k) = (e_max as u128 + nodes as u128 + 1, nodes as u128 + 1);
    let mut binom: u128 = 1;
    for i in 0..k {
        binom = binom.saturating_mul(top - i) / (i + 1);
    }
    states.saturating_mul(binom)
}

pub fn build_model(config: &SystemConfig) -> Result<TransitionModel, ExactError> {
    build_model_with_limit(config, DEFAULT_PAIR_LIMIT)
}

/// Enumerates the dynamics exactly. Arrival tails beyond a buffer's headroom
/// are folded onto the clipped level, so every row sums to one.
pub fn build_model_with_limit(config: &SystemConfig, limit: u64) -> Result<TransitionModel, ExactError> {
    config.validate()?;
    let (data_laws, energy_law) = match &config.arrival {
        ArrivalModel::Iid { data, energy } => (data, energy),
        ArrivalModel::Markov(_) => return Err(ExactError::MarkovUnsupported),
    };
    let pairs = pair_count(config.nodes, config.d_max, config.e_max);
    if pairs > limit as u128 {
        return Err(ExactError::TooLarge { pairs, limit });
    }
    let n = config.nodes;
    let (d_max, e_max) = (config.d_max, config.e_max);
    let codec = config.codec();
    let catalog = ActionCatalog::new(n, e_max);
    let table = ConversionTable::new(&config.conversion, e_max);
    let data_pmf: Vec<Vec<f64>> = data_laws.iter().map(|l| l.pmf_table(d_max as usize + 1)).collect();
    let energy_pmf = energy_law.pmf_table(e_max as usize + 1);
    let num_states = codec.cardinality().expect("pair limit bounds the state count") as usize;
    let states: Vec<SystemState> = (0..num_states as u64).map(|k| codec.decode(k)).collect();

    struct Rows {
        lens: Vec<usize>,
        next: Vec<u32>,
        prob: Vec<f64>,
        cost: Vec<f64>,
    }

    let rows: Vec<Rows> = states
        .par_iter()
        .map(|s| {
            let mut out = Rows { lens: Vec::new(), next: Vec::new(), prob: Vec::new(), cost: Vec::new() };
            let mut marginals: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n + 1];
            for a in 0..catalog.count(s.e) {
                let t = catalog.get(s.e, a);
                out.cost.push(crate::env::stage_cost(s, t, &config.conversion, config.cost_weights));
                for i in 0..n {
                    let level = s.q[i].saturating_sub(table.bits(t[i]));
                    marginals[i] = clipped_law(level, d_max, &data_pmf[i]);
                }
                let spent: u32 = t.iter().sum();
                marginals[n] = clipped_law(s.e - spent, e_max, &energy_pmf);
                let before = out.next.len();
                push_product(&marginals, &codec_radices(d_max, e_max, n), &mut out.next, &mut out.prob);
                out.lens.push(out.next.len() - before);
            }
            out
        })
        .collect();

    let mut pair_offset = Vec::with_capacity(num_states + 1);
    let mut row_offset = vec![0];
    let (mut next, mut prob, mut cost) = (Vec::new(), Vec::new(), Vec::new());
    pair_offset.push(0);
    for r in rows {
        for len in r.lens {
            row_offset.push(row_offset.last().unwrap() + len);
        }
        next.extend(r.next);
        prob.extend(r.prob);
        cost.extend(r.cost);
        pair_offset.push(cost.len());
    }
    Ok(TransitionModel { config: config.clone(), codec, catalog, states, pair_offset, row_offset, next, prob, cost })
}

fn codec_radices(d_max: u32, e_max: u32, n: usize) -> Vec<u64> {
    let mut r = vec![d_max as u64 + 1; n];
    r.push(e_max as u64 + 1);
    r
}

/// Law of `min(cap, level + X)` with the tail folded onto `cap`.
fn clipped_law(level: u32, cap: u32, pmf: &[f64]) -> Vec<(u32, f64)> {
    let mut out = Vec::with_capacity((cap - level + 1) as usize);
    let mut acc = 0.0;
    for v in level..cap {
        let p = pmf[(v - level) as usize];
        acc += p;
        if p > 0.0 {
            out.push((v, p));
        }
    }
    let tail = (1.0 - acc).max(0.0);
    if tail > 0.0 {
        out.push((cap, tail));
    }
    out
}

/// Appends the product law of independent digits, keyed in mixed radix.
fn push_product(marginals: &[Vec<(u32, f64)>], radices: &[u64], next: &mut Vec<u32>, prob: &mut Vec<f64>) {
    fn rec(pos: usize, key: u64, p: f64, m: &[Vec<(u32, f64)>], r: &[u64], next: &mut Vec<u32>, prob: &mut Vec<f64>) {
        if pos == m.len() {
            next.push(key as u32);
            prob.push(p);
            return;
        }
        for &(v, pv) in &m[pos] {
            rec(pos + 1, key * r[pos] + v as u64, p * pv, m, r, next, prob);
        }
    }
    rec(0, 0, 1.0, marginals, radices, next, prob);
}

#[derive(Clone, Copy, Debug)]
pub struct RviSettings {
    /// Index of the reference state whose value is pinned to zero.
    pub reference: usize,
    pub tolerance: f64,
    pub max_iters: usize,
    /// Subtract the reference value after each sweep. Disabling this only
    /// serves to exercise the residual diagnostics.
    pub subtract_reference: bool,
}

impl Default for RviSettings {
    fn default() -> Self {
        Self { reference: 0, tolerance: 1e-10, max_iters: 1_000_000, subtract_reference: true }
    }
}

#[derive(Clone, Debug)]
pub struct RviSolution {
    pub lambda_star: f64,
    pub h: Vec<f64>,
    /// Optimal differential costs, flat by model pair index.
    pub q_star: Vec<f64>,
    pub reference_state: usize,
    pub iterations: usize,
    /// Span of the last iterate difference.
    pub span: f64,
}

impl RviSolution {
    pub fn q(&self, model: &TransitionModel, i: usize, a: usize) -> f64 {
        self.q_star[model.pair(i, a)]
    }

    /// Lowest-index minimizer of `Q*(i, ·)`.
    pub fn best_action(&self, model: &TransitionModel, i: usize) -> usize {
        let base = model.pair(i, 0);
        argmin(&self.q_star[base..base + model.num_actions(i)])
    }

    pub fn greedy_policy(&self, model: &TransitionModel) -> ModelPolicy {
        ModelPolicy::Deterministic((0..model.num_states()).map(|i| self.best_action(model, i)).collect())
    }

    /// `max_i |λ* + h*(i) − min_a Q*(i,a)|`.
    pub fn bellman_residual(&self, model: &TransitionModel) -> f64 {
        (0..model.num_states())
            .map(|i| {
                let best = self.q(model, i, self.best_action(model, i));
                (self.lambda_star + self.h[i] - best).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `max |Q*(i,a) − c(i,a) − Σ_j p(i,a,j)·h*(j)|`.
    pub fn q_consistency(&self, model: &TransitionModel) -> f64 {
        (0..model.num_pairs())
            .map(|p| (self.q_star[p] - model.cost[p] - model.expectation(p, &self.h)).abs())
            .fold(0.0, f64::max)
    }

    /// Writes one row per state: index, queues, energy, `h*`, best action.
    pub fn write_csv<W: Write>(&self, model: &TransitionModel, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["state", "q", "e", "h", "best_action"])?;
        for (i, s) in model.states().iter().enumerate() {
            let best = Action(model.action(i, self.best_action(model, i)).to_vec());
            w.write_record([
                i.to_string(),
                crate::env::join(&s.q),
                s.e.to_string(),
                format!("{:.12}", self.h[i]),
                best.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = k;
        }
    }
    best
}

/// Relative value iteration with the span stopping rule.
pub fn rvi_solve(model: &TransitionModel, settings: RviSettings) -> Result<RviSolution, ExactError> {
    let ns = model.num_states();
    let r = settings.reference;
    let mut h = vec![0.0; ns];
    let mut th = vec![0.0; ns];
    let mut span = f64::INFINITY;
    for iter in 1..=settings.max_iters {
        th.par_iter_mut().enumerate().with_min_len(256).for_each(|(i, out)| {
            let base = model.pair(i, 0);
            *out = (base..base + model.num_actions(i))
                .map(|p| model.cost[p] + model.expectation(p, &h))
                .fold(f64::INFINITY, f64::min);
        });
        let offset = if settings.subtract_reference { th[r] } else { 0.0 };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (hv, &tv) in h.iter_mut().zip(&th) {
            let new = tv - offset;
            let d = new - *hv;
            lo = lo.min(d);
            hi = hi.max(d);
            *hv = new;
        }
        span = hi - lo;
        if span < settings.tolerance {
            let q_star: Vec<f64> = (0..model.num_pairs()).map(|p| model.cost[p] + model.expectation(p, &h)).collect();
            let base = model.pair(r, 0);
            // converged value of the reference state under one more sweep
            let lambda_star = q_star[base..base + model.num_actions(r)].iter().copied().fold(f64::INFINITY, f64::min);
            return Ok(RviSolution { lambda_star, h, q_star, reference_state: r, iterations: iter, span });
        }
    }
    Err(ExactError::NotConverged { what: "relative value iteration", iterations: settings.max_iters, residual: span })
}

/// A policy over the states of a [`TransitionModel`].
#[derive(Clone, Debug, PartialEq)]
pub enum ModelPolicy {
    /// Action index per state.
    Deterministic(Vec<usize>),
    /// Probability per action index, per state.
    Randomized(Vec<Vec<f64>>),
}

impl ModelPolicy {
    /// Tabulates a policy with a known action law on every model state.
    pub fn from_law(model: &TransitionModel, law: &dyn ActionLaw) -> Result<Self, ExactError> {
        let mut probs = Vec::with_capacity(model.num_states());
        let mut deterministic = true;
        for (i, s) in model.states().iter().enumerate() {
            let mut row = vec![0.0; model.num_actions(i)];
            for (action, p) in law.action_law(s) {
                let a = model.catalog().index_of(s.e, &action.0).ok_or_else(|| ExactError::PolicyInfeasible {
                    state: s.to_string(),
                    action: action.to_string(),
                })?;
                row[a] += p;
            }
            deterministic &= row.iter().filter(|&&p| p > 0.0).count() == 1 && row.iter().any(|&p| p == 1.0);
            probs.push(row);
        }
        Ok(if deterministic {
            ModelPolicy::Deterministic(probs.iter().map(|row| row.iter().position(|&p| p == 1.0).unwrap()).collect())
        } else {
            ModelPolicy::Randomized(probs)
        })
    }

    fn check(&self, model: &TransitionModel) -> Result<(), ExactError> {
        let got = match self {
            ModelPolicy::Deterministic(v) => v.len(),
            ModelPolicy::Randomized(v) => v.len(),
        };
        if got != model.num_states() {
            return Err(ExactError::PolicyShape { expected: model.num_states(), got });
        }
        for i in 0..got {
            let ok = match self {
                ModelPolicy::Deterministic(v) => v[i] < model.num_actions(i),
                ModelPolicy::Randomized(v) => v[i].len() == model.num_actions(i),
            };
            if !ok {
                return Err(ExactError::PolicyInfeasible {
                    state: model.state(i).to_string(),
                    action: "out of range".into(),
                });
            }
        }
        Ok(())
    }

    /// `(action index, probability)` pairs with positive probability.
    pub fn law(&self, i: usize) -> Vec<(usize, f64)> {
        match self {
            ModelPolicy::Deterministic(v) => vec![(v[i], 1.0)],
            ModelPolicy::Randomized(v) => v[i].iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(a, &p)| (a, p)).collect(),
        }
    }

    fn sample(&self, i: usize, rng: &mut SimRng) -> usize {
        match self {
            ModelPolicy::Deterministic(v) => v[i],
            ModelPolicy::Randomized(v) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut last = 0;
                for (a, &p) in v[i].iter().enumerate() {
                    if p > 0.0 {
                        acc += p;
                        last = a;
                        if u < acc {
                            return a;
                        }
                    }
                }
                last
            }
        }
    }

    /// Adapter acting on simulator states through the model's codec.
    pub fn bind<'a>(&'a self, model: &'a TransitionModel) -> BoundPolicy<'a> {
        BoundPolicy { policy: self, model }
    }
}

pub struct BoundPolicy<'a> {
    policy: &'a ModelPolicy,
    model: &'a TransitionModel,
}

impl Policy for BoundPolicy<'_> {
    fn act(&self, state: &SystemState, rng: &mut SimRng) -> Action {
        let i = self.model.index_of(state);
        Action(self.model.action(i, self.policy.sample(i, rng)).to_vec())
    }
}

impl ActionLaw for BoundPolicy<'_> {
    fn action_law(&self, state: &SystemState) -> Vec<(Action, f64)> {
        let i = self.model.index_of(state);
        self.policy.law(i).into_iter().map(|(a, p)| (Action(self.model.action(i, a).to_vec()), p)).collect()
    }
}

/// How a policy's average cost was obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CostMethod {
    Stationary { iterations: usize },
    /// The induced chain has several closed classes; the value is a
    /// simulation estimate from the all-empty state.
    Simulated { horizon: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyCost {
    pub average: f64,
    pub method: CostMethod,
}

const POWER_TOLERANCE: f64 = 1e-12;
const POWER_MAX_ITERS: usize = 5_000_000;
const FALLBACK_HORIZON: u64 = 1_000_000;
const FALLBACK_SEED: u64 = 0x5eed;

/// Long-run average cost of `policy`, from the stationary distribution of
/// the induced chain.
pub fn policy_average_cost(model: &TransitionModel, policy: &ModelPolicy) -> Result<PolicyCost, ExactError> {
    policy.check(model)?;
    let ns = model.num_states();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(ns);
    let mut d = vec![0.0; ns];
    for i in 0..ns {
        let mut row: Vec<(usize, f64)> = Vec::new();
        for (a, pa) in policy.law(i) {
            d[i] += pa * model.cost(i, a);
            row.extend(model.transitions(i, a).map(|(j, p)| (j, pa * p)));
        }
        row.sort_unstable_by_key(|&(j, _)| j);
        row.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        rows.push(row);
    }

    let closed = closed_classes(&rows);
    if closed > 1 {
        warn!("policy induces {closed} closed classes; estimating its average cost by simulation");
        let average = simulate_chain(model, policy, FALLBACK_HORIZON, FALLBACK_SEED);
        return Ok(PolicyCost { average, method: CostMethod::Simulated { horizon: FALLBACK_HORIZON } });
    }

    let mut pi = vec![1.0 / ns as f64; ns];
    let mut next = vec![0.0; ns];
    for iter in 1..=POWER_MAX_ITERS {
        for (n, &p) in next.iter_mut().zip(&pi) {
            *n = 0.5 * p;
        }
        for (i, row) in rows.iter().enumerate() {
            let w = 0.5 * pi[i];
            for &(j, p) in row {
                next[j] += w * p;
            }
        }
        let mass: f64 = next.iter().sum();
        let mut diff = 0.0;
        for (p, &n) in pi.iter_mut().zip(&next) {
            let n = n / mass;
            diff += (n - *p).abs();
            *p = n;
        }
        if diff < POWER_TOLERANCE {
            let average = pi.iter().zip(&d).map(|(p, c)| p * c).sum();
            return Ok(PolicyCost { average, method: CostMethod::Stationary { iterations: iter } });
        }
    }
    Err(ExactError::NotConverged { what: "power iteration", iterations: POWER_MAX_ITERS, residual: f64::NAN })
}

fn closed_classes(rows: &[Vec<(usize, f64)>]) -> usize {
    let mut g: DiGraph<(), ()> = DiGraph::with_capacity(rows.len(), 0);
    let nodes: Vec<_> = (0..rows.len()).map(|_| g.add_node(())).collect();
    for (i, row) in rows.iter().enumerate() {
        for &(j, p) in row {
            if p > 0.0 {
                g.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let sccs = tarjan_scc(&g);
    let mut component = vec![0usize; rows.len()];
    for (c, scc) in sccs.iter().enumerate() {
        for n in scc {
            component[n.index()] = c;
        }
    }
    sccs.iter()
        .enumerate()
        .filter(|(c, scc)| {
            scc.iter().all(|n| rows[n.index()].iter().all(|&(j, p)| p <= 0.0 || component[j] == *c))
        })
        .count()
}

fn simulate_chain(model: &TransitionModel, policy: &ModelPolicy, horizon: u64, seed: u64) -> f64 {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut i = 0usize;
    let mut total = 0.0;
    for _ in 0..horizon {
        let a = policy.sample(i, &mut rng);
        total += model.cost(i, a);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut j = i;
        for (k, p) in model.transitions(i, a) {
            acc += p;
            j = k;
            if u < acc {
                break;
            }
        }
        i = j;
    }
    total / horizon as f64
}

/// Direction along which `h*` is required to be monotone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Queue of the given node; `h*` must not decrease as it grows.
    Queue(usize),
    /// Energy level; `h*` must not increase as it grows.
    Energy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonotonicityViolation {
    pub axis: Axis,
    pub lower: usize,
    pub higher: usize,
    pub magnitude: f64,
}

/// All pairs of states differing in one coordinate where `h*` breaks the
/// expected ordering by more than `tol`.
pub fn verify_monotonicity(sol: &RviSolution, model: &TransitionModel, tol: f64) -> Vec<MonotonicityViolation> {
    let mut out = Vec::new();
    let cfg = model.config();
    for (i, s) in model.states().iter().enumerate() {
        for node in 0..cfg.nodes {
            for level in s.q[node] + 1..=cfg.d_max {
                let mut t = s.clone();
                t.q[node] = level;
                let j = model.index_of(&t);
                let magnitude = sol.h[i] - sol.h[j];
                if magnitude > tol {
                    out.push(MonotonicityViolation { axis: Axis::Queue(node), lower: i, higher: j, magnitude });
                }
            }
        }
        for level in s.e + 1..=cfg.e_max {
            let mut t = s.clone();
            t.e = level;
            let j = model.index_of(&t);
            let magnitude = sol.h[j] - sol.h[i];
            if magnitude > tol {
                out.push(MonotonicityViolation { axis: Axis::Energy, lower: i, higher: j, magnitude });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{evaluate_policy, ConversionFunction, CostWeights, Environment, UniformRandomPolicy};
    use approx::assert_abs_diff_eq;

    fn config(nodes: usize, cap: u32, data: f64, energy: f64) -> SystemConfig {
        SystemConfig {
            nodes,
            d_max: cap,
            e_max: cap,
            conversion: ConversionFunction::ScaledLog { scale: 1.0 },
            cost_weights: CostWeights::default(),
            arrival: ArrivalModel::iid_poisson(&vec![data; nodes], energy),
        }
    }

    fn row_sum(model: &TransitionModel, i: usize, a: usize) -> f64 {
        model.transitions(i, a).map(|(_, p)| p).sum()
    }

    #[test]
    fn deterministic_zero_arrivals_four_states() {
        let model = build_model(&config(1, 1, 0.0, 0.0)).unwrap();
        assert_eq!(model.num_states(), 4);
        let table = ConversionTable::new(&model.config().conversion, 1);
        for i in 0..4 {
            let s = model.state(i).clone();
            for a in 0..model.num_actions(i) {
                let t = model.action(i, a)[0];
                let expect = SystemState::new(vec![s.q[0].saturating_sub(table.bits(t))], s.e - t);
                let succ: Vec<_> = model.transitions(i, a).collect();
                assert_eq!(succ, vec![(model.index_of(&expect), 1.0)]);
            }
        }
    }

    #[test]
    fn rows_are_stochastic() {
        let model = build_model(&config(1, 2, 0.5, 1.0)).unwrap();
        for i in 0..model.num_states() {
            for a in 0..model.num_actions(i) {
                assert_abs_diff_eq!(row_sum(&model, i, a), 1.0, epsilon = 1e-12);
                assert!(model.transitions(i, a).all(|(_, p)| p >= 0.0));
            }
        }
    }

    #[test]
    fn two_nodes_cap_three_has_64_states() {
        let model = build_model(&config(2, 3, 1.0, 1.0)).unwrap();
        assert_eq!(model.num_states(), 64);
        assert_eq!(model.num_pairs() as u128, pair_count(2, 3, 3));
        let direct: usize = model.states().iter().map(|s| crate::env::feasible_actions(s).len()).sum();
        assert_eq!(model.num_pairs(), direct);
    }

    #[test]
    fn model_matches_simulated_transitions() {
        let cfg = config(2, 3, 1.2, 1.7);
        let model = build_model(&cfg).unwrap();
        let mut env = Environment::new(cfg).unwrap();
        let mut rng = SimRng::seed_from_u64(4);
        let s = SystemState::new(vec![2, 1], 3);
        let i = model.index_of(&s);
        let a = model.catalog().index_of(3, &[2, 0]).unwrap();
        let trials = 200_000;
        let mut counts = vec![0u32; model.num_states()];
        for _ in 0..trials {
            let mut t = s.clone();
            env.advance(&mut t, &[2, 0], &mut rng).unwrap();
            counts[model.index_of(&t)] += 1;
        }
        let mut exact = vec![0.0; model.num_states()];
        for (j, p) in model.transitions(i, a) {
            exact[j] += p;
        }
        for j in 0..model.num_states() {
            assert_abs_diff_eq!(counts[j] as f64 / trials as f64, exact[j], epsilon = 0.005);
        }
    }

    #[test]
    fn rejects_markov_and_oversized_models() {
        let mut cfg = config(1, 2, 1.0, 1.0);
        cfg.arrival = ArrivalModel::Markov(crate::env::MarkovArrivals {
            coupling: vec![vec![0.5]],
            energy_coeff: 0.5,
            data_noise: vec![crate::env::Distribution::poisson(1.0)],
            energy_noise: crate::env::Distribution::poisson(1.0),
            data_cap: None,
            energy_cap: None,
        });
        assert!(matches!(build_model(&cfg), Err(ExactError::MarkovUnsupported)));
        let big = config(3, 30, 1.0, 1.0);
        assert!(matches!(build_model(&big), Err(ExactError::TooLarge { .. })));
    }

    #[test]
    fn zero_cost_degenerate_model() {
        let mut cfg = config(1, 2, 0.0, 0.0);
        cfg.cost_weights = CostWeights { r1: 0.0, r2: 1.0 };
        let model = build_model(&cfg).unwrap();
        let sol = rvi_solve(&model, RviSettings::default()).unwrap();
        assert_eq!(sol.lambda_star, 0.0);
        assert!(sol.h.iter().all(|&h| h == 0.0));
        assert!(verify_monotonicity(&sol, &model, 1e-9).is_empty());
    }

    /// Stationary law by Gaussian elimination on `π(P − I) = 0`, `Σπ = 1`.
    fn solve_stationary(p: &[Vec<f64>]) -> Vec<f64> {
        let n = p.len();
        let mut m = vec![vec![0.0; n + 1]; n];
        for j in 0..n {
            for i in 0..n {
                m[j][i] = p[i][j] - if i == j { 1.0 } else { 0.0 };
            }
        }
        m[n - 1] = vec![1.0; n + 1];
        for col in 0..n {
            let piv = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
            m.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = m[r][col] / m[col][col];
                    for c in col..=n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
        (0..n).map(|i| m[i][n] / m[i][i]).collect()
    }

    #[test]
    fn rvi_matches_brute_force_over_deterministic_policies() {
        let mut cfg = config(1, 2, 0.3, 1.0);
        cfg.conversion = ConversionFunction::ScaledLog { scale: 1.0 };
        let model = build_model(&cfg).unwrap();
        let sol = rvi_solve(&model, RviSettings::default()).unwrap();
        let ns = model.num_states();
        let sizes: Vec<usize> = (0..ns).map(|i| model.num_actions(i)).collect();
        let total: usize = sizes.iter().product();
        let mut best = f64::INFINITY;
        for code in 0..total {
            let mut rest = code;
            let choice: Vec<usize> = sizes
                .iter()
                .map(|&k| {
                    let a = rest % k;
                    rest /= k;
                    a
                })
                .collect();
            let mut p = vec![vec![0.0; ns]; ns];
            for i in 0..ns {
                for (j, pr) in model.transitions(i, choice[i]) {
                    p[i][j] += pr;
                }
            }
            let pi = solve_stationary(&p);
            let avg: f64 = (0..ns).map(|i| pi[i] * model.cost(i, choice[i])).sum();
            best = best.min(avg);
        }
        assert_eq!(total, 216);
        assert_abs_diff_eq!(sol.lambda_star, best, epsilon = 1e-6);
    }

    #[test]
    fn solution_satisfies_bellman_equation() {
        for cfg in [config(1, 2, 0.3, 1.0), config(1, 5, 1.0, 2.0), config(2, 3, 0.8, 2.0)] {
            let model = build_model(&cfg).unwrap();
            let sol = rvi_solve(&model, RviSettings::default()).unwrap();
            assert!(sol.bellman_residual(&model) < 1e-8);
            assert!(sol.q_consistency(&model) < 1e-10);
            assert_eq!(sol.h[sol.reference_state], 0.0);
            let greedy = policy_average_cost(&model, &sol.greedy_policy(&model)).unwrap();
            assert!(matches!(greedy.method, CostMethod::Stationary { .. }));
            assert_abs_diff_eq!(greedy.average, sol.lambda_star, epsilon = 1e-8);
        }
    }

    #[test]
    fn skipping_reference_subtraction_is_detected() {
        let model = build_model(&config(1, 2, 0.3, 1.0)).unwrap();
        let settings = RviSettings { subtract_reference: false, ..RviSettings::default() };
        let sol = rvi_solve(&model, settings).unwrap();
        assert!(sol.bellman_residual(&model) > 1e-3);
    }

    #[test]
    fn monotone_differential_values() {
        for cfg in [config(1, 5, 1.0, 2.0), config(2, 3, 1.0, 2.0)] {
            let model = build_model(&cfg).unwrap();
            let sol = rvi_solve(&model, RviSettings::default()).unwrap();
            assert_eq!(verify_monotonicity(&sol, &model, 1e-9), vec![]);
        }
    }

    #[test]
    fn monotonicity_check_flags_planted_violation() {
        let model = build_model(&config(1, 2, 0.3, 1.0)).unwrap();
        let mut sol = rvi_solve(&model, RviSettings::default()).unwrap();
        let top = model.index_of(&SystemState::new(vec![2], 0));
        sol.h[top] = -10.0;
        assert!(verify_monotonicity(&sol, &model, 1e-9).iter().any(|v| v.axis == Axis::Queue(0) && v.higher == top));
    }

    #[test]
    fn idle_policy_without_arrivals_costs_nothing() {
        let model = build_model(&config(1, 2, 0.0, 0.0)).unwrap();
        let idle = ModelPolicy::Deterministic(vec![0; model.num_states()]);
        let cost = policy_average_cost(&model, &idle).unwrap();
        assert_eq!(cost.average, 0.0);
        assert!(matches!(cost.method, CostMethod::Simulated { .. }));
    }

    #[test]
    fn law_tabulation_round_trips() {
        let model = build_model(&config(2, 2, 1.0, 1.0)).unwrap();
        let uniform = ModelPolicy::from_law(&model, &UniformRandomPolicy).unwrap();
        assert!(matches!(uniform, ModelPolicy::Randomized(_)));
        let sol = rvi_solve(&model, RviSettings::default()).unwrap();
        let greedy = sol.greedy_policy(&model);
        assert_eq!(ModelPolicy::from_law(&model, &greedy.bind(&model)).unwrap(), greedy);
    }

    #[test]
    fn exact_cost_matches_simulation_for_fixed_policy() {
        let cfg = config(1, 3, 1.0, 1.5);
        let model = build_model(&cfg).unwrap();
        // serve the whole queue up to the available energy
        let rule = |s: &SystemState, _: &mut SimRng| Action(vec![s.q[0].min(s.e)]);
        let tab = ModelPolicy::Deterministic(
            model.states().iter().map(|s| model.catalog().index_of(s.e, &[s.q[0].min(s.e)]).unwrap()).collect(),
        );
        let exact = policy_average_cost(&model, &tab).unwrap().average;
        let sim = evaluate_policy(&rule, &cfg, 1_000_000, 8).unwrap().avg_cost;
        assert!((sim - exact).abs() <= 0.01 * exact, "sim {sim} exact {exact}");
    }

    #[test]
    fn csv_dump_has_a_row_per_state() {
        let model = build_model(&config(1, 2, 0.3, 1.0)).unwrap();
        let sol = rvi_solve(&model, RviSettings::default()).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&model, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), model.num_states() + 1);
        assert!(text.starts_with("state,q,e,h,best_action"));
    }
}
