use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::env::{evaluate_policy, ArrivalModel, SystemConfig};

use super::solver::{prepare, SolverSpec};
use super::HarnessError;

pub const SCHEMA_VERSION: u32 = 1;

/// Quantity varied across the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepVariable {
    /// Mean data arrival at one node (0-based).
    DataMean { node: usize },
    EnergyMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

fn one() -> u32 {
    1
}

/// Everything needed to reproduce an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub system: SystemConfig,
    pub solvers: Vec<SolverSpec>,
    /// Without a sweep the base system is run once, reported at value 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    #[serde(default = "one")]
    pub replicas: u32,
    /// Evaluation horizon per replica.
    pub horizon: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Fill the `seconds` column with wall-clock time. Off by default so
    /// repeated runs produce identical files.
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut text = String::new();
        std::fs::File::open(path)?.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::SchemaVersion { found: self.schema_version, expected: SCHEMA_VERSION });
        }
        self.system.validate()?;
        if self.solvers.is_empty() {
            return Err(HarnessError::InvalidSpec("at least one solver is required".into()));
        }
        if self.replicas == 0 || self.horizon == 0 {
            return Err(HarnessError::InvalidSpec("replicas and horizon must be at least 1".into()));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(HarnessError::InvalidSpec("sweep grid is empty".into()));
            }
        }
        for (_, cfg) in self.points()? {
            cfg.validate()?;
        }
        Ok(())
    }

    /// Grid values with the system configuration at each.
    pub fn points(&self) -> Result<Vec<(f64, SystemConfig)>, HarnessError> {
        let Some(sweep) = &self.sweep else {
            return Ok(vec![(0.0, self.system.clone())]);
        };
        sweep.values.iter().map(|&v| Ok((v, apply_sweep(&self.system, &sweep.variable, v)?))).collect()
    }
}

/// `config` with the swept mean set to `value`.
pub fn apply_sweep(config: &SystemConfig, variable: &SweepVariable, value: f64) -> Result<SystemConfig, HarnessError> {
    let mut out = config.clone();
    let ArrivalModel::Iid { data, energy } = &mut out.arrival else {
        return Err(HarnessError::InvalidSpec("sweeps need i.i.d. arrivals".into()));
    };
    match *variable {
        SweepVariable::DataMean { node } => {
            let slot = data
                .get_mut(node)
                .ok_or_else(|| HarnessError::InvalidSpec(format!("sweep node {node} out of range")))?;
            *slot = slot.with_mean(value)?;
        }
        SweepVariable::EnergyMean => *energy = energy.with_mean(value)?,
    }
    Ok(out)
}

/// One aggregated line of output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep_value: f64,
    pub solver: String,
    pub mean_cost: f64,
    pub stderr: f64,
    pub mean_queue_sum: f64,
    pub seconds: f64,
}

/// Outcome of one (grid point, solver, replica) job.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaResult {
    pub point: usize,
    pub solver: usize,
    pub replica: u32,
    pub cost: f64,
    pub queue_sum: f64,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub replicas: Vec<ReplicaResult>,
}

impl ExperimentOutcome {
    /// Per-replica costs for a (point, solver label) pair.
    pub fn costs(&self, point: usize, solver: usize) -> Vec<f64> {
        let mut v: Vec<&ReplicaResult> = self.replicas.iter().filter(|r| r.point == point && r.solver == solver).collect();
        v.sort_by_key(|r| r.replica);
        v.into_iter().map(|r| r.cost).collect()
    }
}

/// Training seed of a replica. Shared by all solvers at a grid point.
pub fn training_seed(master: u64, point: usize, replica: u32) -> u64 {
    derive_seed(master, &[point as u64, replica as u64, 0])
}

/// Evaluation seed of a replica. Shared by all solvers, so they face the
/// same arrival sequences.
pub fn evaluation_seed(master: u64, point: usize, replica: u32) -> u64 {
    derive_seed(master, &[point as u64, replica as u64, 1])
}

/// Sample mean and standard error of the mean.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn run_job(spec: &ExperimentSpec, config: &SystemConfig, point: usize, solver: usize, replica: u32) -> ReplicaResult {
    let start = Instant::now();
    let outcome = prepare(&spec.solvers[solver], config, training_seed(spec.seed, point, replica)).and_then(|policy| {
        Ok(evaluate_policy(policy.as_policy(), config, spec.horizon, evaluation_seed(spec.seed, point, replica))?)
    });
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(eval) => ReplicaResult { point, solver, replica, cost: eval.avg_cost, queue_sum: eval.avg_queue_sum, seconds, error: None },
        Err(err) => ReplicaResult { point, solver, replica, cost: f64::NAN, queue_sum: f64::NAN, seconds, error: Some(err.to_string()) },
    }
}

fn summarize(spec: &ExperimentSpec, value: f64, solver: usize, results: &[ReplicaResult]) -> ResultRow {
    let label = spec.solvers[solver].label();
    let seconds = if spec.record_timing { results.iter().map(|r| r.seconds).sum() } else { 0.0 };
    if let Some(err) = results.iter().find_map(|r| r.error.as_ref()) {
        log::error!("solver {label} failed at sweep value {value}: {err}");
        return ResultRow { sweep_value: value, solver: label, mean_cost: f64::NAN, stderr: f64::NAN, mean_queue_sum: f64::NAN, seconds };
    }
    let costs: Vec<f64> = results.iter().map(|r| r.cost).collect();
    let queues: Vec<f64> = results.iter().map(|r| r.queue_sum).collect();
    let (mean_cost, stderr) = mean_and_stderr(&costs);
    ResultRow { sweep_value: value, solver: label, mean_cost, stderr, mean_queue_sum: mean_and_stderr(&queues).0, seconds }
}

/// Runs every grid point × solver × replica on up to `workers` threads.
///
/// `sink` receives rows in grid-then-solver order as soon as each row and
/// all rows before it are complete, so output order never depends on
/// scheduling.
pub fn run_experiment(
    spec: &ExperimentSpec,
    workers: usize,
    sink: &mut dyn FnMut(&ResultRow) -> Result<(), HarnessError>,
) -> Result<ExperimentOutcome, HarnessError> {
    spec.validate()?;
    let points = spec.points()?;
    let solvers = spec.solvers.len();
    let jobs: Vec<(usize, usize, u32)> = (0..points.len())
        .flat_map(|p| (0..solvers).flat_map(move |s| (0..spec.replicas).map(move |r| (p, s, r))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::InvalidSpec(format!("cannot start worker pool: {e}")))?;

    let (tx, rx) = mpsc::channel::<ReplicaResult>();
    let mut outcome = ExperimentOutcome::default();
    std::thread::scope(|scope| -> Result<(), HarnessError> {
        let points = &points;
        scope.spawn(move || {
            pool.install(|| {
                jobs.par_iter().for_each_with(tx, |tx, &(p, s, r)| {
                    let _ = tx.send(run_job(spec, &points[p].1, p, s, r));
                })
            })
        });
        let mut pending: BTreeMap<usize, Vec<ReplicaResult>> = BTreeMap::new();
        let mut next = 0;
        for result in rx {
            let group = result.point * solvers + result.solver;
            outcome.replicas.push(result.clone());
            pending.entry(group).or_default().push(result);
            while pending.get(&next).is_some_and(|v| v.len() == spec.replicas as usize) {
                let mut done = pending.remove(&next).expect("checked");
                done.sort_by_key(|r| r.replica);
                let row = summarize(spec, points[next / solvers].0, next % solvers, &done);
                sink(&row)?;
                outcome.rows.push(row);
                next += 1;
            }
        }
        Ok(())
    })?;
    outcome.replicas.sort_by_key(|r| (r.point, r.solver, r.replica));
    Ok(outcome)
}

/// CSV writer that emits one row at a time, flushing after each.
pub struct RowWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> RowWriter<W> {
    pub fn new(out: W) -> Self {
        Self { inner: csv::Writer::from_writer(out) }
    }

    pub fn write(&mut self, row: &ResultRow) -> Result<(), HarnessError> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }

    /// Writes the header alone, for runs that produce no rows.
    pub fn header_only(out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sweep_value", "solver", "mean_cost", "stderr", "mean_queue_sum", "seconds"])?;
        w.flush()?;
        Ok(())
    }
}

pub fn write_rows<W: Write>(rows: &[ResultRow], out: W) -> Result<(), HarnessError> {
    if rows.is_empty() {
        return RowWriter::header_only(out);
    }
    let mut w = RowWriter::new(out);
    rows.iter().try_for_each(|r| w.write(r))
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<ResultRow>, HarnessError> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(HarnessError::from)).collect()
}
