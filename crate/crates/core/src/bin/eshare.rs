use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use eshare::aggregate::PartitionSpec;
use eshare::crossent::CeConfig;
use eshare::env::evaluate_policy;
use eshare::exact::{build_model, rvi_solve, RviSettings};
use eshare::harness::{
    evaluation_seed, prepare, run_experiment, training_seed, verify_suite, ExperimentSpec, FeatureSpec, PolicySnapshot, RowWriter,
    SolverKind, SolverSpec, Tamper, VerifyLevel,
};
use eshare::qlearn::LearnerConfig;

/// Energy sharing experiments: simulation, exact solution, learning and
/// verification.
#[derive(Parser)]
#[command(name = "eshare", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out one solver's policy and print trajectory statistics.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Solver label from the file; the first solver when omitted.
        #[arg(long)]
        solver: Option<String>,
        /// Steps to simulate; the file's horizon when omitted.
        #[arg(long)]
        horizon: Option<u64>,
    },
    /// Solve the base system exactly and write the differential values.
    SolveExact {
        #[command(flatten)]
        common: Common,
    },
    /// Train a learner on the base system and write a policy snapshot.
    Train {
        #[arg(value_enum)]
        learner: Learner,
        #[command(flatten)]
        common: Common,
    },
    /// Run the experiment grid and write one CSV row per point and solver.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run the verification suite.
    Verify {
        #[arg(value_enum)]
        level: Level,
        #[arg(long, value_enum)]
        tamper: Option<TamperArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Learner {
    Ql,
    Qlsa,
    Ce,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Quick,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum TamperArg {
    CostSign,
    SkipReference,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn load(common: &Common) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::load(&common.config).with_context(|| format!("cannot load {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    Ok(spec)
}

fn simulate(common: Common, solver: Option<String>, horizon: Option<u64>) -> Result<()> {
    let spec = load(&common)?;
    let chosen = match &solver {
        Some(label) => spec.solvers.iter().find(|s| &s.label() == label).with_context(|| format!("no solver labelled {label}"))?,
        None => &spec.solvers[0],
    };
    let horizon = horizon.unwrap_or(spec.horizon);
    let policy = prepare(chosen, &spec.system, training_seed(spec.seed, 0, 0))?;
    let eval = evaluate_policy(policy.as_policy(), &spec.system, horizon, evaluation_seed(spec.seed, 0, 0))?;
    let mut w = csv::Writer::from_writer(output(common.out.as_deref())?);
    w.write_record(["solver", "horizon", "avg_cost", "avg_queue_sum", "dropped_data", "dropped_energy"])?;
    w.write_record([
        chosen.label(),
        horizon.to_string(),
        eval.avg_cost.to_string(),
        eval.avg_queue_sum.to_string(),
        eval.dropped_data.to_string(),
        eval.dropped_energy.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

fn solve_exact(common: Common) -> Result<()> {
    let spec = load(&common)?;
    let model = build_model(&spec.system)?;
    let sol = rvi_solve(&model, RviSettings::default())?;
    log::info!(
        "optimal average cost {} after {} iterations, bellman residual {:.3e}",
        sol.lambda_star,
        sol.iterations,
        sol.bellman_residual(&model)
    );
    eprintln!("lambda_star {}", sol.lambda_star);
    sol.write_csv(&model, output(common.out.as_deref())?)?;
    Ok(())
}

/// The file's first solver of the requested kind, or defaults.
fn learner_spec(spec: &ExperimentSpec, learner: Learner) -> SolverSpec {
    let found = spec.solvers.iter().find(|s| {
        matches!(
            (learner, &s.kind),
            (Learner::Ql, SolverKind::Ql { .. }) | (Learner::Qlsa, SolverKind::Qlsa { .. }) | (Learner::Ce, SolverKind::Ce { .. })
        )
    });
    if let Some(s) = found {
        return s.clone();
    }
    SolverSpec::new(match learner {
        Learner::Ql => SolverKind::Ql { learner: LearnerConfig::default() },
        Learner::Qlsa => SolverKind::Qlsa { partitions: PartitionSpec::Count { data: 3, energy: 3 }, learner: LearnerConfig::default() },
        Learner::Ce => SolverKind::Ce {
            partitions: PartitionSpec::Count { data: 3, energy: 3 },
            features: FeatureSpec::Hashed { dimension: 50, seed: 0 },
            ce: CeConfig::default(),
        },
    })
}

fn train(learner: Learner, common: Common) -> Result<()> {
    let spec = load(&common)?;
    let solver = learner_spec(&spec, learner);
    let policy = prepare(&solver, &spec.system, training_seed(spec.seed, 0, 0))?;
    PolicySnapshot::new(&spec.system, &solver.label(), policy.snapshot_rows()).write(output(common.out.as_deref())?)?;
    Ok(())
}

fn sweep(common: Common, workers: usize) -> Result<()> {
    let spec = load(&common)?;
    let path = common.out.clone().or_else(|| spec.output.clone());
    let mut writer = RowWriter::new(output(path.as_deref())?);
    let outcome = run_experiment(&spec, workers, &mut |row| writer.write(row))?;
    let failed = outcome.replicas.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} replica runs failed; their rows carry NaN");
    }
    Ok(())
}

fn verify(level: Level, tamper: Option<TamperArg>, out: Option<PathBuf>) -> Result<()> {
    let level = match level {
        Level::Quick => VerifyLevel::Quick,
        Level::Full => VerifyLevel::Full,
    };
    let tamper = tamper.map(|t| match t {
        TamperArg::CostSign => Tamper::CostSignFlip,
        TamperArg::SkipReference => Tamper::SkipReferenceSubtraction,
    });
    let report = verify_suite(level, tamper);
    let mut w = output(out.as_deref())?;
    for check in &report.checks {
        writeln!(w, "{check}")?;
    }
    w.flush()?;
    if !report.passed() {
        bail!("{} of {} checks failed", report.checks.iter().filter(|c| !c.passed).count(), report.checks.len());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Simulate { common, solver, horizon } => simulate(common, solver, horizon),
        Command::SolveExact { common } => solve_exact(common),
        Command::Train { learner, common } => train(learner, common),
        Command::Sweep { common, workers } => sweep(common, workers),
        Command::Verify { level, tamper, out } => verify(level, tamper, out),
    }
}
