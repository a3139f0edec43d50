use std::path::PathBuf;
use std::process::Command;

use eshare::env::{evaluate_policy, ArrivalModel, ConversionFunction, CostWeights, SystemConfig, UniformRandomPolicy};
use eshare::exact::{build_model, policy_average_cost, ModelPolicy};
use eshare::harness::*;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_eshare")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn uniform_policy_simulation_matches_stationary_cost() {
    let cfg = SystemConfig {
        nodes: 2,
        d_max: 3,
        e_max: 3,
        conversion: ConversionFunction::ScaledLog { scale: 1.0 },
        cost_weights: CostWeights::default(),
        arrival: ArrivalModel::iid_poisson(&[0.7, 0.4], 1.5),
    };
    let model = build_model(&cfg).unwrap();
    assert_eq!(model.num_states(), 64);
    let exact = policy_average_cost(&model, &ModelPolicy::from_law(&model, &UniformRandomPolicy).unwrap()).unwrap().average;
    let sim = evaluate_policy(&UniformRandomPolicy, &cfg, 10_000_000, 17).unwrap().avg_cost;
    assert!((sim - exact).abs() <= 0.005 * exact, "simulated {sim}, exact {exact}");
}

#[test]
fn shipped_configs_load() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ExperimentSpec::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 2);
}

#[test]
fn cli_subcommands_produce_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = configs_dir().join("small.json");
    let config = config.to_str().unwrap();
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    cli(&["sweep", "--config", config, "--out", &path("sweep.csv")]);
    let rows = read_rows(std::fs::File::open(path("sweep.csv")).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.solver.as_str()).collect::<Vec<_>>(), ["exact", "greedy", "ql-eps", "qlsa", "ce"]);
    assert!(rows[0].mean_cost <= rows[1].mean_cost);

    let sim = cli(&["simulate", "--config", config, "--solver", "greedy", "--horizon", "1000"]);
    assert!(String::from_utf8(sim.stdout).unwrap().starts_with("solver,horizon,avg_cost,avg_queue_sum,dropped_data,dropped_energy\ngreedy,1000,"));

    let exact = cli(&["solve-exact", "--config", config]);
    let text = String::from_utf8(exact.stdout).unwrap();
    assert!(text.starts_with("state,q,e,h,best_action\n"));
    assert_eq!(text.lines().count(), 1 + 9);

    let spec = ExperimentSpec::load(std::path::Path::new(config)).unwrap();
    for learner in ["ql", "qlsa", "ce"] {
        cli(&["train", learner, "--config", config, "--out", &path("policy.txt")]);
        let snap = PolicySnapshot::read(std::io::BufReader::new(std::fs::File::open(path("policy.txt")).unwrap())).unwrap();
        assert_eq!(snap.config_hash, config_hash(&spec.system));
        assert!(!snap.rows.is_empty(), "{learner}");
    }
}

#[test]
fn verify_tamper_is_reported() {
    let out = Command::new(env!("CARGO_BIN_EXE_eshare")).args(["verify", "quick", "--tamper", "cost-sign"]).output().unwrap();
    assert!(!out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().next().unwrap().starts_with("FAIL cost identity"));
    assert!(text.contains("PASS bellman residual"));
}

#[test]
fn costs_rise_with_load() {
    let mut spec = ordering_spec(1_000_000, 1, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5]);
    spec.solvers.truncate(2);
    spec.horizon = 200_000;
    let out = run_experiment(&spec, 1, &mut |_| Ok(())).unwrap();
    for solver in 0..2 {
        let curve: Vec<f64> = (0..6).map(|p| out.costs(p, solver)[0]).collect();
        assert!(curve.windows(2).all(|w| w[0] <= w[1]), "{}: {curve:?}", spec.solvers[solver].label());
    }
}
