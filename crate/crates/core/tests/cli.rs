use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use derfl::data::{load_csv, CsvSchema, LoadOptions};

const SCENARIO: &str = r#"
seed = 4
output_dir = "results"
methods = ["fedavg", "hc", "ifca", "local_only"]

[population]
n_clients = 6
n_archetypes = 2
days = 14
feeders = 2
der_mix = { fixed_load = 0.5, pv = 0.5 }

[model]
lag = 12

[fl]
rounds = 6
local_epochs = 1
batch_size = 16
[fl.optimizer]
lr = 0.02

[cluster]
tau = 0.1
k = 2
"#;

fn derfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_derfl")).args(args).output().expect("binary runs")
}

fn write_scenario(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("scenario.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn files_under(dir: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.insert(p);
        }
    }
    out
}

#[test]
fn compare_writes_both_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), SCENARIO);
    let out = derfl(&["compare", "--config", cfg.to_str().unwrap(), "--seeds", "1..2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for seed in [1, 2] {
        let csv = std::fs::read_to_string(dir.path().join(format!("results/compare_seed{seed}.csv"))).unwrap();
        let methods: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(methods, ["fedavg", "hc", "ifca", "local_only"]);
        assert!(dir.path().join(format!("results/compare_seed{seed}.json")).exists());
    }
    // everything written sits inside output_dir
    let written: Vec<PathBuf> = files_under(dir.path()).into_iter().filter(|p| p != &cfg).collect();
    assert!(written.iter().all(|p| p.starts_with(dir.path().join("results"))), "{written:?}");
}

#[test]
fn missing_config_is_a_config_error() {
    let out = derfl(&["compare", "--config", "/nonexistent/scenario.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/scenario.toml"));
    let usage = derfl(&["frobnicate"]);
    assert_eq!(usage.status.code(), Some(1));
}

#[test]
fn typo_and_bad_values_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), &SCENARIO.replace("lr = 0.02", "leraning_rate = 0.02"));
    let out = derfl(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("leraning_rate"));

    let cfg = write_scenario(dir.path(), &SCENARIO.replace("lr = 0.02", "lr = -0.1"));
    let out = derfl(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fl.optimizer.lr"));
}

#[test]
fn divergence_exits_3_with_round() {
    let dir = tempfile::tempdir().unwrap();
    let text = SCENARIO.replace("lr = 0.02", "lr = 10.0").replace("rounds = 6", "rounds = 30");
    let cfg = write_scenario(dir.path(), &text);
    let out = derfl(&["run", "--config", cfg.to_str().unwrap(), "--method", "fedavg"]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(3), "{stderr}");
    assert!(stderr.contains("in round "), "{stderr}");
}

#[test]
fn ingest_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("gap.csv"),
        "timestamp,client_id,value_kw\n2022-01-01T00:00:00Z,m1,1\n2022-01-01T02:00:00Z,m1,1\n",
    )
    .unwrap();
    let text = r#"
[ingest]
path = "gap.csv"

[model]
lag = 2

[fl]
rounds = 1
local_epochs = 1
[fl.optimizer]
lr = 0.1
"#;
    let cfg = write_scenario(dir.path(), text);
    let out = derfl(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("m1"));
}

#[test]
fn generate_round_trips_through_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), SCENARIO);
    let out = derfl(&["generate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("data").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = dir.path().join("data/dataset.csv");
    let loaded = load_csv(&csv, &CsvSchema::default(), LoadOptions::default()).unwrap();

    let scenario = derfl::config::parse_config(&cfg).unwrap();
    let generated = scenario.datasets().unwrap();
    assert_eq!(loaded.len(), generated.len());
    for (a, b) in loaded.iter().zip(&generated) {
        assert_eq!(a.client_id, b.client_id);
        assert_eq!(a.feeder_id, b.feeder_id);
        assert_eq!(a.der_class, b.der_class);
        assert_eq!(a.archetype_id, -1);
        assert_eq!(a.series, b.series, "17 significant digits round-trip exactly");
        assert_eq!(a.covariates, b.covariates);
    }

    // a second generate is byte-identical
    let first = std::fs::read(&csv).unwrap();
    derfl(&["generate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("data").to_str().unwrap()]);
    assert_eq!(first, std::fs::read(&csv).unwrap());
}

#[test]
fn run_writes_round_log_and_result() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), SCENARIO);
    let out = derfl(&["run", "--config", cfg.to_str().unwrap(), "--method", "ifca", "--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rounds = std::fs::read_to_string(dir.path().join("results/run_ifca_seed9_rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 1 + 6);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("results/run_ifca_seed9_result.json")).unwrap())
            .unwrap();
    assert_eq!(json["seed"], 9);
    assert_eq!(json["mode"]["mode"], "ifca");
    assert_eq!(json["reports"].as_array().unwrap().len(), 6);
    assert!(json.get("wall_time_secs").is_none());

    let out = derfl(&["run", "--config", cfg.to_str().unwrap(), "--method", "local_only"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_writes_points_and_tradeoff() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SCENARIO}\n[dp]\nclip_norm = 1.0\n");
    let cfg = write_scenario(dir.path(), &text);
    let out = derfl(&["sweep", "--config", cfg.to_str().unwrap(), "--param", "dp.sigma", "--values", "0,0.5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results = dir.path().join("results");
    assert!(results.join("sweep_dp_sigma_00_seed4.csv").exists());
    assert!(results.join("sweep_dp_sigma_01_seed4.json").exists());
    let tradeoff = std::fs::read_to_string(results.join("sweep_dp_sigma_tradeoff.csv")).unwrap();
    assert_eq!(tradeoff.lines().count(), 1 + 2 * 4);

    // sigma without a finite clip norm is rejected before any work
    let cfg = write_scenario(dir.path(), SCENARIO);
    let out = derfl(&["sweep", "--config", cfg.to_str().unwrap(), "--param", "dp.sigma", "--values", "1"]);
    assert_eq!(out.status.code(), Some(1));
}
