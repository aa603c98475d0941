//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
//! failure. Diagnostics go to stderr; every output file lands in the
//! scenario's output directory (or `--out` for `generate`).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{from_table, load_table, parse_config, set_path, ScenarioConfig};
use crate::data::write_csv;
use crate::error::{Error, Result};
use crate::eval::{run_comparison, run_method, ComparisonTable, Method};
use crate::fedcore::RunResult;
use crate::fmt17;

#[derive(Debug, Parser)]
#[command(name = "derfl", version, about = "Federated DER forecasting simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the scenario's client population as a dataset CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the scenario's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one federated method and write its round log and result.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// fedavg, hc or ifca; defaults to the scenario's cluster.mode.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score every configured method on identical test splits.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Seeds as a list (`1,2,3`) and/or inclusive ranges (`1..10`).
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        seeds: Vec<String>,
    },
    /// Repeat `compare` over a grid of values for one scenario key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted scenario key, e.g. `dp.sigma`.
        #[arg(long)]
        param: String,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        seeds: Vec<String>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn execute<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(written) => {
            for p in written {
                println!("wrote {}", p.display());
            }
            0
        }
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Anything that goes wrong before the scenario is validated is a
/// configuration failure, whatever its underlying kind.
enum Failure {
    Config(Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn load(path: &Path) -> std::result::Result<ScenarioConfig, Failure> {
    parse_config(path).map_err(Failure::Config)
}

fn dispatch(cmd: Command) -> std::result::Result<Vec<PathBuf>, Failure> {
    match cmd {
        Command::Generate { config, out } => {
            let cfg = load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let data = cfg.datasets()?;
            create_dir(&dir)?;
            let path = dir.join("dataset.csv");
            write_csv(&path, &data)?;
            Ok(vec![path])
        }
        Command::Run { config, method, seed } => {
            let cfg = load(&config)?;
            let cfg = match seed {
                Some(s) => cfg.with_seed(s),
                None => cfg,
            };
            let method = match method {
                Some(m) => parse_run_method(&m).map_err(Failure::Config)?,
                None => cfg.default_run_method(),
            };
            let mut exp = cfg.experiment();
            exp.methods = vec![method];
            // surface missing tau / k as configuration problems
            exp.mode_for(method).map_err(Failure::Config)?;
            let (result, _) = run_method(&cfg.datasets()?, &exp, method)?;
            create_dir(&cfg.output_dir)?;
            let stem = format!("run_{}_seed{}", method.name(), cfg.seed);
            let rounds = cfg.output_dir.join(format!("{stem}_rounds.csv"));
            let json = cfg.output_dir.join(format!("{stem}_result.json"));
            write_file(&rounds, &rounds_csv(&result))?;
            write_file(&json, &serde_json::to_string_pretty(&result).expect("run result serializes"))?;
            Ok(vec![rounds, json])
        }
        Command::Compare { config, seeds } => {
            let cfg = load(&config)?;
            let seeds = parse_seeds(&seeds, cfg.seed).map_err(Failure::Config)?;
            create_dir(&cfg.output_dir)?;
            let mut written = Vec::new();
            for seed in seeds {
                let table = compare_once(&cfg, seed)?;
                written.extend(write_table(&cfg.output_dir, &format!("compare_seed{seed}"), &table)?);
            }
            Ok(written)
        }
        Command::Sweep { config, param, values, seeds } => sweep(&config, &param, &values, &seeds),
    }
}

fn compare_once(cfg: &ScenarioConfig, seed: u64) -> Result<ComparisonTable> {
    let cfg = cfg.clone().with_seed(seed);
    run_comparison(&cfg.datasets()?, &cfg.experiment())
}

fn sweep(config: &Path, param: &str, values: &[String], seeds: &[String]) -> std::result::Result<Vec<PathBuf>, Failure> {
    let base_cfg = load(config)?;
    let table = load_table(config).map_err(Failure::Config)?;
    let base_dir = config.parent().unwrap_or(Path::new(""));
    let seeds = parse_seeds(seeds, base_cfg.seed).map_err(Failure::Config)?;
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let mut t = table.clone();
        set_path(&mut t, param, v).map_err(Failure::Config)?;
        let cfg = from_table(t, base_dir).map_err(|e| Failure::Config(Error::Config(format!("{param} = {v}: {e}"))))?;
        points.push((v.clone(), cfg));
    }
    let out_dir = base_cfg.output_dir.clone();
    create_dir(&out_dir)?;
    let slug: String = param.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    let mut written = Vec::new();
    let mut tradeoff = String::from("param,value,seed,method,mean_mae,median_mae,feeder_mae,total_bytes\n");
    for (i, (value, cfg)) in points.iter().enumerate() {
        for &seed in &seeds {
            let table = compare_once(cfg, seed)?;
            written.extend(write_table(&out_dir, &format!("sweep_{slug}_{i:02}_seed{seed}"), &table)?);
            for r in &table.rows {
                tradeoff.push_str(&format!(
                    "{param},{value},{seed},{},{},{},{},{}\n",
                    r.method.name(),
                    fmt17(r.mean.mae),
                    fmt17(r.median.mae),
                    fmt17(r.feeder.mae),
                    r.total_bytes
                ));
            }
        }
    }
    let path = out_dir.join(format!("sweep_{slug}_tradeoff.csv"));
    write_file(&path, &tradeoff)?;
    written.push(path);
    Ok(written)
}

fn parse_run_method(name: &str) -> Result<Method> {
    match Method::parse(name) {
        Some(m @ (Method::Fedavg | Method::Hc | Method::Ifca)) => Ok(m),
        Some(_) => Err(Error::config(format!(
            "`run` trains one federated model (fedavg, hc or ifca); use `compare` for `{name}`"
        ))),
        None => Err(Error::config(format!("unknown method `{name}`"))),
    }
}

/// Expands `a..b` (inclusive) and plain integers; empty input means the
/// scenario seed.
pub fn parse_seeds(tokens: &[String], default: u64) -> Result<Vec<u64>> {
    let bad = |t: &str| Error::config(format!("invalid seed `{t}`"));
    let mut seeds = Vec::new();
    for t in tokens.iter().map(|t| t.trim()).filter(|t| !t.is_empty()) {
        if let Some((a, b)) = t.split_once("..") {
            let a: u64 = a.parse().map_err(|_| bad(t))?;
            let b: u64 = b.trim_start_matches('=').parse().map_err(|_| bad(t))?;
            if b < a {
                return Err(bad(t));
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(t.parse().map_err(|_| bad(t))?);
        }
    }
    if seeds.is_empty() {
        seeds.push(default);
    }
    Ok(seeds)
}

/// One line per round; empty cells where a value is absent.
pub fn rounds_csv(result: &RunResult) -> String {
    let opt = |v: Option<f64>| v.map(fmt17).unwrap_or_default();
    let mut out = String::from(
        "round,participants,mean_train_loss,val_loss,all_client_val_loss,models_broadcast,param_bytes,bytes_up,bytes_down,n_clusters,clustering_round,dp_max_clipped_norm\n",
    );
    for r in &result.reports {
        let mean_train = r.client_train_loss.iter().sum::<f64>() / r.client_train_loss.len().max(1) as f64;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.round,
            r.participants.len(),
            fmt17(mean_train),
            fmt17(r.val_loss),
            opt(r.all_client_val_loss),
            r.models_broadcast,
            r.param_bytes,
            r.bytes_up,
            r.bytes_down,
            r.n_clusters,
            r.clustering_round,
            opt(r.dp_max_clipped_norm)
        ));
    }
    out
}

fn write_table(dir: &Path, stem: &str, table: &ComparisonTable) -> Result<Vec<PathBuf>> {
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    write_file(&csv, &table.to_csv())?;
    write_file(&json, &table.to_json())?;
    Ok(vec![csv, json])
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists_and_ranges() {
        let s = |v: &[&str]| parse_seeds(&v.iter().map(|x| x.to_string()).collect::<Vec<_>>(), 42);
        assert_eq!(s(&[]).unwrap(), vec![42]);
        assert_eq!(s(&["1..3", "7"]).unwrap(), vec![1, 2, 3, 7]);
        assert_eq!(s(&["2..=3"]).unwrap(), vec![2, 3]);
        assert!(s(&["3..1"]).is_err());
        assert!(s(&["x"]).is_err());
    }

    #[test]
    fn run_methods() {
        assert_eq!(parse_run_method("ifca").unwrap(), Method::Ifca);
        assert!(matches!(parse_run_method("local_only"), Err(Error::Config(_))));
        assert!(matches!(parse_run_method("nope"), Err(Error::Config(_))));
    }
}
