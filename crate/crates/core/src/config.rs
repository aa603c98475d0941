//! Scenario files.
//!
//! A scenario is a TOML document. Unknown keys are rejected at every level
//! and every range check names the offending field by its dotted path. The
//! full key reference lives in the repository README.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_population, load_csv, ClientDataset, CsvSchema, FeatureSpec, LoadOptions, PopulationSpec};
use crate::error::{Error, Result};
use crate::eval::{Experiment, HcParams, Method, Personalization};
use crate::fedcore::{FlConfig, Mode};
use crate::model::ModelKind;
use crate::privacy::DpConfig;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub schema: CsvSchema,
    #[serde(default)]
    pub forward_fill: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
    pub lag: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Hidden width of the MLP; ignored for linear models.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Add hour-of-day harmonics and a weekend flag to the inputs.
    #[serde(default = "default_true")]
    pub calendar: bool,
}

fn default_kind() -> ModelKind {
    ModelKind::Linear
}
fn default_horizon() -> usize {
    1
}
fn default_hidden() -> usize {
    16
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    #[default]
    Global,
    Hc,
    Ifca,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    /// Strategy used by `run` when no method is given.
    #[serde(default)]
    pub mode: ClusterMode,
    /// Merge threshold of hierarchical clustering (update-delta space).
    pub tau: Option<f64>,
    #[serde(default = "default_warmup")]
    pub warmup_rounds: usize,
    /// Number of IFCA cluster models.
    pub k: Option<usize>,
    /// Re-run hierarchical clustering every this many rounds; 0 = never.
    #[serde(default)]
    pub recluster_every: usize,
}

fn default_warmup() -> usize {
    5
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { mode: ClusterMode::Global, tau: None, warmup_rounds: default_warmup(), k: None, recluster_every: 0 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    population: Option<PopulationSpec>,
    ingest: Option<IngestConfig>,
    model: ModelConfig,
    fl: FlConfig,
    #[serde(default)]
    cluster: ClusterConfig,
    dp: Option<DpConfig>,
    #[serde(default)]
    personalization: Personalization,
    methods: Option<Vec<Method>>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// `seed_explicit` is false when the population seed follows the master
    /// seed.
    Population { spec: PopulationSpec, seed_explicit: bool },
    Ingest(IngestConfig),
}

/// A fully validated scenario. Relative paths are resolved against the
/// directory of the scenario file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub source: DataSource,
    pub model: ModelConfig,
    pub fl: FlConfig,
    pub cluster: ClusterConfig,
    pub dp: Option<DpConfig>,
    pub personalization: Personalization,
    pub methods: Vec<Method>,
}

/// Reads a scenario file into its raw key tree.
pub fn load_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse::<toml::Table>().map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Reads and validates a scenario file.
pub fn parse_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_config_str(&text, base).map_err(|e| match e {
        Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Parses scenario text; relative paths resolve against `base_dir`.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ScenarioConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string().trim_end().to_string()))?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
    finish(raw, &table, base_dir)
}

/// Builds a scenario from an already parsed (possibly edited) key tree.
pub fn from_table(table: toml::Table, base_dir: &Path) -> Result<ScenarioConfig> {
    let raw: RawConfig = toml::Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(e.to_string().trim_end().to_string()))?;
    finish(raw, &table, base_dir)
}

/// Overwrites the value at a dotted key path, creating tables on the way.
/// `value` is read as a TOML value when possible and as a string otherwise.
pub fn set_path(table: &mut toml::Table, dotted: &str, value: &str) -> Result<()> {
    let keys: Vec<&str> = dotted.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("invalid parameter path `{dotted}`")));
    }
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{k}` in `{dotted}` is not a table")))?;
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}

fn finish(raw: RawConfig, table: &toml::Table, base_dir: &Path) -> Result<ScenarioConfig> {
    let resolve = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };
    let source = match (raw.population, raw.ingest) {
        (Some(spec), None) => {
            let seed_explicit = table
                .get("population")
                .and_then(|p| p.get("seed"))
                .is_some();
            DataSource::Population { spec, seed_explicit }
        }
        (None, Some(mut ingest)) => {
            ingest.path = resolve(ingest.path);
            DataSource::Ingest(ingest)
        }
        (Some(_), Some(_)) => return Err(Error::config("give either [population] or [ingest], not both")),
        (None, None) => return Err(Error::config("missing [population] or [ingest] block")),
    };
    let methods = raw.methods.unwrap_or_else(|| default_methods(&raw.cluster));
    let mut cfg = ScenarioConfig {
        seed: raw.seed,
        output_dir: resolve(raw.output_dir),
        source,
        model: raw.model,
        fl: raw.fl,
        cluster: raw.cluster,
        dp: raw.dp,
        personalization: raw.personalization,
        methods,
    };
    cfg = cfg.with_seed(raw.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn default_methods(cluster: &ClusterConfig) -> Vec<Method> {
    let mut m = vec![Method::LocalOnly, Method::Centralized, Method::Fedavg, Method::FedavgPersonalized];
    if cluster.tau.is_some() {
        m.extend([Method::Hc, Method::HcPersonalized]);
    }
    if cluster.k.is_some() {
        m.extend([Method::Ifca, Method::IfcaPersonalized]);
    }
    m
}

impl ScenarioConfig {
    /// The same scenario under another master seed. A population without an
    /// explicit seed is regenerated from the new master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.fl.seed = seed;
        if let DataSource::Population { spec, seed_explicit: false } = &mut self.source {
            spec.seed = seed::derive(seed, "population", &[]);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Population { spec, .. } = &self.source {
            spec.validate()?;
        }
        let m = &self.model;
        if m.lag == 0 {
            return Err(Error::config("model.lag must be >= 1"));
        }
        if m.horizon == 0 {
            return Err(Error::config("model.horizon must be >= 1"));
        }
        if m.kind == ModelKind::Mlp && m.hidden == 0 {
            return Err(Error::config("model.hidden must be >= 1"));
        }
        self.fl.validate()?;
        let c = &self.cluster;
        if let Some(tau) = c.tau {
            if !(tau > 0.0) {
                return Err(Error::config(format!("cluster.tau must be > 0, got {tau}")));
            }
        }
        if c.k == Some(0) {
            return Err(Error::config("cluster.k must be >= 1"));
        }
        let wants = |base: Method| c.mode == mode_of(base) || self.methods.iter().any(|m| m.base() == Some(base));
        if wants(Method::Hc) && c.tau.is_none() {
            return Err(Error::config("cluster.tau is required when hc is used"));
        }
        if wants(Method::Ifca) && c.k.is_none() {
            return Err(Error::config("cluster.k is required when ifca is used"));
        }
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        let p = &self.personalization;
        if !(p.lr_scale > 0.0 && p.lr_scale.is_finite()) {
            return Err(Error::config(format!("personalization.lr_scale must be > 0, got {}", p.lr_scale)));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods must not be empty"));
        }
        Ok(())
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec { lag: self.model.lag, horizon: self.model.horizon, calendar: self.model.calendar }
    }

    /// The federated strategy behind a method.
    pub fn mode_for(&self, method: Method) -> Result<Mode> {
        self.experiment().mode_for(method)
    }

    /// Method run by `run` when none is named on the command line.
    pub fn default_run_method(&self) -> Method {
        match self.cluster.mode {
            ClusterMode::Global => Method::Fedavg,
            ClusterMode::Hc => Method::Hc,
            ClusterMode::Ifca => Method::Ifca,
        }
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            features: self.feature_spec(),
            model_kind: self.model.kind,
            hidden_dim: self.model.hidden,
            fl: self.fl.clone(),
            hc: self.cluster.tau.map(|tau| HcParams {
                tau,
                warmup_rounds: self.cluster.warmup_rounds,
                recluster_every: self.cluster.recluster_every,
            }),
            ifca_k: self.cluster.k,
            dp: self.dp,
            personalization: self.personalization,
            methods: self.methods.clone(),
        }
    }

    /// Generates or loads the client datasets.
    pub fn datasets(&self) -> Result<Vec<ClientDataset>> {
        match &self.source {
            DataSource::Population { spec, .. } => generate_population(spec),
            DataSource::Ingest(ing) => load_csv(&ing.path, &ing.schema, LoadOptions { forward_fill: ing.forward_fill }),
        }
    }
}

fn mode_of(base: Method) -> ClusterMode {
    match base {
        Method::Hc => ClusterMode::Hc,
        Method::Ifca => ClusterMode::Ifca,
        _ => ClusterMode::Global,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[population]
n_clients = 4
n_archetypes = 2
days = 10

[model]
lag = 24

[fl]
rounds = 5
local_epochs = 1
[fl.optimizer]
lr = 0.05
"#;

    #[test]
    fn minimal_gets_defaults() {
        let c = parse_config_str(MINIMAL, Path::new("/tmp")).unwrap();
        assert_eq!(c.model.horizon, 1);
        assert_eq!(c.cluster.warmup_rounds, 5);
        assert_eq!(c.personalization, Personalization::default());
        assert_eq!(c.methods.len(), 4);
        assert_eq!(c.output_dir, PathBuf::from("/tmp/out"));
        assert!(c.dp.is_none());
    }

    #[test]
    fn population_seed_follows_master() {
        let a = parse_config_str(MINIMAL, Path::new("")).unwrap();
        let b = a.clone().with_seed(9);
        let (DataSource::Population { spec: sa, .. }, DataSource::Population { spec: sb, .. }) = (&a.source, &b.source) else {
            panic!("population source expected")
        };
        assert_ne!(sa.seed, sb.seed);
        assert_eq!(b.fl.seed, 9);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MINIMAL.replace("lr = 0.05", "leraning_rate = 0.05");
        let err = parse_config_str(&text, Path::new("")).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("leraning_rate")), "{err}");
    }

    #[test]
    fn bad_lr_cites_path() {
        let text = MINIMAL.replace("lr = 0.05", "lr = -0.1");
        let err = parse_config_str(&text, Path::new("")).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("fl.optimizer.lr")), "{err}");
    }

    #[test]
    fn cross_field_rules() {
        let text = format!("{MINIMAL}\n[cluster]\nmode = \"ifca\"\n");
        assert!(parse_config_str(&text, Path::new("")).is_err());
        let text = format!("{MINIMAL}\n[cluster]\nmode = \"ifca\"\nk = 2\n");
        assert_eq!(parse_config_str(&text, Path::new("")).unwrap().methods.len(), 6);
        let text = format!("methods = [\"hc\"]\n{MINIMAL}");
        assert!(parse_config_str(&text, Path::new("")).is_err());
    }

    #[test]
    fn set_path_edits_tree() {
        let mut t: toml::Table = MINIMAL.parse().unwrap();
        set_path(&mut t, "dp.sigma", "0.5").unwrap();
        set_path(&mut t, "dp.clip_norm", "1").unwrap();
        set_path(&mut t, "fl.rounds", "7").unwrap();
        let c = from_table(t, Path::new("")).unwrap();
        assert_eq!(c.dp, Some(DpConfig::new(1.0, 0.5)));
        assert_eq!(c.fl.rounds, 7);
    }
}
