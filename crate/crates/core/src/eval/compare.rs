use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{aggregate_forecast, compute_metrics, Metrics};
use crate::data::{prepare_client, prepare_pooled, ClientDataset, FeatureSpec, PreparedClient, SupervisedSet, TimeSeries};
use crate::error::{Error, Result};
use crate::exec;
use crate::fedcore::{fine_tune, run_training, train_local, FlConfig, Mode, RunResult};
use crate::model::{predict_set, ModelKind, ModelParams, ModelSpec};
use crate::privacy::DpConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    LocalOnly,
    Centralized,
    Fedavg,
    FedavgPersonalized,
    Hc,
    HcPersonalized,
    Ifca,
    IfcaPersonalized,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::LocalOnly,
        Method::Centralized,
        Method::Fedavg,
        Method::FedavgPersonalized,
        Method::Hc,
        Method::HcPersonalized,
        Method::Ifca,
        Method::IfcaPersonalized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::LocalOnly => "local_only",
            Method::Centralized => "centralized",
            Method::Fedavg => "fedavg",
            Method::FedavgPersonalized => "fedavg_personalized",
            Method::Hc => "hc",
            Method::HcPersonalized => "hc_personalized",
            Method::Ifca => "ifca",
            Method::IfcaPersonalized => "ifca_personalized",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn personalized(self) -> bool {
        matches!(self, Method::FedavgPersonalized | Method::HcPersonalized | Method::IfcaPersonalized)
    }

    /// The federated run behind this method, if it has one.
    pub fn base(self) -> Option<Method> {
        match self {
            Method::Fedavg | Method::FedavgPersonalized => Some(Method::Fedavg),
            Method::Hc | Method::HcPersonalized => Some(Method::Hc),
            Method::Ifca | Method::IfcaPersonalized => Some(Method::Ifca),
            Method::LocalOnly | Method::Centralized => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HcParams {
    pub tau: f64,
    #[serde(default = "default_warmup")]
    pub warmup_rounds: usize,
    #[serde(default)]
    pub recluster_every: usize,
}

fn default_warmup() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Personalization {
    #[serde(default = "default_ft_epochs")]
    pub epochs: usize,
    /// Fine-tuning learning rate as a fraction of the training rate.
    #[serde(default = "default_lr_scale")]
    pub lr_scale: f64,
}

fn default_ft_epochs() -> usize {
    5
}
fn default_lr_scale() -> f64 {
    0.1
}

impl Default for Personalization {
    fn default() -> Self {
        Personalization { epochs: default_ft_epochs(), lr_scale: default_lr_scale() }
    }
}

/// Everything needed to train and score methods on a population.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub features: FeatureSpec,
    pub model_kind: ModelKind,
    pub hidden_dim: usize,
    pub fl: FlConfig,
    pub hc: Option<HcParams>,
    pub ifca_k: Option<usize>,
    pub dp: Option<DpConfig>,
    pub personalization: Personalization,
    pub methods: Vec<Method>,
}

impl Experiment {
    fn model_spec(&self, input_dim: usize) -> ModelSpec {
        match self.model_kind {
            ModelKind::Linear => ModelSpec::linear(input_dim, self.features.horizon),
            ModelKind::Mlp => ModelSpec::mlp(input_dim, self.hidden_dim, self.features.horizon),
        }
    }

    /// The federated strategy behind a method.
    pub fn mode_for(&self, method: Method) -> Result<Mode> {
        match method.base().unwrap_or(method) {
            Method::Fedavg => Ok(Mode::Global),
            Method::Hc => {
                let hc = self.hc.ok_or_else(|| Error::config("cluster.tau is required for hc methods"))?;
                Ok(Mode::Hc { tau: hc.tau, warmup_rounds: hc.warmup_rounds, recluster_every: hc.recluster_every })
            }
            Method::Ifca => {
                let k = self.ifca_k.ok_or_else(|| Error::config("cluster.k is required for ifca methods"))?;
                Ok(Mode::Ifca { k })
            }
            other => Err(Error::config(format!("`{}` is not a federated method", other.name()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
    pub nrmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub n_clients: usize,
    pub train_samples: usize,
    /// Mean over clients of per-client test metrics.
    pub mean: MetricSummary,
    /// Median over clients of per-client test metrics.
    pub median: MetricSummary,
    /// Mean over feeders of metrics on feeder-summed forecasts.
    pub feeder: MetricSummary,
    pub total_bytes: u64,
    pub rounds_to_best_val: usize,
    pub rounds_run: usize,
    pub per_client: BTreeMap<String, Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub seed: u64,
    pub dp: Option<DpConfig>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, method: Method) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Column names of [`ComparisonTable::to_csv`].
pub const COMPARISON_COLUMNS: [&str; 17] = [
    "method",
    "n_clients",
    "train_samples",
    "mean_mae",
    "mean_rmse",
    "mean_mape",
    "mean_nrmse",
    "median_mae",
    "median_rmse",
    "median_mape",
    "median_nrmse",
    "feeder_mae",
    "feeder_rmse",
    "feeder_mape",
    "feeder_nrmse",
    "total_bytes",
    "rounds_to_best_val",
];

fn opt17(v: Option<f64>) -> String {
    v.map(crate::fmt17).unwrap_or_default()
}

impl ComparisonTable {
    /// One row per method; absent MAPE/NRMSE values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = COMPARISON_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let mut cells = vec![r.method.name().to_string(), r.n_clients.to_string(), r.train_samples.to_string()];
            for s in [&r.mean, &r.median, &r.feeder] {
                cells.extend([crate::fmt17(s.mae), crate::fmt17(s.rmse), opt17(s.mape), opt17(s.nrmse)]);
            }
            cells.extend([r.total_bytes.to_string(), r.rounds_to_best_val.to_string()]);
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison table serializes")
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn summarize<'a>(metrics: impl Iterator<Item = &'a Metrics> + Clone, reduce: fn(&[f64]) -> f64) -> MetricSummary {
    let opt = |f: fn(&Metrics) -> Option<f64>| {
        let v: Vec<f64> = metrics.clone().filter_map(f).collect();
        (!v.is_empty()).then(|| reduce(&v))
    };
    MetricSummary {
        mae: reduce(&metrics.clone().map(|m| m.mae).collect::<Vec<_>>()),
        rmse: reduce(&metrics.clone().map(|m| m.rmse).collect::<Vec<_>>()),
        mape: opt(|m| m.mape),
        nrmse: opt(|m| m.nrmse),
    }
}

/// Test predictions of one client, denormalized to kW (row-major n × h).
fn predict_kw(params: &ModelParams, test: &SupervisedSet, client: &PreparedClient) -> Result<Vec<f64>> {
    Ok(predict_set(params, test)?.into_iter().map(|z| client.scaler.invert(z)).collect())
}

fn actual_kw(client: &PreparedClient) -> Vec<f64> {
    (0..client.test.len())
        .flat_map(|i| client.test.target(i).iter().map(|z| client.scaler.invert(*z)))
        .collect()
}

/// Per-step series for feeder aggregation: step `j` of every test sample.
fn horizon_series(flat: &[f64], test: &SupervisedSet) -> Vec<TimeSeries> {
    let h = test.horizon();
    let start = test.timestamps().first().copied().unwrap_or(0);
    (0..h)
        .map(|j| TimeSeries {
            start_epoch_hours: start + j as i64,
            step_hours: 1,
            values: (0..test.len()).map(|i| flat[i * h + j]).collect(),
        })
        .collect()
}

fn feeder_metrics(clients: &[PreparedClient], preds: &[Vec<f64>], actuals: &[Vec<f64>]) -> Result<Vec<Metrics>> {
    let h = clients[0].test.horizon();
    let keyed = |flat: &[Vec<f64>]| -> Vec<(String, TimeSeries)> {
        clients
            .iter()
            .zip(flat)
            .flat_map(|(c, f)| {
                horizon_series(f, &c.test)
                    .into_iter()
                    .enumerate()
                    .map(|(j, s)| (format!("{}\u{1f}{j}", c.feeder_id), s))
            })
            .collect()
    };
    let p_items = keyed(preds);
    let a_items = keyed(actuals);
    let p = aggregate_forecast(p_items.iter().map(|(k, s)| (k.as_str(), s)))?;
    let a = aggregate_forecast(a_items.iter().map(|(k, s)| (k.as_str(), s)))?;
    let mut per_feeder: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (key, series) in &p {
        let feeder = key.split('\u{1f}').next().expect("feeder key");
        let entry = per_feeder.entry(feeder).or_default();
        entry.0.extend_from_slice(&series.values);
        entry.1.extend_from_slice(&a[key].values);
    }
    debug_assert!(per_feeder.values().all(|(p, _)| p.len() % h == 0));
    per_feeder.values().map(|(p, a)| compute_metrics(p, a)).collect()
}

#[allow(clippy::too_many_arguments)]
fn score(
    method: Method,
    clients: &[PreparedClient],
    preds: Vec<Vec<f64>>,
    actuals: &[Vec<f64>],
    bytes: u64,
    train_samples: usize,
    rounds_to_best_val: usize,
    rounds_run: usize,
) -> Result<ComparisonRow> {
    let per_client: Vec<Metrics> = preds
        .iter()
        .zip(actuals)
        .map(|(p, a)| compute_metrics(p, a))
        .collect::<Result<_>>()?;
    let feeders = feeder_metrics(clients, &preds, actuals)?;
    Ok(ComparisonRow {
        method,
        n_clients: clients.len(),
        train_samples,
        mean: summarize(per_client.iter(), mean),
        median: summarize(per_client.iter(), median),
        feeder: summarize(feeders.iter(), mean),
        total_bytes: bytes,
        rounds_to_best_val,
        rounds_run,
        per_client: clients.iter().map(|c| c.client_id.clone()).zip(per_client).collect(),
    })
}

fn prepare_all(datasets: &[ClientDataset], fs: &FeatureSpec) -> Result<Vec<PreparedClient>> {
    let mut clients = exec::try_map(datasets, |d| prepare_client(d, fs))?;
    clients.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    Ok(clients)
}

/// Trains one federated method (personalized variants share their base run).
pub fn run_method(datasets: &[ClientDataset], exp: &Experiment, method: Method) -> Result<(RunResult, Vec<PreparedClient>)> {
    let base = method
        .base()
        .ok_or_else(|| Error::config(format!("`{}` is not a federated method", method.name())))?;
    let clients = prepare_all(datasets, &exp.features)?;
    let first = clients.first().ok_or_else(|| Error::insufficient("no clients"))?;
    let spec = exp.model_spec(first.train.input_dim());
    let result = run_training(&clients, spec, &exp.fl, &exp.mode_for(base)?, exp.dp.as_ref())?;
    Ok((result, clients))
}

/// Trains and scores every requested method on identical test splits.
/// Rows are ordered by method name.
pub fn run_comparison(datasets: &[ClientDataset], exp: &Experiment) -> Result<ComparisonTable> {
    if exp.methods.is_empty() {
        return Err(Error::config("compare.methods must not be empty"));
    }
    let clients = prepare_all(datasets, &exp.features)?;
    if clients.is_empty() {
        return Err(Error::insufficient("no clients"));
    }
    let federated = exp.methods.iter().any(|m| m.base().is_some());
    if federated && clients.len() < 2 {
        return Err(Error::insufficient("federated methods need at least 2 clients"));
    }
    let spec = exp.model_spec(clients[0].train.input_dim());
    let actuals: Vec<Vec<f64>> = clients.iter().map(actual_kw).collect();
    let train_samples: usize = clients.iter().map(|c| c.train.len()).sum();

    let mut bases: BTreeMap<Method, RunResult> = BTreeMap::new();
    for base in exp.methods.iter().filter_map(|m| m.base()) {
        if let std::collections::btree_map::Entry::Vacant(slot) = bases.entry(base) {
            slot.insert(run_training(&clients, spec, &exp.fl, &exp.mode_for(base)?, exp.dp.as_ref())?);
        }
    }

    let ft_lr = exp.fl.optimizer.lr * exp.personalization.lr_scale;
    let mut methods = exp.methods.clone();
    methods.sort_by_key(|m| m.name());
    methods.dedup();
    let mut rows = Vec::with_capacity(methods.len());
    for method in methods {
        let row = match method {
            Method::LocalOnly => {
                let runs = exec::try_map(&clients, |c| train_local(c, spec, &exp.fl))?;
                let preds = clients
                    .iter()
                    .zip(&runs)
                    .map(|(c, r)| predict_kw(&r.params, &c.test, c))
                    .collect::<Result<Vec<_>>>()?;
                let best = runs.iter().map(|r| r.best_round + 1).max().unwrap_or(0);
                let run_len = runs.iter().map(|r| r.val_losses.len()).max().unwrap_or(0);
                score(method, &clients, preds, &actuals, 0, train_samples, best, run_len)?
            }
            Method::Centralized => {
                let mut pooled = prepare_pooled(datasets, &exp.features)?;
                pooled.sort_by(|a, b| a.client_id.cmp(&b.client_id));
                let merged = PreparedClient {
                    client_id: "pooled".into(),
                    feeder_id: String::new(),
                    der_class: pooled[0].der_class,
                    flex_class: pooled[0].flex_class,
                    archetype_id: -1,
                    scaler: pooled[0].scaler,
                    train: SupervisedSet::concat(pooled.iter().map(|c| &c.train))?,
                    val: SupervisedSet::concat(pooled.iter().map(|c| &c.val))?,
                    test: SupervisedSet::concat(pooled.iter().map(|c| &c.test))?,
                };
                let run = train_local(&merged, spec, &exp.fl)?;
                let preds = pooled
                    .iter()
                    .map(|c| predict_kw(&run.params, &c.test, c))
                    .collect::<Result<Vec<_>>>()?;
                let raw_bytes: u64 = datasets
                    .iter()
                    .map(|d| 8 * (d.series.len() * (1 + d.covariates.len())) as u64)
                    .sum();
                score(
                    method,
                    &clients,
                    preds,
                    &actuals,
                    raw_bytes,
                    merged.train.len(),
                    run.best_round + 1,
                    run.val_losses.len(),
                )?
            }
            _ => {
                let run = &bases[&method.base().expect("federated method")];
                let personalize = method.personalized();
                let epochs = exp.personalization.epochs;
                let preds = exec::try_map(&clients, |c| {
                    let model = run.model_for(c)?;
                    if personalize {
                        predict_kw(&fine_tune(model, &c.train, epochs, ft_lr)?, &c.test, c)
                    } else {
                        predict_kw(model, &c.test, c)
                    }
                })?;
                score(
                    method,
                    &clients,
                    preds,
                    &actuals,
                    run.total_bytes(),
                    train_samples,
                    run.best_round + 1,
                    run.reports.len(),
                )?
            }
        };
        rows.push(row);
    }
    Ok(ComparisonTable { seed: exp.fl.seed, dp: exp.dp, rows })
}
