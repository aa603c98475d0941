//! The federated simulation engine.
//!
//! Code is split by side of the wire. [`client`] holds everything that
//! touches raw samples; [`server`] only ever receives [`ClientUpdate`]
//! values. [`training`] wires the two together into rounds and runs.

pub mod client;
pub mod server;
pub mod training;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::optim::OptimizerConfig;
use crate::privacy::DpConfig;

pub use client::{fine_tune, fine_tune_trace, ifca_assign, local_update};
pub use server::{fedavg_aggregate, param_bytes, participant_count, round_bytes, select_participants};
pub use training::{ifca_round, run_round, run_training, train_local, LocalRun, ServerState, MIN_IMPROVEMENT};

/// What a client sends back after local training. Carries no samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: String,
    pub new_params: ModelParams,
    pub n_samples: usize,
    /// -1 in global mode.
    pub cluster_id: i64,
    pub train_loss: f64,
    /// Post-clip delta norm when privacy is enabled.
    pub clipped_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    /// 0 = full batch.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default = "default_participation")]
    pub participation: f64,
    pub optimizer: OptimizerConfig,
    /// 0 disables early stopping.
    #[serde(default)]
    pub early_stop_patience: usize,
    /// A round whose validation loss exceeds this (or is not finite) fails
    /// the run as diverged.
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    /// All-client validation runs every this many rounds and after the last.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Master seed; set from the scenario, never from this block.
    #[serde(skip_deserializing)]
    pub seed: u64,
}

fn default_participation() -> f64 {
    1.0
}
fn default_divergence() -> f64 {
    1e8
}
fn default_eval_every() -> usize {
    10
}

impl FlConfig {
    pub fn new(rounds: usize, local_epochs: usize, optimizer: OptimizerConfig, seed: u64) -> Self {
        FlConfig {
            rounds,
            local_epochs,
            batch_size: 0,
            participation: 1.0,
            optimizer,
            early_stop_patience: 0,
            divergence_threshold: default_divergence(),
            eval_every: default_eval_every(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("fl.rounds must be >= 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(format!(
                "fl.participation must be in (0, 1], got {}",
                self.participation
            )));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::config("fl.divergence_threshold must be > 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("fl.eval_every must be >= 1"));
        }
        self.optimizer.validate("fl.optimizer")
    }
}

/// Aggregation strategy of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Mode {
    Global,
    /// One-shot agglomerative clustering of update deltas after
    /// `warmup_rounds` global rounds, then per-cluster FedAvg. A nonzero
    /// `recluster_every` repeats the clustering step with that period.
    Hc {
        tau: f64,
        warmup_rounds: usize,
        recluster_every: usize,
    },
    /// `k` cluster models; clients pick the one with the lowest train loss.
    Ifca { k: usize },
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Global => "global",
            Mode::Hc { .. } => "hc",
            Mode::Ifca { .. } => "ifca",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Mode::Global => Ok(()),
            Mode::Hc { tau, .. } if !(tau > 0.0) => Err(Error::config(format!("cluster.tau must be > 0, got {tau}"))),
            Mode::Hc { .. } => Ok(()),
            Mode::Ifca { k: 0 } => Err(Error::config("cluster.k must be >= 1")),
            Mode::Ifca { .. } => Ok(()),
        }
    }
}

/// Per-round record. Byte counters follow
/// `bytes_up = participants × param_bytes` and
/// `bytes_down = participants × models_broadcast × param_bytes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<String>,
    /// Final-epoch train loss, aligned with `participants`.
    pub client_train_loss: Vec<f64>,
    /// Validation-sample-weighted mean over participants, each under the
    /// model it will receive next round.
    pub val_loss: f64,
    /// Validation loss over every client; filled every `eval_every` rounds
    /// and on the last round.
    pub all_client_val_loss: Option<f64>,
    pub models_broadcast: usize,
    pub param_bytes: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub n_clusters: usize,
    /// True for the hc round that (re)computes the partition.
    pub clustering_round: bool,
    pub assignment: BTreeMap<String, usize>,
    pub dp_max_clipped_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: Mode,
    pub models: Vec<ModelParams>,
    /// Server-side view of cluster membership at the end of the run.
    pub assignment: BTreeMap<String, usize>,
    pub reports: Vec<RoundReport>,
    pub best_round: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub config: FlConfig,
    pub dp: Option<DpConfig>,
    pub seed: u64,
    /// Excluded from serialized output so result files stay reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunResult {
    pub fn total_bytes(&self) -> u64 {
        self.reports.iter().map(|r| r.bytes_up + r.bytes_down).sum()
    }
}
