//! Round loop, early stopping and the local-only reference trainer.

use std::collections::BTreeMap;
use std::time::Instant;

use super::client::{eval_split, ifca_assign, local_update};
use super::server::{fedavg_aggregate, param_bytes, select_participants};
use super::{ClientUpdate, FlConfig, Mode, RoundReport, RunResult};
use crate::cluster::{hc_partition, kmeans_partition};
use crate::data::PreparedClient;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{init_params, ModelParams, ModelSpec};
use crate::privacy::{privatize, DpConfig};
use crate::seed;

/// Absolute validation-loss improvement that resets the patience counter.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

/// Everything the server holds between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub models: Vec<ModelParams>,
    /// Cluster membership as known to the server. Empty in global mode.
    pub assignment: BTreeMap<String, usize>,
    /// Round of the latest hc partition, if any.
    pub clustered_at: Option<usize>,
}

impl ServerState {
    /// Every mode starts from one model; ifca grows to `k` models in its
    /// seeding round.
    pub fn initial(spec: ModelSpec, master_seed: u64) -> Result<Self> {
        let models = vec![init_params(spec, seed::derive(master_seed, "global_init", &[]))?];
        Ok(ServerState { models, assignment: BTreeMap::new(), clustered_at: None })
    }
}

fn at_round(e: Error, round: usize) -> Error {
    match e {
        Error::Numeric { round: None, message } => Error::Numeric { round: Some(round), message },
        other => other,
    }
}

/// Model a client trains from (or is evaluated with) under the current state.
fn model_index(state: &ServerState, mode: &Mode, client: &PreparedClient) -> Result<usize> {
    match mode {
        Mode::Global => Ok(0),
        Mode::Hc { .. } => Ok(state.assignment.get(&client.client_id).copied().unwrap_or(0)),
        Mode::Ifca { .. } => ifca_assign(&client.train, &state.models),
    }
}

fn is_clustering_round(state: &ServerState, mode: &Mode, round: usize) -> bool {
    match *mode {
        Mode::Ifca { k } => k > 1 && state.models.len() == 1,
        Mode::Hc { warmup_rounds, recluster_every, .. } => match state.clustered_at {
            None => round >= warmup_rounds,
            Some(last) => recluster_every > 0 && round - last >= recluster_every,
        },
        Mode::Global => false,
    }
}

/// Sample-weighted mean of `(loss, n)` pairs, summed in the given order.
fn weighted_mean(pairs: &[(f64, usize)]) -> Option<f64> {
    let total: usize = pairs.iter().map(|p| p.1).sum();
    if total == 0 {
        return None;
    }
    Some(pairs.iter().map(|(l, n)| *n as f64 / total as f64 * l).sum())
}

fn all_client_val(state: &ServerState, mode: &Mode, clients: &[&PreparedClient]) -> Result<Option<f64>> {
    let pairs = exec::try_map(clients, |c| {
        let m = model_index(state, mode, c)?;
        eval_split(&state.models[m], &c.val)
    })?;
    Ok(weighted_mean(&pairs.into_iter().flatten().collect::<Vec<_>>()))
}

/// One federated round.
///
/// `clients` must be sorted by ascending id. Participants train in parallel
/// (when enabled) but every aggregation consumes updates in ascending
/// client-id order, so results match a sequential run bit for bit.
pub fn run_round(
    state: ServerState,
    clients: &[&PreparedClient],
    cfg: &FlConfig,
    mode: &Mode,
    dp: Option<&DpConfig>,
    round: usize,
) -> Result<(ServerState, RoundReport)> {
    if clients.is_empty() {
        return Err(Error::insufficient("a round needs at least one client"));
    }
    let rs = seed::round_seed(cfg.seed, round);
    let clustering = is_clustering_round(&state, mode, round);
    let selected: Vec<&PreparedClient> = if clustering {
        clients.to_vec()
    } else {
        select_participants(clients.len(), cfg.participation, rs)
            .into_iter()
            .map(|i| clients[i])
            .collect()
    };
    let tagged = matches!(mode, Mode::Ifca { .. }) || state.clustered_at.is_some();

    // client side: pick a model, train, privatize
    let updates: Vec<(usize, ClientUpdate)> = exec::try_map(&selected, |c| {
        let m = model_index(&state, mode, c)?;
        let broadcast = &state.models[m];
        let mut u = local_update(c, broadcast, cfg, rs)?;
        if tagged {
            u.cluster_id = m as i64;
        }
        if let Some(dp) = dp {
            let p = privatize(&u.new_params, broadcast, dp, rs, &c.client_id)?;
            u.new_params = p.params;
            u.clipped_norm = Some(p.clipped_norm);
        }
        Ok((m, u))
    })
    .map_err(|e| at_round(e, round))?;

    // server side
    let mut next = state.clone();
    if clustering {
        let deltas: BTreeMap<String, Vec<f64>> = updates
            .iter()
            .map(|(m, u)| {
                let b = &state.models[*m].values;
                (u.client_id.clone(), u.new_params.values.iter().zip(b).map(|(p, q)| p - q).collect())
            })
            .collect();
        let partition = match *mode {
            Mode::Hc { tau, .. } => hc_partition(&deltas, tau),
            Mode::Ifca { k } => kmeans_partition(&deltas, k),
            Mode::Global => unreachable!("global mode never clusters"),
        }
        .map_err(|e| at_round(e, round))?;
        next.models = (0..partition.k)
            .map(|c| {
                let members: Vec<ClientUpdate> = updates
                    .iter()
                    .filter(|(_, u)| partition.clusters[&u.client_id] == c)
                    .map(|(_, u)| u.clone())
                    .collect();
                if members.is_empty() {
                    Ok(state.models[0].clone())
                } else {
                    fedavg_aggregate(&members)
                }
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| at_round(e, round))?;
        next.assignment = partition.clusters;
        next.clustered_at = Some(round);
    } else {
        for (j, model) in next.models.iter_mut().enumerate() {
            let members: Vec<ClientUpdate> =
                updates.iter().filter(|(m, _)| *m == j).map(|(_, u)| u.clone()).collect();
            if !members.is_empty() {
                *model = fedavg_aggregate(&members).map_err(|e| at_round(e, round))?;
            }
        }
        if matches!(mode, Mode::Ifca { .. }) {
            for (m, u) in &updates {
                next.assignment.insert(u.client_id.clone(), *m);
            }
        }
    }

    // participants evaluate the model they will hold next round
    let val_pairs: Vec<Option<(f64, usize)>> = exec::try_map(&updates, |(m, u)| {
        let c = selected
            .iter()
            .find(|c| c.client_id == u.client_id)
            .expect("update from a selected client");
        let idx = match mode {
            Mode::Ifca { .. } if !clustering => *m,
            Mode::Ifca { .. } => next.assignment[&c.client_id],
            _ => model_index(&next, mode, c)?,
        };
        eval_split(&next.models[idx], &c.val)
    })?;
    let val_loss = weighted_mean(&val_pairs.into_iter().flatten().collect::<Vec<_>>())
        .or_else(|| {
            let train: Vec<(f64, usize)> = updates.iter().map(|(_, u)| (u.train_loss, u.n_samples)).collect();
            weighted_mean(&train)
        })
        .unwrap_or(f64::NAN);
    if !val_loss.is_finite() || val_loss > cfg.divergence_threshold {
        return Err(Error::Numeric {
            round: Some(round),
            message: format!("validation loss {val_loss} indicates divergence"),
        });
    }

    let all_client_val_loss = if (round + 1).is_multiple_of(cfg.eval_every) {
        all_client_val(&next, mode, clients)?
    } else {
        None
    };

    // every model the server held at the start of the round goes out
    let models_broadcast = match mode {
        Mode::Ifca { .. } => state.models.len(),
        _ => 1,
    };
    let pb = param_bytes(next.models[0].len());
    let n = updates.len() as u64;
    let report = RoundReport {
        round,
        participants: updates.iter().map(|(_, u)| u.client_id.clone()).collect(),
        client_train_loss: updates.iter().map(|(_, u)| u.train_loss).collect(),
        val_loss,
        all_client_val_loss,
        models_broadcast,
        param_bytes: pb,
        bytes_up: n * pb,
        bytes_down: n * models_broadcast as u64 * pb,
        n_clusters: next.models.len(),
        clustering_round: clustering,
        assignment: next.assignment.clone(),
        dp_max_clipped_norm: dp.map(|_| {
            updates
                .iter()
                .filter_map(|(_, u)| u.clipped_norm)
                .fold(0.0, f64::max)
        }),
    };
    Ok((next, report))
}

/// One IFCA round: all models are broadcast and each participant trains the
/// one that fits its own data best. A server still holding its single
/// initial model runs the seeding round instead (see [`crate::cluster`]).
pub fn ifca_round(
    state: ServerState,
    clients: &[&PreparedClient],
    cfg: &FlConfig,
    k: usize,
    dp: Option<&DpConfig>,
    round: usize,
) -> Result<(ServerState, RoundReport)> {
    if state.models.len() != k && state.models.len() != 1 {
        return Err(Error::shape(format!("server holds {} models, k = {k}", state.models.len())));
    }
    run_round(state, clients, cfg, &Mode::Ifca { k }, dp, round)
}

struct EarlyStop {
    patience: usize,
    best: f64,
    best_round: usize,
    stale: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop { patience, best: f64::INFINITY, best_round: 0, stale: 0 }
    }

    /// Records a round; returns true when training should stop.
    fn observe(&mut self, round: usize, val: f64) -> bool {
        if val < self.best - MIN_IMPROVEMENT {
            self.best = val;
            self.best_round = round;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.patience > 0 && self.stale >= self.patience
    }
}

fn sorted_clients(clients: &[PreparedClient]) -> Result<Vec<&PreparedClient>> {
    let mut sorted: Vec<&PreparedClient> = clients.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::config(format!("duplicate client id `{}`", w[0].client_id)));
    }
    Ok(sorted)
}

fn check_dims(client: &PreparedClient, spec: &ModelSpec) -> Result<()> {
    if client.train.input_dim() != spec.input_dim || client.train.horizon() != spec.horizon {
        return Err(Error::shape(format!(
            "client `{}` has {}→{} samples, model is {}→{}",
            client.client_id,
            client.train.input_dim(),
            client.train.horizon(),
            spec.input_dim,
            spec.horizon
        )));
    }
    Ok(())
}

/// Runs up to `cfg.rounds` rounds under `mode`.
pub fn run_training(
    clients: &[PreparedClient],
    spec: ModelSpec,
    cfg: &FlConfig,
    mode: &Mode,
    dp: Option<&DpConfig>,
) -> Result<RunResult> {
    let started = Instant::now();
    cfg.validate()?;
    mode.validate()?;
    spec.validate()?;
    if let Some(dp) = dp {
        dp.validate()?;
    }
    let clients = sorted_clients(clients)?;
    if clients.is_empty() {
        return Err(Error::insufficient("training needs at least one client"));
    }
    for c in &clients {
        check_dims(c, &spec)?;
    }

    let mut state = ServerState::initial(spec, cfg.seed)?;
    let mut reports: Vec<RoundReport> = Vec::with_capacity(cfg.rounds);
    let mut stop = EarlyStop::new(cfg.early_stop_patience);
    let mut stopped_early = false;
    for round in 0..cfg.rounds {
        let (next, report) = run_round(state, &clients, cfg, mode, dp, round)?;
        state = next;
        let val = report.val_loss;
        reports.push(report);
        if stop.observe(round, val) {
            stopped_early = round + 1 < cfg.rounds;
            break;
        }
    }
    if let Some(last) = reports.last_mut() {
        if last.all_client_val_loss.is_none() {
            last.all_client_val_loss = all_client_val(&state, mode, &clients)?;
        }
    }
    Ok(RunResult {
        mode: *mode,
        models: state.models,
        assignment: state.assignment,
        reports,
        best_round: stop.best_round,
        best_val_loss: stop.best,
        stopped_early,
        config: cfg.clone(),
        dp: dp.copied(),
        seed: cfg.seed,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

impl RunResult {
    /// The model a client uses for inference after training. In ifca mode
    /// the client selects it on its own training data.
    pub fn model_for(&self, client: &PreparedClient) -> Result<&ModelParams> {
        let idx = match self.mode {
            Mode::Global => 0,
            Mode::Hc { .. } => self.assignment.get(&client.client_id).copied().unwrap_or(0),
            Mode::Ifca { .. } => ifca_assign(&client.train, &self.models)?,
        };
        Ok(&self.models[idx])
    }
}

/// A model trained on one client's data alone.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRun {
    pub params: ModelParams,
    pub val_losses: Vec<f64>,
    pub best_round: usize,
}

/// Trains on a single client with the federated schedule (same init seed,
/// per-round seeds, epochs and early stopping) but no server.
pub fn train_local(client: &PreparedClient, spec: ModelSpec, cfg: &FlConfig) -> Result<LocalRun> {
    cfg.validate()?;
    check_dims(client, &spec)?;
    let mut params = init_params(spec, seed::derive(cfg.seed, "global_init", &[]))?;
    let mut stop = EarlyStop::new(cfg.early_stop_patience);
    let mut val_losses = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let update = local_update(client, &params, cfg, seed::round_seed(cfg.seed, round))
            .map_err(|e| at_round(e, round))?;
        params = update.new_params;
        let val = match eval_split(&params, &client.val)? {
            Some((l, _)) => l,
            None => update.train_loss,
        };
        if !val.is_finite() || val > cfg.divergence_threshold {
            return Err(Error::Numeric {
                round: Some(round),
                message: format!("validation loss {val} indicates divergence"),
            });
        }
        val_losses.push(val);
        if stop.observe(round, val) {
            break;
        }
    }
    Ok(LocalRun { params, val_losses, best_round: stop.best_round })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::linear_regression_population;
    use crate::model::ModelSpec;
    use crate::optim::OptimizerConfig;

    fn clients(n: usize) -> Vec<PreparedClient> {
        linear_regression_population(&[vec![1.0, -1.0], vec![-1.0, 1.0]], n, 30, 0.1, 5).unwrap()
    }

    #[test]
    fn byte_meters_global() {
        let cs = clients(4);
        let mut cfg = FlConfig::new(3, 1, OptimizerConfig::sgd(0.1), 1);
        cfg.participation = 0.5;
        let spec = ModelSpec::linear(2, 1);
        let r = run_training(&cs, spec, &cfg, &Mode::Global, None).unwrap();
        for rep in &r.reports {
            assert_eq!(rep.participants.len(), 2);
            assert_eq!(rep.client_train_loss.len(), 2);
            assert_eq!(rep.bytes_up, 2 * (3 * 8 + 24));
            assert_eq!(rep.bytes_down, rep.bytes_up);
        }
        assert!(r.reports.last().unwrap().all_client_val_loss.is_some());
    }

    #[test]
    fn constant_val_loss_stops_after_patience() {
        // zero learning progress: lr tiny enough that val loss moves < 1e-6
        let cs = clients(2);
        let mut cfg = FlConfig::new(10, 0, OptimizerConfig::sgd(0.1), 1);
        cfg.early_stop_patience = 2;
        let r = run_training(&cs, ModelSpec::linear(2, 1), &cfg, &Mode::Global, None).unwrap();
        assert_eq!(r.reports.len(), 3);
        assert!(r.stopped_early);
        assert_eq!(r.best_round, 0);
    }

    #[test]
    fn ifca_empty_cluster_keeps_params() {
        let cs = clients(2);
        let cfg = FlConfig::new(1, 1, OptimizerConfig::sgd(0.1), 3);
        let spec = ModelSpec::linear(2, 1);
        let good = ModelParams::new(spec, vec![0.0, 0.0, 0.0]).unwrap();
        let far = ModelParams::new(spec, vec![50.0, 50.0, 50.0]).unwrap();
        let state = ServerState { models: vec![good, far.clone()], assignment: BTreeMap::new(), clustered_at: None };
        let refs: Vec<&PreparedClient> = cs.iter().collect();
        let (next, rep) = ifca_round(state, &refs, &cfg, 2, None, 0).unwrap();
        assert_eq!(next.models[1], far);
        assert_eq!(rep.bytes_down, 2 * 2 * rep.param_bytes);
        assert!(rep.assignment.values().all(|c| *c == 0));
    }

    #[test]
    fn diverging_lr_reports_round() {
        let cs = clients(2);
        let cfg = FlConfig::new(50, 5, OptimizerConfig::sgd(10.0), 1);
        let err = run_training(&cs, ModelSpec::linear(2, 1), &cfg, &Mode::Global, None).unwrap_err();
        assert!(matches!(err, Error::Numeric { round: Some(_), .. }), "{err:?}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut cs = clients(2);
        cs[1].client_id = cs[0].client_id.clone();
        let cfg = FlConfig::new(1, 1, OptimizerConfig::sgd(0.1), 1);
        assert!(run_training(&cs, ModelSpec::linear(2, 1), &cfg, &Mode::Global, None).is_err());
    }
}
