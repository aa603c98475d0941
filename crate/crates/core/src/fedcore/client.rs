//! Client-side computations. Raw samples enter here and only parameters or
//! scalar losses leave.

use rand::seq::SliceRandom;

use super::{ClientUpdate, FlConfig};
use crate::data::{PreparedClient, Rows, SupervisedSet};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::optim::OptimizerState;
use crate::seed;

/// Runs `local_epochs` of (mini-)batch optimization from `broadcast`.
///
/// Batch order is reshuffled every epoch from a stream derived from
/// `(round_seed, client_id)`. The reported loss is the sample-weighted mean
/// of the batch losses of the last epoch (the broadcast model's loss when
/// `local_epochs` is 0). Optimizer state starts fresh on every call.
pub fn local_update(
    client: &PreparedClient,
    broadcast: &ModelParams,
    cfg: &FlConfig,
    round_seed: u64,
) -> Result<ClientUpdate> {
    let train = &client.train;
    let n = train.len();
    if n == 0 {
        return Err(Error::insufficient(format!("client `{}` has no training samples", client.client_id)));
    }
    let mut current = broadcast.clone();
    let mut train_loss = if cfg.local_epochs == 0 {
        model::loss(broadcast, train, Rows::All)?
    } else {
        0.0
    };
    let mut state = OptimizerState::new(cfg.optimizer, current.len());
    let full_batch = cfg.batch_size == 0 || cfg.batch_size >= n;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::derived_rng(round_seed, "batch_order", &[client.client_id.as_str().into()]);

    for _ in 0..cfg.local_epochs {
        let mut weighted = 0.0;
        if full_batch {
            let (l, g) = model::loss_and_grad(&current, train, Rows::All)?;
            state.step(&mut current.values, &g)?;
            weighted = l * n as f64;
        } else {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let (l, g) = model::loss_and_grad(&current, train, Rows::Subset(batch))?;
                state.step(&mut current.values, &g)?;
                weighted += l * batch.len() as f64;
            }
        }
        train_loss = weighted / n as f64;
    }
    if !current.is_finite() || !train_loss.is_finite() {
        return Err(Error::Numeric {
            round: None,
            message: format!("client `{}` diverged during local training", client.client_id),
        });
    }
    Ok(ClientUpdate {
        client_id: client.client_id.clone(),
        new_params: current,
        n_samples: n,
        cluster_id: -1,
        train_loss,
        clipped_norm: None,
    })
}

/// Index of the model with the lowest mean loss on the client's training
/// split; ties go to the lowest index.
pub fn ifca_assign(train: &SupervisedSet, models: &[ModelParams]) -> Result<usize> {
    if train.is_empty() {
        return Err(Error::insufficient("cannot pick a cluster without training samples"));
    }
    if models.is_empty() {
        return Err(Error::config("need at least one cluster model"));
    }
    let mut best = (0, f64::INFINITY);
    for (j, m) in models.iter().enumerate() {
        let l = model::loss(m, train, Rows::All)?;
        if l < best.1 {
            best = (j, l);
        }
    }
    Ok(best.0)
}

/// Validation loss and sample count; `None` when the split is empty.
pub(crate) fn eval_split(params: &ModelParams, set: &SupervisedSet) -> Result<Option<(f64, usize)>> {
    if set.is_empty() {
        return Ok(None);
    }
    Ok(Some((model::loss(params, set, Rows::All)?, set.len())))
}

/// Personalizes `params` with `epochs` full-batch gradient steps on one
/// client. See [`fine_tune_trace`].
pub fn fine_tune(params: &ModelParams, train: &SupervisedSet, epochs: usize, lr: f64) -> Result<ModelParams> {
    fine_tune_trace(params, train, epochs, lr).map(|(p, _)| p)
}

/// Fine-tuning with backtracking: a step that would raise the training loss
/// is retried at half the step size (up to 40 halvings, after which tuning
/// stops early), and the reduced step size carries into later epochs. The
/// returned trace holds the loss before the first epoch and after each
/// accepted one, so it never increases.
pub fn fine_tune_trace(
    params: &ModelParams,
    train: &SupervisedSet,
    epochs: usize,
    lr: f64,
) -> Result<(ModelParams, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::insufficient("cannot fine-tune without training samples"));
    }
    if !(lr > 0.0) {
        return Err(Error::config(format!("fine-tune lr must be > 0, got {lr}")));
    }
    let mut current = params.clone();
    if epochs == 0 {
        return Ok((current, Vec::new()));
    }
    let (mut l, mut g) = model::loss_and_grad(&current, train, Rows::All)?;
    let mut trace = vec![l];
    let mut step = lr;
    'epochs: for _ in 0..epochs {
        for _ in 0..=40 {
            let mut cand = current.clone();
            for (p, gi) in cand.values.iter_mut().zip(&g) {
                *p -= step * gi;
            }
            let (lc, gc) = model::loss_and_grad(&cand, train, Rows::All)?;
            if lc <= l {
                current = cand;
                l = lc;
                g = gc;
                trace.push(l);
                continue 'epochs;
            }
            step /= 2.0;
        }
        break;
    }
    Ok((current, trace))
}
