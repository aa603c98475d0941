//! Server-side aggregation and bookkeeping. Inputs are [`ClientUpdate`]s,
//! client ids and counts only.

use rand::seq::SliceRandom;

use super::ClientUpdate;
use crate::error::{Error, Result};
use crate::model::{ModelParams, HEADER_BYTES};
use crate::seed;

/// Sample-count-weighted coordinate mean, summed in ascending client-id
/// order regardless of input order.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ModelParams> {
    let first = updates.first().ok_or(Error::EmptyAggregation)?;
    let spec = first.new_params.spec;
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    let mut total = 0usize;
    for u in &ordered {
        if u.new_params.spec != spec || u.new_params.len() != spec.param_count() {
            return Err(Error::shape(format!(
                "update from `{}` does not match the model spec",
                u.client_id
            )));
        }
        if u.n_samples == 0 {
            return Err(Error::insufficient(format!("update from `{}` has no samples", u.client_id)));
        }
        total += u.n_samples;
    }
    let mut acc = vec![0.0; spec.param_count()];
    for u in &ordered {
        let w = u.n_samples as f64 / total as f64;
        for (a, p) in acc.iter_mut().zip(&u.new_params.values) {
            *a += w * p;
        }
    }
    ModelParams::new(spec, acc)
}

/// Wire size of one parameter blob.
pub fn param_bytes(param_count: usize) -> u64 {
    (param_count * 8 + HEADER_BYTES) as u64
}

/// `(bytes_up, bytes_down)` for one round.
pub fn round_bytes(participants: usize, models_broadcast: usize, param_count: usize, header_bytes: usize) -> (u64, u64) {
    let pb = (param_count * 8 + header_bytes) as u64;
    let p = participants as u64;
    (p * pb, p * models_broadcast as u64 * pb)
}

/// Number of participants for a fraction: `ceil(fraction × n)`, computed
/// with a 1e-9 slack so that e.g. `0.3 × 10` gives 3, clamped to `[1, n]`.
pub fn participant_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Indices (into an ascending client-id list of length `n`) of this round's
/// participants, drawn without replacement and returned in ascending order.
pub fn select_participants(n: usize, fraction: f64, round_seed: u64) -> Vec<usize> {
    let m = participant_count(n, fraction);
    let mut idx: Vec<usize> = (0..n).collect();
    if m < n {
        idx.shuffle(&mut seed::derived_rng(round_seed, "participation", &[]));
        idx.truncate(m);
        idx.sort_unstable();
    }
    idx
}
