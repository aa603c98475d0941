//! Update-level differential-privacy mechanics.
//!
//! A client's update delta (new params minus broadcast params) is clipped to
//! L2 norm `C`, then perturbed with i.i.d. Gaussian noise of stddev `σ·C`.
//! The server only ever sees `broadcast + noisy delta`. No privacy
//! accountant is run; reports carry the raw `(C, σ)` pair.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// L2 bound on each update delta; `inf` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Noise multiplier; the noise stddev is `sigma * clip_norm`.
    #[serde(default)]
    pub sigma: f64,
}

fn default_clip() -> f64 {
    f64::INFINITY
}

impl DpConfig {
    pub fn new(clip_norm: f64, sigma: f64) -> Self {
        DpConfig { clip_norm, sigma }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::config(format!("dp.clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("dp.sigma must be >= 0, got {}", self.sigma)));
        }
        if self.sigma > 0.0 && self.clip_norm.is_infinite() {
            return Err(Error::config("dp.sigma > 0 requires a finite dp.clip_norm"));
        }
        Ok(())
    }

    pub fn noise_std(&self) -> f64 {
        if self.sigma == 0.0 {
            0.0
        } else {
            self.sigma * self.clip_norm
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `delta` down to norm `clip_norm` if it is longer.
pub fn clip_update(delta: &[f64], clip_norm: f64) -> Result<Vec<f64>> {
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            round: None,
            message: "cannot clip a non-finite update".into(),
        });
    }
    let norm = l2_norm(delta);
    if norm <= clip_norm {
        return Ok(delta.to_vec());
    }
    let scale = clip_norm / norm;
    Ok(delta.iter().map(|v| v * scale).collect())
}

/// Adds `N(0, stddev²)` noise from the stream of `(round_seed, client_id)`.
pub fn add_gaussian_noise(delta: &[f64], stddev: f64, round_seed: u64, client_id: &str) -> Vec<f64> {
    if stddev == 0.0 {
        return delta.to_vec();
    }
    let mut rng = seed::derived_rng(round_seed, "dp_noise", &[client_id.into()]);
    let normal = Normal::new(0.0, stddev).expect("finite positive stddev");
    delta.iter().map(|v| v + normal.sample(&mut rng)).collect()
}

/// Result of privatizing one update.
#[derive(Debug, Clone)]
pub struct Privatized {
    pub params: ModelParams,
    /// L2 norm of the delta after clipping, before noise.
    pub clipped_norm: f64,
}

/// Clip-then-noise on the delta between `local` and `broadcast`.
///
/// When neither clipping nor noise changes anything, `local` is returned
/// as is, so a `(C = ∞, σ = 0)` configuration is bit-identical to running
/// without privacy.
pub fn privatize(
    local: &ModelParams,
    broadcast: &ModelParams,
    dp: &DpConfig,
    round_seed: u64,
    client_id: &str,
) -> Result<Privatized> {
    if local.spec != broadcast.spec {
        return Err(Error::shape("update and broadcast specs differ"));
    }
    let delta: Vec<f64> = local.values.iter().zip(&broadcast.values).map(|(a, b)| a - b).collect();
    let norm = l2_norm(&delta);
    let clipped = clip_update(&delta, dp.clip_norm)?;
    let clipped_norm = norm.min(dp.clip_norm);
    let std = dp.noise_std();
    if std == 0.0 && norm <= dp.clip_norm {
        return Ok(Privatized { params: local.clone(), clipped_norm });
    }
    let noisy = add_gaussian_noise(&clipped, std, round_seed, client_id);
    let values = broadcast.values.iter().zip(&noisy).map(|(b, d)| b + d).collect();
    Ok(Privatized {
        params: ModelParams::new(local.spec, values)?,
        clipped_norm: l2_norm(&clipped),
    })
}
