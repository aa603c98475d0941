//! Forecast models over a flat parameter vector.
//!
//! Two architectures, both mapping an input row of width `d` to `h` outputs:
//!
//! * `linear`: `W x + b`, layout `W[h×d]` row-major then `b[h]`.
//! * `mlp`: `W2 tanh(W1 x + b1) + b2`, layout `W1[m×d]`, `b1[m]`,
//!   `W2[h×m]`, `b2[h]`.
//!
//! The loss is the mean squared error over samples and horizon steps; its
//! gradient is computed analytically with the same layout as the parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Rows, SupervisedSet};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Ignored for linear models.
    pub hidden_dim: usize,
    pub horizon: usize,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, horizon: usize) -> Self {
        ModelSpec { kind: ModelKind::Linear, input_dim, hidden_dim: 0, horizon }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, horizon: usize) -> Self {
        ModelSpec { kind: ModelKind::Mlp, input_dim, hidden_dim, horizon }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.horizon == 0 {
            return Err(Error::config("model input_dim and horizon must be >= 1"));
        }
        if self.kind == ModelKind::Mlp && self.hidden_dim == 0 {
            return Err(Error::config("mlp hidden_dim must be >= 1"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, h, m) = (self.input_dim, self.horizon, self.hidden_dim);
        match self.kind {
            ModelKind::Linear => h * d + h,
            ModelKind::Mlp => m * d + m + h * m + h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub values: Vec<f64>,
}

/// Size of the binary header preceding the parameter payload: magic `DFL1`,
/// kind byte, 3 padding bytes, then `input_dim`, `hidden_dim`, `horizon`
/// and the parameter count as little-endian `u32`.
pub const HEADER_BYTES: usize = 24;

const MAGIC: &[u8; 4] = b"DFL1";

impl ModelParams {
    pub fn new(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(Error::shape(format!(
                "{:?} model needs {} parameters, got {}",
                spec.kind,
                spec.param_count(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                round: None,
                message: format!("parameter {i} is not finite"),
            });
        }
        Ok(ModelParams { spec, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Header plus little-endian `f64` payload; `HEADER_BYTES + 8 * len` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.push(match self.spec.kind {
            ModelKind::Linear => 0,
            ModelKind::Mlp => 1,
        });
        out.extend_from_slice(&[0; 3]);
        for v in [self.spec.input_dim, self.spec.hidden_dim, self.spec.horizon, self.values.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
            return Err(Error::shape("not a parameter blob"));
        }
        let kind = match bytes[4] {
            0 => ModelKind::Linear,
            1 => ModelKind::Mlp,
            k => return Err(Error::shape(format!("unknown model kind byte {k}"))),
        };
        let word = |i: usize| {
            let o = 8 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        };
        let spec = ModelSpec { kind, input_dim: word(0), hidden_dim: word(1), horizon: word(2) };
        let count = word(3);
        if bytes.len() != HEADER_BYTES + 8 * count {
            return Err(Error::shape(format!(
                "blob holds {} payload bytes, header says {count} parameters",
                bytes.len() - HEADER_BYTES
            )));
        }
        let values = bytes[HEADER_BYTES..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        ModelParams::new(spec, values)
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = seed::derived_rng(seed, "init_params", &[]);
    let mut values = Vec::with_capacity(spec.param_count());
    let mut layer = |values: &mut Vec<f64>, fan_in: usize, fan_out: usize| {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    };
    match spec.kind {
        ModelKind::Linear => layer(&mut values, spec.input_dim, spec.horizon),
        ModelKind::Mlp => {
            layer(&mut values, spec.input_dim, spec.hidden_dim);
            layer(&mut values, spec.hidden_dim, spec.horizon);
        }
    }
    ModelParams::new(spec, values)
}

/// Offsets of `b1`, `W2` and `b2` in an mlp parameter vector.
fn mlp_parts(spec: &ModelSpec, p: &[f64]) -> (usize, usize, usize) {
    let (d, m, h) = (spec.input_dim, spec.hidden_dim, spec.horizon);
    let b1 = m * d;
    let w2 = b1 + m;
    let b2 = w2 + h * m;
    debug_assert_eq!(b2 + h, p.len());
    (b1, w2, b2)
}

/// Forward pass into `out` (length `h`); `hidden` is scratch of length `m`.
fn forward(params: &ModelParams, x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
    let spec = &params.spec;
    let p = &params.values;
    let (d, h) = (spec.input_dim, spec.horizon);
    match spec.kind {
        ModelKind::Linear => {
            let b = h * d;
            for j in 0..h {
                let row = &p[j * d..(j + 1) * d];
                out[j] = dot(row, x) + p[b + j];
            }
        }
        ModelKind::Mlp => {
            let m = spec.hidden_dim;
            let (b1, w2, b2) = mlp_parts(spec, p);
            for k in 0..m {
                hidden[k] = (dot(&p[k * d..(k + 1) * d], x) + p[b1 + k]).tanh();
            }
            for j in 0..h {
                out[j] = dot(&p[w2 + j * m..w2 + (j + 1) * m], hidden) + p[b2 + j];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn predict(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.spec.input_dim {
        return Err(Error::shape(format!(
            "input row has {} values, model expects {}",
            x.len(),
            params.spec.input_dim
        )));
    }
    let mut hidden = vec![0.0; params.spec.hidden_dim];
    let mut out = vec![0.0; params.spec.horizon];
    forward(params, x, &mut hidden, &mut out);
    Ok(out)
}

fn check_set(params: &ModelParams, set: &SupervisedSet) -> Result<()> {
    if set.input_dim() != params.spec.input_dim || set.horizon() != params.spec.horizon {
        return Err(Error::shape(format!(
            "set is {}→{}, model is {}→{}",
            set.input_dim(),
            set.horizon(),
            params.spec.input_dim,
            params.spec.horizon
        )));
    }
    Ok(())
}

/// Row-major `n × h` predictions for every sample of a set.
pub fn predict_set(params: &ModelParams, set: &SupervisedSet) -> Result<Vec<f64>> {
    check_set(params, set)?;
    let h = params.spec.horizon;
    let mut hidden = vec![0.0; params.spec.hidden_dim];
    let mut out = vec![0.0; set.len() * h];
    for i in 0..set.len() {
        forward(params, set.input(i), &mut hidden, &mut out[i * h..(i + 1) * h]);
    }
    Ok(out)
}

fn row_indices<'a>(set: &SupervisedSet, rows: Rows<'a>) -> Result<Box<dyn Iterator<Item = usize> + 'a>> {
    match rows {
        Rows::All if set.is_empty() => Err(Error::insufficient("empty batch")),
        Rows::All => Ok(Box::new(0..set.len())),
        Rows::Subset([]) => Err(Error::insufficient("empty batch")),
        Rows::Subset(r) => Ok(Box::new(r.iter().copied())),
    }
}

fn row_count(set: &SupervisedSet, rows: Rows<'_>) -> usize {
    match rows {
        Rows::All => set.len(),
        Rows::Subset(r) => r.len(),
    }
}

/// Mean squared error over the selected rows.
pub fn loss(params: &ModelParams, set: &SupervisedSet, rows: Rows<'_>) -> Result<f64> {
    check_set(params, set)?;
    let n = row_count(set, rows);
    let h = params.spec.horizon;
    let mut hidden = vec![0.0; params.spec.hidden_dim];
    let mut out = vec![0.0; h];
    let mut sum = 0.0;
    for i in row_indices(set, rows)? {
        forward(params, set.input(i), &mut hidden, &mut out);
        sum += out.iter().zip(set.target(i)).map(|(p, y)| (p - y) * (p - y)).sum::<f64>();
    }
    Ok(sum / (n * h) as f64)
}

/// Mean squared error and its exact gradient over the selected rows.
pub fn loss_and_grad(params: &ModelParams, set: &SupervisedSet, rows: Rows<'_>) -> Result<(f64, Vec<f64>)> {
    check_set(params, set)?;
    let spec = &params.spec;
    let p = &params.values;
    let (d, h, m) = (spec.input_dim, spec.horizon, spec.hidden_dim);
    let n = row_count(set, rows);
    let scale = 1.0 / (n * h) as f64;
    let mut grad = vec![0.0; p.len()];
    let mut hidden = vec![0.0; m];
    let mut out = vec![0.0; h];
    let mut g_out = vec![0.0; h];
    let mut g_hidden = vec![0.0; m];
    let mut sum = 0.0;

    for i in row_indices(set, rows)? {
        let x = set.input(i);
        forward(params, x, &mut hidden, &mut out);
        for (j, y) in set.target(i).iter().enumerate() {
            let r = out[j] - y;
            sum += r * r;
            g_out[j] = 2.0 * r * scale;
        }
        match spec.kind {
            ModelKind::Linear => {
                let b = h * d;
                for j in 0..h {
                    let g = g_out[j];
                    for (gw, xi) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *gw += g * xi;
                    }
                    grad[b + j] += g;
                }
            }
            ModelKind::Mlp => {
                let (b1, w2, b2) = mlp_parts(spec, p);
                g_hidden.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..h {
                    let g = g_out[j];
                    let w_row = &p[w2 + j * m..w2 + (j + 1) * m];
                    for k in 0..m {
                        grad[w2 + j * m + k] += g * hidden[k];
                        g_hidden[k] += g * w_row[k];
                    }
                    grad[b2 + j] += g;
                }
                for k in 0..m {
                    let gz = g_hidden[k] * (1.0 - hidden[k] * hidden[k]);
                    for (gw, xi) in grad[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *gw += gz * xi;
                    }
                    grad[b1 + k] += gz;
                }
            }
        }
    }
    Ok((sum * scale, grad))
}
