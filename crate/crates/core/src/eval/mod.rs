//! Forecast metrics, feeder aggregation, flexibility bands and the
//! multi-method comparison harness.

mod compare;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{FlexClass, TimeSeries};
use crate::error::{Error, Result};

pub use compare::{
    run_comparison, run_method, ComparisonRow, ComparisonTable, Experiment, HcParams, Method,
    Personalization,
};

/// Points whose |actual| is below this are left out of MAPE.
pub const MAPE_ZERO_EPS: f64 = 1e-8;

/// Errors in physical units (kW).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every actual is (near) zero.
    pub mape: Option<f64>,
    /// RMSE over mean |actual|; `None` when that mean is zero.
    pub nrmse: Option<f64>,
    pub excluded_points: usize,
}

pub fn compute_metrics(pred: &[f64], actual: &[f64]) -> Result<Metrics> {
    if pred.len() != actual.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} actuals",
            pred.len(),
            actual.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::insufficient("no points to score"));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq, mut pct, mut scale) = (0.0, 0.0, 0.0, 0.0);
    let mut excluded = 0usize;
    for (p, a) in pred.iter().zip(actual) {
        let e = p - a;
        abs += e.abs();
        sq += e * e;
        scale += a.abs();
        if a.abs() < MAPE_ZERO_EPS {
            excluded += 1;
        } else {
            pct += (e / a).abs();
        }
    }
    let rmse = (sq / n).sqrt();
    let mean_abs = scale / n;
    let kept = pred.len() - excluded;
    Ok(Metrics {
        mae: abs / n,
        rmse,
        mape: (kept > 0).then(|| 100.0 * pct / kept as f64),
        nrmse: (mean_abs > 0.0).then(|| rmse / mean_abs),
        excluded_points: excluded,
    })
}

/// Pointwise sum of member series per feeder. Members of one feeder must
/// share start, step and length.
pub fn aggregate_forecast<'a>(
    members: impl IntoIterator<Item = (&'a str, &'a TimeSeries)>,
) -> Result<BTreeMap<String, TimeSeries>> {
    let mut out: BTreeMap<String, TimeSeries> = BTreeMap::new();
    for (feeder, series) in members {
        match out.get_mut(feeder) {
            None => {
                out.insert(feeder.to_string(), series.clone());
            }
            Some(acc) => {
                if acc.len() != series.len()
                    || acc.start_epoch_hours != series.start_epoch_hours
                    || acc.step_hours != series.step_hours
                {
                    return Err(Error::Alignment(format!(
                        "feeder `{feeder}`: series of length {} at {} does not align with length {} at {}",
                        series.len(),
                        series.start_epoch_hours,
                        acc.len(),
                        acc.start_epoch_hours
                    )));
                }
                for (a, v) in acc.values.iter_mut().zip(&series.values) {
                    *a += v;
                }
            }
        }
    }
    Ok(out)
}

/// Per-step `[p_min, p_max]` envelope a device can deliver around its
/// forecast.
///
/// * non-interruptible: no flexibility;
/// * curtailable: may drop by a fraction `alpha`;
/// * shiftable: may move up or down by `alpha` (the band only; keeping the
///   shifted energy balanced is up to the scheduler).
pub fn flexibility_band(forecast: &TimeSeries, flex: FlexClass, alpha: f64) -> Result<(TimeSeries, TimeSeries)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("flexibility alpha must be in [0, 1], got {alpha}")));
    }
    if let Some(i) = forecast.values.iter().position(|v| *v < 0.0) {
        return Err(Error::Numeric {
            round: None,
            message: format!("flexibility band needs a non-negative forecast, value {i} is negative"),
        });
    }
    let (lo, hi) = match flex {
        FlexClass::NonInterruptible => (1.0, 1.0),
        FlexClass::Curtailable => (1.0 - alpha, 1.0),
        FlexClass::Shiftable => (1.0 - alpha, 1.0 + alpha),
    };
    let scaled = |f: f64| TimeSeries {
        start_epoch_hours: forecast.start_epoch_hours,
        step_hours: forecast.step_hours,
        values: forecast.values.iter().map(|v| v * f).collect(),
    };
    Ok((scaled(lo), scaled(hi)))
}
