use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{ClientDataset, DerClass, FlexClass, TimeSeries};
use crate::error::{Error, Result};

/// Names of the timestamp-derived covariates appended when
/// [`FeatureSpec::calendar`] is set, in column order.
pub const CALENDAR_FEATURES: [&str; 5] = ["hour_sin1", "hour_cos1", "hour_sin2", "hour_cos2", "weekend"];

/// Standardization for one signal. `std` is always positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub fn identity() -> Self {
        Scaler { mean: 0.0, std: 1.0 }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Population mean and standard deviation; a degenerate spread (< 1e-12)
/// falls back to 1.0.
pub fn fit_scaler(values: &[f64]) -> Result<Scaler> {
    if values.is_empty() {
        return Err(Error::insufficient("cannot fit a scaler on zero values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(Scaler {
        mean,
        std: if std < 1e-12 { 1.0 } else { std },
    })
}

/// Selects rows of a [`SupervisedSet`].
#[derive(Debug, Clone, Copy)]
pub enum Rows<'a> {
    All,
    Subset(&'a [usize]),
}

/// Row-major supervised samples. `inputs` is `n × input_dim`, `targets`
/// is `n × horizon`; rows are in time order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedSet {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    input_dim: usize,
    horizon: usize,
    timestamps: Vec<i64>,
}

impl SupervisedSet {
    pub fn from_parts(
        inputs: Vec<f64>,
        targets: Vec<f64>,
        input_dim: usize,
        horizon: usize,
        timestamps: Vec<i64>,
    ) -> Result<Self> {
        let n = timestamps.len();
        if input_dim == 0 || horizon == 0 {
            return Err(Error::shape("input_dim and horizon must be >= 1"));
        }
        if inputs.len() != n * input_dim || targets.len() != n * horizon {
            return Err(Error::shape(format!(
                "{n} samples need {} inputs and {} targets, got {} and {}",
                n * input_dim,
                n * horizon,
                inputs.len(),
                targets.len()
            )));
        }
        if inputs.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                round: None,
                message: "supervised set contains non-finite values".into(),
            });
        }
        Ok(SupervisedSet {
            inputs,
            targets,
            input_dim,
            horizon,
            timestamps,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.horizon..(i + 1) * self.horizon]
    }

    /// Epoch hour of each sample's first target step.
    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn slice(&self, range: Range<usize>) -> SupervisedSet {
        SupervisedSet {
            inputs: self.inputs[range.start * self.input_dim..range.end * self.input_dim].to_vec(),
            targets: self.targets[range.start * self.horizon..range.end * self.horizon].to_vec(),
            input_dim: self.input_dim,
            horizon: self.horizon,
            timestamps: self.timestamps[range].to_vec(),
        }
    }

    /// Concatenates sets with identical dimensions, in the order given.
    pub fn concat<'a>(sets: impl IntoIterator<Item = &'a SupervisedSet>) -> Result<SupervisedSet> {
        let mut iter = sets.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::insufficient("nothing to concatenate"))?;
        let mut out = first.clone();
        for s in iter {
            if s.input_dim != out.input_dim || s.horizon != out.horizon {
                return Err(Error::shape(format!(
                    "cannot concatenate {}x{} with {}x{} sets",
                    out.input_dim, out.horizon, s.input_dim, s.horizon
                )));
            }
            out.inputs.extend_from_slice(&s.inputs);
            out.targets.extend_from_slice(&s.targets);
            out.timestamps.extend_from_slice(&s.timestamps);
        }
        Ok(out)
    }
}

/// Windows a series into lag → horizon samples.
///
/// Sample `s` takes its first target at index `t = s + lag`: the input row is
/// the scaled values `[t - lag, t)` followed by every covariate at `t`, the
/// target row is the scaled values `[t, t + horizon)`. Covariates are used
/// as given (callers scale them).
pub fn build_supervised(
    series: &TimeSeries,
    covariates: &[&[f64]],
    lag: usize,
    horizon: usize,
    scaler: &Scaler,
) -> Result<SupervisedSet> {
    if lag == 0 || horizon == 0 {
        return Err(Error::config("lag and horizon must be >= 1"));
    }
    let len = series.len();
    if len < lag + horizon {
        return Err(Error::insufficient(format!(
            "series of length {len} is too short for lag {lag} and horizon {horizon}"
        )));
    }
    for (j, c) in covariates.iter().enumerate() {
        if c.len() != len {
            return Err(Error::shape(format!(
                "covariate {j} has {} values, series has {len}",
                c.len()
            )));
        }
    }
    let n = len - lag - horizon + 1;
    let d = lag + covariates.len();
    let scaled: Vec<f64> = series.values.iter().map(|v| scaler.apply(*v)).collect();
    let mut inputs = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n * horizon);
    let mut timestamps = Vec::with_capacity(n);
    for s in 0..n {
        let t = s + lag;
        inputs.extend_from_slice(&scaled[s..t]);
        inputs.extend(covariates.iter().map(|c| c[t]));
        targets.extend_from_slice(&scaled[t..t + horizon]);
        timestamps.push(series.timestamp(t));
    }
    SupervisedSet::from_parts(inputs, targets, d, horizon, timestamps)
}

fn split_sizes(n: usize) -> (usize, usize) {
    let train = n * 70 / 100;
    let val = n * 15 / 100;
    (train, val)
}

/// Chronological 70/15/15 split: `floor(0.7n)`, `floor(0.15n)`, remainder.
/// For very small `n` the validation part may be empty.
pub fn split_dataset(set: &SupervisedSet) -> Result<(SupervisedSet, SupervisedSet, SupervisedSet)> {
    let n = set.len();
    if n < 3 {
        return Err(Error::insufficient(format!("need at least 3 samples to split, got {n}")));
    }
    let (train, val) = split_sizes(n);
    Ok((
        set.slice(0..train),
        set.slice(train..train + val),
        set.slice(train + val..n),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub lag: usize,
    pub horizon: usize,
    /// Append hour-of-day harmonics and a weekend flag to the covariates.
    pub calendar: bool,
}

impl FeatureSpec {
    /// Model input width for a dataset with `n_covariates` named covariates.
    pub fn input_dim(&self, n_covariates: usize) -> usize {
        self.lag + n_covariates + if self.calendar { CALENDAR_FEATURES.len() } else { 0 }
    }
}

/// A client's data after windowing, scaling and splitting.
///
/// The target scaler is fitted once on the raw values that the training
/// samples touch; validation and test samples reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedClient {
    pub client_id: String,
    pub feeder_id: String,
    pub der_class: DerClass,
    pub flex_class: FlexClass,
    pub archetype_id: i64,
    pub scaler: Scaler,
    pub train: SupervisedSet,
    pub val: SupervisedSet,
    pub test: SupervisedSet,
}

/// Exclusive end of the raw index range covered by the training samples.
fn train_extent(ds: &ClientDataset, fs: &FeatureSpec) -> Result<usize> {
    let len = ds.series.len();
    if len < fs.lag + fs.horizon + 2 {
        return Err(Error::insufficient(format!(
            "client `{}`: {len} values cannot form 3 samples with lag {} and horizon {}",
            ds.client_id, fs.lag, fs.horizon
        )));
    }
    let n = len - fs.lag - fs.horizon + 1;
    Ok(split_sizes(n).0 + fs.lag + fs.horizon - 1)
}

fn calendar_columns(series: &TimeSeries) -> Vec<Vec<f64>> {
    let mut cols = vec![Vec::with_capacity(series.len()); CALENDAR_FEATURES.len()];
    for i in 0..series.len() {
        let ts = series.timestamp(i);
        let hour = ts.rem_euclid(24) as f64;
        let w = TAU * hour / 24.0;
        let dow = (ts.div_euclid(24) + 3).rem_euclid(7);
        cols[0].push(w.sin());
        cols[1].push(w.cos());
        cols[2].push((2.0 * w).sin());
        cols[3].push((2.0 * w).cos());
        cols[4].push(if dow >= 5 { 1.0 } else { 0.0 });
    }
    cols
}

fn assemble(
    ds: &ClientDataset,
    fs: &FeatureSpec,
    target: Scaler,
    covariate_scalers: &BTreeMap<String, Scaler>,
) -> Result<PreparedClient> {
    ds.validate()?;
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (name, values) in &ds.covariates {
        let sc = covariate_scalers.get(name).ok_or_else(|| {
            Error::shape(format!("client `{}`: unexpected covariate `{name}`", ds.client_id))
        })?;
        columns.push(values.iter().map(|v| sc.apply(*v)).collect());
    }
    if fs.calendar {
        columns.extend(calendar_columns(&ds.series));
    }
    let refs: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
    let set = build_supervised(&ds.series, &refs, fs.lag, fs.horizon, &target)?;
    let (train, val, test) = split_dataset(&set)?;
    Ok(PreparedClient {
        client_id: ds.client_id.clone(),
        feeder_id: ds.feeder_id.clone(),
        der_class: ds.der_class,
        flex_class: ds.flex_class,
        archetype_id: ds.archetype_id,
        scaler: target,
        train,
        val,
        test,
    })
}

/// Windows, scales and splits one client using statistics of its own
/// training range only.
pub fn prepare_client(ds: &ClientDataset, fs: &FeatureSpec) -> Result<PreparedClient> {
    let end = train_extent(ds, fs)?;
    let target = fit_scaler(&ds.series.values[..end])?;
    let covs = ds
        .covariates
        .iter()
        .map(|(name, v)| Ok((name.clone(), fit_scaler(&v[..end.min(v.len())])?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    assemble(ds, fs, target, &covs)
}

/// Like [`prepare_client`] for every dataset, but with scalers fitted on the
/// union of all clients' training ranges (the centralized baseline).
pub fn prepare_pooled(datasets: &[ClientDataset], fs: &FeatureSpec) -> Result<Vec<PreparedClient>> {
    let mut target_values = Vec::new();
    let mut cov_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ds in datasets {
        ds.validate()?;
        let end = train_extent(ds, fs)?;
        target_values.extend_from_slice(&ds.series.values[..end]);
        for (name, v) in &ds.covariates {
            cov_values.entry(name.clone()).or_default().extend_from_slice(&v[..end]);
        }
    }
    let target = fit_scaler(&target_values)?;
    let covs = cov_values
        .iter()
        .map(|(name, v)| Ok((name.clone(), fit_scaler(v)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    datasets.iter().map(|ds| assemble(ds, fs, target, &covs)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(values: &[f64]) -> TimeSeries {
        TimeSeries::new(0, values.to_vec()).unwrap()
    }

    fn rows(set: &SupervisedSet) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..set.len())
            .map(|i| (set.input(i).to_vec(), set.target(i).to_vec()))
            .collect()
    }

    #[test]
    fn windows_lag2_h1() {
        let set = build_supervised(&ts(&[1., 2., 3., 4.]), &[], 2, 1, &Scaler::identity()).unwrap();
        assert_eq!(rows(&set), vec![(vec![1., 2.], vec![3.]), (vec![2., 3.], vec![4.])]);
        assert_eq!(set.timestamps(), &[2, 3]);
    }

    #[test]
    fn windows_lag1_h2() {
        let set = build_supervised(&ts(&[1., 2., 3., 4.]), &[], 1, 2, &Scaler::identity()).unwrap();
        assert_eq!(rows(&set), vec![(vec![1.], vec![2., 3.]), (vec![2.], vec![3., 4.])]);
    }

    #[test]
    fn windows_too_short() {
        let err = build_supervised(&ts(&[1., 2., 3.]), &[], 2, 2, &Scaler::identity()).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn covariates_follow_lags() {
        let cov = [10., 20., 30., 40.];
        let set = build_supervised(&ts(&[1., 2., 3., 4.]), &[&cov], 2, 1, &Scaler::identity()).unwrap();
        assert_eq!(set.input(0), &[1., 2., 30.]);
        assert_eq!(set.input(1), &[2., 3., 40.]);
    }

    #[test]
    fn scaler_examples() {
        assert_eq!(fit_scaler(&[0., 2.]).unwrap(), Scaler { mean: 1.0, std: 1.0 });
        assert_eq!(fit_scaler(&[5., 5., 5.]).unwrap(), Scaler { mean: 5.0, std: 1.0 });
        assert!(matches!(fit_scaler(&[]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let mk = |n: usize| {
            let v: Vec<f64> = (0..n).map(|i| i as f64).collect();
            SupervisedSet::from_parts(v.clone(), v, 1, 1, (0..n as i64).collect()).unwrap()
        };
        for (n, want) in [(100, (70, 15, 15)), (10, (7, 1, 2))] {
            let (a, b, c) = split_dataset(&mk(n)).unwrap();
            assert_eq!((a.len(), b.len(), c.len()), want);
            assert!(a.timestamps().last() < b.timestamps().first());
            assert!(b.timestamps().last() < c.timestamps().first());
        }
        assert!(matches!(split_dataset(&mk(2)), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn prepare_scales_with_train_range_only() {
        // 20 values, lag 2, h 1 → n = 18, train = 12 samples touching indices [0, 14)
        let mut values: Vec<f64> = (0..20).map(|i| i as f64).collect();
        values[19] = 1e6;
        let ds = ClientDataset {
            client_id: "a".into(),
            series: ts(&values),
            covariates: BTreeMap::new(),
            der_class: DerClass::FixedLoad,
            flex_class: FlexClass::NonInterruptible,
            feeder_id: "F".into(),
            archetype_id: -1,
        };
        let fs = FeatureSpec { lag: 2, horizon: 1, calendar: false };
        let p = prepare_client(&ds, &fs).unwrap();
        assert_eq!(p.scaler, fit_scaler(&values[..14]).unwrap());
        assert_eq!(p.train.len() + p.val.len() + p.test.len(), 18);
    }

    proptest! {
        #[test]
        fn sample_count_formula(len in 1usize..60, lag in 1usize..10, h in 1usize..10) {
            let values: Vec<f64> = (0..len).map(|i| i as f64).collect();
            let r = build_supervised(&ts(&values), &[], lag, h, &Scaler::identity());
            if len >= lag + h {
                let set = r.unwrap();
                prop_assert_eq!(set.len(), len - lag - h + 1);
                prop_assert_eq!(set.input_dim(), lag);
            } else {
                prop_assert!(r.is_err());
            }
        }

        #[test]
        fn scaler_round_trip(values in proptest::collection::vec(-1e4f64..1e4, 1..50)) {
            let sc = fit_scaler(&values).unwrap();
            prop_assert!(sc.std > 0.0);
            for v in &values {
                prop_assert!((sc.invert(sc.apply(*v)) - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }
}
