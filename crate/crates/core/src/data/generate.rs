//! Synthetic non-IID DER populations.
//!
//! Load-type series are a per-archetype daily Fourier shape scaled by a
//! weekday/weekend factor, plus temperature coupling and AR(1) noise,
//! clamped at zero. PV series are a seasonal clear-sky parabola inside the
//! daylight window times an AR(1) cloud factor in `[0, 1]`. Each client's
//! shape parameters are its archetype's, blended toward an independent
//! per-client draw by the heterogeneity dial.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    split_dataset, ClientDataset, DerClass, PreparedClient, Scaler, SupervisedSet, TimeSeries,
};
use crate::error::{Error, Result};
use crate::seed::{self, Part};

/// 2021-01-04T00:00Z, a Monday.
pub const GENERATED_START_EPOCH_HOURS: i64 = 18_631 * 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Changepoint {
    pub day: usize,
    /// Relative level change applied from `day` on; must exceed -1.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub n_clients: usize,
    pub n_archetypes: usize,
    /// 0 = clients equal their archetype, 1 = fully idiosyncratic.
    #[serde(default)]
    pub heterogeneity: f64,
    pub days: usize,
    #[serde(default = "default_der_mix")]
    pub der_mix: BTreeMap<DerClass, f64>,
    #[serde(default = "default_feeders")]
    pub feeders: usize,
    #[serde(default)]
    pub shift_changepoint: Option<Changepoint>,
    #[serde(default)]
    pub seed: u64,
    /// Number of daily Fourier harmonics (at most 2).
    #[serde(default = "default_harmonics")]
    pub harmonics: usize,
    /// AR(1) coefficient of the load noise and the local cloud factor.
    #[serde(default = "default_ar_coeff")]
    pub ar_coeff: f64,
    /// Marginal noise stddev relative to the client's base load.
    #[serde(default = "default_noise_level")]
    pub noise_level: f64,
}

fn default_der_mix() -> BTreeMap<DerClass, f64> {
    BTreeMap::from([(DerClass::FixedLoad, 1.0)])
}
fn default_feeders() -> usize {
    1
}
fn default_harmonics() -> usize {
    2
}
fn default_ar_coeff() -> f64 {
    0.7
}
fn default_noise_level() -> f64 {
    0.1
}

impl PopulationSpec {
    pub fn new(n_clients: usize, n_archetypes: usize, days: usize, seed: u64) -> Self {
        PopulationSpec {
            n_clients,
            n_archetypes,
            heterogeneity: 0.0,
            days,
            der_mix: default_der_mix(),
            feeders: default_feeders(),
            shift_changepoint: None,
            seed,
            harmonics: default_harmonics(),
            ar_coeff: default_ar_coeff(),
            noise_level: default_noise_level(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.n_clients == 0 {
            return bad("population.n_clients must be >= 1".into());
        }
        if self.n_archetypes == 0 || self.n_archetypes > self.n_clients {
            return bad(format!(
                "population.n_archetypes must be in [1, n_clients={}], got {}",
                self.n_clients, self.n_archetypes
            ));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return bad(format!(
                "population.heterogeneity must be in [0, 1], got {}",
                self.heterogeneity
            ));
        }
        if self.days == 0 {
            return bad("population.days must be >= 1".into());
        }
        if self.feeders == 0 {
            return bad("population.feeders must be >= 1".into());
        }
        if self.harmonics > 2 {
            return bad(format!(
                "population.harmonics must be <= 2, got {}",
                self.harmonics
            ));
        }
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return bad(format!(
                "population.ar_coeff must be in [0, 1), got {}",
                self.ar_coeff
            ));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!(
                "population.noise_level must be >= 0, got {}",
                self.noise_level
            ));
        }
        if self.der_mix.is_empty() {
            return bad("population.der_mix must not be empty".into());
        }
        for (class, f) in &self.der_mix {
            if !(*f >= 0.0 && f.is_finite()) {
                return bad(format!("population.der_mix.{class} must be >= 0, got {f}"));
            }
        }
        let total: f64 = self.der_mix.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("population.der_mix fractions sum to {total}, expected 1"));
        }
        if let Some(cp) = &self.shift_changepoint {
            if !(cp.magnitude > -1.0 && cp.magnitude.is_finite()) {
                return bad(format!(
                    "population.shift_changepoint.magnitude must be > -1, got {}",
                    cp.magnitude
                ));
            }
        }
        Ok(())
    }
}

/// Sunrise and sunset (fractional hours, UTC) for a day of year (1 = 1 January).
pub fn daylight_window(day_of_year: f64) -> (f64, f64) {
    let day_length = 12.0 + 3.5 * (TAU * (day_of_year - 80.0) / 365.25).sin();
    (12.0 - day_length / 2.0, 12.0 + day_length / 2.0)
}

/// Relative clear-sky output at an hour; zero outside the open daylight window.
fn clear_sky(day_of_year: f64, hour: f64, tilt: f64) -> f64 {
    let (sunrise, sunset) = daylight_window(day_of_year);
    if hour <= sunrise || hour >= sunset {
        return 0.0;
    }
    let half = (sunset - sunrise) / 2.0;
    let u = (hour - 12.0) / half;
    let season = 0.7 + 0.3 * (TAU * (day_of_year - 80.0) / 365.25).sin();
    ((1.0 - u * u) * (1.0 + tilt * u) * season).max(0.0)
}

fn day_of_year(epoch_hours: i64) -> f64 {
    let days = epoch_hours.div_euclid(24);
    let date = chrono::DateTime::from_timestamp(days * 86_400, 0)
        .expect("epoch hours within chrono range")
        .date_naive();
    f64::from(chrono::Datelike::ordinal(&date))
}

fn is_weekend(epoch_hours: i64) -> bool {
    // 1970-01-01 was a Thursday; Monday = 0.
    let dow = (epoch_hours.div_euclid(24) + 3).rem_euclid(7);
    dow >= 5
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Region-wide weather shared by every client.
struct Weather {
    temperature: Vec<f64>,
    irradiance: Vec<f64>,
    cloud: Vec<f64>,
}

impl Weather {
    fn generate(hours: usize, seed: u64) -> Self {
        let mut rng = seed::derived_rng(seed, "weather", &[]);
        let mut temperature = Vec::with_capacity(hours);
        let mut irradiance = Vec::with_capacity(hours);
        let mut cloud = Vec::with_capacity(hours);
        let (mut t_noise, mut c_noise) = (0.0f64, 0.0f64);
        for i in 0..hours {
            let ts = GENERATED_START_EPOCH_HOURS + i as i64;
            let doy = day_of_year(ts);
            let hour = (ts.rem_euclid(24)) as f64;
            t_noise = 0.95 * t_noise + 1.0 * (1.0 - 0.95f64 * 0.95).sqrt() * normal(&mut rng);
            c_noise = 0.9 * c_noise + 0.15 * (1.0 - 0.9f64 * 0.9).sqrt() * normal(&mut rng);
            let temp = 12.0
                + 9.0 * (TAU * (doy - 110.0) / 365.25).sin()
                + 4.0 * (TAU * (hour - 9.0) / 24.0).sin()
                + t_noise;
            let c = (0.8 + c_noise).clamp(0.0, 1.0);
            temperature.push(temp);
            cloud.push(c);
            irradiance.push((clear_sky(doy, hour, 0.0) * c).clamp(0.0, 1.0));
        }
        Weather {
            temperature,
            irradiance,
            cloud,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LoadShape {
    base: f64,
    amp: [f64; 2],
    phase: [f64; 2],
    weekend: f64,
    cool: f64,
    heat: f64,
}

#[derive(Debug, Clone, Copy)]
struct PvShape {
    capacity: f64,
    tilt: f64,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Load(LoadShape),
    Pv(PvShape),
}

fn wrap_angle(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y > TAU / 2.0 {
        y - TAU
    } else {
        y
    }
}

impl Shape {
    /// Draws a shape. With `slot = Some((a, k))` the primary phase (or tilt)
    /// is spread evenly over the `k` archetypes; `None` draws it freely.
    fn draw(class: DerClass, slot: Option<(usize, usize)>, class_phase: f64, rng: &mut ChaCha8Rng) -> Shape {
        if class == DerClass::Pv {
            let capacity = rng.random_range(2.0..6.0);
            let tilt = match slot {
                Some((a, k)) => -0.6 + 1.2 * (a as f64 + 0.5) / k as f64 + rng.random_range(-0.05..0.05),
                None => rng.random_range(-0.6..0.6),
            };
            return Shape::Pv(PvShape { capacity, tilt });
        }
        let (base, amp1, cool, heat) = match class {
            DerClass::FixedLoad => (
                rng.random_range(0.6..1.2),
                rng.random_range(0.45..0.6),
                rng.random_range(0.0..0.03),
                rng.random_range(0.0..0.03),
            ),
            DerClass::Hvac => (
                rng.random_range(0.8..1.6),
                rng.random_range(0.3..0.45),
                rng.random_range(0.08..0.15),
                rng.random_range(0.05..0.1),
            ),
            DerClass::EvCharger => (
                rng.random_range(0.5..1.0),
                rng.random_range(0.7..0.9),
                0.0,
                rng.random_range(0.0..0.02),
            ),
            DerClass::Battery => (
                rng.random_range(0.3..0.6),
                rng.random_range(0.6..0.8),
                0.0,
                0.0,
            ),
            DerClass::Pv => unreachable!(),
        };
        let amp2 = rng.random_range(0.15..0.25);
        let phase1 = match slot {
            Some((a, k)) => class_phase + TAU * a as f64 / k as f64 + rng.random_range(-0.2..0.2),
            None => rng.random_range(0.0..TAU),
        };
        let phase2 = rng.random_range(0.0..TAU);
        let weekend = rng.random_range(0.8..1.3);
        Shape::Load(LoadShape {
            base,
            amp: [amp1, amp2],
            phase: [phase1, phase2],
            weekend,
            cool,
            heat,
        })
    }

    fn blend(self, other: Shape, lambda: f64) -> Shape {
        let lerp = |a: f64, b: f64| a + lambda * (b - a);
        let slerp = |a: f64, b: f64| a + lambda * wrap_angle(b - a);
        match (self, other) {
            (Shape::Load(a), Shape::Load(b)) => Shape::Load(LoadShape {
                base: lerp(a.base, b.base),
                amp: [lerp(a.amp[0], b.amp[0]), lerp(a.amp[1], b.amp[1])],
                phase: [slerp(a.phase[0], b.phase[0]), slerp(a.phase[1], b.phase[1])],
                weekend: lerp(a.weekend, b.weekend),
                cool: lerp(a.cool, b.cool),
                heat: lerp(a.heat, b.heat),
            }),
            (Shape::Pv(a), Shape::Pv(b)) => Shape::Pv(PvShape {
                capacity: lerp(a.capacity, b.capacity),
                tilt: lerp(a.tilt, b.tilt),
            }),
            _ => unreachable!("blend across device classes"),
        }
    }
}

/// Largest-remainder apportionment of `n` clients over the mix, in
/// `DerClass` order.
fn class_counts(mix: &BTreeMap<DerClass, f64>, n: usize) -> Vec<(DerClass, usize)> {
    let mut counts: Vec<(DerClass, usize, f64)> = mix
        .iter()
        .map(|(c, f)| {
            let exact = f * n as f64;
            (*c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = counts.iter().map(|c| c.1).sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].2.total_cmp(&counts[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i].1 += 1;
    }
    counts.into_iter().map(|(c, k, _)| (c, k)).collect()
}

fn client_id_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(4)
}

pub fn generate_population(spec: &PopulationSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let hours = spec.days * 24;
    let weather = Weather::generate(hours, spec.seed);
    let k = spec.n_archetypes;

    let mut classes: Vec<DerClass> = class_counts(&spec.der_mix, spec.n_clients)
        .into_iter()
        .flat_map(|(c, n)| std::iter::repeat_n(c, n))
        .collect();
    classes.shuffle(&mut seed::derived_rng(spec.seed, "der_assign", &[]));

    let mut archetypes: BTreeMap<(DerClass, usize), Shape> = BTreeMap::new();
    let width = client_id_width(spec.n_clients);
    let mut out = Vec::with_capacity(spec.n_clients);

    for (i, &class) in classes.iter().enumerate() {
        let a = i % k;
        let archetype = *archetypes.entry((class, a)).or_insert_with(|| {
            let class_phase = seed::derived_rng(spec.seed, "class_phase", &[class.as_str().into()])
                .random_range(0.0..TAU);
            let mut rng = seed::derived_rng(
                spec.seed,
                "archetype",
                &[class.as_str().into(), Part::from(a)],
            );
            Shape::draw(class, Some((a, k)), class_phase, &mut rng)
        });
        let shape = if spec.heterogeneity > 0.0 {
            let mut rng = seed::derived_rng(spec.seed, "client_shape", &[Part::from(i)]);
            archetype.blend(Shape::draw(class, None, 0.0, &mut rng), spec.heterogeneity)
        } else {
            archetype
        };
        let mut noise_rng = seed::derived_rng(spec.seed, "noise", &[Part::from(i)]);
        let values = synthesize(&shape, spec, &weather, &mut noise_rng);

        let mut covariates = BTreeMap::new();
        covariates.insert("irradiance".to_string(), weather.irradiance.clone());
        covariates.insert("temperature_c".to_string(), weather.temperature.clone());
        out.push(ClientDataset {
            client_id: format!("c{i:0width$}"),
            series: TimeSeries::new(GENERATED_START_EPOCH_HOURS, values)?,
            covariates,
            der_class: class,
            flex_class: class.default_flex(),
            feeder_id: format!("F{:02}", i % spec.feeders),
            archetype_id: a as i64,
        });
    }
    Ok(out)
}

fn synthesize(shape: &Shape, spec: &PopulationSpec, weather: &Weather, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let hours = weather.temperature.len();
    let rho = spec.ar_coeff;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut noise = 0.0f64;
    let mut values = Vec::with_capacity(hours);
    for t in 0..hours {
        let ts = GENERATED_START_EPOCH_HOURS + t as i64;
        let hour = ts.rem_euclid(24) as f64;
        let level = match spec.shift_changepoint {
            Some(cp) if t / 24 >= cp.day => 1.0 + cp.magnitude,
            _ => 1.0,
        };
        noise = rho * noise + innovation * normal(rng);
        let v = match shape {
            Shape::Load(s) => {
                let mut daily = 1.0;
                for h in 0..spec.harmonics {
                    let w = TAU * (h + 1) as f64 * hour / 24.0;
                    daily += s.amp[h] * (w - s.phase[h]).cos();
                }
                let week = if is_weekend(ts) { s.weekend } else { 1.0 };
                let temp = weather.temperature[t];
                let thermal = s.cool * (temp - 22.0).max(0.0) + s.heat * (14.0 - temp).max(0.0);
                let det = level * (s.base * daily * week + thermal);
                det + spec.noise_level * s.base * noise
            }
            Shape::Pv(s) => {
                let sky = clear_sky(day_of_year(ts), hour, s.tilt);
                if sky == 0.0 {
                    0.0
                } else {
                    let cloud = (weather.cloud[t] + spec.noise_level * noise).clamp(0.0, 1.0);
                    level * s.capacity * sky * cloud
                }
            }
        };
        values.push(v.max(0.0));
    }
    values
}

/// Clients drawn from a few linear generators `y = w·x + noise` with
/// standard-normal inputs, already split chronologically. Client `i` uses
/// generator `i % weights.len()`; scalers are the identity.
pub fn linear_regression_population(
    weights: &[Vec<f64>],
    n_clients: usize,
    samples_per_client: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<PreparedClient>> {
    if weights.is_empty() || n_clients == 0 {
        return Err(Error::config("need at least one generator and one client"));
    }
    let d = weights[0].len();
    if d == 0 || weights.iter().any(|w| w.len() != d) {
        return Err(Error::shape("generator weights must share a nonzero length"));
    }
    let width = client_id_width(n_clients);
    (0..n_clients)
        .map(|i| {
            let g = i % weights.len();
            let mut rng = seed::derived_rng(seed, "linear_client", &[Part::from(i)]);
            let mut inputs = Vec::with_capacity(samples_per_client * d);
            let mut targets = Vec::with_capacity(samples_per_client);
            for _ in 0..samples_per_client {
                let x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                let y: f64 = x.iter().zip(&weights[g]).map(|(a, b)| a * b).sum::<f64>()
                    + noise_std * normal(&mut rng);
                inputs.extend(x);
                targets.push(y);
            }
            let set = SupervisedSet::from_parts(
                inputs,
                targets,
                d,
                1,
                (0..samples_per_client as i64).collect(),
            )?;
            let (train, val, test) = split_dataset(&set)?;
            Ok(PreparedClient {
                client_id: format!("c{i:0width$}"),
                feeder_id: "F00".into(),
                der_class: DerClass::FixedLoad,
                flex_class: DerClass::FixedLoad.default_flex(),
                archetype_id: g as i64,
                scaler: Scaler::identity(),
                train,
                val,
                test,
            })
        })
        .collect()
}
