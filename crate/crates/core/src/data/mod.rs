//! Client datasets: synthetic generation, CSV ingestion and the supervised
//! windowing pipeline.

mod csv_io;
mod generate;
mod supervised;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{epoch_hours_to_iso, load_csv, parse_iso_hour, write_csv, CsvSchema, LoadOptions};
pub use generate::{
    daylight_window, generate_population, linear_regression_population, Changepoint,
    PopulationSpec, GENERATED_START_EPOCH_HOURS,
};
pub use supervised::{
    build_supervised, fit_scaler, prepare_client, prepare_pooled, split_dataset, FeatureSpec,
    PreparedClient, Rows, Scaler, SupervisedSet, CALENDAR_FEATURES,
};

/// Regularly sampled signal in kW. Hourly only: `step_hours` is always 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub start_epoch_hours: i64,
    pub step_hours: u32,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(start_epoch_hours: i64, values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                round: None,
                message: format!("non-finite series value at index {i}"),
            });
        }
        Ok(TimeSeries {
            start_epoch_hours,
            step_hours: 1,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, i: usize) -> i64 {
        self.start_epoch_hours + (i as i64) * i64::from(self.step_hours)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerClass {
    FixedLoad,
    Hvac,
    EvCharger,
    Battery,
    Pv,
}

impl DerClass {
    pub const ALL: [DerClass; 5] = [
        DerClass::FixedLoad,
        DerClass::Hvac,
        DerClass::EvCharger,
        DerClass::Battery,
        DerClass::Pv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DerClass::FixedLoad => "fixed_load",
            DerClass::Hvac => "hvac",
            DerClass::EvCharger => "ev_charger",
            DerClass::Battery => "battery",
            DerClass::Pv => "pv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// Default flexibility class of a device type.
    pub fn default_flex(self) -> FlexClass {
        match self {
            DerClass::FixedLoad => FlexClass::NonInterruptible,
            DerClass::Hvac | DerClass::Pv => FlexClass::Curtailable,
            DerClass::EvCharger | DerClass::Battery => FlexClass::Shiftable,
        }
    }
}

impl fmt::Display for DerClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlexClass {
    Shiftable,
    Curtailable,
    NonInterruptible,
}

/// One client's raw data. Never leaves the client side of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: String,
    pub series: TimeSeries,
    /// Named signals aligned with `series`.
    pub covariates: BTreeMap<String, Vec<f64>>,
    pub der_class: DerClass,
    pub flex_class: FlexClass,
    pub feeder_id: String,
    /// Ground-truth archetype for synthetic clients, -1 when ingested.
    pub archetype_id: i64,
}

impl ClientDataset {
    pub fn validate(&self) -> Result<()> {
        for (name, cov) in &self.covariates {
            if cov.len() != self.series.len() {
                return Err(Error::shape(format!(
                    "client `{}`: covariate `{name}` has {} values, series has {}",
                    self.client_id,
                    cov.len(),
                    self.series.len()
                )));
            }
        }
        if self.archetype_id < -1 {
            return Err(Error::config(format!(
                "client `{}`: archetype_id {} < -1",
                self.client_id, self.archetype_id
            )));
        }
        Ok(())
    }
}
