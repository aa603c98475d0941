//! Smart-meter CSV ingestion and export.
//!
//! Long format, one row per (client, hour): `timestamp` (ISO-8601, whole
//! hours, UTC), `client_id`, `value_kw`, and optionally `feeder_id`,
//! `der_class` and any number of numeric covariate columns. Exported files
//! use the same schema, so a generated population can be loaded back.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use super::{ClientDataset, DerClass, TimeSeries};
use crate::error::{Error, Result};
use crate::fmt17;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSchema {
    pub timestamp: String,
    pub client_id: String,
    pub value: String,
    /// Optional column; clients default to feeder `F00` when absent.
    pub feeder: String,
    /// Optional column; clients default to `fixed_load` when absent.
    pub der_class: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            timestamp: "timestamp".into(),
            client_id: "client_id".into(),
            value: "value_kw".into(),
            feeder: "feeder_id".into(),
            der_class: "der_class".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Fill missing hours with the previous row instead of failing.
    pub forward_fill: bool,
}

/// Parses an ISO-8601 timestamp at whole-hour resolution into hours since
/// the Unix epoch.
pub fn parse_iso_hour(s: &str) -> Option<i64> {
    let s = s.trim();
    let s = s.strip_suffix('Z').unwrap_or(s);
    let dt = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())?;
    if dt.minute() != 0 || dt.second() != 0 || dt.nanosecond() != 0 {
        return None;
    }
    Some(dt.and_utc().timestamp().div_euclid(3600))
}

pub fn epoch_hours_to_iso(hours: i64) -> String {
    chrono::DateTime::from_timestamp(hours * 3600, 0)
        .map(|d| d.format("%Y-%m-%dT%H:00:00Z").to_string())
        .unwrap_or_else(|| format!("invalid({hours})"))
}

struct Row {
    hour: i64,
    value: f64,
    covariates: Vec<f64>,
}

struct ClientRows {
    feeder: Option<String>,
    der_class: Option<DerClass>,
    rows: Vec<Row>,
}

fn parse_float(field: &str, line: u64, column: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            line,
            message: format!("column `{column}`: cannot parse `{field}` as a finite number"),
        })
}

pub fn load_csv(path: &Path, schema: &CsvSchema, opts: LoadOptions) -> Result<Vec<ClientDataset>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| find(name).ok_or_else(|| Error::Schema(name.to_string()));
    let ts_col = required(&schema.timestamp)?;
    let id_col = required(&schema.client_id)?;
    let value_col = required(&schema.value)?;
    let feeder_col = find(&schema.feeder);
    let class_col = find(&schema.der_class);
    let reserved = [Some(ts_col), Some(id_col), Some(value_col), feeder_col, class_col];
    let covariate_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !reserved.contains(&Some(*i)))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut clients: BTreeMap<String, ClientRows> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let hour = parse_iso_hour(field(ts_col)).ok_or_else(|| Error::Parse {
            line,
            message: format!("cannot parse `{}` as an ISO-8601 whole hour", field(ts_col)),
        })?;
        let value = parse_float(field(value_col), line, &schema.value)?;
        let covariates = covariate_cols
            .iter()
            .map(|(i, name)| parse_float(field(*i), line, name))
            .collect::<Result<Vec<_>>>()?;
        let der_class = match class_col {
            Some(c) => Some(DerClass::parse(field(c)).ok_or_else(|| Error::Parse {
                line,
                message: format!("unknown der_class `{}`", field(c)),
            })?),
            None => None,
        };
        let entry = clients
            .entry(field(id_col).to_string())
            .or_insert_with(|| ClientRows {
                feeder: feeder_col.map(|c| field(c).to_string()),
                der_class,
                rows: Vec::new(),
            });
        entry.rows.push(Row { hour, value, covariates });
    }

    clients
        .into_iter()
        .map(|(client_id, mut c)| {
            c.rows.sort_by_key(|r| r.hour);
            let rows = check_contiguous(&client_id, c.rows, opts)?;
            let start = rows[0].hour;
            let mut covariates: BTreeMap<String, Vec<f64>> = covariate_cols
                .iter()
                .map(|(_, name)| (name.clone(), Vec::with_capacity(rows.len())))
                .collect();
            let mut values = Vec::with_capacity(rows.len());
            for r in &rows {
                values.push(r.value);
                for ((_, name), v) in covariate_cols.iter().zip(&r.covariates) {
                    covariates.get_mut(name).expect("covariate column").push(*v);
                }
            }
            let der_class = c.der_class.unwrap_or(DerClass::FixedLoad);
            Ok(ClientDataset {
                client_id,
                series: TimeSeries::new(start, values)?,
                covariates,
                der_class,
                flex_class: der_class.default_flex(),
                feeder_id: c.feeder.unwrap_or_else(|| "F00".into()),
                archetype_id: -1,
            })
        })
        .collect()
}

fn check_contiguous(client: &str, rows: Vec<Row>, opts: LoadOptions) -> Result<Vec<Row>> {
    let mut out: Vec<Row> = Vec::with_capacity(rows.len());
    for row in rows {
        if let Some(prev) = out.last() {
            let expected = prev.hour + 1;
            if row.hour < expected {
                return Err(Error::Gap {
                    client: client.to_string(),
                    missing_hour: expected,
                    detail: format!("duplicate timestamp {}", epoch_hours_to_iso(row.hour)),
                });
            }
            if row.hour > expected {
                if !opts.forward_fill {
                    return Err(Error::Gap {
                        client: client.to_string(),
                        missing_hour: expected,
                        detail: format!("missing {}", epoch_hours_to_iso(expected)),
                    });
                }
                let (value, covariates) = (prev.value, prev.covariates.clone());
                for hour in expected..row.hour {
                    out.push(Row { hour, value, covariates: covariates.clone() });
                }
            }
        }
        out.push(row);
    }
    Ok(out)
}

/// Writes datasets in the ingestion schema; floats carry 17 significant
/// digits. All datasets must share one covariate set.
pub fn write_csv(path: &Path, datasets: &[ClientDataset]) -> Result<()> {
    let names: Vec<&String> = datasets
        .first()
        .map(|d| d.covariates.keys().collect())
        .unwrap_or_default();
    for d in datasets {
        if !d.covariates.keys().eq(names.iter().copied()) {
            return Err(Error::shape(format!(
                "client `{}` has a different covariate set",
                d.client_id
            )));
        }
    }
    let mut out = String::new();
    out.push_str("timestamp,client_id,value_kw,feeder_id,der_class");
    for n in &names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for d in datasets {
        for (i, v) in d.series.values.iter().enumerate() {
            out.push_str(&epoch_hours_to_iso(d.series.timestamp(i)));
            out.push(',');
            out.push_str(&d.client_id);
            out.push(',');
            out.push_str(&fmt17(*v));
            out.push(',');
            out.push_str(&d.feeder_id);
            out.push(',');
            out.push_str(d.der_class.as_str());
            for cov in d.covariates.values() {
                out.push(',');
                out.push_str(&fmt17(cov[i]));
            }
            out.push('\n');
        }
    }
    File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(content: &str, opts: LoadOptions) -> Result<Vec<ClientDataset>> {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        load_csv(f.path(), &CsvSchema::default(), opts)
    }

    #[test]
    fn iso_hours() {
        assert_eq!(parse_iso_hour("1970-01-01T01:00:00Z"), Some(1));
        assert_eq!(parse_iso_hour("2021-01-04T00:00"), Some(18_631 * 24));
        assert_eq!(parse_iso_hour("2021-01-04T00:30:00Z"), None);
        assert_eq!(epoch_hours_to_iso(18_631 * 24 + 5), "2021-01-04T05:00:00Z");
    }

    #[test]
    fn two_rows_one_client() {
        let ds = load_str(
            "timestamp,client_id,value_kw\n2021-01-01T00:00:00Z,a,1.5\n2021-01-01T01:00:00Z,a,2.5\n",
            LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].series.values, vec![1.5, 2.5]);
        assert_eq!(ds[0].archetype_id, -1);
    }

    #[test]
    fn gap_names_client_and_hour() {
        let err = load_str(
            "timestamp,client_id,value_kw\n\
             2021-01-01T00:00:00Z,meter7,1\n2021-01-01T01:00:00Z,meter7,1\n2021-01-01T03:00:00Z,meter7,1\n",
            LoadOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::Gap { client, missing_hour, .. } => {
                assert_eq!(client, "meter7");
                assert_eq!(epoch_hours_to_iso(missing_hour), "2021-01-01T02:00:00Z");
            }
            other => panic!("expected GapError, got {other:?}"),
        }
    }

    #[test]
    fn forward_fill_relaxes_gaps() {
        let ds = load_str(
            "timestamp,client_id,value_kw\n2021-01-01T00:00:00Z,a,1\n2021-01-01T03:00:00Z,a,4\n",
            LoadOptions { forward_fill: true },
        )
        .unwrap();
        assert_eq!(ds[0].series.values, vec![1., 1., 1., 4.]);
    }

    #[test]
    fn interleaved_clients_sorted() {
        let ds = load_str(
            "timestamp,client_id,value_kw,temp\n\
             2021-01-01T01:00:00Z,b,20,1\n2021-01-01T00:00:00Z,a,1,2\n\
             2021-01-01T00:00:00Z,b,10,3\n2021-01-01T01:00:00Z,a,2,4\n",
            LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].client_id, "a");
        assert_eq!(ds[0].series.values, vec![1., 2.]);
        assert_eq!(ds[1].series.values, vec![10., 20.]);
        assert_eq!(ds[1].covariates["temp"], vec![3., 1.]);
    }

    #[test]
    fn schema_and_parse_errors() {
        let err = load_str("timestamp,client_id\n2021-01-01T00:00:00Z,a\n", LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Schema(ref c) if c == "value_kw"));
        let err = load_str(
            "timestamp,client_id,value_kw\n2021-01-01T00:00:00Z,a,1\n2021-01-01T01:00:00Z,a,abc\n",
            LoadOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn duplicate_timestamp_rejected() {
        let err = load_str(
            "timestamp,client_id,value_kw\n2021-01-01T00:00:00Z,a,1\n2021-01-01T00:00:00Z,a,2\n",
            LoadOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Gap { .. }));
    }
}
