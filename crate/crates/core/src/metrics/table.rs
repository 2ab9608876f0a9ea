//! Per-case, per-region metric tables and their CSV/JSON forms.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// A metric value; `Undefined` is the sentinel for scores with no defined
/// numeric value (e.g. HD95 with exactly one empty mask). Sentinels rank
/// worst during aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Real(f64),
    Undefined(Option<()>),
}

impl MetricValue {
    pub const UNDEFINED: MetricValue = MetricValue::Undefined(None);

    pub fn real(self) -> Option<f64> {
        match self {
            MetricValue::Real(v) => Some(v),
            MetricValue::Undefined(_) => None,
        }
    }

    pub fn is_undefined(self) -> bool {
        matches!(self, MetricValue::Undefined(_))
    }
}

impl From<f64> for MetricValue {
    fn from(v: f64) -> Self {
        MetricValue::Real(v)
    }
}

impl From<Option<f64>> for MetricValue {
    fn from(v: Option<f64>) -> Self {
        match v {
            Some(x) => MetricValue::Real(x),
            None => MetricValue::UNDEFINED,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub case_id: String,
    pub candidate_id: String,
    pub region: String,
    pub metric: String,
    pub value: MetricValue,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn push(
        &mut self,
        case_id: &str,
        candidate_id: &str,
        region: &str,
        metric: &str,
        value: impl Into<MetricValue>,
    ) {
        self.rows.push(MetricRow {
            case_id: case_id.to_string(),
            candidate_id: candidate_id.to_string(),
            region: region.to_string(),
            metric: metric.to_string(),
            value: value.into(),
        });
    }

    /// The (case, region, metric) grid this table covers.
    pub fn grid(&self) -> BTreeSet<(String, String, String)> {
        self.rows
            .iter()
            .map(|r| (r.case_id.clone(), r.region.clone(), r.metric.clone()))
            .collect()
    }

    pub fn value(&self, case_id: &str, region: &str, metric: &str) -> Option<MetricValue> {
        self.rows
            .iter()
            .find(|r| r.case_id == case_id && r.region == region && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn case_ids(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.case_id.clone()).collect()
    }

    pub fn to_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut wtr = csv::Writer::from_path(path).map_err(Error::Csv)?;
        wtr.write_record(["case_id", "candidate_id", "region", "metric", "value"])?;
        for r in &self.rows {
            let value = match r.value {
                MetricValue::Real(v) => format!("{v}"),
                MetricValue::Undefined(_) => "undefined".to_string(),
            };
            wtr.write_record([&r.case_id, &r.candidate_id, &r.region, &r.metric, &value])?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(Error::Csv)?;
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record?;
            if record.len() != 5 {
                return Err(Error::Format(format!(
                    "{}: metric table rows need 5 columns, got {}",
                    path.display(),
                    record.len()
                )));
            }
            let raw = record[4].trim();
            let value = if raw.eq_ignore_ascii_case("undefined")
                || raw.eq_ignore_ascii_case("nan")
                || raw.is_empty()
            {
                MetricValue::UNDEFINED
            } else {
                MetricValue::Real(raw.parse().map_err(|_| {
                    Error::Format(format!("{}: bad metric value {raw}", path.display()))
                })?)
            };
            rows.push(MetricRow {
                case_id: record[0].to_string(),
                candidate_id: record[1].to_string(),
                region: record[2].to_string(),
                metric: record[3].to_string(),
                value,
            });
        }
        Ok(MetricTable { rows })
    }

    pub fn to_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.rows)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn from_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows: Vec<MetricRow> = serde_json::from_str(&text)?;
        Ok(MetricTable { rows })
    }
}
