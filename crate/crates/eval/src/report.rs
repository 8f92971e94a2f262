//! JSON and flat CSV output of evaluation results.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One value of the flat CSV: `metric,scope,value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    /// Group, class or layer the value refers to; empty for global values.
    pub scope: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    /// Full structured results keyed by metric name.
    pub details: serde_json::Map<String, serde_json::Value>,
}

impl EvalReport {
    pub fn push(&mut self, metric: &str, scope: impl Into<String>, value: f64) {
        self.rows.push(MetricRow { metric: metric.into(), scope: scope.into(), value });
    }

    pub fn detail<S: Serialize>(&mut self, metric: &str, value: &S) -> Result<()> {
        self.details.insert(metric.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}
