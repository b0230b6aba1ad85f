//! Evaluation reports as JSON and as a flat text table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metric: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_relation: BTreeMap<String, f64>,
    /// Secondary numbers such as precision, recall or counts.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl Report {
    pub fn new(metric: impl Into<String>, value: f64, seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            metric: metric.into(),
            value,
            per_relation: BTreeMap::new(),
            details: BTreeMap::new(),
            seed,
            config_hash: config_hash.into(),
        }
    }

    pub fn detail(mut self, key: &str, value: f64) -> Self {
        self.details.insert(key.to_string(), value);
        self
    }

    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, f64)> = vec![(self.metric.clone(), self.value)];
        rows.extend(self.details.iter().map(|(k, v)| (k.clone(), *v)));
        rows.extend(self.per_relation.iter().map(|(k, v)| (format!("{}/{k}", self.metric), *v)));
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  value", "metric");
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:.6}");
        }
        let _ = writeln!(out, "seed {} config {}", self.seed, self.config_hash);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_lists_every_relation() {
        let mut r = Report::new("mrr", 0.5, 7, "abc");
        r.per_relation.insert("born_in".into(), 0.25);
        let t = r.to_table();
        assert!(t.contains("mrr/born_in"));
        assert!(t.contains("0.250000"));
        let json = serde_json::to_string(&r).unwrap();
        let back: Report = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
