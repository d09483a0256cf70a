use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named scalar results of one experiment.
///
/// Maps are ordered, so serializing a report is canonical.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, bool>,
}

impl MetricsReport {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Records a metric; non-finite values are rejected.
    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("metric `{name}`")));
        }
        self.metrics.insert(name, value);
        Ok(())
    }

    pub fn flag(&mut self, name: impl Into<String>, value: bool) {
        self.flags.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Copies every entry of `other` under `prefix/`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &MetricsReport) {
        for (k, v) in &other.metrics {
            self.metrics.insert(format!("{prefix}/{k}"), *v);
        }
        for (k, v) in &other.flags {
            self.flags.insert(format!("{prefix}/{k}"), *v);
        }
    }
}
