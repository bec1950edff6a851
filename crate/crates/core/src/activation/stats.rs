use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task_vectors::LayerId;

pub const STATS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsMeta {
    #[serde(default)]
    pub num_samples: Option<u64>,
    #[serde(default)]
    pub dataset_id: Option<String>,
}

/// Calibration statistics produced by the extractor. Unknown JSON fields are ignored.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub schema_version: u32,
    /// Tensor name → importance of each output row (leading dimension).
    #[serde(default)]
    pub activation: BTreeMap<String, Vec<f64>>,
    /// Model id → layer → sensitivity.
    #[serde(default)]
    pub layer_sensitivity: BTreeMap<String, BTreeMap<LayerId, f64>>,
    /// Model id → task-level sensitivity.
    #[serde(default)]
    pub task_sensitivity: BTreeMap<String, f64>,
    #[serde(default)]
    pub meta: StatsMeta,
}

fn check_score(what: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Stats(format!("{what}: score {v} must be finite and >= 0")));
    }
    Ok(())
}

impl CalibrationStats {
    pub fn from_json(text: &str) -> Result<Self> {
        let stats: Self =
            serde_json::from_str(text).map_err(|e| Error::Stats(format!("invalid JSON: {e}")))?;
        stats.validate()?;
        Ok(stats)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != STATS_SCHEMA_VERSION {
            return Err(Error::Stats(format!(
                "unsupported schema_version {} (expected {STATS_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for (name, rows) in &self.activation {
            for &v in rows {
                check_score(&format!("activation.{name}"), v)?;
            }
        }
        for (model, layers) in &self.layer_sensitivity {
            for (layer, &v) in layers {
                check_score(&format!("layer_sensitivity.{model}.{layer}"), v)?;
            }
        }
        for (model, &v) in &self.task_sensitivity {
            check_score(&format!("task_sensitivity.{model}"), v)?;
        }
        if !self.task_sensitivity.is_empty() && self.task_sensitivity.values().all(|&v| v == 0.0) {
            return Err(Error::Stats("task_sensitivity needs at least one positive score".into()));
        }
        Ok(())
    }
}
