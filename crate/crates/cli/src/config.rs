use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use tierfair::data::{ColumnMap, SyntheticConfig};
use tierfair::pipeline::CorrectionConfig;

use crate::Invalid;

/// Contents of the `--config` JSON file. Every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub correction: CorrectionConfig,
    /// Groups with fewer records are merged into the group with the nearest
    /// outcome prevalence; 0 disables merging.
    pub merge_min_size: usize,
    pub columns: ColumnMap,
    /// Used by `synth`; defaults to four welfare-like groups.
    pub synth: Option<SyntheticConfig>,
    /// Rows of the default synthetic dataset.
    pub synth_rows: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            correction: CorrectionConfig::default(),
            merge_min_size: 0,
            columns: ColumnMap::default(),
            synth: None,
            synth_rows: 10_000,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<(RunConfig, Option<Vec<u8>>)> {
        let Some(path) = path else {
            return Ok((RunConfig::default(), None));
        };
        let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = serde_json::from_slice(&bytes)
            .map_err(|e| Invalid(format!("config {}: {e}", path.display())))?;
        Ok((cfg, Some(bytes)))
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        self.synth
            .clone()
            .unwrap_or_else(|| SyntheticConfig::welfare_like(self.synth_rows))
    }
}
