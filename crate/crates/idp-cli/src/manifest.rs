//! Pipeline manifest: one record per completed stage with content-hash
//! digests of its inputs and outputs. Digests, not timestamps, drive
//! the caching story: a stage re-run over identical input digests must
//! reproduce identical output digests.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seed: u64,
    /// Artifact name -> sha256 hex digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub stages: Vec<StageRecord>,
}

impl PipelineManifest {
    pub fn load(path: &Path) -> Result<PipelineManifest> {
        if !path.exists() {
            return Ok(PipelineManifest::default());
        }
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("bad manifest {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).with_context(|| format!("cannot write manifest {}", path.display()))
    }

    /// Insert or replace the record for a stage, keeping records unique
    /// per stage name.
    pub fn record(&mut self, record: StageRecord) {
        self.stages.retain(|s| s.stage != record.stage);
        self.stages.push(record);
    }

    pub fn get(&self, stage: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}
