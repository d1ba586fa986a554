//! Checkpoints: one versioned JSON document holding the model, optimizer
//! moments, RNG/stream state, and the run configuration. Serialization is
//! byte-deterministic (ordered maps, round-trip-exact floats), so identical
//! runs produce identical files.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synthdata::{BatchStream, BatchStreamState, Dataset, DatasetSpec};
use crate::trainer::TrainState;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    /// The config that produced this checkpoint, echoed for provenance.
    pub run_config: RunConfig,
    /// Specs of every materialized dataset, in stream order (pretraining
    /// datasets first, then any adapted/expanded additions).
    pub dataset_specs: Vec<DatasetSpec>,
    pub model: Model,
    pub train_state: TrainState,
    pub stream_state: BatchStreamState,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Checkpoint> {
        let mut de = serde_json::Deserializer::from_str(text);
        let ckpt: Checkpoint = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| Error::Config(format!("checkpoint at {}: {}", e.path(), e.inner())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Missing(format!("checkpoint {}: {e}", path.display())))?;
        Checkpoint::parse(&text)
    }

    /// Regenerate all datasets from their specs and restore the batch stream
    /// exactly where it left off.
    pub fn restore_stream(&self) -> Result<BatchStream> {
        let datasets: Vec<Dataset> = self
            .dataset_specs
            .iter()
            .map(Dataset::generate)
            .collect::<Result<_>>()?;
        let mut stream = BatchStream::new(datasets, self.run_config.seed);
        stream.restore_state(self.stream_state.clone())?;
        Ok(stream)
    }
}
