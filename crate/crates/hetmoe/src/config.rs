//! Run configuration: a single versioned JSON document describing the model,
//! the dataset mixture, the training schedule, and optional adaptation or
//! expansion plans. Unknown keys are rejected with a path-qualified error.

use crate::adapt::{HybridRecipe, PrunePolicy, SelectionPolicy};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::DatasetSpec;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdaptMode {
    RouterOnly,
    RouterPlusExperts {
        k: usize,
        #[serde(default)]
        selection: SelectionPolicy,
    },
    Prune {
        policy: PrunePolicy,
    },
    TopkReduce {
        new_k: usize,
    },
    Hybrid {
        recipe: HybridRecipe,
    },
    FtFull,
}

/// Adaptation plan: which mode, what target, and the fine-tune budget.
/// Register-style modes take a fresh `dataset`; prune and topk_reduce act on
/// an already registered `dataset_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptPlan {
    pub mode: AdaptMode,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub dataset_id: Option<u32>,
    pub iters: usize,
    pub lr: f64,
    #[serde(default = "default_lambda")]
    pub lambda_mi: f64,
}

fn default_lambda() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpandPlan {
    pub dataset: DatasetSpec,
    pub c: usize,
    pub iters: usize,
    pub lr: f64,
    #[serde(default = "default_lambda")]
    pub lambda_mi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub datasets: Vec<DatasetSpec>,
    pub train: TrainConfig,
    #[serde(default)]
    pub adapt: Option<AdaptPlan>,
    #[serde(default)]
    pub expand: Option<ExpandPlan>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.datasets.is_empty() {
            return Err(Error::Config("at least one dataset is required".into()));
        }
        let mut ids = BTreeSet::new();
        for spec in &self.datasets {
            spec.validate()?;
            if !ids.insert(spec.dataset_id) {
                return Err(Error::Config(format!(
                    "duplicate dataset_id {}",
                    spec.dataset_id
                )));
            }
            if spec.generator.input_dim() != self.model.d_in {
                return Err(Error::Config(format!(
                    "dataset {} input dim {} does not match model d_in {}",
                    spec.dataset_id,
                    spec.generator.input_dim(),
                    self.model.d_in
                )));
            }
        }
        if let Some(plan) = &self.adapt {
            plan.validate(&ids, self.model.d_in)?;
        }
        if let Some(plan) = &self.expand {
            plan.dataset.validate()?;
            if ids.contains(&plan.dataset.dataset_id) {
                return Err(Error::Config(format!(
                    "expand dataset_id {} already used by pretraining",
                    plan.dataset.dataset_id
                )));
            }
            if plan.iters == 0 || plan.lr <= 0.0 {
                return Err(Error::Config("expand budget must be positive".into()));
            }
        }
        Ok(())
    }
}

impl AdaptPlan {
    pub fn validate(&self, known_ids: &BTreeSet<u32>, d_in: usize) -> Result<()> {
        if self.iters == 0 || self.lr <= 0.0 {
            return Err(Error::Config("adapt budget must be positive".into()));
        }
        let registers_new = !matches!(self.mode, AdaptMode::Prune { .. } | AdaptMode::TopkReduce { .. });
        if registers_new {
            let spec = self.dataset.as_ref().ok_or_else(|| {
                Error::Config("this adapt mode requires a new dataset spec".into())
            })?;
            spec.validate()?;
            if known_ids.contains(&spec.dataset_id) {
                return Err(Error::Config(format!(
                    "adapt dataset_id {} already used by pretraining",
                    spec.dataset_id
                )));
            }
            if spec.generator.input_dim() != d_in {
                return Err(Error::Config(format!(
                    "adapt dataset input dim {} does not match model d_in {d_in}",
                    spec.generator.input_dim()
                )));
            }
        } else {
            let id = self.dataset_id.ok_or_else(|| {
                Error::Config("prune and topk_reduce require a target dataset_id".into())
            })?;
            if !known_ids.contains(&id) {
                return Err(Error::Missing(format!("dataset {id}")));
            }
        }
        if let AdaptMode::TopkReduce { new_k } = self.mode {
            if new_k == 0 {
                return Err(Error::Config("new_k must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Parse and validate a config document, reporting the JSON path of any
/// schema violation.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| Error::Config(format!("at {}: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
