//! Versioned JSON snapshots of a training run. Floats are written with
//! round-trip precision, so a loaded checkpoint reproduces the saved
//! parameters and optimizer moments bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::data::Scaling;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PartitionedModel, Role};
use crate::trainer::{ParamOptimizer, TrainConfig, Trainer};

pub const FORMAT: &str = "fairdistract-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub role: Role,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// How raw rows were turned into model inputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    pub feature_names: Vec<String>,
    pub scaling: Option<Scaling>,
    pub num_groups: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub tensors: Vec<TensorRecord>,
    pub train: TrainConfig,
    pub epochs_done: usize,
    pub classifier_optimizer: ParamOptimizer,
    pub distraction_optimizer: ParamOptimizer,
    pub encoding: Encoding,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer, encoding: Encoding) -> Self {
        let tensors = trainer
            .model
            .params()
            .iter()
            .map(|p| TensorRecord {
                name: p.name.clone(),
                role: p.role,
                rows: p.value.rows(),
                cols: p.value.cols(),
                values: p.value.as_slice().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: trainer.model.config().clone(),
            tensors,
            train: trainer.cfg.clone(),
            epochs_done: trainer.epochs_done,
            classifier_optimizer: trainer.classifier_opt.clone(),
            distraction_optimizer: trainer.distraction_opt.clone(),
            encoding,
        }
    }

    pub fn model(&self) -> Result<PartitionedModel> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| Ok((t.name.clone(), t.role, Matrix::new(t.rows, t.cols, t.values.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        PartitionedModel::from_parts(self.model.clone(), tensors)
    }

    /// Rebuilds the trainer so that further epochs continue the saved run.
    pub fn trainer(&self) -> Result<Trainer> {
        Trainer::resume(
            self.model()?,
            self.train.clone(),
            self.classifier_optimizer.clone(),
            self.distraction_optimizer.clone(),
            self.epochs_done,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if ckpt.format != FORMAT {
            return Err(format!("not a checkpoint (format {:?})", ckpt.format));
        }
        if ckpt.version != VERSION {
            return Err(format!("unsupported checkpoint version {}", ckpt.version));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|m| Error::parse(path, m))
    }
}
