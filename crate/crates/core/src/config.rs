//! The run configuration file read by the command line tool.
//!
//! ```toml
//! [model]          # architecture; input width comes from the data
//! [train]          # optimisation; see TrainConfig
//! [data]           # csv + schema, or an inline synthetic spec
//! [sweep]          # η grid, seeds, worker count
//! ```
//!
//! Every section and key is optional except `[data]`, and omitted keys take
//! the UCI Adult preset values. Relative paths resolve against the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, split, synth_generate, synthetic_schema, Dataset, Schema, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{Activation, ModelConfig};
use crate::trainer::TrainConfig;

/// Architecture keys of [`ModelConfig`], minus the input width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub pre_widths: Vec<usize>,
    pub distraction_depth: usize,
    pub distraction_width: Option<usize>,
    pub head_widths: Vec<usize>,
    pub activation: Activation,
    pub distraction_activation: Option<Activation>,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from_config(&ModelConfig::adult(1))
    }
}

impl ModelSection {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            pre_widths: cfg.pre_widths.clone(),
            distraction_depth: cfg.distraction_depth,
            distraction_width: cfg.distraction_width,
            head_widths: cfg.head_widths.clone(),
            activation: cfg.activation,
            distraction_activation: cfg.distraction_activation,
            init_seed: cfg.init_seed,
        }
    }

    pub fn for_input(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            pre_widths: self.pre_widths.clone(),
            distraction_depth: self.distraction_depth,
            distraction_width: self.distraction_width,
            head_widths: self.head_widths.clone(),
            activation: self.activation,
            distraction_activation: self.distraction_activation,
            init_seed: self.init_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Headed CSV file.
    pub csv: Option<PathBuf>,
    /// Schema file; defaults to the sidecar next to `csv`.
    pub schema: Option<PathBuf>,
    /// Generate the data instead of reading it.
    pub synthetic: Option<SynthSpec>,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            csv: None,
            schema: None,
            synthetic: None,
            train_fraction: 2.0 / 3.0,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub etas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Worker threads; all cores when absent.
    pub jobs: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            etas: vec![0.0, 1.0, 10.0, 100.0, 1000.0],
            seeds: (0..5).collect(),
            jobs: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub sweep: SweepSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Train and test splits plus the schema that encoded them.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub schema: Schema,
}

/// `adult.csv` → `adult.schema.toml`.
pub fn sidecar_schema_path(csv: &Path) -> PathBuf {
    csv.with_extension("schema.toml")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|m| Error::parse(path, m))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.for_input(1).validate()?;
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.train_fraction must lie in (0,1), got {}",
                d.train_fraction
            )));
        }
        if d.csv.is_some() && d.synthetic.is_some() {
            return Err(Error::Config("data.csv and data.synthetic are mutually exclusive".into()));
        }
        if let Some(spec) = &d.synthetic {
            spec.validate()?;
        }
        if self.sweep.etas.is_empty() {
            return Err(Error::Config("sweep.etas is empty".into()));
        }
        if let Some(eta) = self.sweep.etas.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
            return Err(Error::Config(format!("sweep.etas contains {eta}")));
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep.seeds is empty".into()));
        }
        if self.sweep.jobs == Some(0) {
            return Err(Error::Config("sweep.jobs must be at least 1".into()));
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Replaces the data source with a CSV given on the command line.
    pub fn override_csv(&mut self, csv: PathBuf) {
        self.data.synthetic = None;
        self.data.csv = Some(csv);
        self.data.schema = None;
    }

    /// Sets both the training and the initialisation seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.model.init_seed = seed;
    }

    pub fn load_schema(&self) -> Result<Schema> {
        if let Some(spec) = &self.data.synthetic {
            return Ok(synthetic_schema(spec.d, 2));
        }
        let csv = self.csv_path()?;
        let path = match &self.data.schema {
            Some(p) => self.resolve(p),
            None => sidecar_schema_path(&csv),
        };
        Schema::load(path)
    }

    fn csv_path(&self) -> Result<PathBuf> {
        self.data
            .csv
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::Config("no data source: set data.csv or data.synthetic".into()))
    }

    /// Loads or generates the full dataset, before splitting.
    pub fn load_dataset(&self) -> Result<(Dataset, Schema)> {
        let schema = self.load_schema()?;
        let data = match &self.data.synthetic {
            Some(spec) => synth_generate(spec)?,
            None => load_csv(self.csv_path()?, &schema)?,
        };
        Ok((data, schema))
    }

    pub fn prepare(&self) -> Result<PreparedData> {
        let (data, schema) = self.load_dataset()?;
        let (train, test) = split(&data, self.data.train_fraction, self.data.split_seed)?;
        Ok(PreparedData { train, test, schema })
    }
}
