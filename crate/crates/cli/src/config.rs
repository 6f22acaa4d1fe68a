//! Run configuration. Every block is optional; omitted fields take defaults and
//! unknown keys are rejected.

use std::path::Path;

use ped_core::canonical::CanonicalMap;
use ped_core::eval::DownstreamConfig;
use ped_core::expfam::ExpFamily;
use ped_core::io::read_json;
use ped_core::train::{default_lambda, TrainConfig};
use ped_core::{PedError, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// overlaid on the shallow or deep training defaults
    pub train: Option<Value>,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: None,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub family: ExpFamily,
    /// one map per layer, data side first
    pub maps: Vec<CanonicalMap>,
    /// `d^(0), ..., d^(L)`; the last width must be 2
    pub dims: Vec<usize>,
    pub resolution: usize,
    /// random subset of the grid points; all of them when absent
    pub samples: Option<usize>,
    pub seed: u64,
    pub marginal: Option<MarginalConfig>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            family: ExpFamily::Gaussian,
            maps: vec![CanonicalMap::Identity],
            dims: vec![50, 2],
            resolution: ped_core::datagen::DEFAULT_RESOLUTION,
            samples: None,
            seed: 0,
            marginal: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalConfig {
    pub draws: usize,
    pub lambda_prior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// widths `d^(0), ..., d^(L)`; taken from the dataset when absent
    pub dims: Option<Vec<usize>>,
    pub maps: Option<Vec<CanonicalMap>>,
    /// prior precision per layer; 0.1 for linear maps and 1 otherwise when absent
    pub lambdas: Option<Vec<f64>>,
    pub data_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub backbones: Vec<String>,
    pub seeds: Vec<u64>,
    pub downstream: DownstreamConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            backbones: vec!["frozen-pca".into(), "ped-finetune".into()],
            seeds: vec![0, 1, 2, 3, 4],
            downstream: DownstreamConfig::default(),
        }
    }
}

/// Model shape after filling gaps from the dataset metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedModel {
    pub dims: Vec<usize>,
    pub maps: Vec<CanonicalMap>,
    pub lambdas: Vec<f64>,
    pub data_precision: f64,
}

impl ResolvedModel {
    pub fn is_deep(&self) -> bool {
        self.dims.len() > 2
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.dims.len() < 2 || d.dims.iter().any(|&w| w == 0) {
            return Err(PedError::Validation("dataset.dims needs at least two positive widths".into()));
        }
        if *d.dims.last().unwrap() != 2 {
            return Err(PedError::Validation("dataset.dims must end in the latent width 2".into()));
        }
        if d.maps.len() != d.dims.len() - 1 {
            return Err(PedError::Validation(format!(
                "dataset.maps has {} entries for {} layers",
                d.maps.len(),
                d.dims.len() - 1
            )));
        }
        if d.resolution < 2 {
            return Err(PedError::Validation("dataset.resolution must be at least 2".into()));
        }
        if let Some(m) = &d.marginal {
            if !(m.lambda_prior > 0.0) {
                return Err(PedError::Validation("dataset.marginal.lambda_prior must be positive".into()));
            }
        }
        self.eval.downstream.validate()?;
        if self.eval.seeds.is_empty() {
            return Err(PedError::Validation("eval.seeds must not be empty".into()));
        }
        self.train_config(false)?;
        self.train_config(true)?;
        Ok(())
    }

    /// Training block overlaid on the shallow or deep defaults.
    pub fn train_config(&self, deep: bool) -> Result<TrainConfig> {
        let base = if deep { TrainConfig::deep_default() } else { TrainConfig::default() };
        let Some(overlay) = &self.train else {
            return Ok(base);
        };
        let Value::Object(fields) = overlay else {
            return Err(PedError::Validation("train must be a JSON object".into()));
        };
        let mut merged = serde_json::to_value(&base)?;
        for (k, v) in fields {
            merged[k] = v.clone();
        }
        let cfg: TrainConfig = serde_json::from_value(merged).map_err(|e| PedError::Validation(format!("train: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_model(&self, data_dims: &[usize], data_maps: &[CanonicalMap]) -> Result<ResolvedModel> {
        let dims = self.model.dims.clone().unwrap_or_else(|| data_dims.to_vec());
        if dims.len() < 2 || dims.iter().any(|&w| w == 0) {
            return Err(PedError::Validation("model.dims needs at least two positive widths".into()));
        }
        if dims[0] != data_dims.first().copied().unwrap_or(0) {
            return Err(PedError::Validation(format!(
                "model input width {} differs from the data width {}",
                dims[0],
                data_dims.first().copied().unwrap_or(0)
            )));
        }
        let depth = dims.len() - 1;
        let maps = match &self.model.maps {
            Some(m) => m.clone(),
            None if data_maps.len() == depth => data_maps.to_vec(),
            None => vec![data_maps.first().cloned().unwrap_or(CanonicalMap::Identity); depth],
        };
        if maps.len() != depth {
            return Err(PedError::Validation(format!("model.maps has {} entries for {depth} layers", maps.len())));
        }
        let lambdas = self.model.lambdas.clone().unwrap_or_else(|| maps.iter().map(default_lambda).collect());
        if lambdas.len() != depth || lambdas.iter().any(|l| !(*l > 0.0)) {
            return Err(PedError::Validation("model.lambdas needs one positive value per layer".into()));
        }
        let data_precision = self.model.data_precision.unwrap_or(1.0);
        if !(data_precision > 0.0) {
            return Err(PedError::Validation("model.data_precision must be positive".into()));
        }
        Ok(ResolvedModel {
            dims,
            maps,
            lambdas,
            data_precision,
        })
    }
}
