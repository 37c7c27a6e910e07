//! Brain module: maps ROI vectors or whole volumes onto the target embedding.

mod conv;
mod ridge;
mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use conv::{build_conv_mapper, ConvMapper, ConvMapperConfig, RunningStats, Variant, MIN_SPATIAL};
pub use ridge::{
    default_lambda_grid, normal_equation_residual, ridge_cv, ridge_fit, ridge_predict, ridge_predict_batch,
    to_matrix, CvResult, RidgeModel, RidgeOptions,
};
pub use train::{evaluate_mse, predict_batch, train_mapper, ForwardOut, LinearMapper, TrainHistory, TrainableMapper};

use crate::dataset::{FlatVoxelVector, NormStats, VolumeGrid};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Regression target / captioner input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEmbedding(pub Vec<f64>);

impl TargetEmbedding {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapperKind {
    Ridge,
    Shallow,
    Wide,
}

impl MapperKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MapperKind::Ridge => "ridge",
            MapperKind::Shallow => "shallow",
            MapperKind::Wide => "wide",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MapperKind::Ridge => "Ridge",
            MapperKind::Shallow => "Shallow",
            MapperKind::Wide => "Wide",
        }
    }

    pub fn is_volumetric(self) -> bool {
        self != MapperKind::Ridge
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            MapperKind::Ridge => None,
            MapperKind::Shallow => Some(Variant::Shallow),
            MapperKind::Wide => Some(Variant::Wide),
        }
    }
}

impl std::str::FromStr for MapperKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge" => Ok(MapperKind::Ridge),
            "shallow" => Ok(MapperKind::Shallow),
            "wide" => Ok(MapperKind::Wide),
            other => Err(Error::Config(format!("unknown mapper {other:?}; expected ridge, shallow or wide"))),
        }
    }
}

pub enum MapperInput<'a> {
    Flat(&'a FlatVoxelVector),
    Volume(&'a VolumeGrid),
}

/// A trained brain module of any supported kind.
#[derive(Debug, Clone)]
pub enum BrainModel {
    Ridge(RidgeModel),
    Linear(LinearMapper),
    Conv(ConvMapper),
}

impl BrainModel {
    pub fn output_dim(&self) -> usize {
        match self {
            BrainModel::Ridge(m) => m.output_dim(),
            BrainModel::Linear(m) => m.output_dim(),
            BrainModel::Conv(m) => m.output_dim(),
        }
    }

    pub fn is_volumetric(&self) -> bool {
        matches!(self, BrainModel::Conv(_))
    }
}

/// Inference-mode prediction for one sample.
pub fn predict_embedding(model: &BrainModel, input: MapperInput<'_>) -> Result<TargetEmbedding> {
    let out = match (model, input) {
        (BrainModel::Ridge(m), MapperInput::Flat(x)) => ridge_predict(m, x)?,
        (BrainModel::Linear(m), MapperInput::Flat(x)) => {
            let t = Tensor::vector(x.0.clone());
            predict_batch(m, &[&t])?.remove(0)
        }
        (BrainModel::Conv(m), MapperInput::Volume(v)) => predict_batch(m, &[&v.data])?.remove(0),
        (BrainModel::Conv(_), MapperInput::Flat(_)) => {
            return Err(Error::Dimension("a volumetric mapper needs a volume, got an ROI vector".into()))
        }
        (_, MapperInput::Volume(_)) => {
            return Err(Error::Dimension("a linear mapper needs an ROI vector, got a volume".into()))
        }
    };
    if !out.0.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("prediction contains non-finite values".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum CheckpointConfig {
    Ridge {
        lambda: f64,
        input_dim: usize,
        output_dim: usize,
    },
    Linear {
        input_dim: usize,
        output_dim: usize,
    },
    Conv {
        config: ConvMapperConfig,
    },
}

/// A brain model plus the input normalization it was trained under.
#[derive(Debug, Clone)]
pub struct BrainCheckpoint {
    pub model: BrainModel,
    pub norm: Option<NormStats>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes `config.json`, one VCT1 file per parameter and optionally `norm.json`.
pub fn save_brain_checkpoint(ckpt: &BrainCheckpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = match &ckpt.model {
        BrainModel::Ridge(m) => {
            m.weights_tensor().save(&dir.join("weights.vct"), DType::F64)?;
            Tensor::vector(m.bias.iter().copied().collect()).save(&dir.join("bias.vct"), DType::F64)?;
            Tensor::scalar(m.lambda).save(&dir.join("lambda.vct"), DType::F64)?;
            CheckpointConfig::Ridge {
                lambda: m.lambda,
                input_dim: m.input_dim(),
                output_dim: m.output_dim(),
            }
        }
        BrainModel::Linear(m) => {
            m.params().save(dir)?;
            CheckpointConfig::Linear {
                input_dim: m.input_shape()[0],
                output_dim: m.output_dim(),
            }
        }
        BrainModel::Conv(m) => {
            m.params().save(dir)?;
            for (i, r) in m.running_stats().iter().enumerate() {
                Tensor::vector(r.mean.clone()).save(&dir.join(format!("running.{i}.mean.vct")), DType::F64)?;
                Tensor::vector(r.var.clone()).save(&dir.join(format!("running.{i}.var.vct")), DType::F64)?;
            }
            CheckpointConfig::Conv {
                config: m.config().clone(),
            }
        }
    };
    write_json(&dir.join("config.json"), &config)?;
    let norm_path = dir.join("norm.json");
    match &ckpt.norm {
        Some(n) => write_json(&norm_path, n)?,
        None if norm_path.exists() => fs::remove_file(&norm_path).map_err(|e| Error::io(&norm_path, e))?,
        None => {}
    }
    Ok(())
}

pub fn load_brain_checkpoint(dir: &Path) -> Result<BrainCheckpoint> {
    let config: CheckpointConfig = read_json(&dir.join("config.json"))?;
    let model = match config {
        CheckpointConfig::Ridge {
            lambda,
            input_dim,
            output_dim,
        } => {
            let w = Tensor::load(&dir.join("weights.vct"))?;
            let b = Tensor::load(&dir.join("bias.vct"))?;
            let m = RidgeModel::from_tensors(&w, &b, lambda)?;
            if (m.input_dim(), m.output_dim()) != (input_dim, output_dim) {
                return Err(Error::Validation(format!(
                    "ridge checkpoint declares {input_dim}x{output_dim}, tensors are {}x{}",
                    m.input_dim(),
                    m.output_dim()
                )));
            }
            BrainModel::Ridge(m)
        }
        CheckpointConfig::Linear { input_dim, output_dim } => {
            let mut m = LinearMapper::new(input_dim, output_dim, 0);
            m.params_mut().load_into(dir)?;
            BrainModel::Linear(m)
        }
        CheckpointConfig::Conv { config } => {
            let mut m = build_conv_mapper(config)?;
            m.params_mut().load_into(dir)?;
            let mut stats = Vec::with_capacity(m.running_stats().len());
            for i in 0..m.running_stats().len() {
                stats.push(RunningStats {
                    mean: Tensor::load(&dir.join(format!("running.{i}.mean.vct")))?.into_data(),
                    var: Tensor::load(&dir.join(format!("running.{i}.var.vct")))?.into_data(),
                });
            }
            m.set_running_stats(stats)?;
            BrainModel::Conv(m)
        }
    };
    let norm_path = dir.join("norm.json");
    let norm = if norm_path.exists() { Some(read_json(&norm_path)?) } else { None };
    Ok(BrainCheckpoint { model, norm })
}
