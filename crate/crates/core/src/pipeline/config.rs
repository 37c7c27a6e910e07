use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::brain::{default_lambda_grid, MapperKind};
use crate::caption::DecodeConfig;
use crate::dataset::{MinMaxScope, NormMode};
use crate::error::{Error, Result};
use crate::metrics::Protocol;
use crate::nn::TrainConfig;

pub const DEFAULT_SUBJECTS: [&str; 4] = ["sub1", "sub2", "sub5", "sub7"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSpec {
    /// Defaults to z-score for ridge and min-max for the volumetric mappers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<NormMode>,
    #[serde(default)]
    pub minmax_scope: MinMaxScope,
    #[serde(default = "yes")]
    pub average_test_repetitions: bool,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        NormalizationSpec {
            mode: None,
            minmax_scope: MinMaxScope::Global,
            average_test_repetitions: true,
        }
    }
}

fn yes() -> bool {
    true
}

/// Optional overrides of the volumetric mapper's architecture.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_widths: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_layout: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem_kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem_stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad_multiple: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrainSpec {
    /// Gradient training of the volumetric mappers.
    #[serde(default)]
    pub train: TrainConfig,
    /// Fixed ridge penalty; when absent it is chosen by cross-validation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge_lambda: Option<f64>,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default)]
    pub conv: ConvOverrides,
}

fn default_folds() -> usize {
    5
}

impl Default for BrainSpec {
    fn default() -> Self {
        BrainSpec {
            train: TrainConfig::default(),
            ridge_lambda: None,
            lambda_grid: default_lambda_grid(),
            cv_folds: default_folds(),
            conv: ConvOverrides::default(),
        }
    }
}

/// Built-in decoder shape; the vocabulary comes from the training captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmShape {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub max_positions: usize,
}

impl Default for LmShape {
    fn default() -> Self {
        LmShape {
            embed_dim: 32,
            layers: 1,
            heads: 2,
            hidden_dim: 128,
            max_positions: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionSpec {
    #[serde(default = "default_caption_train")]
    pub train: TrainConfig,
    #[serde(default = "default_prefix_length")]
    pub prefix_length: usize,
    #[serde(default = "default_mapper_layers")]
    pub mapper_layers: usize,
    #[serde(default = "default_mapper_heads")]
    pub mapper_heads: usize,
    #[serde(default = "default_mapper_hidden")]
    pub mapper_hidden_dim: usize,
    #[serde(default)]
    pub lm: LmShape,
    #[serde(default)]
    pub freeze_lm: bool,
}

fn default_caption_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        weight_decay: 0.0,
        ..TrainConfig::default()
    }
}

fn default_prefix_length() -> usize {
    10
}

fn default_mapper_layers() -> usize {
    4
}

fn default_mapper_heads() -> usize {
    8
}

fn default_mapper_hidden() -> usize {
    512
}

impl Default for CaptionSpec {
    fn default() -> Self {
        CaptionSpec {
            train: default_caption_train(),
            prefix_length: default_prefix_length(),
            mapper_layers: default_mapper_layers(),
            mapper_heads: default_mapper_heads(),
            mapper_hidden_dim: default_mapper_hidden(),
            lm: LmShape::default(),
            freeze_lm: false,
        }
    }
}

/// Baseline token grid and our embedding size for the efficiency line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencySpec {
    pub baseline_tokens: u64,
    pub baseline_dim: u64,
    pub ours_dim: u64,
}

impl Default for EfficiencySpec {
    fn default() -> Self {
        EfficiencySpec {
            baseline_tokens: 257,
            baseline_dim: 1024,
            ours_dim: 1536,
        }
    }
}

/// Declarative description of one experiment. Relative paths resolve
/// against the directory of the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    #[serde(default = "default_subjects")]
    pub subjects: Vec<String>,
    /// Dataset manifest per subject.
    pub datasets: BTreeMap<String, PathBuf>,
    pub mapper: MapperKind,
    #[serde(default)]
    pub normalization: NormalizationSpec,
    #[serde(default)]
    pub brain: BrainSpec,
    #[serde(default)]
    pub caption: CaptionSpec,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    /// Directory holding `encoders.json`; deterministic stubs when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoders: Option<PathBuf>,
    #[serde(default)]
    pub efficiency: EfficiencySpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_subjects() -> Vec<String> {
    DEFAULT_SUBJECTS.iter().map(|s| s.to_string()).collect()
}

fn default_protocol() -> Protocol {
    Protocol::VsCoco
}

impl RunConfig {
    /// Parses and validates `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run_dir);
        self.datasets.values_mut().for_each(fix);
        if let Some(p) = self.encoders.as_mut() {
            fix(p);
        }
    }

    /// Replaces the seed with `value` when one is given.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("seed override {v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn norm_mode(&self) -> NormMode {
        self.normalization.mode.unwrap_or(if self.mapper.is_volumetric() {
            NormMode::Minmax
        } else {
            NormMode::Zscore
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::Config("no subjects listed".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.subjects {
            if s.is_empty() || s.contains(['/', '\\']) || s.starts_with('.') {
                return Err(Error::Config(format!("subject id {s:?} is not usable as a directory name")));
            }
            if !seen.insert(s) {
                return Err(Error::Config(format!("subject {s} is listed twice")));
            }
            if !self.datasets.contains_key(s) {
                return Err(Error::Config(format!("no dataset manifest given for subject {s}")));
            }
        }
        let expected = if self.mapper.is_volumetric() {
            NormMode::Minmax
        } else {
            NormMode::Zscore
        };
        if self.norm_mode() != expected {
            return Err(Error::Config(format!(
                "the {} mapper takes {} inputs, which need {:?} normalization",
                self.mapper.as_str(),
                if self.mapper.is_volumetric() { "volume" } else { "ROI vector" },
                expected
            )));
        }
        self.brain.train.validate()?;
        if self.brain.ridge_lambda.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::Config("ridge_lambda must be >= 0".into()));
        }
        if self.brain.ridge_lambda.is_none() && self.brain.lambda_grid.is_empty() {
            return Err(Error::Config("lambda_grid is empty and no ridge_lambda is fixed".into()));
        }
        self.caption.train.validate()?;
        self.decode.validate()?;
        let needed = self.caption.prefix_length + self.decode.max_len;
        if self.caption.lm.max_positions < needed {
            return Err(Error::Config(format!(
                "language model max_positions {} is below prefix_length + max_len = {needed}",
                self.caption.lm.max_positions
            )));
        }
        if self.efficiency.ours_dim == 0 {
            return Err(Error::Config("efficiency.ours_dim must be positive".into()));
        }
        Ok(())
    }
}
