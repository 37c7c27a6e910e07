//! Volumetric ResNet-18: 7³ stride-2 stem, 3³ max pool, four stages of two
//! basic blocks, global average pooling and an affine head onto the
//! embedding. Normalization layers use batch statistics while training and
//! frozen running estimates at inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{ForwardOut, TrainableMapper};
use crate::autodiff::{BatchStats, Conv3dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, uniform_tensor, ParamSet};
use crate::tensor::Tensor;

/// Smallest padded spatial extent accepted; below it the last stages would
/// only ever see padding.
pub const MIN_SPATIAL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Shallow,
    Wide,
}

impl Variant {
    pub fn default_widths(self) -> [usize; 4] {
        match self {
            Variant::Shallow => [16, 32, 64, 128],
            Variant::Wide => [64, 128, 256, 512],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvMapperConfig {
    pub variant: Variant,
    pub block_layout: [usize; 4],
    pub base_widths: [usize; 4],
    pub input_shape: [usize; 3],
    pub output_dim: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Each spatial axis is zero-padded up to a multiple of this.
    pub pad_multiple: usize,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_bn_momentum() -> f64 {
    0.1
}

fn default_bn_eps() -> f64 {
    1e-5
}

impl ConvMapperConfig {
    pub fn new(variant: Variant, input_shape: [usize; 3], output_dim: usize) -> Self {
        ConvMapperConfig {
            variant,
            block_layout: [2, 2, 2, 2],
            base_widths: variant.default_widths(),
            input_shape,
            output_dim,
            stem_kernel: 7,
            stem_stride: 2,
            pad_multiple: 32,
            bn_momentum: default_bn_momentum(),
            bn_eps: default_bn_eps(),
            init_seed: 0,
        }
    }

    pub fn padded_shape(&self) -> [usize; 3] {
        let m = self.pad_multiple.max(1);
        self.input_shape.map(|d| d.div_ceil(m) * m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_layout.iter().sum::<usize>() != 8 || self.block_layout.contains(&0) {
            return Err(Error::Config(format!(
                "ResNet-18 needs 8 residual blocks over 4 stages, got {:?}",
                self.block_layout
            )));
        }
        if self.base_widths.contains(&0) || self.output_dim == 0 {
            return Err(Error::Config("channel widths and output_dim must be positive".into()));
        }
        if self.stem_kernel % 2 == 0 || self.stem_stride == 0 {
            return Err(Error::Config("stem kernel must be odd and stride positive".into()));
        }
        let padded = self.padded_shape();
        if padded.iter().any(|&d| d < MIN_SPATIAL) {
            return Err(Error::Config(format!(
                "input {:?} (padded {:?}) is too small for the downsampling chain; need >= {MIN_SPATIAL} per axis",
                self.input_shape, padded
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    weight: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
    spec: Conv3dSpec,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    proj: Option<ConvBn>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvMapper {
    config: ConvMapperConfig,
    params: ParamSet,
    running: Vec<RunningStats>,
    stem: ConvBn,
    blocks: Vec<Block>,
    head_w: usize,
    head_b: usize,
}

struct Builder<'a> {
    params: ParamSet,
    running: Vec<RunningStats>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
        let fan_in = (cin * k * k * k) as f64;
        let w = normal_tensor(self.rng, &[cout, cin, k, k, k], (2.0 / fan_in).sqrt());
        let weight = self.params.add(format!("{name}.weight"), w);
        let gamma = self.params.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0));
        let beta = self.params.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
        self.running.push(RunningStats {
            mean: vec![0.0; cout],
            var: vec![1.0; cout],
        });
        ConvBn {
            weight,
            gamma,
            beta,
            bn: self.running.len() - 1,
            spec: Conv3dSpec { stride, pad: k / 2 },
        }
    }
}

pub fn build_conv_mapper(config: ConvMapperConfig) -> Result<ConvMapper> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut b = Builder {
        params: ParamSet::new(),
        running: Vec::new(),
        rng: &mut rng,
    };
    let w = config.base_widths;
    let stem = b.conv_bn("stem", 1, w[0], config.stem_kernel, config.stem_stride);
    let mut blocks = Vec::new();
    let mut cin = w[0];
    for (stage, (&n_blocks, &cout)) in config.block_layout.iter().zip(&w).enumerate() {
        for j in 0..n_blocks {
            let stride = if stage > 0 && j == 0 { 2 } else { 1 };
            let name = format!("stage{}.block{j}", stage + 1);
            let conv1 = b.conv_bn(&format!("{name}.conv1"), cin, cout, 3, stride);
            let conv2 = b.conv_bn(&format!("{name}.conv2"), cout, cout, 3, 1);
            let proj = (stride != 1 || cin != cout).then(|| b.conv_bn(&format!("{name}.proj"), cin, cout, 1, stride));
            blocks.push(Block { conv1, conv2, proj });
            cin = cout;
        }
    }
    let bound = 1.0 / (cin as f64).sqrt();
    let head_w = b.params.add("head.weight", uniform_tensor(b.rng, &[cin, config.output_dim], bound));
    let head_b = b.params.add("head.bias", Tensor::zeros(&[config.output_dim]));
    let Builder { params, running, .. } = b;
    Ok(ConvMapper {
        config,
        params,
        running,
        stem,
        blocks,
        head_w,
        head_b,
    })
}

impl ConvMapper {
    pub fn config(&self) -> &ConvMapperConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn set_running_stats(&mut self, stats: Vec<RunningStats>) -> Result<()> {
        if stats.len() != self.running.len()
            || stats.iter().zip(&self.running).any(|(a, b)| a.mean.len() != b.mean.len())
        {
            return Err(Error::Validation("running statistics do not match the architecture".into()));
        }
        self.running = stats;
        Ok(())
    }

    /// Zero-pads volumes of `input_shape` into the network's [N, 1, X, Y, Z] input.
    pub fn prepare_batch(&self, volumes: &[&Tensor]) -> Result<Tensor> {
        let [xi, yi, zi] = self.config.input_shape;
        let [xp, yp, zp] = self.config.padded_shape();
        let mut data = vec![0.0; volumes.len() * xp * yp * zp];
        for (n, v) in volumes.iter().enumerate() {
            if v.shape() != self.config.input_shape {
                return Err(Error::Dimension(format!(
                    "volume {:?} for a mapper expecting {:?}",
                    v.shape(),
                    self.config.input_shape
                )));
            }
            let base = n * xp * yp * zp;
            for x in 0..xi {
                for y in 0..yi {
                    let src = (x * yi + y) * zi;
                    let dst = base + (x * yp + y) * zp;
                    data[dst..dst + zi].copy_from_slice(&v.data()[src..src + zi]);
                }
            }
        }
        Tensor::new(vec![volumes.len(), 1, xp, yp, zp], data)
    }

    fn conv_bn(&self, g: &mut Graph, p: &[Var], x: Var, c: &ConvBn, train: bool, stats: &mut Vec<(usize, BatchStats)>) -> Var {
        let y = g.conv3d(x, p[c.weight], c.spec);
        let running = &self.running[c.bn];
        let frozen = (!train).then_some((running.mean.as_slice(), running.var.as_slice()));
        let (y, s) = g.batch_norm(y, p[c.gamma], p[c.beta], frozen, self.config.bn_eps);
        if let Some(s) = s {
            stats.push((c.bn, s));
        }
        y
    }
}

impl TrainableMapper for ConvMapper {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    fn input_shape(&self) -> Vec<usize> {
        self.config.input_shape.to_vec()
    }

    fn forward(&self, g: &mut Graph, p: &[Var], batch: &[&Tensor], train: bool) -> Result<ForwardOut> {
        let input = self.prepare_batch(batch)?;
        let mut stats = Vec::new();
        let x = g.leaf(input);
        let h = self.conv_bn(g, p, x, &self.stem, train, &mut stats);
        let h = g.relu(h);
        let mut h = g.max_pool3d(h);
        for b in &self.blocks {
            let y = self.conv_bn(g, p, h, &b.conv1, train, &mut stats);
            let y = g.relu(y);
            let y = self.conv_bn(g, p, y, &b.conv2, train, &mut stats);
            let skip = match &b.proj {
                Some(pc) => self.conv_bn(g, p, h, pc, train, &mut stats),
                None => h,
            };
            let s = g.add(y, skip);
            h = g.relu(s);
        }
        let pooled = g.global_avg_pool(h);
        let out = g.matmul(pooled, p[self.head_w]);
        let out = g.add_bias(out, p[self.head_b]);
        Ok(ForwardOut { output: out, stats })
    }

    fn absorb_stats(&mut self, stats: Vec<(usize, BatchStats)>) {
        let m = self.config.bn_momentum;
        for (idx, s) in stats {
            let r = &mut self.running[idx];
            // Running variance tracks the unbiased estimate.
            let count = s.count as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for c in 0..r.mean.len() {
                r.mean[c] = (1.0 - m) * r.mean[c] + m * s.mean[c];
                r.var[c] = (1.0 - m) * r.var[c] + m * s.var[c] * unbias;
            }
        }
    }
}
