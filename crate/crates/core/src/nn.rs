//! Parameter storage, initialization, and first-order optimizers shared by
//! the convolutional mapper, the prefix mapper and the tiny language model.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a graph leaf, in order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes one `<name>.vct` file per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (n, t) in self.names.iter().zip(&self.tensors) {
            t.save(&dir.join(format!("{n}.vct")), DType::F64)?;
        }
        Ok(())
    }

    /// Replaces every tensor with the file of the same name, checking shapes.
    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let loaded = Tensor::load(&dir.join(format!("{n}.vct")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Validation(format!(
                    "parameter {n}: checkpoint shape {:?}, model expects {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(())
    }
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    /// Adam with decoupled weight decay.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over all epochs.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_schedule")]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Cosine
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate and weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Optimizer state over a fixed subset of a [`ParamSet`].
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    momentum: f64,
    indices: Vec<usize>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    /// Tracks the parameters at `indices` (all of them when `None`).
    pub fn new(cfg: &TrainConfig, params: &ParamSet, indices: Option<Vec<usize>>) -> Self {
        let indices = indices.unwrap_or_else(|| (0..params.len()).collect());
        let zeros = |i: &usize| vec![0.0; params.get(*i).len()];
        Optimizer {
            kind: cfg.optimizer,
            weight_decay: cfg.weight_decay,
            momentum: cfg.momentum,
            m: indices.iter().map(zeros).collect(),
            v: indices.iter().map(zeros).collect(),
            indices,
            step: 0,
        }
    }

    /// Applies one update; `vars[i]` is the graph leaf of parameter `i`.
    pub fn step(&mut self, params: &mut ParamSet, vars: &[Var], grads: &Gradients, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let bc1 = 1.0 - B1.powi(self.step as i32);
        let bc2 = 1.0 - B2.powi(self.step as i32);
        for (slot, &pi) in self.indices.iter().enumerate() {
            let Some(g) = grads.get(vars[pi]) else { continue };
            let p = params.get_mut(pi).data_mut();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            match self.kind {
                OptimizerKind::Adam => {
                    for k in 0..p.len() {
                        let gk = g.data()[k];
                        m[k] = B1 * m[k] + (1.0 - B1) * gk;
                        v[k] = B2 * v[k] + (1.0 - B2) * gk * gk;
                        let upd = (m[k] / bc1) / ((v[k] / bc2).sqrt() + EPS);
                        p[k] -= lr * (upd + self.weight_decay * p[k]);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    for k in 0..p.len() {
                        let gk = g.data()[k] + self.weight_decay * p[k];
                        m[k] = self.momentum * m[k] + gk;
                        p[k] -= lr * m[k];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            epochs: 10,
            learning_rate: 2.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 2.0);
        assert!((cfg.lr_at(5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::vector(vec![3.0, -2.0]));
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, &params, None);
        for _ in 0..500 {
            let mut g = Graph::new();
            let vars = params.bind(&mut g);
            let x = g.reshape(vars[0], &[1, 2]);
            let loss = g.mse_loss(x, &Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
            let grads = g.backward(loss);
            opt.step(&mut params, &vars, &grads, 0.1);
        }
        for x in params.get(0).data() {
            assert!((x - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn checksum_tracks_bits() {
        let mut a = ParamSet::new();
        a.add("w", Tensor::vector(vec![0.0]));
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.get_mut(0).data_mut()[0] = -0.0;
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::new();
        p.add("layer.w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.5]).unwrap());
        p.save(dir.path()).unwrap();
        let mut q = p.clone();
        q.get_mut(0).data_mut()[0] = 9.0;
        q.load_into(dir.path()).unwrap();
        assert_eq!(p, q);
    }
}
