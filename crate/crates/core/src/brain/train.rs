use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TargetEmbedding;
use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{uniform_tensor, Optimizer, ParamSet, TrainConfig};
use crate::tensor::Tensor;

pub struct ForwardOut {
    /// [N, E]
    pub output: Var,
    /// Batch statistics per normalization layer (training mode only).
    pub stats: Vec<(usize, BatchStats)>,
}

/// A brain-to-embedding network trainable by [`train_mapper`].
pub trait TrainableMapper {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn output_dim(&self) -> usize;
    /// Shape of one input sample.
    fn input_shape(&self) -> Vec<usize>;
    fn forward(&self, g: &mut Graph, params: &[Var], batch: &[&Tensor], train: bool) -> Result<ForwardOut>;
    fn absorb_stats(&mut self, _stats: Vec<(usize, BatchStats)>) {}
}

/// Affine map from ROI vectors, trained by gradient descent (the iterative
/// counterpart of the closed-form ridge solver).
#[derive(Debug, Clone)]
pub struct LinearMapper {
    params: ParamSet,
    input_dim: usize,
    output_dim: usize,
}

impl LinearMapper {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.add(
            "weight",
            uniform_tensor(&mut rng, &[input_dim, output_dim], 1.0 / (input_dim as f64).sqrt()),
        );
        params.add("bias", Tensor::zeros(&[output_dim]));
        LinearMapper {
            params,
            input_dim,
            output_dim,
        }
    }
}

impl TrainableMapper for LinearMapper {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![self.input_dim]
    }

    fn forward(&self, g: &mut Graph, p: &[Var], batch: &[&Tensor], _train: bool) -> Result<ForwardOut> {
        for t in batch {
            if t.shape() != [self.input_dim] {
                return Err(Error::Dimension(format!(
                    "input {:?} for a linear mapper over {} voxels",
                    t.shape(),
                    self.input_dim
                )));
            }
        }
        let x = g.leaf(Tensor::stack(batch)?);
        let y = g.matmul(x, p[0]);
        let y = g.add_bias(y, p[1]);
        Ok(ForwardOut {
            output: y,
            stats: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Sample-weighted mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }
}

/// Minimizes the mean squared error between mapper outputs and targets.
///
/// Sample order is reshuffled every epoch from `cfg.seed`; when one batch
/// holds the whole dataset the order is left untouched.
pub fn train_mapper<M: TrainableMapper>(
    model: &mut M,
    inputs: &[&Tensor],
    targets: &[&[f64]],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    if inputs.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let e = model.output_dim();
    if let Some(t) = targets.iter().find(|t| t.len() != e) {
        return Err(Error::Dimension(format!("target of length {} for output_dim {e}", t.len())));
    }
    let n = inputs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg, model.params(), None);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        if cfg.batch_size < n {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| inputs[i]).collect();
            let mut target = Vec::with_capacity(chunk.len() * e);
            for &i in chunk {
                target.extend_from_slice(targets[i]);
            }
            let target = Tensor::new(vec![chunk.len(), e], target)?;

            let mut g = Graph::new();
            let vars = model.params().bind(&mut g);
            let fwd = model.forward(&mut g, &vars, &batch, true)?;
            let loss = g.mse_loss(fwd.output, &target);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {value} at epoch {epoch}, batch {bi} (learning rate {lr:e})"
                )));
            }
            let grads = g.backward(loss);
            opt.step(model.params_mut(), &vars, &grads, lr);
            model.absorb_stats(fwd.stats);
            total += value * chunk.len() as f64;
        }
        let epoch_loss = total / n as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:.6e}");
        history.epoch_loss.push(epoch_loss);
    }
    Ok(history)
}

/// Inference-mode predictions, evaluated in chunks.
pub fn predict_batch<M: TrainableMapper>(model: &M, inputs: &[&Tensor]) -> Result<Vec<TargetEmbedding>> {
    const CHUNK: usize = 16;
    let e = model.output_dim();
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(CHUNK) {
        let mut g = Graph::new();
        let vars = model.params().bind(&mut g);
        let fwd = model.forward(&mut g, &vars, chunk, false)?;
        for row in g.value(fwd.output).data().chunks_exact(e) {
            out.push(TargetEmbedding(row.to_vec()));
        }
    }
    Ok(out)
}

/// Mean squared error of a mapper's inference-mode predictions.
pub fn evaluate_mse<M: TrainableMapper>(model: &M, inputs: &[&Tensor], targets: &[&[f64]]) -> Result<f64> {
    let preds = predict_batch(model, inputs)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        for (a, b) in p.0.iter().zip(t.iter()) {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LrSchedule, OptimizerKind};

    fn data() -> (Vec<Tensor>, Vec<Vec<f64>>) {
        let xs: Vec<Tensor> = (0..6)
            .map(|i| Tensor::vector(vec![i as f64 * 0.3, 1.0 - i as f64 * 0.1, (i % 2) as f64]))
            .collect();
        let ys = xs
            .iter()
            .map(|x| vec![x.data()[0] - 2.0 * x.data()[2], 0.5 * x.data()[1]])
            .collect();
        (xs, ys)
    }

    fn cfg(lr: f64, batch: usize) -> TrainConfig {
        TrainConfig {
            epochs: 20,
            batch_size: batch,
            learning_rate: lr,
            weight_decay: 0.0,
            seed: 3,
            optimizer: OptimizerKind::SgdMomentum,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.0,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let (xs, ys) = data();
        let xr: Vec<&Tensor> = xs.iter().collect();
        let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
        let mut m = LinearMapper::new(3, 2, 1);
        let h = train_mapper(&mut m, &xr, &yr, &cfg(0.0, 6)).unwrap();
        assert!(h.epoch_loss.iter().all(|&l| l == h.epoch_loss[0]));
    }

    #[test]
    fn duplicated_dataset_gives_the_same_full_batch_model() {
        let (xs, ys) = data();
        let xr: Vec<&Tensor> = xs.iter().collect();
        let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
        let xd: Vec<&Tensor> = xs.iter().chain(xs.iter()).collect();
        let yd: Vec<&[f64]> = yr.iter().chain(yr.iter()).copied().collect();
        let mut a = LinearMapper::new(3, 2, 1);
        let mut b = a.clone();
        train_mapper(&mut a, &xr, &yr, &cfg(0.1, 6)).unwrap();
        train_mapper(&mut b, &xd, &yd, &cfg(0.1, 12)).unwrap();
        for (pa, pb) in a.params().tensors().iter().zip(b.params().tensors()) {
            for (x, y) in pa.data().iter().zip(pb.data()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let (mut xs, ys) = data();
        xs[2].data_mut()[0] = f64::NAN;
        let xr: Vec<&Tensor> = xs.iter().collect();
        let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
        let mut m = LinearMapper::new(3, 2, 1);
        let err = train_mapper(&mut m, &xr, &yr, &cfg(0.1, 2)).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("batch") && msg.contains("learning rate")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn linear_mapper_fits_a_linear_target() {
        let (xs, ys) = data();
        let xr: Vec<&Tensor> = xs.iter().collect();
        let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
        let mut m = LinearMapper::new(3, 2, 1);
        let c = TrainConfig {
            epochs: 2000,
            ..cfg(0.1, 6)
        };
        let h = train_mapper(&mut m, &xr, &yr, &c).unwrap();
        assert!(h.last().unwrap() < 1e-6);
        assert!(evaluate_mse(&m, &xr, &yr).unwrap() < 1e-6);
    }

    #[test]
    fn same_seed_reproduces_history() {
        let (xs, ys) = data();
        let xr: Vec<&Tensor> = xs.iter().collect();
        let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
        let run = || {
            let mut m = LinearMapper::new(3, 2, 1);
            train_mapper(&mut m, &xr, &yr, &cfg(0.05, 2)).unwrap()
        };
        assert_eq!(run(), run());
    }
}
