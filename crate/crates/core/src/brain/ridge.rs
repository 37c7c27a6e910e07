//! Closed-form ridge regression from ROI vectors to embeddings.
//!
//! With intercept fitting the columns of X and Y are centred and the bias is
//! recovered from the means. The primal system `(XᵀX + λI) W = XᵀY` is
//! solved by Cholesky when N ≥ V; for wide problems the equivalent dual form
//! `W = Xᵀ (XXᵀ + λI)⁻¹ Y` is used. λ = 0 yields the minimum-norm
//! least-squares solution through the SVD pseudo-inverse.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::TargetEmbedding;
use crate::dataset::FlatVoxelVector;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    /// [V, E]
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeOptions {
    pub lambda: f64,
    pub fit_intercept: bool,
}

impl RidgeModel {
    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights_tensor(&self) -> Tensor {
        // nalgebra is column-major; tensors are row-major.
        let (v, e) = self.weights.shape();
        let mut data = Vec::with_capacity(v * e);
        for i in 0..v {
            for j in 0..e {
                data.push(self.weights[(i, j)]);
            }
        }
        Tensor::from_parts(vec![v, e], data)
    }

    pub fn from_tensors(weights: &Tensor, bias: &Tensor, lambda: f64) -> Result<Self> {
        if weights.rank() != 2 || bias.rank() != 1 || bias.len() != weights.shape()[1] {
            return Err(Error::Dimension(format!(
                "ridge weights {:?} / bias {:?}",
                weights.shape(),
                bias.shape()
            )));
        }
        let (v, e) = (weights.shape()[0], weights.shape()[1]);
        Ok(RidgeModel {
            weights: DMatrix::from_row_slice(v, e, weights.data()),
            bias: DVector::from_column_slice(bias.data()),
            lambda,
        })
    }
}

/// Row-major [N, C] tensor into a matrix.
pub fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    if t.rank() != 2 {
        return Err(Error::Dimension(format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok(DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data()))
}

pub fn ridge_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, opts: RidgeOptions) -> Result<RidgeModel> {
    let (n, v) = x.shape();
    let e = y.ncols();
    if n == 0 {
        return Err(Error::Data("ridge regression needs at least one sample".into()));
    }
    if y.nrows() != n {
        return Err(Error::Dimension(format!("X has {n} rows, Y has {}", y.nrows())));
    }
    if !(opts.lambda >= 0.0) || !opts.lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", opts.lambda)));
    }

    let (xc, yc, x_mean, y_mean) = if opts.fit_intercept {
        let xm = x.row_mean();
        let ym = y.row_mean();
        let mut xc = x.clone();
        let mut yc = y.clone();
        for mut row in xc.row_iter_mut() {
            row -= &xm;
        }
        for mut row in yc.row_iter_mut() {
            row -= &ym;
        }
        (xc, yc, Some(xm), Some(ym))
    } else {
        (x.clone(), y.clone(), None, None)
    };

    let weights = if opts.lambda == 0.0 {
        let svd = xc.clone().svd(true, true);
        let eps = f64::EPSILON * (n.max(v) as f64) * svd.singular_values.max();
        svd.solve(&yc, eps).map_err(|m| Error::Solver(m.to_string()))?
    } else if n >= v {
        let mut gram = xc.tr_mul(&xc);
        for i in 0..v {
            gram[(i, i)] += opts.lambda;
        }
        let rhs = xc.tr_mul(&yc);
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Solver("XᵀX + λI is not positive definite".into()))?;
        chol.solve(&rhs)
    } else {
        let mut gram = &xc * xc.transpose();
        for i in 0..n {
            gram[(i, i)] += opts.lambda;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Solver("XXᵀ + λI is not positive definite".into()))?;
        xc.tr_mul(&chol.solve(&yc))
    };

    let bias = match (x_mean, y_mean) {
        (Some(xm), Some(ym)) => (ym - xm * &weights).transpose(),
        _ => DVector::zeros(e),
    };
    Ok(RidgeModel {
        weights,
        bias,
        lambda: opts.lambda,
    })
}

pub fn ridge_predict(model: &RidgeModel, x: &FlatVoxelVector) -> Result<TargetEmbedding> {
    if x.len() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "input of length {} for a ridge model over {} voxels",
            x.len(),
            model.input_dim()
        )));
    }
    let xv = DVector::from_column_slice(&x.0);
    let y = model.weights.tr_mul(&xv) + &model.bias;
    Ok(TargetEmbedding(y.iter().copied().collect()))
}

/// Predictions for every row of `x`.
pub fn ridge_predict_batch(model: &RidgeModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "inputs of width {} for a ridge model over {} voxels",
            x.ncols(),
            model.input_dim()
        )));
    }
    let mut out = x * &model.weights;
    for mut row in out.row_iter_mut() {
        row += model.bias.transpose();
    }
    Ok(out)
}

/// `{1e-3, 1e-2, …, 1e4}`
pub fn default_lambda_grid() -> Vec<f64> {
    (-3..=4).map(|p| 10f64.powi(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best_lambda: f64,
    /// (λ, mean validation MSE) per grid point.
    pub scores: Vec<(f64, f64)>,
}

/// K-fold cross-validated λ selection over contiguous folds. Ties go to the
/// larger λ.
pub fn ridge_cv(x: &DMatrix<f64>, y: &DMatrix<f64>, grid: &[f64], folds: usize, fit_intercept: bool) -> Result<CvResult> {
    let n = x.nrows();
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    if folds < 2 || folds > n {
        return Err(Error::Config(format!("{folds} folds for {n} samples")));
    }
    let bounds: Vec<(usize, usize)> = (0..folds).map(|k| (k * n / folds, (k + 1) * n / folds)).collect();
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut total = 0.0;
        for &(lo, hi) in &bounds {
            let train_rows: Vec<usize> = (0..n).filter(|i| *i < lo || *i >= hi).collect();
            let val_rows: Vec<usize> = (lo..hi).collect();
            let model = ridge_fit(
                &x.select_rows(&train_rows),
                &y.select_rows(&train_rows),
                RidgeOptions { lambda, fit_intercept },
            )?;
            let pred = ridge_predict_batch(&model, &x.select_rows(&val_rows))?;
            let diff = pred - y.select_rows(&val_rows);
            total += diff.norm_squared() / (diff.len() as f64);
        }
        scores.push((lambda, total / folds as f64));
    }
    let best_lambda = scores
        .iter()
        .fold(None::<(f64, f64)>, |best, &(l, s)| match best {
            Some((_, bs)) if bs < s => best,
            _ => Some((l, s)),
        })
        .map(|(l, _)| l)
        .unwrap();
    Ok(CvResult { best_lambda, scores })
}

/// `‖XᵀXW + λW − XᵀY‖∞` divided by the magnitude of its terms.
pub fn normal_equation_residual(x: &DMatrix<f64>, y: &DMatrix<f64>, model: &RidgeModel) -> f64 {
    let gram = x.tr_mul(x);
    let lhs = &gram * &model.weights + &model.weights * model.lambda;
    let rhs = x.tr_mul(y);
    let inf = |m: &DMatrix<f64>| m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = inf(&gram) * inf(&model.weights) + model.lambda * inf(&model.weights) + inf(&rhs);
    inf(&(lhs - rhs)) / scale.max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn no_intercept(lambda: f64) -> RidgeOptions {
        RidgeOptions {
            lambda,
            fit_intercept: false,
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_design_examples() {
        let x = DMatrix::identity(2, 2);
        let y = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let m0 = ridge_fit(&x, &y, no_intercept(0.0)).unwrap();
        assert!((m0.weights.clone() - &y).amax() < 1e-12);
        let m1 = ridge_fit(&x, &y, no_intercept(1.0)).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.5]);
        assert!((m1.weights.clone() - expect).amax() < 1e-12);

        let out = ridge_predict(&m0, &FlatVoxelVector(vec![1.0, 0.0])).unwrap();
        assert_eq!(out.0.len(), 2);
        assert!((out.0[0] - 2.0).abs() < 1e-12 && out.0[1].abs() < 1e-12);
    }

    #[test]
    fn constant_model_returns_bias() {
        let m = RidgeModel {
            weights: DMatrix::zeros(3, 2),
            bias: DVector::from_column_slice(&[0.5, -1.0]),
            lambda: 1.0,
        };
        let out = ridge_predict(&m, &FlatVoxelVector(vec![9.0, -4.0, 2.0])).unwrap();
        assert_eq!(out.0, vec![0.5, -1.0]);
        assert!(ridge_predict(&m, &FlatVoxelVector(vec![1.0])).is_err());
    }

    #[test]
    fn rank_deficient_lambda_zero_gives_minimum_norm() {
        // Duplicate column: the min-norm solution splits the weight evenly.
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let y = DMatrix::from_row_slice(3, 1, &[2.0, 4.0, 6.0]);
        let m = ridge_fit(&x, &y, no_intercept(0.0)).unwrap();
        assert!((m.weights[(0, 0)] - 1.0).abs() < 1e-10);
        assert!((m.weights[(1, 0)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn wide_problems_use_the_dual_form_consistently() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 6, 15);
        let y = random(&mut rng, 6, 3);
        let m = ridge_fit(&x, &y, RidgeOptions { lambda: 0.3, fit_intercept: true }).unwrap();
        // Compare against the primal system directly.
        let xm = x.row_mean();
        let mut xc = x.clone();
        for mut r in xc.row_iter_mut() {
            r -= &xm;
        }
        let ym = y.row_mean();
        let mut yc = y.clone();
        for mut r in yc.row_iter_mut() {
            r -= &ym;
        }
        let primal = (xc.tr_mul(&xc) + DMatrix::identity(15, 15) * 0.3)
            .lu()
            .solve(&xc.tr_mul(&yc))
            .unwrap();
        assert!((primal - &m.weights).amax() < 1e-10);
    }

    #[test]
    fn bad_inputs() {
        let x = DMatrix::<f64>::zeros(0, 2);
        let y = DMatrix::<f64>::zeros(0, 1);
        assert!(ridge_fit(&x, &y, no_intercept(1.0)).is_err());
        let x = DMatrix::<f64>::zeros(2, 2);
        let y = DMatrix::<f64>::zeros(3, 1);
        assert!(matches!(ridge_fit(&x, &y, no_intercept(1.0)), Err(Error::Dimension(_))));
        assert!(ridge_fit(&x, &DMatrix::zeros(2, 1), no_intercept(-1.0)).is_err());
    }

    #[test]
    fn shrinkage_properties_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = random(&mut rng, 30, 8);
            let y = random(&mut rng, 30, 4);
            let norms: Vec<f64> = [0.0, 0.01, 0.1, 1.0, 10.0, 100.0]
                .iter()
                .map(|&l| ridge_fit(&x, &y, no_intercept(l)).unwrap().weights.norm())
                .collect();
            for w in norms.windows(2) {
                assert!(w[0] >= w[1]);
            }
            let huge = ridge_fit(&x, &y, no_intercept(1e8)).unwrap().weights.norm();
            assert!(huge < 1e-4 * norms[0]);
        }
    }

    #[test]
    fn cv_prefers_small_lambda_on_noiseless_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 60, 5);
        let w = random(&mut rng, 5, 2);
        let y = &x * w;
        let cv = ridge_cv(&x, &y, &default_lambda_grid(), 5, true).unwrap();
        assert_eq!(cv.best_lambda, 1e-3);
        assert_eq!(cv.scores.len(), 8);
        assert!(ridge_cv(&x, &y, &[], 5, true).is_err());
    }
}
