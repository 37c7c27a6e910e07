use serde::{Deserialize, Serialize};

use super::{FlatVoxelVector, VolumeGrid};
use crate::error::{Error, Result};

/// Standard deviations below this are replaced by it (dead voxels).
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Per-voxel z-score of ROI vectors (population std).
    Zscore,
    /// Affine map of volumes onto [-1, 1].
    Minmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinMaxScope {
    /// One (min, max) over every training voxel of the subject.
    #[default]
    Global,
    /// Each volume scaled by its own extrema; nothing is fitted.
    PerVolume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mode: NormMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_voxel_mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_voxel_std: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_max: Option<f64>,
    #[serde(default)]
    pub minmax_scope: MinMaxScope,
    pub fitted_on: String,
}

/// Per-voxel mean and population std over training vectors.
pub fn fit_norm(train: &[FlatVoxelVector]) -> Result<NormStats> {
    let first = train
        .first()
        .ok_or_else(|| Error::Data("cannot fit normalization on an empty collection".into()))?;
    let v = first.len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; v];
    for x in train {
        if x.len() != v {
            return Err(Error::Dimension(format!("training vectors of length {v} and {}", x.len())));
        }
        mean.iter_mut().zip(&x.0).for_each(|(m, a)| *m += a);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; v];
    for x in train {
        var.iter_mut()
            .zip(&x.0)
            .zip(&mean)
            .for_each(|((s, a), m)| *s += (a - m) * (a - m));
    }
    let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    Ok(NormStats {
        mode: NormMode::Zscore,
        per_voxel_mean: mean,
        per_voxel_std: std,
        global_min: None,
        global_max: None,
        minmax_scope: MinMaxScope::Global,
        fitted_on: "train".into(),
    })
}

/// Min-max statistics over training volumes.
pub fn fit_norm_volumes(train: &[&VolumeGrid], scope: MinMaxScope) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::Data("cannot fit normalization on an empty collection".into()));
    }
    let (global_min, global_max) = match scope {
        MinMaxScope::PerVolume => (None, None),
        MinMaxScope::Global => {
            let (lo, hi) = train
                .iter()
                .flat_map(|v| v.data.data())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
            if !(hi > lo) {
                return Err(Error::Data(format!(
                    "training volumes are constant ({lo}); min-max scaling is undefined"
                )));
            }
            (Some(lo), Some(hi))
        }
    };
    Ok(NormStats {
        mode: NormMode::Minmax,
        per_voxel_mean: Vec::new(),
        per_voxel_std: Vec::new(),
        global_min,
        global_max,
        minmax_scope: scope,
        fitted_on: "train".into(),
    })
}

pub fn apply_norm(x: &FlatVoxelVector, stats: &NormStats) -> Result<FlatVoxelVector> {
    if stats.mode != NormMode::Zscore {
        return Err(Error::Config("min-max statistics apply to volumes, not flat vectors".into()));
    }
    if x.len() != stats.per_voxel_mean.len() {
        return Err(Error::Dimension(format!(
            "vector of length {} vs statistics for {} voxels",
            x.len(),
            stats.per_voxel_mean.len()
        )));
    }
    Ok(FlatVoxelVector(
        x.0.iter()
            .zip(&stats.per_voxel_mean)
            .zip(&stats.per_voxel_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect(),
    ))
}

pub fn apply_norm_volume(x: &VolumeGrid, stats: &NormStats) -> Result<VolumeGrid> {
    if stats.mode != NormMode::Minmax {
        return Err(Error::Config("z-score statistics apply to flat vectors, not volumes".into()));
    }
    let (lo, hi) = match stats.minmax_scope {
        MinMaxScope::Global => (
            stats.global_min.ok_or_else(|| Error::Config("missing global_min".into()))?,
            stats.global_max.ok_or_else(|| Error::Config("missing global_max".into()))?,
        ),
        MinMaxScope::PerVolume => x
            .data
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
    };
    let range = hi - lo;
    let mut out = x.clone();
    for v in out.data.data_mut() {
        *v = if range > 0.0 { 2.0 * (*v - lo) / range - 1.0 } else { 0.0 };
    }
    Ok(out)
}
