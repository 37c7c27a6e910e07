use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    apply_norm, apply_norm_volume, average_repetitions, fit_norm, fit_norm_volumes, linearize, DatasetBundle,
    FlatVoxelVector, Granularity, MinMaxScope, NormMode, NormStats, VolumeGrid,
};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepOptions {
    pub mode: NormMode,
    pub minmax_scope: MinMaxScope,
    pub average_test_repetitions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreparedMeta {
    pub subject_id: String,
    pub granularity: Granularity,
    pub volume_shape: [usize; 3],
    pub voxel_count: usize,
    pub embedding_dim: usize,
    pub norm: NormStats,
    pub average_test_repetitions: bool,
    /// Stimulus of each training sample.
    pub train_ids: Vec<String>,
    /// Stimulus of each test sample.
    pub test_ids: Vec<String>,
    /// Reference captions of every stimulus.
    pub captions: BTreeMap<String, Vec<String>>,
}

/// Normalized model inputs with their regression targets. Flat samples are
/// [V] vectors, volumetric samples are [W, D, H] grids.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub meta: PreparedMeta,
    pub train_x: Vec<Tensor>,
    pub train_y: Vec<Vec<f64>>,
    pub test_x: Vec<Tensor>,
    pub test_y: Vec<Vec<f64>>,
}

impl PreparedData {
    /// One embedding per distinct training stimulus, in id order.
    pub fn train_embeddings(&self) -> BTreeMap<&str, &[f64]> {
        self.meta
            .train_ids
            .iter()
            .zip(&self.train_y)
            .map(|(id, y)| (id.as_str(), y.as_slice()))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, rows: &[&Tensor]| -> Result<()> { stack(rows)?.save(&dir.join(name), DType::F64) };
        write("train_x.vct", &self.train_x.iter().collect::<Vec<_>>())?;
        write("test_x.vct", &self.test_x.iter().collect::<Vec<_>>())?;
        let ys = |rows: &[Vec<f64>]| rows.iter().map(|r| Tensor::vector(r.clone())).collect::<Vec<_>>();
        write("train_y.vct", &ys(&self.train_y).iter().collect::<Vec<_>>())?;
        write("test_y.vct", &ys(&self.test_y).iter().collect::<Vec<_>>())?;
        let path = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: PreparedMeta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let rows = |name: &str, n: usize| -> Result<Vec<Tensor>> {
            let t = Tensor::load(&dir.join(name))?;
            let out = unstack(&t, n);
            if out.len() != n {
                return Err(Error::Validation(format!(
                    "{name} holds {} samples, meta.json lists {n}",
                    t.shape().first().copied().unwrap_or(0)
                )));
            }
            Ok(out)
        };
        let train_x = rows("train_x.vct", meta.train_ids.len())?;
        let test_x = rows("test_x.vct", meta.test_ids.len())?;
        let train_y: Vec<Vec<f64>> = rows("train_y.vct", meta.train_ids.len())?.into_iter().map(Tensor::into_data).collect();
        let test_y: Vec<Vec<f64>> = rows("test_y.vct", meta.test_ids.len())?.into_iter().map(Tensor::into_data).collect();
        let sample_shape = match meta.granularity {
            Granularity::Flat => vec![meta.voxel_count],
            Granularity::Volume => meta.volume_shape.to_vec(),
        };
        for x in train_x.iter().chain(&test_x) {
            if x.shape() != sample_shape.as_slice() {
                return Err(Error::Validation(format!(
                    "sample of shape {:?}, meta.json declares {sample_shape:?}",
                    x.shape()
                )));
            }
        }
        if train_y.iter().chain(&test_y).any(|y| y.len() != meta.embedding_dim) {
            return Err(Error::Validation(format!(
                "target rows differ from embedding_dim {}",
                meta.embedding_dim
            )));
        }
        Ok(PreparedData {
            meta,
            train_x,
            train_y,
            test_x,
            test_y,
        })
    }
}

fn stack(rows: &[&Tensor]) -> Result<Tensor> {
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0]));
    }
    Tensor::stack(rows)
}

fn unstack(t: &Tensor, n: usize) -> Vec<Tensor> {
    if n == 0 || t.rank() < 2 {
        return Vec::new();
    }
    (0..t.shape()[0]).map(|i| t.index_axis0(i)).collect()
}

/// Normalizes a bundle for one input granularity. Statistics come from the
/// training split only; each training trial is a sample, test trials are
/// optionally averaged per stimulus first.
pub fn prepare(bundle: &DatasetBundle, opts: PrepOptions) -> Result<PreparedData> {
    bundle.validate()?;
    if bundle.train.is_empty() {
        return Err(Error::Data(format!("subject {} has no training trials", bundle.subject_id)));
    }
    let granularity = match opts.mode {
        NormMode::Zscore => Granularity::Flat,
        NormMode::Minmax => Granularity::Volume,
    };
    let target = |sid: &str| bundle.stimuli[sid].target_embedding.clone();
    let train_ids: Vec<String> = bundle.train.trials().iter().map(|t| t.stimulus_id.clone()).collect();
    let train_y: Vec<Vec<f64>> = train_ids.iter().map(|s| target(s)).collect();

    let test_samples: Vec<(String, VolumeGrid)> = if opts.average_test_repetitions {
        average_repetitions(&bundle.test, Granularity::Volume, None)?
            .into_iter()
            .map(|s| {
                let grid = VolumeGrid::new(s.values, bundle.subject_id.clone(), format!("{}-mean", s.stimulus_id))?;
                Ok((s.stimulus_id, grid))
            })
            .collect::<Result<_>>()?
    } else {
        bundle
            .test
            .trials()
            .iter()
            .map(|t| (t.stimulus_id.clone(), t.volume.clone()))
            .collect()
    };
    let test_ids: Vec<String> = test_samples.iter().map(|(s, _)| s.clone()).collect();
    let test_y: Vec<Vec<f64>> = test_ids.iter().map(|s| target(s)).collect();

    let (norm, train_x, test_x) = match granularity {
        Granularity::Flat => {
            let flat = |v: &VolumeGrid| linearize(v, &bundle.mask);
            let train: Vec<FlatVoxelVector> = bundle.train.trials().iter().map(|t| flat(&t.volume)).collect::<Result<_>>()?;
            let stats = fit_norm(&train)?;
            let norm = |x: &FlatVoxelVector| apply_norm(x, &stats).map(|v| Tensor::vector(v.0));
            let train_x = train.iter().map(norm).collect::<Result<Vec<_>>>()?;
            let test_x = test_samples
                .iter()
                .map(|(_, v)| norm(&flat(v)?))
                .collect::<Result<Vec<_>>>()?;
            (stats, train_x, test_x)
        }
        Granularity::Volume => {
            let train: Vec<&VolumeGrid> = bundle.train.trials().iter().map(|t| &t.volume).collect();
            let stats = fit_norm_volumes(&train, opts.minmax_scope)?;
            let norm = |v: &VolumeGrid| apply_norm_volume(v, &stats).map(|g| g.data);
            let train_x = train.iter().map(|v| norm(v)).collect::<Result<Vec<_>>>()?;
            let test_x = test_samples.iter().map(|(_, v)| norm(v)).collect::<Result<Vec<_>>>()?;
            (stats, train_x, test_x)
        }
    };
    let captions = bundle
        .stimuli
        .iter()
        .map(|(id, s)| (id.clone(), s.reference_captions.clone()))
        .collect();
    Ok(PreparedData {
        meta: PreparedMeta {
            subject_id: bundle.subject_id.clone(),
            granularity,
            volume_shape: bundle.volume_shape,
            voxel_count: bundle.mask.voxel_count(),
            embedding_dim: bundle.embedding_dim(),
            norm,
            average_test_repetitions: opts.average_test_repetitions,
            train_ids,
            test_ids,
            captions,
        },
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, SynthConfig};

    fn bundle() -> DatasetBundle {
        let cfg = SynthConfig {
            n_stimuli: 10,
            n_test_stimuli: 2,
            train_repetitions: 2,
            test_repetitions: 3,
            noise_std: 0.1,
            ..SynthConfig::default()
        };
        synth_generate(&cfg, 3).unwrap()
    }

    fn opts(mode: NormMode, average: bool) -> PrepOptions {
        PrepOptions {
            mode,
            minmax_scope: MinMaxScope::Global,
            average_test_repetitions: average,
        }
    }

    #[test]
    fn flat_preparation_is_standardized_on_train() {
        let b = bundle();
        let p = prepare(&b, opts(NormMode::Zscore, true)).unwrap();
        assert_eq!(p.train_x.len(), 16);
        assert_eq!(p.test_x.len(), 2);
        assert_eq!(p.train_x[0].shape(), [b.mask.voxel_count()]);
        let v = b.mask.voxel_count();
        for j in 0..v {
            let mean: f64 = p.train_x.iter().map(|x| x.data()[j]).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn averaging_is_optional() {
        let p = prepare(&bundle(), opts(NormMode::Zscore, false)).unwrap();
        assert_eq!(p.test_x.len(), 6);
        assert_eq!(p.meta.test_ids.len(), 6);
    }

    #[test]
    fn volume_preparation_maps_train_into_unit_range() {
        let p = prepare(&bundle(), opts(NormMode::Minmax, true)).unwrap();
        assert_eq!(p.train_x[0].shape(), [8, 8, 8]);
        let (lo, hi) = p
            .train_x
            .iter()
            .flat_map(|x| x.data().iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        assert!((lo + 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = prepare(&bundle(), opts(NormMode::Minmax, true)).unwrap();
        p.save(dir.path()).unwrap();
        assert_eq!(PreparedData::load(dir.path()).unwrap(), p);
    }

    #[test]
    fn test_targets_follow_their_stimuli() {
        let b = bundle();
        let p = prepare(&b, opts(NormMode::Zscore, true)).unwrap();
        for (id, y) in p.meta.test_ids.iter().zip(&p.test_y) {
            assert_eq!(y, &b.stimuli[id].target_embedding);
        }
    }
}
