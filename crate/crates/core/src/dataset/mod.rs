//! fMRI trial datasets: ROI linearization, normalization, repetition
//! averaging, manifest I/O and the synthetic generator.

mod manifest;
mod norm;
pub mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{load_bundle, write_bundle, Manifest, ManifestStimulus, ManifestTrial, PlantedFiles};
pub use norm::{apply_norm, apply_norm_volume, fit_norm, fit_norm_volumes, MinMaxScope, NormMode, NormStats, STD_FLOOR};
pub use synth::{synth_generate, PlantedKind, SynthConfig};

/// Known scanner geometries: (subject aliases, volume shape, ROI voxel count).
const KNOWN_GEOMETRY: &[(&[&str], [usize; 3], usize)] = &[(&["sub1", "subj01"], [81, 104, 83], 15724)];

/// Expected `(volume_shape, roi_voxel_count)` for a subject with fixed geometry.
pub fn known_geometry(subject_id: &str) -> Option<([usize; 3], usize)> {
    KNOWN_GEOMETRY
        .iter()
        .find(|(names, _, _)| names.contains(&subject_id))
        .map(|(_, shape, count)| (*shape, *count))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One trial's beta volume, shape (W, D, H).
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub data: Tensor,
    pub subject_id: String,
    pub trial_id: String,
}

impl VolumeGrid {
    pub fn new(data: Tensor, subject_id: impl Into<String>, trial_id: impl Into<String>) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Dimension(format!("volume must be rank 3, got {:?}", data.shape())));
        }
        Ok(VolumeGrid {
            data,
            subject_id: subject_id.into(),
            trial_id: trial_id.into(),
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    shape: [usize; 3],
    cells: Vec<bool>,
    voxel_count: usize,
}

impl RoiMask {
    pub fn new(shape: [usize; 3], cells: Vec<bool>) -> Result<Self> {
        if cells.len() != shape.iter().product::<usize>() {
            return Err(Error::Dimension(format!(
                "mask of shape {shape:?} needs {} cells, got {}",
                shape.iter().product::<usize>(),
                cells.len()
            )));
        }
        let voxel_count = cells.iter().filter(|&&c| c).count();
        Ok(RoiMask {
            shape,
            cells,
            voxel_count,
        })
    }

    pub fn full(shape: [usize; 3]) -> Self {
        let n = shape.iter().product();
        RoiMask {
            shape,
            cells: vec![true; n],
            voxel_count: n,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::Dimension(format!("mask must be rank 3, got {:?}", t.shape())));
        }
        let s = t.shape();
        RoiMask::new([s[0], s[1], s[2]], t.data().iter().map(|&v| v != 0.0).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            self.shape.to_vec(),
            self.cells.iter().map(|&c| f64::from(u8::from(c))).collect(),
        )
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn voxel_count(&self) -> usize {
        self.voxel_count
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }
}

/// ROI-masked voxel values in row-major (W outermost) order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatVoxelVector(pub Vec<f64>);

impl FlatVoxelVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn linearize(volume: &VolumeGrid, mask: &RoiMask) -> Result<FlatVoxelVector> {
    if volume.shape() != mask.shape() {
        return Err(Error::Dimension(format!(
            "volume {:?} vs mask {:?}",
            volume.shape(),
            mask.shape()
        )));
    }
    Ok(FlatVoxelVector(
        volume
            .data
            .data()
            .iter()
            .zip(&mask.cells)
            .filter_map(|(&v, &keep)| keep.then_some(v))
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub trial_id: String,
    pub stimulus_id: String,
    pub volume: VolumeGrid,
}

/// Trials of one split, in deterministic order, with a stimulus index.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub split: Split,
    trials: Vec<Trial>,
    by_stimulus: BTreeMap<String, Vec<usize>>,
}

impl TrialSet {
    pub fn new(split: Split, mut trials: Vec<Trial>) -> Self {
        trials.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
        let mut by_stimulus: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, t) in trials.iter().enumerate() {
            by_stimulus.entry(t.stimulus_id.clone()).or_default().push(i);
        }
        TrialSet {
            split,
            trials,
            by_stimulus,
        }
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Stimulus ids in sorted order.
    pub fn stimulus_ids(&self) -> impl Iterator<Item = &str> {
        self.by_stimulus.keys().map(String::as_str)
    }

    pub fn trials_of(&self, stimulus_id: &str) -> impl Iterator<Item = &Trial> {
        self.by_stimulus
            .get(stimulus_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.trials[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulusRecord {
    pub stimulus_id: String,
    pub target_embedding: Vec<f64>,
    pub reference_captions: Vec<String>,
}

/// Ground truth planted by the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    pub kind: PlantedKind,
    /// Linear: [V, E] map from masked voxels. Conv-friendly: [F, E] map from
    /// blob amplitudes.
    pub weights: Tensor,
    /// Conv-friendly only: [F, W, D, H] spatial templates.
    pub templates: Option<Tensor>,
    /// Caption each stimulus's embedding was rendered into.
    pub captions: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub subject_id: String,
    pub volume_shape: [usize; 3],
    pub mask: RoiMask,
    pub train: TrialSet,
    pub test: TrialSet,
    pub stimuli: BTreeMap<String, StimulusRecord>,
    pub planted: Option<PlantedTruth>,
}

impl DatasetBundle {
    pub fn embedding_dim(&self) -> usize {
        self.stimuli
            .values()
            .next()
            .map(|s| s.target_embedding.len())
            .unwrap_or(0)
    }

    pub fn split(&self, split: Split) -> &TrialSet {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Checks shape, finiteness, stimulus coverage and split disjointness.
    pub fn validate(&self) -> Result<()> {
        if self.mask.shape() != self.volume_shape {
            return Err(Error::Validation(format!(
                "mask shape {:?} differs from volume_shape {:?}",
                self.mask.shape(),
                self.volume_shape
            )));
        }
        if let Some((shape, _)) = known_geometry(&self.subject_id) {
            if shape != self.volume_shape {
                return Err(Error::Validation(format!(
                    "subject {} has volume shape {:?}, manifest declares {:?}",
                    self.subject_id, shape, self.volume_shape
                )));
            }
        }
        let mut dim = None;
        for s in self.stimuli.values() {
            if s.reference_captions.is_empty() {
                return Err(Error::Validation(format!("stimulus {} has no captions", s.stimulus_id)));
            }
            if !s.target_embedding.iter().all(|x| x.is_finite()) {
                return Err(Error::Data(format!("stimulus {} embedding is not finite", s.stimulus_id)));
            }
            match dim {
                None => dim = Some(s.target_embedding.len()),
                Some(d) if d != s.target_embedding.len() => {
                    return Err(Error::Validation(format!(
                        "stimulus {} embedding has length {}, others {d}",
                        s.stimulus_id,
                        s.target_embedding.len()
                    )))
                }
                _ => {}
            }
        }
        for set in [&self.train, &self.test] {
            for t in set.trials() {
                if t.volume.shape() != self.volume_shape {
                    return Err(Error::Validation(format!(
                        "trial {} has shape {:?}, expected {:?}",
                        t.trial_id,
                        t.volume.shape(),
                        self.volume_shape
                    )));
                }
                if !t.volume.data.is_finite() {
                    return Err(Error::Data(format!("trial {} contains NaN or Inf betas", t.trial_id)));
                }
                if !self.stimuli.contains_key(&t.stimulus_id) {
                    return Err(Error::Validation(format!(
                        "trial {} references unknown stimulus {}",
                        t.trial_id, t.stimulus_id
                    )));
                }
            }
        }
        for sid in self.test.stimulus_ids() {
            if self.train.trials_of(sid).next().is_some() {
                return Err(Error::Validation(format!(
                    "test stimulus {sid} also appears in the train split"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Volume,
    Flat,
}

/// One per-stimulus sample after repetition averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedSample {
    pub stimulus_id: String,
    pub values: Tensor,
}

/// Mean over each stimulus's repetitions. `Flat` linearizes through `mask`
/// first; `Volume` averages whole grids. Output is sorted by stimulus id.
pub fn average_repetitions(
    trials: &TrialSet,
    granularity: Granularity,
    mask: Option<&RoiMask>,
) -> Result<Vec<AveragedSample>> {
    let mut out = Vec::new();
    for sid in trials.stimulus_ids() {
        let mut sum: Option<Vec<f64>> = None;
        let mut shape = Vec::new();
        let mut n = 0usize;
        // Sum in trial-id order so the result is independent of input order.
        let mut group: Vec<&Trial> = trials.trials_of(sid).collect();
        group.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
        for t in group {
            let values = match granularity {
                Granularity::Volume => {
                    shape = t.volume.data.shape().to_vec();
                    t.volume.data.data().to_vec()
                }
                Granularity::Flat => {
                    let m = mask.ok_or_else(|| Error::Config("flat averaging needs a mask".into()))?;
                    let v = linearize(&t.volume, m)?.0;
                    shape = vec![v.len()];
                    v
                }
            };
            match &mut sum {
                None => sum = Some(values),
                Some(s) => s.iter_mut().zip(values).for_each(|(a, b)| *a += b),
            }
            n += 1;
        }
        if let Some(mut s) = sum {
            if n > 1 {
                s.iter_mut().for_each(|x| *x /= n as f64);
            }
            out.push(AveragedSample {
                stimulus_id: sid.to_string(),
                values: Tensor::from_parts(shape, s),
            });
        }
    }
    Ok(out)
}

/// Averages repetitions of flat vectors already grouped by stimulus.
pub fn average_flat(groups: &[Vec<FlatVoxelVector>]) -> Result<Vec<FlatVoxelVector>> {
    groups
        .iter()
        .map(|g| {
            let first = g.first().ok_or_else(|| Error::Data("empty repetition group".into()))?;
            let mut acc = vec![0.0; first.len()];
            for v in g {
                if v.len() != acc.len() {
                    return Err(Error::Dimension("repetitions differ in length".into()));
                }
                acc.iter_mut().zip(&v.0).for_each(|(a, b)| *a += b);
            }
            if g.len() > 1 {
                acc.iter_mut().for_each(|a| *a /= g.len() as f64);
            }
            Ok(FlatVoxelVector(acc))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(shape: [usize; 3], data: Vec<f64>, id: &str) -> VolumeGrid {
        VolumeGrid::new(Tensor::new(shape.to_vec(), data).unwrap(), "s", id).unwrap()
    }

    #[test]
    fn linearize_picks_masked_cells_in_row_major_order() {
        let v = vol([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0], "t");
        let mask = RoiMask::new([2, 2, 1], vec![true, false, false, true]).unwrap();
        assert_eq!(linearize(&v, &mask).unwrap().0, vec![1.0, 4.0]);
    }

    #[test]
    fn linearize_full_mask_is_flatten() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let v = vol([2, 3, 4], data.clone(), "t");
        assert_eq!(linearize(&v, &RoiMask::full([2, 3, 4])).unwrap().0, data);
    }

    #[test]
    fn linearize_rejects_shape_mismatch() {
        let v = vol([2, 2, 1], vec![0.0; 4], "t");
        let err = linearize(&v, &RoiMask::full([1, 2, 2])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn sub1_geometry_linearizes_to_15724() {
        let shape = [81, 104, 83];
        let n: usize = shape.iter().product();
        let cells: Vec<bool> = (0..n).map(|i| i % 44 == 0 && i / 44 < 15724).collect();
        let mask = RoiMask::new(shape, cells).unwrap();
        assert_eq!(mask.voxel_count(), 15724);
        let v = VolumeGrid::new(Tensor::zeros(&shape), "sub1", "t0").unwrap();
        assert_eq!(linearize(&v, &mask).unwrap().len(), 15724);
        assert_eq!(known_geometry("sub1"), Some((shape, 15724)));
    }

    fn trial(id: &str, stim: &str, values: Vec<f64>) -> Trial {
        let n = values.len();
        Trial {
            trial_id: id.into(),
            stimulus_id: stim.into(),
            volume: vol([n, 1, 1], values, id),
        }
    }

    #[test]
    fn averaging_examples() {
        let set = TrialSet::new(
            Split::Test,
            vec![
                trial("t0", "a", vec![2.0, 4.0]),
                trial("t1", "a", vec![4.0, 6.0]),
                trial("t2", "b", vec![7.0, 8.0]),
            ],
        );
        let out = average_repetitions(&set, Granularity::Volume, None).unwrap();
        assert_eq!(out[0].values.data(), &[3.0, 5.0]);
        assert_eq!(out[1].values.data(), &[7.0, 8.0]);

        let three = TrialSet::new(
            Split::Test,
            vec![trial("x", "s", vec![0.0]), trial("y", "s", vec![3.0]), trial("z", "s", vec![6.0])],
        );
        let mask = RoiMask::full([1, 1, 1]);
        let out = average_repetitions(&three, Granularity::Flat, Some(&mask)).unwrap();
        assert_eq!(out[0].values.data(), &[3.0]);
    }

    #[test]
    fn average_flat_groups() {
        let g = vec![vec![FlatVoxelVector(vec![2.0, 4.0]), FlatVoxelVector(vec![4.0, 6.0])]];
        assert_eq!(average_flat(&g).unwrap()[0].0, vec![3.0, 5.0]);
    }

    proptest! {
        #[test]
        fn linearize_length_equals_voxel_count(
            dims in (1usize..5, 1usize..5, 1usize..5),
            seed in any::<u64>(),
        ) {
            let shape = [dims.0, dims.1, dims.2];
            let n = shape.iter().product::<usize>();
            let cells: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let mask = RoiMask::new(shape, cells).unwrap();
            let v = VolumeGrid::new(Tensor::zeros(&shape), "s", "t").unwrap();
            prop_assert_eq!(linearize(&v, &mask).unwrap().len(), mask.voxel_count());
        }

        #[test]
        fn averaging_ignores_trial_order(values in proptest::collection::vec(-10.0f64..10.0, 3..8)) {
            let trials: Vec<Trial> = values
                .iter()
                .enumerate()
                .map(|(i, &v)| trial(&format!("t{i}"), "s", vec![v]))
                .collect();
            let mut reversed = trials.clone();
            reversed.reverse();
            let a = average_repetitions(&TrialSet::new(Split::Test, trials), Granularity::Volume, None).unwrap();
            let b = average_repetitions(&TrialSet::new(Split::Test, reversed), Granularity::Volume, None).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
