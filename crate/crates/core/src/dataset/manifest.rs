use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetBundle, PlantedKind, PlantedTruth, RoiMask, Split, StimulusRecord, Trial, TrialSet, VolumeGrid};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// On-disk dataset description. File paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub subject_id: String,
    pub volume_shape: [usize; 3],
    pub mask_file: String,
    pub trials: Vec<ManifestTrial>,
    pub stimuli: Vec<ManifestStimulus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<PlantedFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTrial {
    pub trial_id: String,
    pub stimulus_id: String,
    pub split: Split,
    pub beta_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestStimulus {
    pub stimulus_id: String,
    pub embedding_file: String,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedFiles {
    pub kind: PlantedKind,
    pub weights_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_file: Option<String>,
    pub captions: BTreeMap<String, String>,
}

fn check_id(kind: &str, id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
        return Err(Error::Validation(format!("{kind} id {id:?} is not usable as a file name")));
    }
    Ok(())
}

/// Loads and validates a dataset. Trials come back ordered by
/// (split, trial_id).
pub fn load_bundle(manifest_path: &Path) -> Result<DatasetBundle> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(manifest_path, e))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |f: &str| -> PathBuf { root.join(f) };

    let mask_tensor = Tensor::load(&resolve(&manifest.mask_file))?;
    if mask_tensor.shape() != manifest.volume_shape {
        return Err(Error::Validation(format!(
            "mask {} has shape {:?}, manifest declares {:?}",
            manifest.mask_file,
            mask_tensor.shape(),
            manifest.volume_shape
        )));
    }
    let mask = RoiMask::from_tensor(&mask_tensor)?;

    let mut stimuli = BTreeMap::new();
    for s in &manifest.stimuli {
        let emb = Tensor::load(&resolve(&s.embedding_file))?;
        if emb.rank() != 1 {
            return Err(Error::Validation(format!(
                "embedding {} must be rank 1, got {:?}",
                s.embedding_file,
                emb.shape()
            )));
        }
        let rec = StimulusRecord {
            stimulus_id: s.stimulus_id.clone(),
            target_embedding: emb.into_data(),
            reference_captions: s.captions.clone(),
        };
        if stimuli.insert(s.stimulus_id.clone(), rec).is_some() {
            return Err(Error::Validation(format!("duplicate stimulus {}", s.stimulus_id)));
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for t in &manifest.trials {
        if !seen.insert(t.trial_id.as_str()) {
            return Err(Error::Validation(format!("duplicate trial {}", t.trial_id)));
        }
        let data = Tensor::load(&resolve(&t.beta_file))?;
        if data.shape() != manifest.volume_shape {
            return Err(Error::Validation(format!(
                "trial {} has shape {:?}, manifest declares {:?}",
                t.trial_id,
                data.shape(),
                manifest.volume_shape
            )));
        }
        if !data.is_finite() {
            return Err(Error::Data(format!("trial {} contains NaN or Inf betas", t.trial_id)));
        }
        let trial = Trial {
            trial_id: t.trial_id.clone(),
            stimulus_id: t.stimulus_id.clone(),
            volume: VolumeGrid::new(data, manifest.subject_id.clone(), t.trial_id.clone())?,
        };
        match t.split {
            Split::Train => train.push(trial),
            Split::Test => test.push(trial),
        }
    }

    let planted = match &manifest.planted {
        None => None,
        Some(p) => Some(PlantedTruth {
            kind: p.kind,
            weights: Tensor::load(&resolve(&p.weights_file))?,
            templates: p.templates_file.as_deref().map(|f| Tensor::load(&resolve(f))).transpose()?,
            captions: p.captions.clone(),
        }),
    };

    let bundle = DatasetBundle {
        subject_id: manifest.subject_id,
        volume_shape: manifest.volume_shape,
        mask,
        train: TrialSet::new(Split::Train, train),
        test: TrialSet::new(Split::Test, test),
        stimuli,
        planted,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `manifest.json` plus tensor files under `dir`; returns the manifest path.
pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<PathBuf> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    bundle.mask.to_tensor().save(&dir.join("mask.vct"), DType::Bool)?;

    let mut trials = Vec::new();
    for set in [&bundle.train, &bundle.test] {
        for t in set.trials() {
            check_id("trial", &t.trial_id)?;
            let rel = format!("betas/{}.vct", t.trial_id);
            t.volume.data.save(&dir.join(&rel), DType::F64)?;
            trials.push(ManifestTrial {
                trial_id: t.trial_id.clone(),
                stimulus_id: t.stimulus_id.clone(),
                split: set.split,
                beta_file: rel,
            });
        }
    }
    let mut stimuli = Vec::new();
    for s in bundle.stimuli.values() {
        check_id("stimulus", &s.stimulus_id)?;
        let rel = format!("embeddings/{}.vct", s.stimulus_id);
        Tensor::vector(s.target_embedding.clone()).save(&dir.join(&rel), DType::F64)?;
        stimuli.push(ManifestStimulus {
            stimulus_id: s.stimulus_id.clone(),
            embedding_file: rel,
            captions: s.reference_captions.clone(),
        });
    }
    let planted = match &bundle.planted {
        None => None,
        Some(p) => {
            p.weights.save(&dir.join("planted/weights.vct"), DType::F64)?;
            let templates_file = match &p.templates {
                Some(t) => {
                    t.save(&dir.join("planted/templates.vct"), DType::F64)?;
                    Some("planted/templates.vct".to_string())
                }
                None => None,
            };
            Some(PlantedFiles {
                kind: p.kind,
                weights_file: "planted/weights.vct".into(),
                templates_file,
                captions: p.captions.clone(),
            })
        }
    };
    let manifest = Manifest {
        subject_id: bundle.subject_id.clone(),
        volume_shape: bundle.volume_shape,
        mask_file: "mask.vct".into(),
        trials,
        stimuli,
        planted,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, SynthConfig};

    fn small() -> SynthConfig {
        SynthConfig {
            volume_shape: [4, 3, 5],
            n_stimuli: 10,
            n_test_stimuli: 2,
            train_repetitions: 1,
            test_repetitions: 1,
            embedding_dim: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let b = synth_generate(&small(), 11).unwrap();
        assert_eq!((b.train.len(), b.test.len()), (8, 2));
        let path = write_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(&path).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.mask.voxel_count(), b.mask.voxel_count());
    }

    #[test]
    fn missing_manifest_names_the_path() {
        let err = load_bundle(Path::new("/nonexistent/manifest.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/manifest.json"));
    }

    fn rewrite(path: &Path, f: impl FnOnce(&mut Manifest)) {
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        f(&mut m);
        fs::write(path, serde_json::to_string(&m).unwrap()).unwrap();
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let b = synth_generate(&small(), 1).unwrap();
        let path = write_bundle(&b, dir.path()).unwrap();
        let train_stim = b.train.trials()[0].stimulus_id.clone();
        rewrite(&path, |m| {
            let t = m.trials.iter_mut().find(|t| t.split == Split::Test).unwrap();
            t.stimulus_id = train_stim;
        });
        assert!(matches!(load_bundle(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn shape_mismatch_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_bundle(&synth_generate(&small(), 1).unwrap(), dir.path()).unwrap();
        rewrite(&path, |m| m.volume_shape = [5, 3, 4]);
        assert!(matches!(load_bundle(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn nan_betas_name_the_trial() {
        let dir = tempfile::tempdir().unwrap();
        let b = synth_generate(&small(), 1).unwrap();
        let path = write_bundle(&b, dir.path()).unwrap();
        let victim = &b.test.trials()[0];
        let mut data = victim.volume.data.clone();
        data.data_mut()[3] = f64::NAN;
        data.save(&dir.path().join(format!("betas/{}.vct", victim.trial_id)), DType::F64)
            .unwrap();
        let err = load_bundle(&path).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains(&victim.trial_id)));
    }

    #[test]
    fn sub1_manifest_must_declare_nsd_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_bundle(&synth_generate(&small(), 1).unwrap(), dir.path()).unwrap();
        rewrite(&path, |m| m.subject_id = "sub1".into());
        let err = load_bundle(&path).unwrap_err();
        assert!(err.to_string().contains("(81") || err.to_string().contains("[81, 104, 83]"));
    }
}
