//! Seeded synthetic subjects with a planted brain-to-embedding mapping and
//! captions rendered from the embedding by a small template grammar.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, PlantedTruth, RoiMask, Split, StimulusRecord, Trial, TrialSet, VolumeGrid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantedKind {
    /// Embedding is a linear function of the ROI voxels.
    Linear,
    /// Volumes are sums of smooth spatial blobs; the embedding is linear in
    /// the blob amplitudes.
    ConvFriendly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub subject_id: String,
    pub volume_shape: [usize; 3],
    /// Fraction of cells inside the ROI mask.
    pub roi_density: f64,
    pub n_stimuli: usize,
    /// How many of `n_stimuli` are held out for the test split.
    pub n_test_stimuli: usize,
    pub train_repetitions: usize,
    pub test_repetitions: usize,
    pub embedding_dim: usize,
    pub planted: PlantedKind,
    /// Number of spatial blobs (conv-friendly only).
    pub n_factors: usize,
    /// Std of per-trial Gaussian noise added to each beta.
    pub noise_std: f64,
    /// Caption grammar: one word is chosen per slot.
    pub caption_slots: Vec<Vec<String>>,
    /// References per stimulus (the true caption plus one-slot variants).
    pub n_references: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let slots: &[&[&str]] = &[
            &["a"],
            &["small", "large", "red", "striped"],
            &["dog", "cat", "bus", "kite", "horse", "pizza"],
            &["on", "near", "beside"],
            &["the"],
            &["grass", "street", "table", "beach", "snow"],
        ];
        SynthConfig {
            subject_id: "synth-sub1".into(),
            volume_shape: [8, 8, 8],
            roi_density: 0.25,
            n_stimuli: 48,
            n_test_stimuli: 8,
            train_repetitions: 1,
            test_repetitions: 3,
            embedding_dim: 16,
            planted: PlantedKind::Linear,
            n_factors: 6,
            noise_std: 0.0,
            caption_slots: slots
                .iter()
                .map(|s| s.iter().map(|w| w.to_string()).collect())
                .collect(),
            n_references: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_stimuli == 0 {
            return bad("n_stimuli must be positive");
        }
        if self.n_test_stimuli >= self.n_stimuli {
            return bad("n_test_stimuli must leave at least one training stimulus");
        }
        if self.volume_shape.contains(&0) {
            return bad("volume_shape entries must be positive");
        }
        if !(self.roi_density > 0.0 && self.roi_density <= 1.0) {
            return bad("roi_density must lie in (0, 1]");
        }
        if self.train_repetitions == 0 || self.test_repetitions == 0 {
            return bad("repetitions must be positive");
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive");
        }
        if self.caption_slots.is_empty() || self.caption_slots.iter().any(Vec::is_empty) {
            return bad("caption vocabulary is empty");
        }
        if self
            .caption_slots
            .iter()
            .flatten()
            .any(|w| w.is_empty() || w.chars().any(char::is_whitespace))
        {
            return bad("caption words must be non-empty and contain no whitespace");
        }
        if self.n_references == 0 {
            return bad("n_references must be positive");
        }
        if self.planted == PlantedKind::ConvFriendly && self.n_factors == 0 {
            return bad("conv-friendly data needs at least one factor");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0");
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Renders an embedding into a caption: each slot picks the word whose
/// random direction best aligns with the embedding. Returns the per-slot
/// ranking so variants can swap in the runner-up.
fn render(embedding: &[f64], directions: &[Vec<Vec<f64>>], slots: &[Vec<String>]) -> Vec<Vec<usize>> {
    directions
        .iter()
        .zip(slots)
        .map(|(dirs, words)| {
            let mut order: Vec<usize> = (0..words.len()).collect();
            let score = |j: usize| -> f64 { dirs[j].iter().zip(embedding).map(|(a, b)| a * b).sum() };
            order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
            order
        })
        .collect()
}

fn caption_from(choice: &[usize], slots: &[Vec<String>]) -> String {
    choice
        .iter()
        .zip(slots)
        .map(|(&j, words)| words[j].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = cfg.volume_shape;
    let n_cells: usize = shape.iter().product();
    let e = cfg.embedding_dim;

    let mut cells: Vec<bool> = (0..n_cells).map(|_| rng.gen_bool(cfg.roi_density)).collect();
    if !cells.contains(&true) {
        cells[n_cells / 2] = true;
    }
    let mask = RoiMask::new(shape, cells)?;
    let v = mask.voxel_count();

    let (weights, templates) = match cfg.planted {
        PlantedKind::Linear => {
            let scale = 1.0 / (v as f64).sqrt();
            let w: Vec<f64> = normal_vec(&mut rng, v * e).into_iter().map(|x| x * scale).collect();
            (Tensor::new(vec![v, e], w)?, None)
        }
        PlantedKind::ConvFriendly => {
            let f = cfg.n_factors;
            let scale = 1.0 / (f as f64).sqrt();
            let w: Vec<f64> = normal_vec(&mut rng, f * e).into_iter().map(|x| x * scale).collect();
            let mut t = Vec::with_capacity(f * n_cells);
            for _ in 0..f {
                let center: Vec<f64> = shape.iter().map(|&d| rng.gen_range(0.0..d as f64)).collect();
                let width = rng.gen_range(1.0..2.5) * (shape.iter().min().copied().unwrap() as f64 / 8.0).max(0.5);
                for x in 0..shape[0] {
                    for y in 0..shape[1] {
                        for z in 0..shape[2] {
                            let d2 = (x as f64 - center[0]).powi(2)
                                + (y as f64 - center[1]).powi(2)
                                + (z as f64 - center[2]).powi(2);
                            t.push((-d2 / (2.0 * width * width)).exp());
                        }
                    }
                }
            }
            (
                Tensor::new(vec![f, e], w)?,
                Some(Tensor::new(vec![f, shape[0], shape[1], shape[2]], t)?),
            )
        }
    };

    let directions: Vec<Vec<Vec<f64>>> = cfg
        .caption_slots
        .iter()
        .map(|words| words.iter().map(|_| normal_vec(&mut rng, e)).collect())
        .collect();

    let mut stimuli = BTreeMap::new();
    let mut planted_captions = BTreeMap::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut trial_counter = 0usize;
    let n_train_stimuli = cfg.n_stimuli - cfg.n_test_stimuli;

    for s in 0..cfg.n_stimuli {
        let stimulus_id = format!("stim{s:04}");
        // features: what the planted map reads; volume: what the scanner sees.
        let (features, volume): (Vec<f64>, Vec<f64>) = match &templates {
            None => {
                let vol = normal_vec(&mut rng, n_cells);
                let roi = vol
                    .iter()
                    .zip(mask.cells())
                    .filter_map(|(&x, &m)| m.then_some(x))
                    .collect();
                (roi, vol)
            }
            Some(t) => {
                let amps = normal_vec(&mut rng, cfg.n_factors);
                let mut vol = vec![0.0; n_cells];
                for (k, a) in amps.iter().enumerate() {
                    for (o, tv) in vol.iter_mut().zip(&t.data()[k * n_cells..(k + 1) * n_cells]) {
                        *o += a * tv;
                    }
                }
                (amps, vol)
            }
        };
        let k = features.len();
        let mut embedding = vec![0.0; e];
        for (i, x) in features.iter().enumerate() {
            for (j, out) in embedding.iter_mut().enumerate() {
                *out += x * weights.data()[i * e + j];
            }
        }
        debug_assert_eq!(k * e, weights.len());

        let ranking = render(&embedding, &directions, &cfg.caption_slots);
        let best: Vec<usize> = ranking.iter().map(|r| r[0]).collect();
        let true_caption = caption_from(&best, &cfg.caption_slots);
        let mut references = vec![true_caption.clone()];
        let swappable: Vec<usize> = (0..ranking.len()).filter(|&i| ranking[i].len() > 1).collect();
        for r in 1..cfg.n_references {
            if swappable.is_empty() {
                references.push(true_caption.clone());
                continue;
            }
            let slot = swappable[(r - 1 + s) % swappable.len()];
            let mut alt = best.clone();
            alt[slot] = ranking[slot][1];
            references.push(caption_from(&alt, &cfg.caption_slots));
        }
        planted_captions.insert(stimulus_id.clone(), true_caption);
        stimuli.insert(
            stimulus_id.clone(),
            StimulusRecord {
                stimulus_id: stimulus_id.clone(),
                target_embedding: embedding,
                reference_captions: references,
            },
        );

        let (split, reps) = if s < n_train_stimuli {
            (Split::Train, cfg.train_repetitions)
        } else {
            (Split::Test, cfg.test_repetitions)
        };
        for _ in 0..reps {
            let mut data = volume.clone();
            if cfg.noise_std > 0.0 {
                for x in data.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *x += cfg.noise_std * n;
                }
            }
            let trial_id = format!("t{trial_counter:05}");
            trial_counter += 1;
            let trial = Trial {
                trial_id: trial_id.clone(),
                stimulus_id: stimulus_id.clone(),
                volume: VolumeGrid::new(Tensor::new(shape.to_vec(), data)?, cfg.subject_id.clone(), trial_id)?,
            };
            match split {
                Split::Train => train.push(trial),
                Split::Test => test.push(trial),
            }
        }
    }

    let bundle = DatasetBundle {
        subject_id: cfg.subject_id.clone(),
        volume_shape: shape,
        mask,
        train: TrialSet::new(Split::Train, train),
        test: TrialSet::new(Split::Test, test),
        stimuli,
        planted: Some(PlantedTruth {
            kind: cfg.planted,
            weights,
            templates,
            captions: planted_captions,
        }),
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::write_bundle;

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let cfg = SynthConfig::default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_bundle(&synth_generate(&cfg, 5).unwrap(), a.path()).unwrap();
        write_bundle(&synth_generate(&cfg, 5).unwrap(), b.path()).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        }
        assert_ne!(synth_generate(&cfg, 5).unwrap(), synth_generate(&cfg, 6).unwrap());
    }

    fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let zero = SynthConfig {
            n_stimuli: 0,
            n_test_stimuli: 0,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_generate(&zero, 0), Err(Error::Config(_))));
        let empty_vocab = SynthConfig {
            caption_slots: vec![],
            ..SynthConfig::default()
        };
        assert!(matches!(synth_generate(&empty_vocab, 0), Err(Error::Config(_))));
    }

    #[test]
    fn captions_follow_the_grammar_and_planted_truth() {
        let cfg = SynthConfig::default();
        let b = synth_generate(&cfg, 3).unwrap();
        let planted = b.planted.as_ref().unwrap();
        for (sid, rec) in &b.stimuli {
            assert_eq!(rec.reference_captions.len(), cfg.n_references);
            assert_eq!(&rec.reference_captions[0], &planted.captions[sid]);
            assert_eq!(rec.reference_captions[0].split(' ').count(), cfg.caption_slots.len());
        }
        assert_eq!(b.train.stimulus_ids().count(), 40);
        assert_eq!(b.test.len(), 8 * 3);
    }

    #[test]
    fn linear_embeddings_follow_the_planted_map() {
        let b = synth_generate(&SynthConfig::default(), 9).unwrap();
        let p = b.planted.as_ref().unwrap();
        let t = &b.train.trials()[0];
        let x = crate::dataset::linearize(&t.volume, &b.mask).unwrap();
        let e = b.embedding_dim();
        let emb = &b.stimuli[&t.stimulus_id].target_embedding;
        for j in 0..e {
            let y: f64 = x.0.iter().enumerate().map(|(i, v)| v * p.weights.data()[i * e + j]).sum();
            assert!((y - emb[j]).abs() < 1e-12);
        }
    }
}
