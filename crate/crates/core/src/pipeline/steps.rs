use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::{BrainSpec, CaptionSpec};
use super::prepared::PreparedData;
use crate::brain::{
    build_conv_mapper, evaluate_mse, predict_embedding, ridge_cv, ridge_fit, ridge_predict_batch, train_mapper,
    BrainCheckpoint, BrainModel, ConvMapperConfig, CvResult, MapperInput, MapperKind, RidgeOptions, TargetEmbedding,
};
use crate::caption::{
    train_captioner, CaptionPair, CaptionRecord, Captioner, DecodeConfig, LmBackend, PrefixMapper, PrefixMapperConfig,
    TinyLm, TinyLmConfig, WhitespaceTokenizer,
};
use crate::dataset::{FlatVoxelVector, Granularity, VolumeGrid};
use crate::error::{Error, Result};
use crate::metrics::{EvalPair, Protocol};
use crate::nn::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrainSummary {
    pub mapper: MapperKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epoch_loss: Vec<f64>,
    pub parameter_count: usize,
    pub train_mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_mse: Option<f64>,
}

fn rows_matrix(rows: &[Vec<f64>], cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
}

fn mse(pred: &[TargetEmbedding], targets: &[Vec<f64>]) -> Option<f64> {
    let count: usize = targets.iter().map(Vec::len).sum();
    (count > 0).then(|| {
        pred.iter()
            .zip(targets)
            .flat_map(|(p, t)| p.0.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
            .sum::<f64>()
            / count as f64
    })
}

/// Inference-mode predictions for prepared samples.
pub fn predict_prepared(model: &BrainModel, data: &PreparedData, xs: &[crate::tensor::Tensor]) -> Result<Vec<TargetEmbedding>> {
    xs.iter()
        .enumerate()
        .map(|(i, x)| match data.meta.granularity {
            Granularity::Flat => predict_embedding(model, MapperInput::Flat(&FlatVoxelVector(x.data().to_vec()))),
            Granularity::Volume => {
                let grid = VolumeGrid::new(x.clone(), data.meta.subject_id.clone(), format!("sample-{i}"))?;
                predict_embedding(model, MapperInput::Volume(&grid))
            }
        })
        .collect()
}

/// Fits the brain module of `kind` on the prepared training split.
pub fn train_brain(data: &PreparedData, kind: MapperKind, spec: &BrainSpec, seed: u64) -> Result<(BrainCheckpoint, BrainSummary)> {
    let e = data.meta.embedding_dim;
    let want = if kind.is_volumetric() { Granularity::Volume } else { Granularity::Flat };
    if data.meta.granularity != want {
        return Err(Error::Validation(format!(
            "the {} mapper needs {want:?} inputs, the prepared data holds {:?} samples",
            kind.as_str(),
            data.meta.granularity
        )));
    }
    let mut summary = BrainSummary {
        mapper: kind,
        lambda: None,
        cv: None,
        epoch_loss: Vec::new(),
        parameter_count: 0,
        train_mse: 0.0,
        test_mse: None,
    };
    let model = match kind.variant() {
        None => {
            let v = data.meta.voxel_count;
            let x = DMatrix::from_fn(data.train_x.len(), v, |i, j| data.train_x[i].data()[j]);
            let y = rows_matrix(&data.train_y, e);
            let lambda = match spec.ridge_lambda {
                Some(l) => l,
                None => {
                    let folds = spec.cv_folds.min(data.train_x.len());
                    let cv = ridge_cv(&x, &y, &spec.lambda_grid, folds, true)?;
                    let best = cv.best_lambda;
                    summary.cv = Some(cv);
                    best
                }
            };
            let m = ridge_fit(&x, &y, RidgeOptions { lambda, fit_intercept: true })?;
            let pred = ridge_predict_batch(&m, &x)?;
            summary.train_mse = (pred - y).norm_squared() / (data.train_x.len() * e) as f64;
            summary.lambda = Some(lambda);
            summary.parameter_count = m.weights.len() + m.bias.len();
            BrainModel::Ridge(m)
        }
        Some(variant) => {
            let mut cfg = ConvMapperConfig::new(variant, data.meta.volume_shape, e);
            let o = &spec.conv;
            cfg.base_widths = o.base_widths.unwrap_or(cfg.base_widths);
            cfg.block_layout = o.block_layout.unwrap_or(cfg.block_layout);
            cfg.stem_kernel = o.stem_kernel.unwrap_or(cfg.stem_kernel);
            cfg.stem_stride = o.stem_stride.unwrap_or(cfg.stem_stride);
            cfg.pad_multiple = o.pad_multiple.unwrap_or(cfg.pad_multiple);
            cfg.init_seed = seed;
            let mut m = build_conv_mapper(cfg)?;
            let inputs: Vec<_> = data.train_x.iter().collect();
            let targets: Vec<&[f64]> = data.train_y.iter().map(Vec::as_slice).collect();
            let train = TrainConfig { seed, ..spec.train.clone() };
            summary.epoch_loss = train_mapper(&mut m, &inputs, &targets, &train)?.epoch_loss;
            summary.train_mse = evaluate_mse(&m, &inputs, &targets)?;
            summary.parameter_count = m.parameter_count();
            BrainModel::Conv(m)
        }
    };
    summary.test_mse = mse(&predict_prepared(&model, data, &data.test_x)?, &data.test_y);
    Ok((
        BrainCheckpoint {
            model,
            norm: Some(data.meta.norm.clone()),
        },
        summary,
    ))
}

/// Trains the prefix mapper and built-in decoder on every reference caption
/// of the training stimuli, paired with their true embeddings.
pub fn train_caption(data: &PreparedData, spec: &CaptionSpec, seed: u64) -> Result<(Captioner, Vec<f64>)> {
    let embeddings = data.train_embeddings();
    let texts: Vec<&str> = embeddings
        .keys()
        .flat_map(|id| data.meta.captions[*id].iter().map(String::as_str))
        .collect();
    let tokenizer = WhitespaceTokenizer::from_corpus(texts.iter().copied());
    let pairs: Vec<CaptionPair> = embeddings
        .iter()
        .flat_map(|(id, emb)| {
            data.meta.captions[*id].iter().map(|text| CaptionPair {
                embedding: TargetEmbedding(emb.to_vec()),
                caption: CaptionRecord::new(*id, text, &tokenizer),
            })
        })
        .collect();
    let mut mapper = PrefixMapper::new(PrefixMapperConfig {
        prefix_length: spec.prefix_length,
        lm_embed_dim: spec.lm.embed_dim,
        mapper_layers: spec.mapper_layers,
        mapper_heads: spec.mapper_heads,
        mapper_hidden_dim: spec.mapper_hidden_dim,
        input_dim: data.meta.embedding_dim,
        init_seed: seed,
    })?;
    let mut lm = TinyLm::new(TinyLmConfig {
        vocab_size: tokenizer.vocab_size(),
        embed_dim: spec.lm.embed_dim,
        layers: spec.lm.layers,
        heads: spec.lm.heads,
        hidden_dim: spec.lm.hidden_dim,
        max_positions: spec.lm.max_positions,
        init_seed: seed.wrapping_add(1),
    })?;
    let train = TrainConfig { seed, ..spec.train.clone() };
    let history = train_captioner(&mut mapper, &mut lm, &pairs, &train, spec.freeze_lm)?;
    Ok((
        Captioner {
            tokenizer,
            mapper,
            lm: LmBackend::Tiny(lm),
            freeze_lm: spec.freeze_lm,
        },
        history.epoch_loss,
    ))
}

/// Captions for each test sample, paired with references under `protocol`.
/// Returns the predicted embeddings alongside.
pub fn infer_captions(
    brain: &BrainCheckpoint,
    captioner: &Captioner,
    data: &PreparedData,
    decode: &DecodeConfig,
    protocol: Protocol,
) -> Result<(Vec<TargetEmbedding>, Vec<EvalPair>)> {
    decode.validate()?;
    if let Some(norm) = &brain.norm {
        if norm != &data.meta.norm {
            return Err(Error::Validation(
                "the brain model was trained under different normalization statistics".into(),
            ));
        }
    }
    if brain.model.output_dim() != captioner.mapper.config().input_dim {
        return Err(Error::Dimension(format!(
            "brain model emits {} values, captioner expects {}",
            brain.model.output_dim(),
            captioner.mapper.config().input_dim
        )));
    }
    let predicted = predict_prepared(&brain.model, data, &data.test_x)?;
    let mut model_refs: BTreeMap<&str, String> = BTreeMap::new();
    let mut pairs = Vec::with_capacity(predicted.len());
    for ((id, emb), truth) in data.meta.test_ids.iter().zip(&predicted).zip(&data.test_y) {
        let text = captioner.caption(emb, decode)?;
        let references = match protocol {
            Protocol::VsCoco => data.meta.captions[id].clone(),
            Protocol::VsModel => {
                if !model_refs.contains_key(id.as_str()) {
                    let r = captioner.caption(&TargetEmbedding(truth.clone()), decode)?;
                    model_refs.insert(id, r);
                }
                vec![model_refs[id.as_str()].clone()]
            }
        };
        pairs.push(EvalPair {
            stimulus_id: id.clone(),
            predicted: text,
            references,
            protocol,
        });
    }
    Ok((predicted, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, MinMaxScope, NormMode, SynthConfig};
    use crate::pipeline::prepared::{prepare, PrepOptions};

    fn data(mode: NormMode) -> PreparedData {
        let cfg = SynthConfig {
            n_stimuli: 24,
            n_test_stimuli: 4,
            ..SynthConfig::default()
        };
        let b = synth_generate(&cfg, 11).unwrap();
        prepare(
            &b,
            PrepOptions {
                mode,
                minmax_scope: MinMaxScope::Global,
                average_test_repetitions: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn ridge_recovers_noise_free_planted_map() {
        let d = data(NormMode::Zscore);
        let spec = BrainSpec {
            ridge_lambda: Some(1e-6),
            ..BrainSpec::default()
        };
        let (_, s) = train_brain(&d, MapperKind::Ridge, &spec, 0).unwrap();
        assert!(s.train_mse < 1e-6, "{}", s.train_mse);
    }

    #[test]
    fn cv_picks_a_grid_value() {
        let d = data(NormMode::Zscore);
        let (ckpt, s) = train_brain(&d, MapperKind::Ridge, &BrainSpec::default(), 0).unwrap();
        let lambda = s.lambda.unwrap();
        assert!(BrainSpec::default().lambda_grid.contains(&lambda));
        assert!(matches!(ckpt.model, BrainModel::Ridge(ref m) if m.lambda == lambda));
    }

    #[test]
    fn granularity_must_match_mapper() {
        let d = data(NormMode::Zscore);
        assert!(matches!(
            train_brain(&d, MapperKind::Shallow, &BrainSpec::default(), 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn vs_model_pairs_carry_one_reference() {
        let d = data(NormMode::Zscore);
        let spec = BrainSpec {
            ridge_lambda: Some(1.0),
            ..BrainSpec::default()
        };
        let (brain, _) = train_brain(&d, MapperKind::Ridge, &spec, 0).unwrap();
        let cap = CaptionSpec {
            train: TrainConfig {
                epochs: 1,
                ..CaptionSpec::default().train
            },
            prefix_length: 2,
            mapper_layers: 1,
            mapper_heads: 2,
            mapper_hidden_dim: 16,
            lm: super::super::config::LmShape {
                embed_dim: 8,
                layers: 1,
                heads: 2,
                hidden_dim: 16,
                max_positions: 16,
            },
            freeze_lm: false,
        };
        let (captioner, _) = train_caption(&d, &cap, 0).unwrap();
        let decode = DecodeConfig {
            beam_width: 2,
            max_len: 8,
            alpha: 0.7,
        };
        let (emb, pairs) = infer_captions(&brain, &captioner, &d, &decode, Protocol::VsModel).unwrap();
        assert_eq!(emb.len(), 4);
        assert_eq!(pairs.len(), 4);
        assert!(pairs.iter().all(|p| p.references.len() == 1 && p.validate().is_ok()));
    }
}
