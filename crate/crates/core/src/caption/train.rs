use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::lm::{check_prefix, check_tokens, log_softmax, DecoderLm, TrainableLm};
use super::prefix::PrefixMapper;
use super::{CaptionRecord, PrefixTokens, TokenId};
use crate::autodiff::{Graph, Var};
use crate::brain::{TargetEmbedding, TrainHistory};
use crate::error::{Error, Result};
use crate::nn::{Optimizer, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionPair {
    pub embedding: TargetEmbedding,
    pub caption: CaptionRecord,
}

/// Mean negative log-likelihood of the caption tokens (terminal included)
/// given the prefix. Prefix positions never contribute.
pub fn caption_loss(prefix: &PrefixTokens, caption: &CaptionRecord, lm: &dyn DecoderLm) -> Result<f64> {
    let tokens = &caption.tokens;
    if tokens.is_empty() {
        return Err(Error::Validation(format!("caption for {} has no tokens", caption.stimulus_id)));
    }
    check_prefix(lm, prefix)?;
    check_tokens(lm, tokens)?;
    let rows = lm.sequence_logits(prefix, tokens)?;
    let total: f64 = rows
        .iter()
        .zip(tokens)
        .map(|(row, &t)| -log_softmax(row)[t as usize])
        .sum();
    Ok(total / tokens.len() as f64)
}

/// [`caption_loss`] on the autodiff tape, for a [K, d] prefix node.
pub fn caption_loss_node<L: TrainableLm + ?Sized>(
    g: &mut Graph,
    lm: &L,
    lm_params: &[Var],
    prefix: Var,
    tokens: &[TokenId],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Validation("caption has no tokens".into()));
    }
    check_tokens(lm, tokens)?;
    let k = g.shape(prefix)[0];
    let logits = lm.forward(g, lm_params, prefix, &tokens[..tokens.len() - 1])?;
    let rows = g.slice_rows(logits, k - 1, tokens.len());
    let targets: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    Ok(g.cross_entropy(rows, &targets))
}

/// Trains the prefix mapper (and the language model unless `freeze_lm`) on
/// the mean caption loss.
pub fn train_captioner<L: TrainableLm>(
    mapper: &mut PrefixMapper,
    lm: &mut L,
    pairs: &[CaptionPair],
    cfg: &TrainConfig,
    freeze_lm: bool,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("no caption pairs to train on".into()));
    }
    if mapper.config().lm_embed_dim != lm.embed_dim() {
        return Err(Error::Dimension(format!(
            "prefix mapper emits width {}, language model embeds {}",
            mapper.config().lm_embed_dim,
            lm.embed_dim()
        )));
    }
    for p in pairs {
        check_tokens(lm, &p.caption.tokens)?;
    }
    let n = pairs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mapper_opt = Optimizer::new(cfg, mapper.params(), None);
    let mut lm_opt = (!freeze_lm).then(|| Optimizer::new(cfg, lm.params(), None));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        if cfg.batch_size < n {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let mv = mapper.params().bind(&mut g);
            let lv = lm.params().bind(&mut g);
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let prefix = mapper.forward(&mut g, &mv, &pairs[i].embedding)?;
                losses.push(caption_loss_node(&mut g, &*lm, &lv, prefix, &pairs[i].caption.tokens)?);
            }
            let loss = g.mean(&losses);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "caption loss became {value} at epoch {epoch}, batch {bi} (learning rate {lr:e})"
                )));
            }
            let grads = g.backward(loss);
            mapper_opt.step(mapper.params_mut(), &mv, &grads, lr);
            if let Some(opt) = lm_opt.as_mut() {
                opt.step(lm.params_mut(), &lv, &grads, lr);
            }
            total += value * chunk.len() as f64;
        }
        let epoch_loss = total / n as f64;
        log::debug!("caption epoch {epoch}: loss {epoch_loss:.6e}");
        history.epoch_loss.push(epoch_loss);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::lm::{TinyLm, TinyLmConfig};
    use crate::caption::prefix::{encode_prefix, PrefixMapperConfig};
    use crate::nn::{LrSchedule, OptimizerKind};
    use crate::tensor::Tensor;

    struct Uniform(usize);

    impl DecoderLm for Uniform {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn embed_dim(&self) -> usize {
            2
        }
        fn eos_token(&self) -> Option<TokenId> {
            Some(0)
        }
        fn next_token_logits(&self, _: &PrefixTokens, _: &[TokenId]) -> Result<Vec<f64>> {
            Ok(vec![0.25; self.0])
        }
    }

    fn record(tokens: Vec<TokenId>) -> CaptionRecord {
        CaptionRecord {
            stimulus_id: "s".into(),
            text: String::new(),
            tokens,
        }
    }

    #[test]
    fn uniform_lm_loss_is_log_vocab_for_any_prefix_length() {
        for k in [1, 2, 4] {
            let p = PrefixTokens::new(Tensor::zeros(&[k, 2])).unwrap();
            let l = caption_loss(&p, &record(vec![2, 3, 0]), &Uniform(4)).unwrap();
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_vocabulary_tokens_are_rejected() {
        let p = PrefixTokens::new(Tensor::zeros(&[1, 2])).unwrap();
        assert!(caption_loss(&p, &record(vec![7]), &Uniform(4)).is_err());
        assert!(caption_loss(&p, &record(vec![]), &Uniform(4)).is_err());
    }

    fn tiny() -> (PrefixMapper, TinyLm) {
        let mapper = PrefixMapper::new(PrefixMapperConfig {
            prefix_length: 2,
            lm_embed_dim: 4,
            mapper_layers: 1,
            mapper_heads: 2,
            mapper_hidden_dim: 6,
            input_dim: 3,
            init_seed: 1,
        })
        .unwrap();
        let mut cfg = TinyLmConfig::new(5, 4);
        cfg.hidden_dim = 6;
        cfg.max_positions = 8;
        (mapper, TinyLm::new(cfg).unwrap())
    }

    #[test]
    fn node_loss_matches_value_loss() {
        let (mapper, lm) = tiny();
        let e = TargetEmbedding(vec![0.2, -0.4, 0.9]);
        let tokens = vec![3, 1, 4, 0];
        let mut g = Graph::new();
        let mv = mapper.params().bind(&mut g);
        let lv = lm.params().bind(&mut g);
        let prefix = mapper.forward(&mut g, &mv, &e).unwrap();
        let node = caption_loss_node(&mut g, &lm, &lv, prefix, &tokens).unwrap();
        let value = caption_loss(&encode_prefix(&e, &mapper).unwrap(), &record(tokens), &lm).unwrap();
        assert!((g.value(node).item() - value).abs() < 1e-12);
    }

    #[test]
    fn mapper_gradient_matches_finite_differences() {
        let (mut mapper, lm) = tiny();
        let e = TargetEmbedding(vec![0.2, -0.4, 0.9]);
        let tokens = vec![3, 1, 4, 0];
        let loss_of = |m: &PrefixMapper| {
            caption_loss(&encode_prefix(&e, m).unwrap(), &record(tokens.clone()), &lm).unwrap()
        };
        let mut g = Graph::new();
        let mv = mapper.params().bind(&mut g);
        let lv = lm.params().bind(&mut g);
        let prefix = mapper.forward(&mut g, &mv, &e).unwrap();
        let loss = caption_loss_node(&mut g, &lm, &lv, prefix, &tokens).unwrap();
        let grads = g.backward(loss);
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for pi in 0..mapper.params().len() {
            let shape = mapper.params().get(pi).shape().to_vec();
            let analytic = grads.get_or_zeros(mv[pi], &shape);
            for j in 0..analytic.len() {
                let x0 = mapper.params().get(pi).data()[j];
                let mut at = |d: f64| {
                    mapper.params_mut().get_mut(pi).data_mut()[j] = x0 + d;
                    loss_of(&mapper)
                };
                let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                mapper.params_mut().get_mut(pi).data_mut()[j] = x0;
                let a = analytic.data()[j];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            epochs: 5,
            batch_size: 2,
            learning_rate: lr,
            weight_decay: 0.0,
            seed: 2,
            optimizer: OptimizerKind::Adam,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.9,
        }
    }

    fn pairs() -> Vec<CaptionPair> {
        (0..3)
            .map(|i| CaptionPair {
                embedding: TargetEmbedding(vec![i as f64, 1.0 - i as f64, 0.5]),
                caption: record(vec![2 + i as TokenId, 1, 0]),
            })
            .collect()
    }

    #[test]
    fn frozen_lm_is_bit_identical() {
        let (mut mapper, mut lm) = tiny();
        let before = lm.params().checksum();
        let m_before = mapper.params().checksum();
        train_captioner(&mut mapper, &mut lm, &pairs(), &cfg(1e-2), true).unwrap();
        assert_eq!(lm.params().checksum(), before);
        assert_ne!(mapper.params().checksum(), m_before);
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let (mut mapper, mut lm) = tiny();
        let mut c = cfg(0.0);
        c.batch_size = 3;
        let h = train_captioner(&mut mapper, &mut lm, &pairs(), &c, false).unwrap();
        assert!(h.epoch_loss.iter().all(|&l| l == h.epoch_loss[0]));
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let (mut mapper, _) = tiny();
        let mut lm = TinyLm::new(TinyLmConfig::new(5, 8)).unwrap();
        assert!(matches!(
            train_captioner(&mut mapper, &mut lm, &pairs(), &cfg(1e-2), true),
            Err(Error::Dimension(_))
        ));
    }
}
