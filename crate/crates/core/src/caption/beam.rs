use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::lm::{check_prefix, log_softmax, DecoderLm};
use super::{PrefixTokens, TokenId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_len: usize,
    /// Length-normalization exponent; 0 ranks by raw log-probability.
    pub alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 5,
            max_len: 40,
            alpha: 0.7,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(Error::Config("beam width and max length must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("length penalty {} must be >= 0", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens, including the terminal token when finished.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    pub fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.log_prob
        } else {
            self.log_prob / (self.tokens.len().max(1) as f64).powf(alpha)
        }
    }
}

/// Higher key first; equal keys fall back to the lexicographically smaller
/// token sequence.
fn rank(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Length-capped beam search. Live hypotheses are ranked by cumulative
/// log-probability; each step keeps the best `beam_width` extensions, and
/// those ending in the terminal token are set aside as finished. The result
/// is the best finished hypothesis by length-normalized score, with
/// hypotheses still live at `max_len` competing as unfinished.
pub fn beam_search(lm: &dyn DecoderLm, prefix: &PrefixTokens, cfg: &DecodeConfig) -> Result<BeamHypothesis> {
    cfg.validate()?;
    check_prefix(lm, prefix)?;
    let eos = lm.eos_token();
    let mut live = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<BeamHypothesis> = Vec::new();

    for _ in 0..cfg.max_len {
        let mut cands: Vec<(f64, Vec<TokenId>)> = Vec::with_capacity(live.len() * lm.vocab_size());
        for h in &live {
            let logits = lm.next_token_logits(prefix, &h.tokens)?;
            if logits.len() != lm.vocab_size() {
                return Err(Error::Dimension(format!(
                    "language model returned {} logits for a vocabulary of {}",
                    logits.len(),
                    lm.vocab_size()
                )));
            }
            for (t, lp) in log_softmax(&logits).into_iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(t as TokenId);
                cands.push((h.log_prob + lp, tokens));
            }
        }
        if cands.iter().any(|(lp, _)| lp.is_nan()) {
            return Err(Error::Numeric("language model produced NaN log-probabilities".into()));
        }
        // Zero-probability extensions are pruned while any alternative remains.
        if cands.iter().any(|(lp, _)| *lp > f64::NEG_INFINITY) {
            cands.retain(|(lp, _)| *lp > f64::NEG_INFINITY);
        }
        cands.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        cands.truncate(cfg.beam_width);
        live.clear();
        for (log_prob, tokens) in cands {
            let finished = eos.is_some() && tokens.last().copied() == eos;
            let h = BeamHypothesis {
                tokens,
                log_prob,
                finished,
            };
            if finished {
                done.push(h);
            } else {
                live.push(h);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    let best = done
        .into_iter()
        .min_by(|a, b| rank((a.score(cfg.alpha), &a.tokens), (b.score(cfg.alpha), &b.tokens)))
        .expect("at least one hypothesis survives");
    Ok(best)
}

/// Picks the most likely next token (lowest id on ties) until the terminal
/// token or `max_len`.
pub fn greedy_decode(lm: &dyn DecoderLm, prefix: &PrefixTokens, max_len: usize) -> Result<BeamHypothesis> {
    check_prefix(lm, prefix)?;
    let eos = lm.eos_token();
    let mut h = BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < max_len {
        let lp = log_softmax(&lm.next_token_logits(prefix, &h.tokens)?);
        let mut best = 0;
        for (t, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = t;
            }
        }
        h.tokens.push(best as TokenId);
        h.log_prob += lp[best];
        if eos == Some(best as TokenId) {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Sum of per-step log-softmax scores of `tokens` after `prefix`.
pub fn sequence_log_prob(lm: &dyn DecoderLm, prefix: &PrefixTokens, tokens: &[TokenId]) -> Result<f64> {
    check_prefix(lm, prefix)?;
    let rows = lm.sequence_logits(prefix, tokens)?;
    Ok(rows
        .iter()
        .zip(tokens)
        .map(|(row, &t)| log_softmax(row)[t as usize])
        .sum())
}
