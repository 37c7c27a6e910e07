use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::transformer::{Block, Linear, Norm};
use super::{PrefixTokens, TokenId};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, ParamSet};
use crate::tensor::Tensor;

/// Causal language model consuming continuous prefix embeddings followed by
/// token embeddings.
pub trait DecoderLm {
    fn vocab_size(&self) -> usize;
    /// Width of one word embedding; prefixes must match it.
    fn embed_dim(&self) -> usize;
    /// `None` for models without a terminal token.
    fn eos_token(&self) -> Option<TokenId>;
    /// Next-token logits after `prefix ++ tokens`.
    fn next_token_logits(&self, prefix: &PrefixTokens, tokens: &[TokenId]) -> Result<Vec<f64>>;

    /// Row i holds the logits that score `tokens[i]` given `prefix ++ tokens[..i]`.
    fn sequence_logits(&self, prefix: &PrefixTokens, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        (0..tokens.len())
            .map(|i| self.next_token_logits(prefix, &tokens[..i]))
            .collect()
    }
}

/// A language model expressible on the autodiff tape.
pub trait TrainableLm: DecoderLm {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Logits [K + T, V] over the input `prefix ++ tokens`, prefix being a [K, d] node.
    fn forward(&self, g: &mut Graph, params: &[Var], prefix: Var, tokens: &[TokenId]) -> Result<Var>;
}

pub fn check_prefix(lm: &(impl DecoderLm + ?Sized), prefix: &PrefixTokens) -> Result<()> {
    if prefix.embed_dim() != lm.embed_dim() {
        return Err(Error::Dimension(format!(
            "prefix width {} does not match the language model's word embedding width {}",
            prefix.embed_dim(),
            lm.embed_dim()
        )));
    }
    Ok(())
}

pub fn check_tokens(lm: &(impl DecoderLm + ?Sized), tokens: &[TokenId]) -> Result<()> {
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= lm.vocab_size()) {
        return Err(Error::Validation(format!(
            "token id {t} is outside the vocabulary of {}",
            lm.vocab_size()
        )));
    }
    Ok(())
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyLmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub init_seed: u64,
}

impl TinyLmConfig {
    pub fn new(vocab_size: usize, embed_dim: usize) -> Self {
        TinyLmConfig {
            vocab_size,
            embed_dim,
            layers: 1,
            heads: 2,
            hidden_dim: 4 * embed_dim,
            max_positions: 64,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.hidden_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config("language model dimensions must be positive (vocab >= 2)".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Small GPT-style decoder: token + position embeddings, pre-LN causal
/// blocks, final norm and an untied output head. Token 0 is end-of-sequence.
#[derive(Debug, Clone)]
pub struct TinyLm {
    config: TinyLmConfig,
    params: ParamSet,
    tok: usize,
    pos: usize,
    blocks: Vec<Block>,
    ln_f: Norm,
    head: Linear,
}

impl TinyLm {
    pub fn new(config: TinyLmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamSet::new();
        let d = config.embed_dim;
        let tok = params.add("tok_emb", normal_tensor(&mut rng, &[config.vocab_size, d], 0.1));
        let pos = params.add("pos_emb", normal_tensor(&mut rng, &[config.max_positions, d], 0.02));
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut params, &mut rng, &format!("block{i}"), d, config.hidden_dim, config.heads))
            .collect();
        let ln_f = Norm::new(&mut params, "ln_f", d);
        let head = Linear::new(&mut params, &mut rng, "head", d, config.vocab_size);
        Ok(TinyLm {
            config,
            params,
            tok,
            pos,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn config(&self) -> &TinyLmConfig {
        &self.config
    }

    /// Runs the forward pass on a scratch tape and returns the [K + T, V] logits.
    fn eval(&self, prefix: &PrefixTokens, tokens: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.leaf(prefix.as_tensor().clone());
        let out = self.forward(&mut g, &p, x, tokens)?;
        Ok(g.value(out).clone())
    }
}

impl DecoderLm for TinyLm {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn eos_token(&self) -> Option<TokenId> {
        Some(0)
    }

    fn next_token_logits(&self, prefix: &PrefixTokens, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let out = self.eval(prefix, tokens)?;
        let rows = out.shape()[0];
        Ok(out.row(rows - 1).to_vec())
    }

    fn sequence_logits(&self, prefix: &PrefixTokens, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        check_tokens(self, tokens)?;
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let k = prefix.len();
        let out = self.eval(prefix, &tokens[..tokens.len() - 1])?;
        Ok((0..tokens.len()).map(|i| out.row(k - 1 + i).to_vec()).collect())
    }
}

impl TrainableLm for TinyLm {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph, p: &[Var], prefix: Var, tokens: &[TokenId]) -> Result<Var> {
        let shape = g.shape(prefix).to_vec();
        if shape.len() != 2 || shape[1] != self.config.embed_dim || shape[0] == 0 {
            return Err(Error::Dimension(format!(
                "prefix {:?} does not match the word embedding width {}",
                shape, self.config.embed_dim
            )));
        }
        check_tokens(self, tokens)?;
        let len = shape[0] + tokens.len();
        if len > self.config.max_positions {
            return Err(Error::Dimension(format!(
                "sequence of {len} positions exceeds the model's {}",
                self.config.max_positions
            )));
        }
        let seq = if tokens.is_empty() {
            prefix
        } else {
            let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
            let emb = g.gather(p[self.tok], &ids);
            g.concat_rows(&[prefix, emb])
        };
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather(p[self.pos], &positions);
        let mut x = g.add(seq, pos);
        for b in &self.blocks {
            x = b.apply(g, p, x, true);
        }
        let x = self.ln_f.apply(g, p, x);
        Ok(self.head.apply(g, p, x))
    }
}

/// Language model defined by explicit next-token logits for every history up
/// to a fixed depth. Ignores the prefix.
#[derive(Debug, Clone)]
pub struct TableLm {
    vocab_size: usize,
    embed_dim: usize,
    eos: Option<TokenId>,
    table: HashMap<Vec<TokenId>, Vec<f64>>,
}

impl TableLm {
    pub fn new(vocab_size: usize, embed_dim: usize, eos: Option<TokenId>) -> Self {
        TableLm {
            vocab_size,
            embed_dim,
            eos,
            table: HashMap::new(),
        }
    }

    /// Standard-normal logits for every history shorter than `depth`.
    pub fn random(vocab_size: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lm = TableLm::new(vocab_size, 1, None);
        let mut frontier: Vec<Vec<TokenId>> = vec![Vec::new()];
        for _ in 0..depth {
            let mut next = Vec::new();
            for h in frontier {
                let logits = (0..vocab_size).map(|_| rng.sample(StandardNormal)).collect();
                for t in 0..vocab_size as TokenId {
                    let mut c = h.clone();
                    c.push(t);
                    next.push(c);
                }
                lm.table.insert(h, logits);
            }
            frontier = next;
        }
        lm
    }

    pub fn with_eos(mut self, eos: Option<TokenId>) -> Self {
        self.eos = eos;
        self
    }

    pub fn set(&mut self, history: Vec<TokenId>, logits: Vec<f64>) {
        assert_eq!(logits.len(), self.vocab_size);
        self.table.insert(history, logits);
    }
}

impl DecoderLm for TableLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn eos_token(&self) -> Option<TokenId> {
        self.eos
    }

    fn next_token_logits(&self, _prefix: &PrefixTokens, tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.table
            .get(tokens)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("no table entry for history {tokens:?}")))
    }
}
