//! Captioning module: embedding -> prefix tokens -> language model -> text.

mod beam;
mod external;
mod lm;
mod prefix;
mod tokenizer;
mod train;
mod transformer;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use beam::{beam_search, greedy_decode, sequence_log_prob, BeamHypothesis, DecodeConfig};
pub use external::{serve_lm, ExternalLm, ExternalLmSpec};
pub use lm::{log_softmax, DecoderLm, TableLm, TinyLm, TinyLmConfig, TrainableLm};
pub use prefix::{encode_prefix, PrefixMapper, PrefixMapperConfig};
pub use tokenizer::{WhitespaceTokenizer, EOS, UNK};
pub use train::{caption_loss, caption_loss_node, train_captioner, CaptionPair};

use crate::brain::TargetEmbedding;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type TokenId = u32;

/// K continuous embeddings fed to the language model ahead of the caption.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixTokens(Tensor);

impl PrefixTokens {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 || t.shape()[0] == 0 || t.shape()[1] == 0 {
            return Err(Error::Dimension(format!("prefix must be a non-empty [K, d] matrix, got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("prefix contains non-finite values".into()));
        }
        Ok(PrefixTokens(t))
    }

    /// Number of prefix tokens K.
    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn embed_dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub stimulus_id: String,
    pub text: String,
    /// Token ids ending with the terminal token.
    pub tokens: Vec<TokenId>,
}

impl CaptionRecord {
    pub fn new(stimulus_id: impl Into<String>, text: &str, tokenizer: &WhitespaceTokenizer) -> Self {
        CaptionRecord {
            stimulus_id: stimulus_id.into(),
            text: text.to_string(),
            tokens: tokenizer.encode(text),
        }
    }
}

/// Language model used by a trained captioner.
#[derive(Debug)]
pub enum LmBackend {
    Tiny(TinyLm),
    External(ExternalLm),
}

impl DecoderLm for LmBackend {
    fn vocab_size(&self) -> usize {
        match self {
            LmBackend::Tiny(m) => m.vocab_size(),
            LmBackend::External(m) => m.vocab_size(),
        }
    }

    fn embed_dim(&self) -> usize {
        match self {
            LmBackend::Tiny(m) => m.embed_dim(),
            LmBackend::External(m) => m.embed_dim(),
        }
    }

    fn eos_token(&self) -> Option<TokenId> {
        match self {
            LmBackend::Tiny(m) => m.eos_token(),
            LmBackend::External(m) => m.eos_token(),
        }
    }

    fn next_token_logits(&self, prefix: &PrefixTokens, tokens: &[TokenId]) -> Result<Vec<f64>> {
        match self {
            LmBackend::Tiny(m) => m.next_token_logits(prefix, tokens),
            LmBackend::External(m) => m.next_token_logits(prefix, tokens),
        }
    }

    fn sequence_logits(&self, prefix: &PrefixTokens, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        match self {
            LmBackend::Tiny(m) => m.sequence_logits(prefix, tokens),
            LmBackend::External(m) => m.sequence_logits(prefix, tokens),
        }
    }
}

/// Embedding -> prefix -> beam search -> text.
pub fn generate_caption(
    embedding: &TargetEmbedding,
    mapper: &PrefixMapper,
    lm: &dyn DecoderLm,
    tokenizer: &WhitespaceTokenizer,
    cfg: &DecodeConfig,
) -> Result<String> {
    let prefix = encode_prefix(embedding, mapper)?;
    let best = beam_search(lm, &prefix, cfg)?;
    Ok(tokenizer.decode(&best.tokens))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LmSpec {
    Tiny { config: TinyLmConfig },
    External { spec: ExternalLmSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionerConfig {
    mapper: PrefixMapperConfig,
    lm: LmSpec,
    freeze_lm: bool,
}

/// A trained captioning module with its tokenizer.
#[derive(Debug)]
pub struct Captioner {
    pub tokenizer: WhitespaceTokenizer,
    pub mapper: PrefixMapper,
    pub lm: LmBackend,
    pub freeze_lm: bool,
}

impl Captioner {
    pub fn caption(&self, embedding: &TargetEmbedding, cfg: &DecodeConfig) -> Result<String> {
        generate_caption(embedding, &self.mapper, &self.lm, &self.tokenizer, cfg)
    }

    /// `config.json`, `vocab.json`, and VCT1 parameter files under `mapper/`
    /// and (for the built-in model) `lm/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lm = match &self.lm {
            LmBackend::Tiny(m) => {
                m.params().save(&dir.join("lm"))?;
                LmSpec::Tiny {
                    config: m.config().clone(),
                }
            }
            LmBackend::External(m) => LmSpec::External { spec: m.spec().clone() },
        };
        let config = CaptionerConfig {
            mapper: self.mapper.config().clone(),
            lm,
            freeze_lm: self.freeze_lm,
        };
        self.mapper.params().save(&dir.join("mapper"))?;
        write_json(&dir.join("config.json"), &config)?;
        write_json(&dir.join("vocab.json"), &self.tokenizer)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: CaptionerConfig = read_json(&dir.join("config.json"))?;
        let tokenizer: WhitespaceTokenizer = read_json(&dir.join("vocab.json"))?;
        let mut mapper = PrefixMapper::new(config.mapper)?;
        mapper.params_mut().load_into(&dir.join("mapper"))?;
        let lm = match config.lm {
            LmSpec::Tiny { config } => {
                let mut m = TinyLm::new(config)?;
                m.params_mut().load_into(&dir.join("lm"))?;
                LmBackend::Tiny(m)
            }
            LmSpec::External { spec } => LmBackend::External(ExternalLm::new(spec)),
        };
        if lm.embed_dim() != mapper.config().lm_embed_dim {
            return Err(Error::Validation(format!(
                "captioner mapper width {} does not match its language model ({})",
                mapper.config().lm_embed_dim,
                lm.embed_dim()
            )));
        }
        if lm.vocab_size() != tokenizer.vocab_size() {
            return Err(Error::Validation(format!(
                "tokenizer has {} entries, language model {}",
                tokenizer.vocab_size(),
                lm.vocab_size()
            )));
        }
        Ok(Captioner {
            tokenizer,
            mapper,
            lm,
            freeze_lm: config.freeze_lm,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
