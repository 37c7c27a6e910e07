use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::TokenId;
use crate::error::{Error, Result};

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Closed-vocabulary tokenizer splitting on whitespace. Id 0 is the
/// end-of-sequence marker and id 1 stands in for unknown words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct WhitespaceTokenizer {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl WhitespaceTokenizer {
    /// Vocabulary of every word in `texts`, sorted after the two specials.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        let vocab: Vec<String> = [EOS, UNK]
            .into_iter()
            .chain(words.into_iter().filter(|w| *w != EOS && *w != UNK))
            .map(str::to_string)
            .collect();
        Self::try_from(vocab).expect("specials are in place")
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn eos(&self) -> TokenId {
        0
    }

    pub fn unk(&self) -> TokenId {
        1
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    /// True when every word of `text` is in the vocabulary.
    pub fn covers(&self, text: &str) -> bool {
        text.split_whitespace().all(|w| self.index.contains_key(w))
    }

    /// Token ids of `text` followed by the end-of-sequence id.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(self.unk()))
            .chain(std::iter::once(self.eos()))
            .collect()
    }

    /// Words joined by single spaces; decoding stops at the first end-of-sequence id.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != self.eos())
            .map(|&t| self.word(t).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for WhitespaceTokenizer {
    type Error = Error;

    fn try_from(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < 2 || vocab[0] != EOS || vocab[1] != UNK {
            return Err(Error::Config(format!("vocabulary must start with {EOS} and {UNK}")));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Config(format!("vocabulary entry {w:?} is not a single word")));
            }
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(WhitespaceTokenizer { vocab, index })
    }
}

impl From<WhitespaceTokenizer> for Vec<String> {
    fn from(t: WhitespaceTokenizer) -> Self {
        t.vocab
    }
}
