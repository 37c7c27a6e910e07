use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transformer::{Block, Linear};
use super::PrefixTokens;
use crate::autodiff::{Graph, Var};
use crate::brain::TargetEmbedding;
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefixMapperConfig {
    pub prefix_length: usize,
    pub lm_embed_dim: usize,
    pub mapper_layers: usize,
    pub mapper_heads: usize,
    pub mapper_hidden_dim: usize,
    pub input_dim: usize,
    #[serde(default)]
    pub init_seed: u64,
}

impl PrefixMapperConfig {
    pub fn new(input_dim: usize, lm_embed_dim: usize) -> Self {
        PrefixMapperConfig {
            prefix_length: 10,
            lm_embed_dim,
            mapper_layers: 4,
            mapper_heads: 8,
            mapper_hidden_dim: 512,
            input_dim,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prefix_length == 0 || self.input_dim == 0 || self.lm_embed_dim == 0 || self.mapper_hidden_dim == 0 {
            return Err(Error::Config("prefix mapper dimensions must be positive".into()));
        }
        if self.mapper_heads == 0 || self.lm_embed_dim % self.mapper_heads != 0 {
            return Err(Error::Config(format!(
                "lm_embed_dim {} is not divisible by {} heads",
                self.lm_embed_dim, self.mapper_heads
            )));
        }
        Ok(())
    }
}

/// Turns an embedding into K prefix tokens: a linear map onto K slots,
/// concatenated with K learned queries, a bidirectional transformer encoder,
/// and the query positions as output.
#[derive(Debug, Clone)]
pub struct PrefixMapper {
    config: PrefixMapperConfig,
    params: ParamSet,
    proj: Linear,
    queries: usize,
    blocks: Vec<Block>,
}

impl PrefixMapper {
    pub fn new(config: PrefixMapperConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamSet::new();
        let (k, d) = (config.prefix_length, config.lm_embed_dim);
        let proj = Linear::new(&mut params, &mut rng, "proj", config.input_dim, k * d);
        let queries = params.add("queries", normal_tensor(&mut rng, &[k, d], 1.0));
        let blocks = (0..config.mapper_layers)
            .map(|i| {
                Block::new(
                    &mut params,
                    &mut rng,
                    &format!("block{i}"),
                    d,
                    config.mapper_hidden_dim,
                    config.mapper_heads,
                )
            })
            .collect();
        Ok(PrefixMapper {
            config,
            params,
            proj,
            queries,
            blocks,
        })
    }

    pub fn config(&self) -> &PrefixMapperConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Prefix node [K, d] for one embedding.
    pub fn forward(&self, g: &mut Graph, p: &[Var], embedding: &TargetEmbedding) -> Result<Var> {
        let (k, d) = (self.config.prefix_length, self.config.lm_embed_dim);
        if embedding.len() != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "embedding of length {} for a prefix mapper expecting {}",
                embedding.len(),
                self.config.input_dim
            )));
        }
        let x = g.leaf(crate::tensor::Tensor::from_parts(vec![1, embedding.len()], embedding.0.clone()));
        let slots = self.proj.apply(g, p, x);
        let slots = g.reshape(slots, &[k, d]);
        let mut h = g.concat_rows(&[slots, p[self.queries]]);
        for b in &self.blocks {
            h = b.apply(g, p, h, false);
        }
        Ok(g.slice_rows(h, k, k))
    }
}

pub fn encode_prefix(embedding: &TargetEmbedding, mapper: &PrefixMapper) -> Result<PrefixTokens> {
    let mut g = Graph::new();
    let p = mapper.params().bind(&mut g);
    let out = mapper.forward(&mut g, &p, embedding)?;
    PrefixTokens::new(g.value(out).clone())
}
