//! All trainable parameters of the pipeline, plus its fixed embedders.

use ndarray::{ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aim::RelationClassifier;
use crate::error::{Error, Result};
use crate::nn::{join_name, AttentionBlock, HashEmbedder, Linear, Params};
use crate::vem::Compressor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub head_count: usize,
    pub d_visual: usize,
    pub visual_head_count: usize,
    pub n_queries: usize,
    pub tokens_per_frame: usize,
    pub embed_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            head_count: 4,
            d_visual: 64,
            visual_head_count: 4,
            n_queries: 32,
            tokens_per_frame: 4,
            embed_seed: 0x1f2e_3d4c,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.d_model, self.head_count, self.d_visual, self.visual_head_count, self.n_queries, self.tokens_per_frame];
        if sizes.contains(&0) {
            return Err(Error::validation("model sizes must be positive"));
        }
        if !self.d_model.is_multiple_of(self.head_count) || !self.d_visual.is_multiple_of(self.visual_head_count) {
            return Err(Error::validation("hidden sizes must be divisible by their head counts"));
        }
        Ok(())
    }

    pub fn text_embedder(&self) -> HashEmbedder {
        HashEmbedder::new(self.d_model, self.embed_seed)
    }

    pub fn instruction_embedder(&self) -> HashEmbedder {
        HashEmbedder::new(self.d_visual, self.embed_seed.rotate_left(17) ^ 0x5bd1_e995)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrmModel {
    pub config: ModelConfig,
    pub compressor: Compressor,
    /// `f_P`: visual width to text width.
    pub projection: Linear,
    /// Verifies action clues against global visual tokens.
    pub verify: AttentionBlock,
    pub relation: RelationClassifier,
    /// Enhances projected visual tokens with the refined clues.
    pub enhance: AttentionBlock,
}

impl IrmModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let compressor = Compressor::init(&mut rng, &config)?;
        let projection = Linear::init(&mut rng, config.d_visual, config.d_model);
        let verify = AttentionBlock::init(&mut rng, config.d_model, config.head_count)?;
        let relation = RelationClassifier::init(&mut rng, config.d_model, config.head_count)?;
        let enhance = AttentionBlock::init(&mut rng, config.d_model, config.head_count)?;
        Ok(Self { config, compressor, projection, verify, relation, enhance })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            compressor: self.compressor.zeros_like(),
            projection: self.projection.zeros_like(),
            verify: self.verify.zeros_like(),
            relation: self.relation.zeros_like(),
            enhance: self.enhance.zeros_like(),
        }
    }

    pub fn text_embedder(&self) -> HashEmbedder {
        self.config.text_embedder()
    }

    /// Zeroes every attention output projection and the relation head weights.
    pub fn zero_output_projections(&mut self) {
        for block in [&mut self.compressor.block, &mut self.verify, &mut self.relation.cross, &mut self.relation.self_attn, &mut self.enhance] {
            block.output.weight.fill(0.0);
            block.output.bias.fill(0.0);
        }
        self.relation.head.weight.fill(0.0);
    }
}

impl Params for IrmModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.compressor.visit(&join_name(prefix, "compressor"), f);
        self.projection.visit(&join_name(prefix, "projection"), f);
        self.verify.visit(&join_name(prefix, "verify"), f);
        self.relation.visit(&join_name(prefix, "relation"), f);
        self.enhance.visit(&join_name(prefix, "enhance"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        self.compressor.visit_mut(&join_name(prefix, "compressor"), f);
        self.projection.visit_mut(&join_name(prefix, "projection"), f);
        self.verify.visit_mut(&join_name(prefix, "verify"), f);
        self.relation.visit_mut(&join_name(prefix, "relation"), f);
        self.enhance.visit_mut(&join_name(prefix, "enhance"), f);
    }
}
