//! Denoising spatio-temporal transformer blocks.
//!
//! Everything here builds nodes on a caller-supplied [`Graph`](crate::autodiff::Graph);
//! parameters live in a [`ParamStore`](crate::autodiff::ParamStore) and are
//! referred to by the id bundles registered through the `*Params` types.

mod attention;
mod encoding;
mod relation;
mod selector;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::{
    attention_block, group_mask, multi_head_attention, spatial_mha, temporal_mha, AttentionParams, LayerNormParams,
    MASKED,
};
pub use encoding::positional_encoding;
pub use relation::{pair_geometry, relation_head, PairBatch, RelationHeadParams, UnionFeatures, GEOMETRY_DIM};
pub use selector::{gumbel_topk_select, sample_gumbel_noise, select_with_noise, SelectedContext};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DTransConfig {
    pub dim: usize,
    pub heads: usize,
    pub temporal_depth: usize,
    pub spatial_depth: usize,
    pub relation_depth: usize,
    pub top_k: usize,
    pub tau: f64,
    /// Hidden width of the feed-forward sublayer as a multiple of `dim`.
    pub ffn_mult: usize,
}

impl Default for DTransConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 8,
            temporal_depth: 3,
            spatial_depth: 3,
            relation_depth: 1,
            top_k: 8,
            tau: 1.0,
            ffn_mult: 2,
        }
    }
}

impl DTransConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.dim % 2 != 0 {
            return fail(format!("dim must be positive and even, got {}", self.dim));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.temporal_depth == 0 || self.spatial_depth == 0 || self.relation_depth == 0 {
            return fail("attention depths must be at least 1".into());
        }
        if self.top_k == 0 {
            return fail("top_k must be at least 1".into());
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be at least 1".into());
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.dim * self.ffn_mult
    }
}
