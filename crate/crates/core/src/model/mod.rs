//! Multi-level attention mixture readout.
//!
//! A session prefix is embedded and row-normalized into keys `K` (n x d).
//! Queries are built from sums over the last `l` keys for `l = 1..min(L, n)`,
//! each level attends over all keys with `H` heads, the per-item attention
//! weights are Lp-pooled across levels, and the pooled weights mix the keys
//! into per-head session vectors. Their normalized concatenation is merged
//! with the last item and scored against every item embedding.

mod graph;
mod ops;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ItemIndex;
use crate::numerics::NumericsError;

pub use graph::{
    attention_nodes, batch_loss, candidate_mask, gather_keys, linear, mix_nodes, prefix_keys, queries_node, readout, score_node, table_node,
    GraphContext, IdentityEncoder, ItemEncoder, ModelVars, Readout,
};
pub use ops::{
    attention_heads, embed_normalize, forward, forward_batch, forward_with, generate_queries, mix_and_embed,
    score, session_embedding,
};
pub use params::{init_params, ModelParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("empty session prefix")]
    EmptyPrefix,
    #[error("item index {index} outside 1..={num_items}")]
    InvalidItem { index: ItemIndex, num_items: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}

/// Architecture variants used for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Variant {
    /// Multi-level deep-sets queries with Lp attention mixture.
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Single last-item query.
    M,
    /// Every level sums the whole session (no recency windows).
    IP,
    /// Levels concatenate the last `l` keys in order instead of summing.
    LI,
    /// Max pooling across levels instead of Lp pooling.
    LP,
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" | "Full" => Ok(Variant::Full),
            "M" | "m" => Ok(Variant::M),
            "IP" | "ip" => Ok(Variant::IP),
            "LI" | "li" => Ok(Variant::LI),
            "LP" | "lp" => Ok(Variant::LP),
            other => Err(format!("unknown variant `{other}` (expected full, M, IP, LI, LP)")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::M => "M",
            Variant::IP => "IP",
            Variant::LI => "LI",
            Variant::LP => "LP",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub dim: usize,
    pub levels: usize,
    pub heads: usize,
    /// Softmax scale applied to item scores.
    pub sigma: f64,
    /// Exponent of the cross-level Lp pooling.
    pub p: f64,
    pub variant: Variant,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self { dim: 256, levels: 3, heads: 4, sigma: 12.0, p: 4.0, variant: Variant::Full }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidHyper(m));
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        if self.levels == 0 {
            return bad("levels must be >= 1".into());
        }
        if self.heads == 0 {
            return bad("heads must be >= 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return bad(format!("p must be >= 1, got {}", self.p));
        }
        Ok(())
    }

    /// Number of query weight matrices.
    pub fn query_count(&self) -> usize {
        match self.variant {
            Variant::M => 1,
            _ => self.levels,
        }
    }

    /// Input width of the level-`l` query weight (1-based `l`).
    pub fn query_input_dim(&self, l: usize) -> usize {
        match self.variant {
            Variant::LI => l * self.dim,
            _ => self.dim,
        }
    }

    /// Levels used for a prefix of length `n`.
    pub fn effective_levels(&self, n: usize) -> usize {
        self.query_count().min(n)
    }
}

/// Pre-mixture attention map, `n x (levels * heads)`, level-major columns:
/// column `m * heads + h` holds level `m + 1`, head `h + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTensor {
    pub items: usize,
    pub levels: usize,
    pub heads: usize,
    pub data: Vec<f64>,
}

impl AttentionTensor {
    pub fn get(&self, item: usize, level: usize, head: usize) -> f64 {
        self.data[item * self.levels * self.heads + level * self.heads + head]
    }

    pub fn columns(&self) -> usize {
        self.levels * self.heads
    }
}

/// Normalized session vector, its per-head parts and the local preference.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionEmbedding {
    /// Unit-norm concatenation of the head vectors (length `heads * dim`).
    pub session: Vec<f64>,
    /// Un-normalized per-head vectors.
    pub heads: Vec<Vec<f64>>,
    /// Normalized embedding of the last item.
    pub local: Vec<f64>,
}

/// Next-item probabilities over real items; entry `i` is item `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    pub probs: Vec<f64>,
}

impl Distribution {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, item: ItemIndex) -> Option<f64> {
        if item == 0 {
            return None;
        }
        self.probs.get(item as usize - 1).copied()
    }

    /// Items by descending probability, ties by ascending index.
    pub fn top_k(&self, k: usize) -> Vec<(ItemIndex, f64)> {
        let mut order: Vec<usize> = (0..self.probs.len()).collect();
        order.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        order.into_iter().take(k).map(|i| (i as ItemIndex + 1, self.probs[i])).collect()
    }
}
