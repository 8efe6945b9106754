use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the joint prefix/suffix transformer.
///
/// Prefix tokens are the `n_vis_tokens + n_lang_tokens` observation tokens;
/// suffix tokens are `n_state_tokens` proprioceptive tokens followed by the
/// `chunk_len` noisy action tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    /// Hidden width of the per-expert MLP.
    pub d_ff: usize,
    pub n_vis_tokens: usize,
    pub n_lang_tokens: usize,
    pub n_state_tokens: usize,
    /// Length of the raw proprioceptive state vector.
    pub state_dim: usize,
    pub chunk_len: usize,
    pub action_dim: usize,
    /// Width of the sinusoidal diffusion-time embedding (even).
    pub tau_embed: usize,
    /// Seed of the observation tokenizer the policy was trained with.
    #[serde(default)]
    pub codebook_seed: u64,
}

impl Default for PolicyConfig {
    /// The desk-scale teacher: 8 layers, width 64, 4 heads, 16 visual
    /// tokens, chunks of 8 two-dimensional actions.
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            d_ff: 128,
            n_vis_tokens: 16,
            n_lang_tokens: 1,
            n_state_tokens: 1,
            state_dim: 2,
            chunk_len: 8,
            action_dim: 2,
            tau_embed: 32,
            codebook_seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::config(msg));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1");
        }
        if self.n_heads == 0 || self.d_head == 0 || self.n_heads * self.d_head != self.d_model {
            return fail("d_model must equal n_heads * d_head");
        }
        if self.d_ff == 0 || self.chunk_len == 0 || self.action_dim == 0 {
            return fail("d_ff, chunk_len and action_dim must be positive");
        }
        if self.n_vis_tokens + self.n_lang_tokens == 0 {
            return fail("at least one prefix token is required");
        }
        if self.tau_embed == 0 || self.tau_embed % 2 != 0 {
            return fail("tau_embed must be a positive even number");
        }
        if self.n_state_tokens > 0 && self.state_dim == 0 {
            return fail("state tokens need a non-empty state vector");
        }
        Ok(())
    }

    pub fn prefix_len(&self) -> usize {
        self.n_vis_tokens + self.n_lang_tokens
    }

    pub fn suffix_len(&self) -> usize {
        self.n_state_tokens + self.chunk_len
    }

    pub fn with_layers(&self, n_layers: usize) -> Self {
        Self {
            n_layers,
            ..self.clone()
        }
    }

    /// True when `other` differs from `self` at most in depth.
    pub fn same_width(&self, other: &Self) -> bool {
        self.with_layers(other.n_layers) == *other
    }
}
