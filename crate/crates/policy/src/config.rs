//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::PolicyError;

/// How the demand tensor enters the demand-aware attention layers (the first
/// encoder layer and the decoder's extended-node layer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemandMechanism {
    /// Plain multi-head attention; demand enters only through node features.
    Plain,
    /// Per-head compatibility modulation `G^s` built from pair demand.
    DynamicalMask,
    /// Keys and values over all `rank`-tuples of nodes.
    Tensor { rank: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Fleet size the decoder is built for.
    pub num_trucks: usize,
    /// Encoding dimension `d`.
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    /// Hidden width of the feedforward sublayers.
    pub ff_hidden: usize,
    /// Output width of the passive-truck reducer `f`.
    pub reducer_dim: usize,
    /// Scale `A` of the tanh-regulated final compatibility.
    pub tanh_scale: f64,
    pub mechanism: DemandMechanism,
    /// Dropout probability inside feedforward sublayers (training only).
    pub dropout: f64,
    /// Add `(delta_out, delta_in)` source terms to the final-layer keys.
    pub final_key_sources: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            num_trucks: 1,
            embed_dim: 128,
            encoder_layers: 3,
            heads: 8,
            ff_hidden: 64,
            reducer_dim: 16,
            tanh_scale: 10.0,
            mechanism: DemandMechanism::DynamicalMask,
            dropout: 0.0,
            final_key_sources: false,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Config(m));
        if self.num_trucks == 0 {
            return bad("num_trucks must be at least 1".into());
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} must be a positive multiple of heads {}", self.embed_dim, self.heads));
        }
        if self.encoder_layers == 0 {
            return bad("encoder_layers must be at least 1".into());
        }
        if self.ff_hidden == 0 || self.reducer_dim == 0 {
            return bad("ff_hidden and reducer_dim must be positive".into());
        }
        if !(self.tanh_scale.is_finite() && self.tanh_scale > 0.0) {
            return bad(format!("tanh_scale must be positive, got {}", self.tanh_scale));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if let DemandMechanism::Tensor { rank } = self.mechanism {
            if !(1..=3).contains(&rank) {
                return bad(format!("tensor attention rank must be 1, 2 or 3, got {rank}"));
            }
        }
        Ok(())
    }

    /// Per-head key and value width `alpha = beta = d / heads`.
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Width of the decoder's extended nodes, `d + N + 1`.
    pub fn extended_dim(&self) -> usize {
        self.embed_dim + self.num_trucks + 1
    }

    /// Width of the context node `H ⊕ T ⊕ C`.
    pub fn context_dim(&self) -> usize {
        let passive = self.num_trucks - 1;
        self.embed_dim + passive * self.reducer_dim + passive + self.num_trucks
    }
}
