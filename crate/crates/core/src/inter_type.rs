//! Attention across the per-type summaries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, LayerNorm, MultiHeadAttention, NodeId, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterTypeConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layer_norm: bool,
}

impl Default for InterTypeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            layer_norm: true,
        }
    }
}

impl InterTypeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "inter-type hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InterTypeEncoder {
    pub config: InterTypeConfig,
    attention: MultiHeadAttention,
    norm: Option<LayerNorm>,
}

/// Refined type embeddings with head-averaged attention for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct InterTypeOutput {
    pub e_inter: Tensor,
    pub attention_weights: Tensor,
}

impl InterTypeEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: &InterTypeConfig,
        model_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            config: config.clone(),
            attention: MultiHeadAttention::new(
                store,
                &format!("{name}.attention"),
                model_dim,
                config.hidden,
                config.heads,
                rng,
            ),
            norm: config
                .layer_norm
                .then(|| LayerNorm::new(store, &format!("{name}.norm"), model_dim)),
        }
    }

    /// `x` stacks `B` groups of `types` rows; attention stays within a group.
    /// Returns `(refined rows, attention node)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, types: usize) -> (NodeId, NodeId) {
        let (att_out, att) = self.attention.forward(g, store, x, types);
        let res = g.add(x, att_out);
        let out = match &self.norm {
            Some(n) => n.forward(g, store, res),
            None => res,
        };
        (out, att)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.attention.params();
        if let Some(n) = &self.norm {
            p.extend(n.params());
        }
        p
    }
}

/// Runs the encoder on one `N x d` stack of type summaries.
pub fn encode_inter_type(
    summaries: &Tensor,
    encoder: &InterTypeEncoder,
    store: &ParamStore,
) -> Result<InterTypeOutput> {
    if summaries.rows == 0 {
        return Err(Error::InvalidInput("inter-type encoder needs at least one type".into()));
    }
    if !summaries.all_finite() {
        return Err(Error::NonFinite("type summaries".into()));
    }
    let mut g = Graph::new();
    let x = g.input(summaries.clone());
    let (out, att) = encoder.forward(&mut g, store, x, summaries.rows);
    let weights = g
        .attention_weights(att)
        .and_then(|mut w| w.pop())
        .expect("attention node");
    Ok(InterTypeOutput {
        e_inter: g.value(out).clone(),
        attention_weights: weights,
    })
}
