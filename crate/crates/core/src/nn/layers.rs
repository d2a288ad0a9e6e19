use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Layer normalization with learned gain and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(1, width, 1.0));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(1, width));
        Self { gain, shift }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, shift)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.shift]
    }
}

/// Multi-head self-attention within blocks of rows, projecting
/// `model_dim -> hidden -> model_dim`.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        hidden: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && hidden % heads == 0, "hidden width must divide into heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), model_dim, hidden, rng),
            key: Linear::new(store, &format!("{name}.key"), model_dim, hidden, rng),
            value: Linear::new(store, &format!("{name}.value"), model_dim, hidden, rng),
            output: Linear::new(store, &format!("{name}.output"), hidden, model_dim, rng),
            heads,
        }
    }

    /// Returns `(output, attention_node)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, block: usize) -> (NodeId, NodeId) {
        let q = self.query.forward(g, store, x);
        let k = self.key.forward(g, store, x);
        let v = self.value.forward(g, store, x);
        let att = g.block_attention(q, k, v, block, self.heads);
        (self.output.forward(g, store, att), att)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.query, self.key, self.value, self.output]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}
