//! Intra-type spatiotemporal encoder: temporal self-attention over each
//! (region, type) look-back window followed by a 1-D convolution across
//! regions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, LayerNorm, Linear, MultiHeadAttention, NodeId, ParamId, ParamStore, Tensor};
use crate::panel::Window;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalKind {
    Transformer,
    /// Single-layer tanh recurrent network.
    Recurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalConfig {
    pub kind: TemporalKind,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward width; 0 means `4 * model_dim`.
    pub ff_width: usize,
    pub positional_encoding: bool,
    pub pooling: Pooling,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            kind: TemporalKind::Transformer,
            model_dim: 32,
            heads: 4,
            layers: 1,
            ff_width: 0,
            positional_encoding: true,
            pooling: Pooling::Mean,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "temporal model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.kind == TemporalKind::Transformer && self.layers == 0 {
            return Err(Error::Config("temporal encoder needs at least one layer".into()));
        }
        Ok(())
    }

    fn ff(&self) -> usize {
        if self.ff_width == 0 {
            4 * self.model_dim
        } else {
            self.ff_width
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attention: MultiHeadAttention,
    norm1: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    norm2: LayerNorm,
}

#[derive(Debug, Clone)]
struct Recurrence {
    hidden: ParamId,
}

/// Temporal encoder mapping `T` tokens of `[r, d]` to one `model_dim` vector.
#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub config: TemporalConfig,
    input: Linear,
    layers: Vec<EncoderLayer>,
    recurrence: Option<Recurrence>,
}

/// Sinusoidal positional encoding table of shape `len x dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

impl TemporalEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: &TemporalConfig, rng: &mut R) -> Self {
        let d = config.model_dim;
        let input = Linear::new(store, &format!("{name}.input"), 2, d, rng);
        let mut layers = Vec::new();
        let mut recurrence = None;
        match config.kind {
            TemporalKind::Transformer => {
                for k in 0..config.layers {
                    let p = format!("{name}.layer{k}");
                    layers.push(EncoderLayer {
                        attention: MultiHeadAttention::new(store, &format!("{p}.attention"), d, d, config.heads, rng),
                        norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                        ff_in: Linear::new(store, &format!("{p}.ff_in"), d, config.ff(), rng),
                        ff_out: Linear::new(store, &format!("{p}.ff_out"), config.ff(), d, rng),
                        norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                    });
                }
            }
            TemporalKind::Recurrent => {
                let hidden = store.add_glorot(format!("{name}.recurrent"), d, d, rng);
                recurrence = Some(Recurrence { hidden });
            }
        }
        Self {
            config: config.clone(),
            input,
            layers,
            recurrence,
        }
    }

    /// Encodes `B` sequences stacked as `(B * seq_len) x 2` tokens into `B x d`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: NodeId, seq_len: usize) -> NodeId {
        let rows = g.value(tokens).rows;
        let batch = rows / seq_len;
        let d = self.config.model_dim;
        let mut x = self.input.forward(g, store, tokens);
        if let Some(rec) = &self.recurrence {
            return self.recurrent(g, store, rec, x, batch, seq_len);
        }
        if self.config.positional_encoding {
            let table = positional_encoding(seq_len, d);
            let mut tiled = Vec::with_capacity(rows * d);
            for _ in 0..batch {
                tiled.extend_from_slice(&table.data);
            }
            let pe = g.input(Tensor::from_vec(rows, d, tiled));
            x = g.add(x, pe);
        }
        for layer in &self.layers {
            let (att, _) = layer.attention.forward(g, store, x, seq_len);
            let res = g.add(x, att);
            let h = layer.norm1.forward(g, store, res);
            let f = layer.ff_in.forward(g, store, h);
            let f = g.relu(f);
            let f = layer.ff_out.forward(g, store, f);
            let res2 = g.add(h, f);
            x = layer.norm2.forward(g, store, res2);
        }
        match self.config.pooling {
            Pooling::Mean => g.block_mean(x, seq_len),
            Pooling::Last => {
                let idx = (0..batch).map(|b| b * seq_len + seq_len - 1).collect();
                g.gather_rows(x, idx)
            }
        }
    }

    fn recurrent(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rec: &Recurrence,
        projected: NodeId,
        batch: usize,
        seq_len: usize,
    ) -> NodeId {
        let u = g.param(store, rec.hidden);
        let mut h: Option<NodeId> = None;
        let mut acc: Option<NodeId> = None;
        for t in 0..seq_len {
            let xt = g.gather_rows(projected, (0..batch).map(|b| b * seq_len + t).collect());
            let pre = match h {
                Some(prev) => {
                    let hu = g.matmul(prev, u);
                    g.add(xt, hu)
                }
                None => xt,
            };
            let ht = g.tanh(pre);
            acc = Some(match acc {
                Some(a) => g.add(a, ht),
                None => ht,
            });
            h = Some(ht);
        }
        match self.config.pooling {
            Pooling::Mean => g.scale(acc.unwrap(), 1.0 / seq_len as f64),
            Pooling::Last => h.unwrap(),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.input.params().to_vec();
        for l in &self.layers {
            out.extend(l.attention.params());
            out.extend(l.norm1.params());
            out.extend(l.ff_in.params());
            out.extend(l.ff_out.params());
            out.extend(l.norm2.params());
        }
        if let Some(r) = &self.recurrence {
            out.push(r.hidden);
        }
        out
    }
}

/// Stacks windows into a `(B * T) x 2` token matrix.
pub fn window_tokens(windows: &[&Window]) -> Result<Tensor> {
    let t = windows.first().map_or(0, |w| w.len());
    let mut data = Vec::with_capacity(windows.len() * t * 2);
    for w in windows {
        if w.len() != t {
            return Err(Error::DimensionMismatch {
                expected: t,
                got: w.len(),
            });
        }
        for p in &w.seq {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::NonFinite(format!(
                    "window for region {} type {}",
                    w.region, w.type_index
                )));
            }
            data.extend_from_slice(p);
        }
    }
    Ok(Tensor::from_vec(windows.len() * t, 2, data))
}

/// Encodes a single window to its `model_dim` hidden state.
pub fn encode_temporal(window: &Window, encoder: &TemporalEncoder, store: &ParamStore) -> Result<Vec<f64>> {
    if window.is_empty() {
        return Err(Error::InvalidInput("empty window".into()));
    }
    let tokens = window_tokens(&[window])?;
    let mut g = Graph::new();
    let x = g.input(tokens);
    let h = encoder.forward(&mut g, store, x, window.len());
    Ok(g.value(h).data.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpatialConfig {
    pub kernel_width: usize,
    pub activation: Activation,
    /// Order in which regions are laid out along the convolution axis;
    /// ascending region id when empty.
    pub region_order: Vec<usize>,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            kernel_width: 3,
            activation: Activation::Relu,
            region_order: Vec::new(),
        }
    }
}

impl SpatialConfig {
    pub fn validate(&self, regions: usize) -> Result<()> {
        if self.kernel_width % 2 == 0 {
            return Err(Error::Config("spatial kernel width must be odd".into()));
        }
        if !self.region_order.is_empty() {
            let mut sorted = self.region_order.clone();
            sorted.sort_unstable();
            if sorted != (0..regions).collect::<Vec<_>>() {
                return Err(Error::Config(format!(
                    "region_order must be a permutation of 0..{regions}"
                )));
            }
        }
        Ok(())
    }

    pub fn order(&self, regions: usize) -> Vec<usize> {
        if self.region_order.is_empty() {
            (0..regions).collect()
        } else {
            self.region_order.clone()
        }
    }
}

/// Same-length 1-D convolution over the region axis.
#[derive(Debug, Clone)]
pub struct SpatialConv {
    pub config: SpatialConfig,
    pub kernel: Linear,
    regions: usize,
}

impl SpatialConv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: &SpatialConfig,
        channels: usize,
        regions: usize,
        rng: &mut R,
    ) -> Self {
        let kernel = Linear::new(
            store,
            &format!("{name}.kernel"),
            config.kernel_width * channels,
            channels,
            rng,
        );
        Self {
            config: config.clone(),
            kernel,
            regions,
        }
    }

    /// Takes `(B * M) x d` rows in region-id order; returns per-region rows
    /// (same order) and the region-pooled `B x d` summary.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: NodeId) -> (NodeId, NodeId) {
        let m = self.regions;
        let batch = g.value(h).rows / m;
        let order = self.config.order(m);
        let identity = order.iter().enumerate().all(|(i, &r)| i == r);
        let x = if identity {
            h
        } else {
            let idx = (0..batch).flat_map(|b| order.iter().map(move |&r| b * m + r)).collect();
            g.gather_rows(h, idx)
        };
        let unfolded = g.unfold(x, m, self.config.kernel_width);
        let mut y = self.kernel.forward(g, store, unfolded);
        if self.config.activation == Activation::Relu {
            y = g.relu(y);
        }
        let rows = if identity {
            y
        } else {
            let mut pos = vec![0; m];
            for (p, &r) in order.iter().enumerate() {
                pos[r] = p;
            }
            let idx = (0..batch).flat_map(|b| pos.iter().map(move |&p| b * m + p)).collect();
            g.gather_rows(y, idx)
        };
        let pooled = g.block_mean(rows, m);
        (rows, pooled)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.kernel.params().to_vec()
    }
}

/// Applies the spatial convolution to one type's `M x d` hidden states.
pub fn encode_spatial(h_all_regions: &Tensor, conv: &SpatialConv, store: &ParamStore) -> Result<(Tensor, Vec<f64>)> {
    if h_all_regions.rows < 1 {
        return Err(Error::InvalidInput("spatial encoder needs at least one region".into()));
    }
    if h_all_regions.rows != conv.regions {
        return Err(Error::DimensionMismatch {
            expected: conv.regions,
            got: h_all_regions.rows,
        });
    }
    let mut g = Graph::new();
    let x = g.input(h_all_regions.clone());
    let (rows, pooled) = conv.forward(&mut g, store, x);
    Ok((g.value(rows).clone(), g.value(pooled).data.clone()))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::check::check_gradients;

    fn random_window(t: usize, seed: u64) -> Window {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Window {
            region: 0,
            type_index: 0,
            anchor: t,
            seq: (0..t)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect(),
        }
    }

    fn encoder(cfg: &TemporalConfig) -> (ParamStore, TemporalEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let enc = TemporalEncoder::new(&mut store, "t", cfg, &mut rng);
        (store, enc)
    }

    #[test]
    fn output_width_is_model_dim_for_all_window_lengths() {
        let (store, enc) = encoder(&TemporalConfig::default());
        for t in [7, 14, 21, 28] {
            let h = encode_temporal(&random_window(t, t as u64), &enc, &store).unwrap();
            assert_eq!(h.len(), 32);
            assert!(h.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn positional_encoding_breaks_permutation_invariance() {
        let w = random_window(10, 3);
        let mut reversed = w.clone();
        reversed.seq.reverse();

        let (store, enc) = encoder(&TemporalConfig::default());
        let a = encode_temporal(&w, &enc, &store).unwrap();
        let b = encode_temporal(&reversed, &enc, &store).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6);

        let cfg = TemporalConfig {
            positional_encoding: false,
            ..Default::default()
        };
        let (store, enc) = encoder(&cfg);
        let a = encode_temporal(&w, &enc, &store).unwrap();
        let b = encode_temporal(&reversed, &enc, &store).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_rejects_non_finite() {
        let (store, enc) = encoder(&TemporalConfig::default());
        let w = random_window(14, 5);
        assert_eq!(
            encode_temporal(&w, &enc, &store).unwrap(),
            encode_temporal(&w.clone(), &enc, &store).unwrap()
        );
        let mut bad = w;
        bad.seq[3][1] = f64::NAN;
        assert!(matches!(encode_temporal(&bad, &enc, &store), Err(Error::NonFinite(_))));
    }

    #[test]
    fn recurrent_variant_has_same_interface() {
        let cfg = TemporalConfig {
            kind: TemporalKind::Recurrent,
            ..Default::default()
        };
        let (store, enc) = encoder(&cfg);
        let h = encode_temporal(&random_window(14, 9), &enc, &store).unwrap();
        assert_eq!(h.len(), 32);
    }

    fn conv(regions: usize, d: usize, activation: Activation) -> (ParamStore, SpatialConv) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = SpatialConfig {
            activation,
            ..Default::default()
        };
        let c = SpatialConv::new(&mut store, "s", &cfg, d, regions, &mut rng);
        (store, c)
    }

    fn random_rows(m: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(m, d, (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let d = 4;
        let (mut store, c) = conv(5, d, Activation::Linear);
        let mut w = Tensor::zeros(3 * d, d);
        for k in 0..d {
            w.set(d + k, k, 1.0);
        }
        *store.value_mut(c.kernel.weight) = w;
        let x = random_rows(5, d, 1);
        let (rows, pooled) = encode_spatial(&x, &c, &store).unwrap();
        assert_eq!(rows, x);
        for k in 0..d {
            let mean = (0..5).map(|r| x.get(r, k)).sum::<f64>() / 5.0;
            assert!((pooled[k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn single_region_and_zero_kernel() {
        let (store, c) = conv(1, 3, Activation::Relu);
        let x = random_rows(1, 3, 2);
        let (rows, pooled) = encode_spatial(&x, &c, &store).unwrap();
        assert_eq!(rows.data, pooled);

        let (mut store, c) = conv(4, 3, Activation::Relu);
        *store.value_mut(c.kernel.weight) = Tensor::zeros(9, 3);
        let (_, pooled) = encode_spatial(&random_rows(4, 3, 3), &c, &store).unwrap();
        assert!(pooled.iter().all(|v| *v == 0.0), "relu(0) on every channel");
    }

    #[test]
    fn region_order_changes_neighbourhoods_but_keeps_row_identity() {
        let d = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let cfg = SpatialConfig {
            activation: Activation::Linear,
            region_order: vec![2, 0, 3, 1],
            ..Default::default()
        };
        let c = SpatialConv::new(&mut store, "s", &cfg, d, 4, &mut rng);
        let mut w = Tensor::zeros(3 * d, d);
        for k in 0..d {
            w.set(d + k, k, 1.0);
        }
        *store.value_mut(c.kernel.weight) = w;
        let x = random_rows(4, d, 6);
        let (rows, _) = encode_spatial(&x, &c, &store).unwrap();
        assert_eq!(rows, x);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = TemporalConfig {
            model_dim: 8,
            heads: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let enc = TemporalEncoder::new(&mut store, "t", &cfg, &mut rng);
        let conv = SpatialConv::new(&mut store, "s", &SpatialConfig::default(), 8, 3, &mut rng);
        let windows: Vec<Window> = (0..3).map(|i| random_window(5, 40 + i)).collect();
        let tokens = window_tokens(&windows.iter().collect::<Vec<_>>()).unwrap();
        let params: Vec<ParamId> = store.ids().collect();
        let report = check_gradients(&mut store, &params, 1e-4, |g, s| {
            let x = g.input(tokens.clone());
            let h = enc.forward(g, s, x, 5);
            let (rows, pooled) = conv.forward(g, s, h);
            let a = g.sum(rows);
            let t = g.tanh(pooled);
            let b = g.sum(t);
            let tot = g.add(a, b);
            g.mse(tot, vec![0.5])
        });
        for c in report {
            assert!(c.passes(1e-3), "{}: {}", c.param, c.max_rel_error);
        }
    }
}
