//! The trainable network: per-type temporal encoders, per-type spatial
//! convolutions, inter-type attention and the MLP head.

use rand::Rng;

use super::{ModelConfig, OutputActivation, Variant, INTRA_WIDTH};
use crate::error::{Error, Result};
use crate::inter_type::InterTypeEncoder;
use crate::nn::{Graph, Linear, NodeId, ParamId, ParamStore, Tensor};
use crate::st_encoder::{SpatialConv, TemporalEncoder};

/// Feed-forward head mapping an embedding to one service time.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Vec<Linear>,
    pub output: Linear,
    pub activation: OutputActivation,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        widths: &[usize],
        activation: OutputActivation,
        rng: &mut R,
    ) -> Self {
        let mut fan_in = input;
        let mut hidden = Vec::with_capacity(widths.len());
        for (k, &w) in widths.iter().enumerate() {
            hidden.push(Linear::new(store, &format!("{name}.hidden{k}"), fan_in, w, rng));
            fan_in = w;
        }
        Self {
            hidden,
            output: Linear::new(store, &format!("{name}.output"), fan_in, 1, rng),
            activation,
        }
    }

    /// `R x input` to `R x 1`. Fails on the first layer producing a
    /// non-finite activation.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (k, layer) in self.hidden.iter().enumerate() {
            let z = layer.forward(g, store, h);
            h = g.relu(z);
            if !g.value(h).all_finite() {
                return Err(Error::NonFinite(format!("predictor layer {k}")));
            }
        }
        let z = self.output.forward(g, store, h);
        let out = match self.activation {
            OutputActivation::Softplus => g.softplus(z),
            OutputActivation::Identity => z,
        };
        if !g.value(out).all_finite() {
            return Err(Error::NonFinite(format!("predictor layer {}", self.hidden.len())));
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.hidden.iter().flat_map(|l| l.params()).collect();
        p.extend(self.output.params());
        p
    }
}

/// One batch of anchor days and the requests that fall on them.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub days: usize,
    /// Per type: `(days * regions * window) x 2` tokens, day-major then region.
    pub tokens: Vec<Tensor>,
    /// `(day within batch, region, type)` per request.
    pub slots: Vec<(usize, usize, usize)>,
    /// `requests x 3` standardized `[mean, variance, workload]`.
    pub intra: Tensor,
    /// Training-time dropout mask for the inter-type slot, `requests x (types * d)`,
    /// already scaled by the keep probability.
    pub inter_mask: Option<Tensor>,
}

/// Day-level encoder outputs shared by every request on that day.
#[derive(Debug, Clone, Copy)]
pub struct DayNodes {
    /// `days x (types * d)`.
    pub e_inter: NodeId,
    /// `(types * days * regions) x d`, type-major.
    pub region_rows: NodeId,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub regions: usize,
    pub types: usize,
    temporal: Vec<TemporalEncoder>,
    spatial: Vec<SpatialConv>,
    inter: InterTypeEncoder,
    pub head: Mlp,
}

impl Network {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: &ModelConfig,
        regions: usize,
        types: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(regions)?;
        if types == 0 || regions == 0 {
            return Err(Error::Precondition(
                "network needs at least one type and one region".into(),
            ));
        }
        let d = config.temporal.model_dim;
        let encoders = if config.share_temporal { 1 } else { types };
        let temporal = (0..encoders)
            .map(|l| TemporalEncoder::new(store, &format!("temporal{l}"), &config.temporal, rng))
            .collect();
        let spatial = (0..types)
            .map(|l| SpatialConv::new(store, &format!("spatial{l}"), &config.spatial, d, regions, rng))
            .collect();
        let inter = InterTypeEncoder::new(store, "inter", &config.inter, d, rng);
        let widths = vec![config.hidden_width; config.hidden_layers];
        let head = Mlp::new(store, "head", embedding_dim(types, d), &widths, config.output, rng);
        Ok(Self {
            config: config.clone(),
            regions,
            types,
            temporal,
            spatial,
            inter,
            head,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.config.temporal.model_dim
    }

    pub fn embedding_dim(&self) -> usize {
        embedding_dim(self.types, self.model_dim())
    }

    fn temporal_for(&self, type_index: usize) -> &TemporalEncoder {
        &self.temporal[if self.temporal.len() == 1 { 0 } else { type_index }]
    }

    /// Runs the encoders for `days` anchor days.
    pub fn encode_days(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[Tensor],
        days: usize,
        variant: Variant,
    ) -> DayNodes {
        let (n, m, d) = (self.types, self.regions, self.model_dim());
        let window = self.config.window;
        let mut rows = Vec::with_capacity(n);
        let mut pooled = Vec::with_capacity(n);
        for (l, tok) in tokens.iter().enumerate() {
            debug_assert_eq!(tok.rows, days * m * window);
            let x = g.input(tok.clone());
            let h = self.temporal_for(l).forward(g, store, x, window);
            if variant == Variant::NoCrossType {
                rows.push(h);
            } else {
                let (r, p) = self.spatial[l].forward(g, store, h);
                rows.push(r);
                pooled.push(p);
            }
        }
        let region_rows = g.concat_rows(rows);
        let e_inter = if variant == Variant::NoCrossType {
            g.input(Tensor::zeros(days, n * d))
        } else {
            // Type-major stack to day-major groups of `n` rows.
            let stacked = g.concat_rows(pooled);
            let idx = (0..days).flat_map(|b| (0..n).map(move |l| l * days + b)).collect();
            let grouped = g.gather_rows(stacked, idx);
            let (out, _) = self.inter.forward(g, store, grouped, n);
            g.reshape(out, days, n * d)
        };
        DayNodes { e_inter, region_rows }
    }

    /// Gathers `[e_inter, region row, intra]` for each request.
    pub fn assemble(
        &self,
        g: &mut Graph,
        day: DayNodes,
        days: usize,
        slots: &[(usize, usize, usize)],
        intra: &Tensor,
        inter_mask: Option<&Tensor>,
        variant: Variant,
    ) -> NodeId {
        let m = self.regions;
        let inter_idx = slots.iter().map(|&(b, _, _)| b).collect();
        let row_idx = slots.iter().map(|&(b, i, l)| l * days * m + b * m + i).collect();
        let mut e_inter = g.gather_rows(day.e_inter, inter_idx);
        if let Some(mask) = inter_mask {
            e_inter = g.mask(e_inter, mask.clone());
        }
        let region = g.gather_rows(day.region_rows, row_idx);
        let intra = if variant == Variant::NoVariation {
            Tensor::zeros(slots.len(), INTRA_WIDTH)
        } else {
            intra.clone()
        };
        let intra = g.input(intra);
        g.concat_cols(vec![e_inter, region, intra])
    }

    /// Full forward pass to `requests x 1` predictions in scaled units.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &BatchInputs, variant: Variant) -> Result<NodeId> {
        if batch.tokens.len() != self.types {
            return Err(Error::DimensionMismatch {
                expected: self.types,
                got: batch.tokens.len(),
            });
        }
        let day = self.encode_days(g, store, &batch.tokens, batch.days, variant);
        let e = self.assemble(
            g,
            day,
            batch.days,
            &batch.slots,
            &batch.intra,
            batch.inter_mask.as_ref(),
            variant,
        );
        self.head.forward(g, store, e)
    }

    /// Parameters a variant actually trains.
    pub fn params(&self, variant: Variant) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.temporal.iter().flat_map(|t| t.params()).collect();
        if variant != Variant::NoCrossType {
            p.extend(self.spatial.iter().flat_map(|s| s.params()));
            p.extend(self.inter.params());
        }
        p.extend(self.head.params());
        p
    }
}

/// `types * d` inter-type slots, `d` region-local slots and the intra triple.
pub fn embedding_dim(types: usize, model_dim: usize) -> usize {
    types * model_dim + model_dim + INTRA_WIDTH
}
