//! Single-request inference over a frozen model and a serving panel.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use chrono::NaiveDateTime;

use super::train::day_tokens;
use super::{assemble_embedding, IntraEmbedding, Prediction, ServiceTimeModel};
use crate::error::{Error, Result};
use crate::gpr::RequestInputs;
use crate::nn::{Graph, Tensor};
use crate::panel::{standardize, Panel};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictRequest {
    pub created_at: NaiveDateTime,
    pub request_type: String,
    pub region: usize,
    pub workload: f64,
}

/// Encoder outputs for one anchor day.
#[derive(Debug, Clone, PartialEq)]
pub struct DayEncoding {
    /// `types x d`.
    pub e_inter: Tensor,
    /// `(types * regions) x d`, type-major.
    pub region_rows: Tensor,
}

/// A frozen model bound to a panel. Day encodings are cached; the model
/// itself is never mutated.
#[derive(Debug)]
pub struct Predictor {
    model: ServiceTimeModel,
    panel: Panel,
    standardized: Panel,
    cache: RwLock<HashMap<usize, Arc<DayEncoding>>>,
}

impl Predictor {
    pub fn new(model: ServiceTimeModel, panel: Panel) -> Result<Self> {
        let m = &model.manifest;
        if panel.types != m.type_vocabulary.len() || panel.regions != m.region_labels.len() {
            return Err(Error::Precondition(format!(
                "panel is {} regions x {} types, model expects {} x {}",
                panel.regions,
                panel.types,
                m.region_labels.len(),
                m.type_vocabulary.len()
            )));
        }
        let standardized = standardize(&panel, &m.panel_stats);
        Ok(Self {
            model,
            panel,
            standardized,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn model(&self) -> &ServiceTimeModel {
        &self.model
    }

    pub fn panel(&self) -> &Panel {
        &self.panel
    }

    /// Anchor days with a full window.
    pub fn servable_days(&self) -> std::ops::RangeInclusive<usize> {
        self.model.manifest.model.window..=self.panel.days
    }

    pub fn day_encoding(&self, day: usize) -> Result<Arc<DayEncoding>> {
        if let Some(e) = self.cache.read().expect("cache lock").get(&day) {
            return Ok(e.clone());
        }
        let net = &self.model.network;
        let variant = self.model.variant();
        let window = self.model.manifest.model.window;
        let blocks = day_tokens(&self.standardized, day, window, variant)?;
        let rows = net.regions * window;
        let tokens: Vec<Tensor> = blocks.into_iter().map(|b| Tensor::from_vec(rows, 2, b)).collect();
        let mut g = Graph::new();
        let nodes = net.encode_days(&mut g, &self.model.store, &tokens, 1, variant);
        let d = net.model_dim();
        let enc = Arc::new(DayEncoding {
            e_inter: Tensor::from_vec(net.types, d, g.value(nodes.e_inter).data.clone()),
            region_rows: g.value(nodes.region_rows).clone(),
        });
        self.cache.write().expect("cache lock").insert(day, enc.clone());
        Ok(enc)
    }

    /// Fills the encoding cache for every servable day.
    pub fn warm(&self) -> Result<()> {
        for day in self.servable_days() {
            self.day_encoding(day)?;
        }
        Ok(())
    }

    pub fn predict(&self, req: &PredictRequest) -> Result<Prediction> {
        let m = &self.model.manifest;
        let l = self.model.type_index(&req.request_type)?;
        let regions = m.region_labels.len();
        if req.region >= regions {
            return Err(Error::InvalidInput(format!(
                "region {} outside 0..{regions}",
                req.region
            )));
        }
        if !req.workload.is_finite() {
            return Err(Error::NonFinite("workload".into()));
        }
        let date = req.created_at.date();
        let anchor = self.panel.day_offset(date);
        let demand = if anchor >= 0 && (anchor as usize) < self.panel.days {
            self.panel.type_volume(l, anchor as usize)
        } else {
            0.0
        };
        let inputs = RequestInputs {
            region: req.region,
            date,
            demand,
            workload: req.workload,
        };
        let f = m.gpr_features.dim();
        let g = self.model.gpr[l].predict_many(&m.gpr_features.encode(&inputs), f)?[0];
        let intra = IntraEmbedding {
            mean: g.mean,
            variance: g.variance,
            workload: req.workload,
        };
        let mut out = Prediction {
            service_time_days: g.mean,
            components: intra,
            request_type: req.request_type.clone(),
            type_index: l,
            region: req.region,
            anchor_day: date,
            fallback: true,
        };
        let window = m.model.window;
        if anchor < window as i64 || anchor > self.panel.days as i64 {
            return Ok(out);
        }
        let enc = self.day_encoding(anchor as usize)?;
        let d = self.model.network.model_dim();
        let row = l * regions + req.region;
        let e = assemble_embedding(
            &enc.e_inter,
            &enc.region_rows.data[row * d..(row + 1) * d],
            m.normalization.intra(intra),
            self.model.variant(),
        )?;
        let mut graph = Graph::new();
        let x = graph.input(Tensor::row_vector(e));
        let y = self.model.network.head.forward(&mut graph, &self.model.store, x)?;
        out.service_time_days = graph.value(y).data[0] * m.normalization.target_scale;
        out.fallback = false;
        Ok(out)
    }
}
