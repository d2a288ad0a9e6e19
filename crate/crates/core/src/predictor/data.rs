//! Turns a dataset into model-ready samples: panel, GPR features with
//! out-of-fold predictions for training requests, and normalization.

use std::collections::HashMap;

use chrono::NaiveDateTime;
use log::info;
use serde::{Deserialize, Serialize};

use super::{IntraEmbedding, INTRA_WIDTH};
use crate::error::{Error, Result};
use crate::gpr::{fit_all_types, request_inputs, GprConfig, GprFeatures, GprPrediction, RequestInputs, TypeGpr};
use crate::ingest::{split_boundary, vocabulary_index, Dataset};
use crate::panel::{build_panel_with_fallback, standardize, train_type_means, Panel, PanelStats};
use crate::workload::fallback_score;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_fraction: f64,
    pub window: usize,
    pub gpr: GprConfig,
    /// Contiguous folds for out-of-fold GPR features on training requests;
    /// 0 or 1 uses the in-sample fit.
    pub gpr_folds: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            window: 14,
            gpr: GprConfig::default(),
            gpr_folds: 5,
            seed: 42,
        }
    }
}

/// Train-set statistics for the intra slot and the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub intra_mean: [f64; INTRA_WIDTH],
    pub intra_std: [f64; INTRA_WIDTH],
    /// Targets are divided by this before training.
    pub target_scale: f64,
}

impl Normalization {
    pub fn intra(&self, e: IntraEmbedding) -> [f64; INTRA_WIDTH] {
        let raw = e.to_array();
        std::array::from_fn(|k| (raw[k] - self.intra_mean[k]) / self.intra_std[k])
    }
}

/// One completed request with a full look-back window.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index into the dataset's requests.
    pub request: usize,
    /// Panel day of creation, used as the anchor.
    pub day: usize,
    pub region: usize,
    pub type_index: usize,
    pub intra: IntraEmbedding,
    pub target: f64,
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub config: DataConfig,
    pub vocabulary: Vec<String>,
    pub region_labels: Vec<String>,
    pub boundary: NaiveDateTime,
    pub panel: Panel,
    pub panel_stats: PanelStats,
    pub standardized: Panel,
    pub gpr_features: GprFeatures,
    pub gpr: Vec<TypeGpr>,
    pub type_means: Vec<f64>,
    pub normalization: Normalization,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Completed requests dropped for lack of window history.
    pub skipped: usize,
}

/// Workload score of a request: the supplied score, else the keyword
/// fallback on its description (0 when missing).
fn workload_of(id: &str, description: Option<&str>, scores: &HashMap<String, f64>) -> f64 {
    scores
        .get(id)
        .copied()
        .unwrap_or_else(|| description.map_or(0.0, fallback_score))
}

/// Splits chronologically and builds every model input from the training
/// period only.
pub fn prepare(
    ds: &Dataset,
    region_labels: &[String],
    workloads: &HashMap<String, f64>,
    config: &DataConfig,
) -> Result<PreparedData> {
    config.gpr.validate()?;
    if config.window == 0 {
        return Err(Error::Config("window must be positive".into()));
    }
    let regions = region_labels.len();
    let boundary = split_boundary(ds, config.train_fraction)?;
    let mut split = ds.clone();
    split.split_boundary = Some(boundary);
    let type_means = train_type_means(&split);
    let vocab = ds.type_vocabulary.clone();
    let panel = build_panel_with_fallback(ds, regions, &vocab, &type_means, None)?;
    let train_days = panel.day_offset(boundary.date()).max(0) as usize;
    let panel_stats = PanelStats::compute(&panel, train_days);
    let standardized = standardize(&panel, &panel_stats);

    let lookup = vocabulary_index(&vocab);
    let n = vocab.len();
    // (request index, inputs, target) per type, chronological.
    let mut train_rows: Vec<Vec<(usize, RequestInputs, f64)>> = vec![Vec::new(); n];
    let mut test_rows: Vec<(usize, usize, RequestInputs, f64)> = Vec::new();
    for (k, req) in ds.requests.iter().enumerate() {
        let (Some(&l), Some(y)) = (lookup.get(req.request_type.as_str()), req.service_time_days) else {
            continue;
        };
        let w = workload_of(&req.request_id, req.description.as_deref(), workloads);
        let inputs = request_inputs(req, l, &panel, w);
        if req.created_at < boundary {
            train_rows[l].push((k, inputs, y));
        } else {
            test_rows.push((k, l, inputs, y));
        }
    }
    let all_train: Vec<RequestInputs> = train_rows.iter().flatten().map(|r| r.1).collect();
    if all_train.is_empty() {
        return Err(Error::Precondition(
            "no completed requests in the training period".into(),
        ));
    }
    let gpr_features = GprFeatures::fit(&config.gpr, regions, &all_train);
    let fit_rows: Vec<Vec<(RequestInputs, f64)>> = train_rows
        .iter()
        .map(|rows| rows.iter().map(|(_, x, y)| (*x, *y)).collect())
        .collect();
    let gpr = fit_all_types(&gpr_features, &fit_rows, config.seed)?;
    info!("fitted {} type GPR models", gpr.len());

    let oof = std::thread::scope(|s| {
        let handles: Vec<_> = fit_rows
            .iter()
            .enumerate()
            .map(|(l, rows)| {
                let (feat, model) = (&gpr_features, &gpr[l]);
                s.spawn(move || out_of_fold(feat, model, rows, config.gpr_folds, config.seed ^ ((l as u64) << 8)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gpr worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;

    let f = gpr_features.dim();
    let mut skipped = 0;
    let mut train = Vec::new();
    for (l, rows) in train_rows.iter().enumerate() {
        for ((k, inputs, y), p) in rows.iter().zip(&oof[l]) {
            if let Some(s) = sample(ds, &panel, config.window, *k, l, inputs, *p, *y) {
                train.push(s);
            } else {
                skipped += 1;
            }
        }
    }
    train.sort_by_key(|s| s.request);
    let mut test = Vec::new();
    for l in 0..n {
        let rows: Vec<&(usize, usize, RequestInputs, f64)> = test_rows.iter().filter(|r| r.1 == l).collect();
        if rows.is_empty() {
            continue;
        }
        let xs = gpr_features.encode_all(&rows.iter().map(|r| r.2).collect::<Vec<_>>());
        let preds = gpr[l].predict_many(&xs, f)?;
        for (r, p) in rows.iter().zip(preds) {
            if let Some(s) = sample(ds, &panel, config.window, r.0, l, &r.2, p, r.3) {
                test.push(s);
            } else {
                skipped += 1;
            }
        }
    }
    test.sort_by_key(|s| s.request);
    if train.is_empty() {
        return Err(Error::Precondition(format!(
            "no training request has {} days of history",
            config.window
        )));
    }
    let normalization = normalization(&train);
    Ok(PreparedData {
        config: config.clone(),
        vocabulary: vocab,
        region_labels: region_labels.to_vec(),
        boundary,
        panel,
        panel_stats,
        standardized,
        gpr_features,
        gpr,
        type_means,
        normalization,
        train,
        test,
        skipped,
    })
}

#[allow(clippy::too_many_arguments)]
fn sample(
    ds: &Dataset,
    panel: &Panel,
    window: usize,
    k: usize,
    l: usize,
    inputs: &RequestInputs,
    p: GprPrediction,
    y: f64,
) -> Option<Sample> {
    let day = panel.day_offset(ds.requests[k].created_day());
    if day < window as i64 || day > panel.days as i64 {
        return None;
    }
    Some(Sample {
        request: k,
        day: day as usize,
        region: inputs.region,
        type_index: l,
        intra: IntraEmbedding {
            mean: p.mean,
            variance: p.variance,
            workload: inputs.workload,
        },
        target: y,
    })
}

/// GPR predictions for each training row from a model that did not see
/// the row's contiguous fold.
fn out_of_fold(
    features: &GprFeatures,
    full: &TypeGpr,
    rows: &[(RequestInputs, f64)],
    folds: usize,
    seed: u64,
) -> Result<Vec<GprPrediction>> {
    let f = features.dim();
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let all_x = features.encode_all(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
    if folds < 2 || rows.len() < 2 * folds {
        return full.predict_many(&all_x, f);
    }
    let mut out = Vec::with_capacity(rows.len());
    for k in 0..folds {
        let lo = k * rows.len() / folds;
        let hi = (k + 1) * rows.len() / folds;
        let rest: Vec<(RequestInputs, f64)> = rows[..lo].iter().chain(&rows[hi..]).copied().collect();
        let model = fit_all_types(features, &[rest], seed.wrapping_add(k as u64))?.remove(0);
        out.extend(model.predict_many(&all_x[lo * f..hi * f], f)?);
    }
    Ok(out)
}

fn normalization(train: &[Sample]) -> Normalization {
    let n = train.len() as f64;
    let mut mean = [0.0; INTRA_WIDTH];
    let mut sq = [0.0; INTRA_WIDTH];
    let mut y2 = 0.0;
    for s in train {
        for (k, v) in s.intra.to_array().into_iter().enumerate() {
            mean[k] += v / n;
        }
        y2 += s.target * s.target;
    }
    for s in train {
        for (k, v) in s.intra.to_array().into_iter().enumerate() {
            sq[k] += (v - mean[k]).powi(2) / n;
        }
    }
    let ybar = train.iter().map(|s| s.target).sum::<f64>() / n;
    let var = (y2 / n - ybar * ybar).max(0.0);
    Normalization {
        intra_mean: mean,
        intra_std: sq.map(|v| v.sqrt().max(1e-6)),
        target_scale: if var.sqrt() > 1e-6 {
            var.sqrt()
        } else {
            ybar.abs().max(1.0)
        },
    }
}
