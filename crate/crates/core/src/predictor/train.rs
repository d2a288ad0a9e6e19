//! Day-batched end-to-end training with early stopping.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Normalization, PreparedData, Sample};
use super::network::{BatchInputs, Network};
use super::{ModelConfig, ModelManifest, ServiceTimeModel, TrainConfig, Variant, INTRA_WIDTH};
use crate::error::{Error, Result};
use crate::nn::{Adam, Graph, ParamStore, Tensor};
use crate::panel::{cut_window, Panel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_samples: usize,
    pub validation_samples: usize,
}

/// Per-type `(regions * window) x 2` token blocks for one anchor day.
pub(crate) fn day_tokens(panel: &Panel, day: usize, window: usize, variant: Variant) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(panel.types);
    for l in 0..panel.types {
        let mut block = Vec::with_capacity(panel.regions * window * 2);
        for i in 0..panel.regions {
            let mut w = cut_window(panel, i, l, day, window)?;
            if variant == Variant::NoTemporal {
                w = w.mean_flattened();
            }
            for p in &w.seq {
                block.extend_from_slice(p);
            }
        }
        out.push(block);
    }
    Ok(out)
}

/// Stacks per-day token blocks, slots and standardized intra rows.
pub(crate) fn build_batch<'a>(
    days: &[(usize, &'a [Vec<f64>])],
    requests: &[Vec<(usize, usize, [f64; INTRA_WIDTH])>],
    types: usize,
    regions: usize,
    window: usize,
) -> BatchInputs {
    let mut tokens: Vec<Vec<f64>> = vec![Vec::new(); types];
    let mut slots = Vec::new();
    let mut intra = Vec::new();
    for (b, ((_, blocks), reqs)) in days.iter().zip(requests).enumerate() {
        for (l, block) in blocks.iter().enumerate() {
            tokens[l].extend_from_slice(block);
        }
        for &(region, l, x) in reqs {
            slots.push((b, region, l));
            intra.extend_from_slice(&x);
        }
    }
    let rows = days.len() * regions * window;
    BatchInputs {
        days: days.len(),
        tokens: tokens.into_iter().map(|t| Tensor::from_vec(rows, 2, t)).collect(),
        intra: Tensor::from_vec(slots.len(), INTRA_WIDTH, intra),
        slots,
        inter_mask: None,
    }
}

struct Bank {
    tokens: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl Bank {
    fn new(panel: &Panel, samples: &[&Sample], window: usize, variant: Variant) -> Result<Self> {
        let mut tokens = BTreeMap::new();
        for s in samples {
            if !tokens.contains_key(&s.day) {
                tokens.insert(s.day, day_tokens(panel, s.day, window, variant)?);
            }
        }
        Ok(Self { tokens })
    }

    fn batch(
        &self,
        days: &[usize],
        by_day: &BTreeMap<usize, Vec<&Sample>>,
        norm: &Normalization,
        types: usize,
        regions: usize,
        window: usize,
    ) -> (BatchInputs, Vec<f64>) {
        let blocks: Vec<(usize, &[Vec<f64>])> = days.iter().map(|d| (*d, self.tokens[d].as_slice())).collect();
        let reqs: Vec<Vec<(usize, usize, [f64; INTRA_WIDTH])>> = days
            .iter()
            .map(|d| {
                by_day[d]
                    .iter()
                    .map(|s| (s.region, s.type_index, norm.intra(s.intra)))
                    .collect()
            })
            .collect();
        let targets = days
            .iter()
            .flat_map(|d| by_day[d].iter().map(|s| s.target / norm.target_scale))
            .collect();
        (build_batch(&blocks, &reqs, types, regions, window), targets)
    }
}

fn group_by_day<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> BTreeMap<usize, Vec<&'a Sample>> {
    let mut m: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        m.entry(s.day).or_default().push(s);
    }
    m
}

/// Consecutive runs of `days` holding at least `batch_size` requests each
/// (the last may be smaller).
fn chunk_days(days: &[usize], by_day: &BTreeMap<usize, Vec<&Sample>>, batch_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut count = 0;
    for &d in days {
        cur.push(d);
        count += by_day[&d].len();
        if count >= batch_size {
            out.push(std::mem::take(&mut cur));
            count = 0;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Inverted-dropout mask: zeros with probability `p`, else `1 / (1 - p)`.
fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect(),
    )
}

/// Trains one variant on the prepared training samples.
pub fn train(
    data: &PreparedData,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ServiceTimeModel, TrainLog)> {
    config.validate()?;
    if model_config.window != data.config.window {
        return Err(Error::Config(format!(
            "model window {} differs from the prepared window {}",
            model_config.window, data.config.window
        )));
    }
    let variant = config.variant;
    let (types, regions, window) = (data.vocabulary.len(), data.region_labels.len(), model_config.window);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let network = Network::new(&mut store, model_config, regions, types, &mut rng)?;
    let params = network.params(variant);

    let all: Vec<&Sample> = data.train.iter().collect();
    let bank = Bank::new(&data.standardized, &all, window, variant)?;
    let by_day = group_by_day(all.iter().copied());
    let days: Vec<usize> = by_day.keys().copied().collect();
    let target_val = (config.validation_fraction * all.len() as f64).round() as usize;
    let mut split = days.len();
    let mut held = 0;
    while split > 1 && held < target_val {
        split -= 1;
        held += by_day[&days[split]].len();
    }
    let (fit_days, val_days) = days.split_at(split);
    let val_chunks = chunk_days(val_days, &by_day, config.batch_size);
    let norm = &data.normalization;

    let mut adam = Adam::new(&store, config.learning_rate);
    adam.weight_decay = config.weight_decay;
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle.set_stream(1);
    let mut dropout = ChaCha8Rng::seed_from_u64(config.seed);
    dropout.set_stream(2);
    let mut order = fit_days.to_vec();
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        train_samples: all.len() - held,
        validation_samples: held,
    };
    let mut best = (f64::INFINITY, store.clone());
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in chunk_days(&order, &by_day, config.batch_size) {
            let (mut batch, targets) = bank.batch(&chunk, &by_day, norm, types, regions, window);
            if config.inter_dropout > 0.0 && variant != Variant::NoCrossType {
                batch.inter_mask = Some(dropout_mask(
                    &mut dropout,
                    batch.slots.len(),
                    types * network.model_dim(),
                    config.inter_dropout,
                ));
            }
            let mut g = Graph::new();
            let pred = network.forward(&mut g, &store, &batch, variant)?;
            let loss = g.mse(pred, targets.clone());
            let value = g.value(loss).data[0];
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {value} at epoch {epoch} on days {}..={}",
                    chunk[0],
                    chunk[chunk.len() - 1]
                )));
            }
            let grads = g.backward(loss);
            let update: Vec<_> = grads
                .params()
                .iter()
                .filter(|(id, _)| params.contains(id))
                .cloned()
                .collect();
            adam.step(&mut store, &update);
            if !store.all_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite parameters after epoch {epoch} step"
                )));
            }
            total += value * targets.len() as f64;
            seen += targets.len();
        }
        let train_loss = total / seen.max(1) as f64;
        let validation_loss = if val_chunks.is_empty() {
            train_loss
        } else {
            let mut sse = 0.0;
            let mut n = 0usize;
            for chunk in &val_chunks {
                let (batch, targets) = bank.batch(chunk, &by_day, norm, types, regions, window);
                let mut g = Graph::new();
                let pred = network.forward(&mut g, &store, &batch, variant)?;
                for (p, t) in g.value(pred).data.iter().zip(&targets) {
                    sse += (p - t) * (p - t);
                }
                n += targets.len();
            }
            sse / n.max(1) as f64
        };
        debug!("epoch {epoch}: train {train_loss:.5} validation {validation_loss:.5}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            validation_loss,
        });
        if validation_loss < best.0 {
            best = (validation_loss, store.clone());
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    info!(
        "variant {variant}: best epoch {} of {} (validation loss {:.5})",
        log.best_epoch,
        log.epochs.len(),
        best.0
    );
    let manifest = ModelManifest {
        model: model_config.clone(),
        train: config.clone(),
        data: data.config.clone(),
        type_vocabulary: data.vocabulary.clone(),
        region_labels: data.region_labels.clone(),
        panel_stats: data.panel_stats.clone(),
        normalization: data.normalization.clone(),
        gpr_features: data.gpr_features.clone(),
        type_means: data.type_means.clone(),
        best_epoch: log.best_epoch,
    };
    Ok((
        ServiceTimeModel {
            manifest,
            network,
            store: best.1,
            gpr: data.gpr.clone(),
        },
        log,
    ))
}

/// Predicted service times in days for `samples`, using the prepared
/// (standardized) panel for the windows.
pub fn predict_samples(model: &ServiceTimeModel, data: &PreparedData, samples: &[Sample]) -> Result<Vec<f64>> {
    const DAYS_PER_BATCH: usize = 16;
    let variant = model.variant();
    let window = model.manifest.model.window;
    let (types, regions) = (model.network.types, model.network.regions);
    let refs: Vec<&Sample> = samples.iter().collect();
    let bank = Bank::new(&data.standardized, &refs, window, variant)?;
    let by_day = group_by_day(refs.iter().copied());
    let days: Vec<usize> = by_day.keys().copied().collect();
    let norm = &model.manifest.normalization;
    let mut by_request = std::collections::HashMap::with_capacity(samples.len());
    for chunk in days.chunks(DAYS_PER_BATCH) {
        let (batch, _) = bank.batch(chunk, &by_day, norm, types, regions, window);
        let mut g = Graph::new();
        let pred = model.network.forward(&mut g, &model.store, &batch, variant)?;
        let values = &g.value(pred).data;
        let mut k = 0;
        for d in chunk {
            for s in &by_day[d] {
                by_request.insert(s.request, values[k] * norm.target_scale);
                k += 1;
            }
        }
    }
    Ok(samples.iter().map(|s| by_request[&s.request]).collect())
}
