#![allow(dead_code)]

use std::collections::HashMap;

use servicetime::predictor::{prepare, train, DataConfig, ModelConfig, PreparedData, ServiceTimeModel, TrainConfig};
use servicetime::synth::{simulate, SimConfig, SimOutput};

/// Default simulator shrunk to `days`.
pub fn short_sim(days: usize) -> SimOutput {
    let cfg = SimConfig {
        horizon_days: days,
        ..Default::default()
    };
    simulate(&cfg).unwrap()
}

pub fn small_model(window: usize) -> ModelConfig {
    let mut m = ModelConfig {
        window,
        hidden_width: 16,
        ..Default::default()
    };
    m.temporal.model_dim = 8;
    m.temporal.heads = 2;
    m.inter.hidden = 8;
    m.inter.heads = 2;
    m
}

pub fn prepared(out: &SimOutput, window: usize) -> PreparedData {
    let cfg = DataConfig {
        window,
        ..Default::default()
    };
    prepare(&out.dataset(), &out.region_labels(), &HashMap::new(), &cfg).unwrap()
}

pub fn quick_model(out: &SimOutput, window: usize, epochs: usize) -> (PreparedData, ServiceTimeModel) {
    let data = prepared(out, window);
    let cfg = TrainConfig {
        epochs,
        patience: epochs,
        batch_size: 128,
        ..Default::default()
    };
    let (model, _) = train(&data, &small_model(window), &cfg).unwrap();
    (data, model)
}
