pub mod config;
pub mod error;
pub mod eval;
pub mod gpr;
pub mod ingest;
pub mod inter_type;
pub mod nn;
pub mod panel;
pub mod predictor;
pub mod service;
pub mod st_encoder;
pub mod synth;
pub mod workload;

pub use error::{Error, Result};
