//! Service-time predictor: embedding assembly, the MLP head, training,
//! checkpoints and inference.

mod checkpoint;
mod data;
mod inference;
mod network;
mod train;

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpr::{GprFeatures, TypeGpr};
use crate::inter_type::InterTypeConfig;
use crate::nn::{ParamStore, Tensor};
use crate::panel::PanelStats;
use crate::st_encoder::{SpatialConfig, TemporalConfig};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use data::{prepare, DataConfig, Normalization, PreparedData, Sample};
pub use inference::{DayEncoding, PredictRequest, Predictor};
pub use network::{embedding_dim, BatchInputs, DayNodes, Mlp, Network};
pub use train::{predict_samples, train, EpochLog, TrainLog};

/// Width of the `[mean, variance, workload]` slot.
pub const INTRA_WIDTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    /// Each look-back window replaced by its mean token.
    #[serde(rename = "-t")]
    NoTemporal,
    /// Inter-type and spatial paths removed; the region slot carries the
    /// raw temporal state of the request's own (region, type).
    #[serde(rename = "-ct")]
    NoCrossType,
    /// Intra-type slot zeroed.
    #[serde(rename = "-v")]
    NoVariation,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoTemporal,
        Variant::NoCrossType,
        Variant::NoVariation,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTemporal => "-t",
            Variant::NoCrossType => "-ct",
            Variant::NoVariation => "-v",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().trim_start_matches('-') {
            "full" => Ok(Variant::Full),
            "t" => Ok(Variant::NoTemporal),
            "ct" => Ok(Variant::NoCrossType),
            "v" => Ok(Variant::NoVariation),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected full, -t, -ct or -v)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Softplus,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Look-back window in days.
    pub window: usize,
    pub temporal: TemporalConfig,
    pub spatial: SpatialConfig,
    pub inter: InterTypeConfig,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub output: OutputActivation,
    /// One temporal encoder for all types instead of one per type.
    pub share_temporal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 14,
            temporal: TemporalConfig::default(),
            spatial: SpatialConfig::default(),
            inter: InterTypeConfig::default(),
            hidden_width: 64,
            hidden_layers: 1,
            output: OutputActivation::Softplus,
            share_temporal: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, regions: usize) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::Config("hidden_width must be positive".into()));
        }
        self.temporal.validate()?;
        self.spatial.validate(regions)?;
        self.inter.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
    /// Dropout rate on the inter-type slot of the embedding during training.
    pub inter_dropout: f64,
    /// Target number of requests per step; whole days are kept together.
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Trailing share of training requests held out for early stopping.
    pub validation_fraction: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            weight_decay: 0.0,
            inter_dropout: 0.5,
            batch_size: 256,
            epochs: 200,
            patience: 10,
            validation_fraction: 0.1,
            seed: 42,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.inter_dropout) {
            return Err(Error::Config(format!(
                "inter_dropout must be in [0, 1), got {}",
                self.inter_dropout
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// GPR mean and variance with the request's workload score, in raw units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntraEmbedding {
    pub mean: f64,
    pub variance: f64,
    pub workload: f64,
}

impl IntraEmbedding {
    pub fn to_array(self) -> [f64; INTRA_WIDTH] {
        [self.mean, self.variance, self.workload]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub service_time_days: f64,
    pub components: IntraEmbedding,
    pub request_type: String,
    pub type_index: usize,
    pub region: usize,
    pub anchor_day: NaiveDate,
    /// True when the window history was unavailable and the GPR mean was
    /// returned on its own.
    pub fallback: bool,
}

/// Flat embedding `[e_inter (types*d), region row (d), intra (3)]`.
/// `intra` must already be standardized.
pub fn assemble_embedding(
    e_inter: &Tensor,
    region_row: &[f64],
    intra: [f64; INTRA_WIDTH],
    variant: Variant,
) -> Result<Vec<f64>> {
    if region_row.len() != e_inter.cols {
        return Err(Error::DimensionMismatch {
            expected: e_inter.cols,
            got: region_row.len(),
        });
    }
    let mut e = Vec::with_capacity(e_inter.len() + region_row.len() + INTRA_WIDTH);
    if variant == Variant::NoCrossType {
        e.extend(std::iter::repeat_n(0.0, e_inter.len()));
    } else {
        e.extend_from_slice(&e_inter.data);
    }
    e.extend_from_slice(region_row);
    if variant == Variant::NoVariation {
        e.extend([0.0; INTRA_WIDTH]);
    } else {
        e.extend(intra);
    }
    Ok(e)
}

/// Everything needed for inference, and what a checkpoint stores.
#[derive(Debug, Clone)]
pub struct ServiceTimeModel {
    pub manifest: ModelManifest,
    pub network: Network,
    pub store: ParamStore,
    pub gpr: Vec<TypeGpr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub type_vocabulary: Vec<String>,
    pub region_labels: Vec<String>,
    pub panel_stats: PanelStats,
    pub normalization: Normalization,
    pub gpr_features: GprFeatures,
    /// Train-period mean service time per type.
    pub type_means: Vec<f64>,
    pub best_epoch: usize,
}

impl ServiceTimeModel {
    pub fn variant(&self) -> Variant {
        self.manifest.train.variant
    }

    pub fn type_index(&self, label: &str) -> Result<usize> {
        self.manifest
            .type_vocabulary
            .iter()
            .position(|t| t == label)
            .ok_or_else(|| Error::UnknownType {
                label: label.to_string(),
                known: self.manifest.type_vocabulary.clone(),
            })
    }
}

#[cfg(test)]
mod tests;
