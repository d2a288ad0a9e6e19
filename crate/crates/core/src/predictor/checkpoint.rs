//! Single-file model archive.
//!
//! ```text
//! magic      8 bytes  "STMODEL1"
//! version    u32 LE
//! length     u64 LE   byte length of the JSON manifest
//! manifest   JSON     model manifest, parameter table, GPR table
//! blobs      f64 LE   parameter values and GPR training sets
//! ```
//!
//! Offsets in the manifest count `f64` values from the start of the blob
//! area. GPR models are stored as their training sets and refitted on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::Network;
use super::{ModelManifest, ServiceTimeModel};
use crate::error::{Error, Result};
use crate::gpr::{fit_gpr_with_mean, RbfKernel, TypeGpr, TypePredictor};
use crate::nn::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"STMODEL1";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum GprEntry {
    Gp {
        points: usize,
        features: usize,
        prior_mean: f64,
        length_scale: f64,
        signal_variance: f64,
        alpha: f64,
        x_offset: usize,
        y_offset: usize,
        records: usize,
        low_confidence: bool,
    },
    Constant {
        mean: f64,
        variance: f64,
        records: usize,
        low_confidence: bool,
    },
}

#[derive(Serialize, Deserialize)]
struct Archive {
    format_version: u32,
    crate_version: String,
    model: ModelManifest,
    params: Vec<ParamEntry>,
    gpr: Vec<GprEntry>,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &ServiceTimeModel) -> Result<()> {
    let mut blob: Vec<f64> = Vec::new();
    let params = model
        .store
        .iter()
        .map(|(_, name, t)| {
            let offset = blob.len();
            blob.extend_from_slice(&t.data);
            ParamEntry {
                name: name.to_string(),
                rows: t.rows,
                cols: t.cols,
                offset,
            }
        })
        .collect();
    let gpr = model
        .gpr
        .iter()
        .map(|g| match &g.predictor {
            TypePredictor::Gp(m) => {
                let x_offset = blob.len();
                blob.extend_from_slice(&m.x);
                let y_offset = blob.len();
                blob.extend_from_slice(&m.y);
                GprEntry::Gp {
                    points: m.len(),
                    features: m.features,
                    prior_mean: m.prior_mean,
                    length_scale: m.kernel.length_scale,
                    signal_variance: m.kernel.signal_variance,
                    alpha: m.alpha,
                    x_offset,
                    y_offset,
                    records: g.records,
                    low_confidence: g.low_confidence,
                }
            }
            TypePredictor::Constant { mean, variance } => GprEntry::Constant {
                mean: *mean,
                variance: *variance,
                records: g.records,
                low_confidence: g.low_confidence,
            },
        })
        .collect();
    let archive = Archive {
        format_version: CHECKPOINT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        model: model.manifest.clone(),
        params,
        gpr,
    };
    let json = serde_json::to_vec(&archive)?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut bytes = Vec::with_capacity(blob.len() * 8);
    for v in &blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ServiceTimeModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a model checkpoint".into()));
    }
    let mut u4 = [0u8; 4];
    r.read_exact(&mut u4)?;
    let version = u32::from_le_bytes(u4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut u8b = [0u8; 8];
    r.read_exact(&mut u8b)?;
    let len = u64::from_le_bytes(u8b) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
    let archive: Archive = serde_json::from_slice(&json)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(
            "blob area is not a whole number of f64 values".into(),
        ));
    }
    let blob: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let slice = |offset: usize, len: usize| -> Result<&[f64]> {
        blob.get(offset..offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("blob range {offset}+{len} out of bounds")))
    };

    let m = &archive.model;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let network = Network::new(
        &mut store,
        &m.model,
        m.region_labels.len(),
        m.type_vocabulary.len(),
        &mut rng,
    )?;
    if store.len() != archive.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameter tensors, architecture expects {}",
            archive.params.len(),
            store.len()
        )));
    }
    for p in &archive.params {
        let id = store
            .find(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", p.name)))?;
        let cur = store.value(id);
        if cur.shape() != (p.rows, p.cols) {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {}x{}, expected {}x{}",
                p.name, p.rows, p.cols, cur.rows, cur.cols
            )));
        }
        *store.value_mut(id) = Tensor::from_vec(p.rows, p.cols, slice(p.offset, p.rows * p.cols)?.to_vec());
    }
    let mut gpr = Vec::with_capacity(archive.gpr.len());
    for e in &archive.gpr {
        gpr.push(match e {
            GprEntry::Gp {
                points,
                features,
                prior_mean,
                length_scale,
                signal_variance,
                alpha,
                x_offset,
                y_offset,
                records,
                low_confidence,
            } => {
                let x = slice(*x_offset, points * features)?;
                let y = slice(*y_offset, *points)?;
                let kernel = RbfKernel {
                    length_scale: *length_scale,
                    signal_variance: *signal_variance,
                };
                TypeGpr {
                    predictor: TypePredictor::Gp(fit_gpr_with_mean(x, *features, y, *prior_mean, kernel, *alpha)?),
                    records: *records,
                    low_confidence: *low_confidence,
                }
            }
            GprEntry::Constant {
                mean,
                variance,
                records,
                low_confidence,
            } => TypeGpr {
                predictor: TypePredictor::Constant {
                    mean: *mean,
                    variance: *variance,
                },
                records: *records,
                low_confidence: *low_confidence,
            },
        });
    }
    if gpr.len() != m.type_vocabulary.len() {
        return Err(Error::Checkpoint("GPR table does not match the type vocabulary".into()));
    }
    Ok(ServiceTimeModel {
        manifest: archive.model,
        network,
        store,
        gpr,
    })
}

pub fn save_checkpoint(path: &Path, model: &ServiceTimeModel) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), model)
}

pub fn load_checkpoint(path: &Path) -> Result<ServiceTimeModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
