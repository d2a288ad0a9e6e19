//! Per-type Gaussian-process regression on request-level features.

use chrono::{Datelike, NaiveDate};
use log::warn;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ServiceRequest;
use crate::panel::Panel;

pub const DEFAULT_SUBSAMPLE_CAP: usize = 2000;
pub const LOW_CONFIDENCE_RECORDS: usize = 10;
pub const LENGTH_SCALE_GRID: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
const NEGATIVE_VARIANCE_WARN: f64 = -1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfKernel {
    pub length_scale: f64,
    pub signal_variance: f64,
}

impl RbfKernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal_variance * (-sq / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// Lower Cholesky factor of a dense SPD matrix, row-major `n x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let row_j = j * n;
            let s: f64 = l[row_j..row_j + j].iter().map(|v| v * v).sum();
            let diag = a[row_j + j] - s;
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite);
            }
            let djj = diag.sqrt();
            l[row_j + j] = djj;
            for i in j + 1..n {
                let row_i = i * n;
                let dot: f64 = (0..j).map(|k| l[row_i + k] * l[row_j + k]).sum();
                l[row_i + j] = (a[row_i + j] - dot) / djj;
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `L z = b` in place for `cols` right-hand sides stored row-major
    /// as an `n x cols` matrix.
    pub fn solve_lower_multi(&self, b: &mut [f64], cols: usize) {
        let n = self.n;
        for i in 0..n {
            let (done, rest) = b.split_at_mut(i * cols);
            let row_i = &mut rest[..cols];
            for j in 0..i {
                let lij = self.l[i * n + j];
                if lij != 0.0 {
                    let row_j = &done[j * cols..(j + 1) * cols];
                    for (x, y) in row_i.iter_mut().zip(row_j) {
                        *x -= lij * y;
                    }
                }
            }
            let d = self.l[i * n + i];
            for x in row_i.iter_mut() {
                *x /= d;
            }
        }
    }

    pub fn solve_lower(&self, b: &mut [f64]) {
        self.solve_lower_multi(b, 1);
    }

    /// Solves `L^T z = b` in place.
    pub fn solve_upper(&self, b: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n {
                s -= self.l[j * n + i] * b[j];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// Solves `A z = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut z = b.to_vec();
        self.solve_lower(&mut z);
        self.solve_upper(&mut z);
        z
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>()
    }
}

/// Fitted GP: training inputs, targets and the cached factorization.
#[derive(Debug, Clone)]
pub struct GprModel {
    /// `L x F`, row-major.
    pub x: Vec<f64>,
    pub features: usize,
    pub y: Vec<f64>,
    /// Constant prior mean; 0 for a plain fit.
    pub prior_mean: f64,
    pub kernel: RbfKernel,
    pub alpha: f64,
    chol: Cholesky,
    weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GprPrediction {
    pub mean: f64,
    pub variance: f64,
    /// True when the raw variance came out negative and was clamped.
    pub clamped: bool,
}

pub fn fit_gpr(x: &[f64], features: usize, y: &[f64], kernel: RbfKernel, alpha: f64) -> Result<GprModel> {
    fit_gpr_with_mean(x, features, y, 0.0, kernel, alpha)
}

/// Fits with a constant prior mean subtracted from the targets.
pub fn fit_gpr_with_mean(
    x: &[f64],
    features: usize,
    y: &[f64],
    prior_mean: f64,
    kernel: RbfKernel,
    alpha: f64,
) -> Result<GprModel> {
    let l = y.len();
    if l == 0 {
        return Err(Error::Precondition("GPR needs at least one training point".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Precondition(format!(
            "GPR noise alpha must be positive, got {alpha}"
        )));
    }
    if x.len() != l * features {
        return Err(Error::DimensionMismatch {
            expected: l * features,
            got: x.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("GPR training data".into()));
    }
    let mut k = vec![0.0; l * l];
    for i in 0..l {
        let xi = &x[i * features..(i + 1) * features];
        for j in 0..=i {
            let v = kernel.eval(xi, &x[j * features..(j + 1) * features]);
            k[i * l + j] = v;
            k[j * l + i] = v;
        }
        k[i * l + i] += alpha;
    }
    let chol = Cholesky::factor(&k, l)?;
    let centered: Vec<f64> = y.iter().map(|v| v - prior_mean).collect();
    let weights = chol.solve(&centered);
    Ok(GprModel {
        x: x.to_vec(),
        features,
        y: y.to_vec(),
        prior_mean,
        kernel,
        alpha,
        chol,
        weights,
    })
}

impl GprModel {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn cross(&self, xs: &[f64], cols: usize) -> Vec<f64> {
        // `L x cols` matrix of k(x_i, xs_c).
        let l = self.len();
        let f = self.features;
        let mut out = vec![0.0; l * cols];
        for i in 0..l {
            let xi = &self.x[i * f..(i + 1) * f];
            for c in 0..cols {
                out[i * cols + c] = self.kernel.eval(xi, &xs[c * f..(c + 1) * f]);
            }
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> Result<GprPrediction> {
        if x.len() != self.features {
            return Err(Error::DimensionMismatch {
                expected: self.features,
                got: x.len(),
            });
        }
        Ok(self.predict_many(x)?.remove(0))
    }

    /// Predicts for a row-major batch of query points.
    pub fn predict_many(&self, xs: &[f64]) -> Result<Vec<GprPrediction>> {
        let f = self.features;
        if xs.is_empty() || xs.len() % f != 0 {
            return Err(Error::DimensionMismatch {
                expected: f,
                got: xs.len(),
            });
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GPR query".into()));
        }
        let cols = xs.len() / f;
        let l = self.len();
        let mut ks = self.cross(xs, cols);
        let mut means = vec![self.prior_mean; cols];
        for i in 0..l {
            let w = self.weights[i];
            for (m, k) in means.iter_mut().zip(&ks[i * cols..(i + 1) * cols]) {
                *m += k * w;
            }
        }
        self.chol.solve_lower_multi(&mut ks, cols);
        let mut vv = vec![0.0; cols];
        for i in 0..l {
            for (acc, v) in vv.iter_mut().zip(&ks[i * cols..(i + 1) * cols]) {
                *acc += v * v;
            }
        }
        Ok(means
            .into_iter()
            .zip(vv)
            .map(|(mean, v)| {
                let raw = self.kernel.signal_variance - v;
                if raw < NEGATIVE_VARIANCE_WARN {
                    warn!("GPR variance {raw:.3e} below zero; consider a larger alpha");
                }
                GprPrediction {
                    mean,
                    variance: raw.max(0.0),
                    clamped: raw < 0.0,
                }
            })
            .collect())
    }

    /// Log marginal likelihood of the centered targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len() as f64;
        let fit: f64 = self
            .y
            .iter()
            .zip(&self.weights)
            .map(|(y, w)| (y - self.prior_mean) * w)
            .sum();
        -0.5 * fit - 0.5 * self.chol.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Which request features enter the GP input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GprConfig {
    pub region: bool,
    pub weekday: bool,
    pub season: bool,
    pub demand: bool,
    pub workload: bool,
    /// Length-scale on standardized features.
    pub length_scale: f64,
    /// Noise as a fraction of the target variance.
    pub alpha_fraction: f64,
    /// Choose the length-scale from a small grid by marginal likelihood.
    pub select_length_scale: bool,
    pub subsample_cap: usize,
}

impl Default for GprConfig {
    fn default() -> Self {
        Self {
            region: true,
            weekday: true,
            season: true,
            demand: true,
            workload: true,
            length_scale: 1.0,
            alpha_fraction: 0.1,
            select_length_scale: false,
            subsample_cap: DEFAULT_SUBSAMPLE_CAP,
        }
    }
}

impl GprConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0) || !(self.alpha_fraction > 0.0) || self.subsample_cap == 0 {
            return Err(Error::Config(
                "gpr length_scale, alpha_fraction and subsample_cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Feature layout plus the train statistics used to standardize the
/// continuous inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GprFeatures {
    pub config: GprConfig,
    pub regions: usize,
    pub demand_mean: f64,
    pub demand_std: f64,
    pub workload_mean: f64,
    pub workload_std: f64,
}

/// Raw per-request inputs to the feature map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestInputs {
    pub region: usize,
    pub date: NaiveDate,
    pub demand: f64,
    pub workload: f64,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count().max(1) as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-6))
}

impl GprFeatures {
    pub fn fit(config: &GprConfig, regions: usize, train: &[RequestInputs]) -> Self {
        let (demand_mean, demand_std) = mean_std(train.iter().map(|r| r.demand));
        let (workload_mean, workload_std) = mean_std(train.iter().map(|r| r.workload));
        Self {
            config: config.clone(),
            regions,
            demand_mean,
            demand_std,
            workload_mean,
            workload_std,
        }
    }

    pub fn dim(&self) -> usize {
        let c = &self.config;
        (if c.region { self.regions } else { 0 })
            + if c.weekday { 7 } else { 0 }
            + if c.season { 2 } else { 0 }
            + usize::from(c.demand)
            + usize::from(c.workload)
    }

    pub fn encode_into(&self, r: &RequestInputs, out: &mut Vec<f64>) {
        let c = &self.config;
        if c.region {
            out.extend((0..self.regions).map(|i| if i == r.region { 1.0 } else { 0.0 }));
        }
        if c.weekday {
            let wd = r.date.weekday().num_days_from_monday() as usize;
            out.extend((0..7).map(|i| if i == wd { 1.0 } else { 0.0 }));
        }
        if c.season {
            let angle = 2.0 * std::f64::consts::PI * (r.date.ordinal0() as f64) / 365.25;
            out.push(angle.sin());
            out.push(angle.cos());
        }
        if c.demand {
            out.push((r.demand - self.demand_mean) / self.demand_std);
        }
        if c.workload {
            out.push((r.workload - self.workload_mean) / self.workload_std);
        }
    }

    pub fn encode(&self, r: &RequestInputs) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        self.encode_into(r, &mut v);
        v
    }

    pub fn encode_all(&self, rows: &[RequestInputs]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() * rows.len());
        for r in rows {
            self.encode_into(r, &mut v);
        }
        v
    }
}

/// City-wide same-day volume of the request's type; zero outside the panel.
pub fn request_inputs(req: &ServiceRequest, type_index: usize, panel: &Panel, workload: f64) -> RequestInputs {
    let date = req.created_day();
    let off = panel.day_offset(date);
    let demand = if off >= 0 && (off as usize) < panel.days {
        panel.type_volume(type_index, off as usize)
    } else {
        0.0
    };
    RequestInputs {
        region: req.region_id,
        date,
        demand,
        workload,
    }
}

/// Keeps the most recent half of the cap and a seeded uniform sample of
/// the older records. `n` rows are assumed to be in chronological order.
pub fn subsample_indices(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let recent = cap / 2;
    let older = n - recent;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, older, cap - recent).into_vec();
    picked.sort_unstable();
    picked.extend(older..n);
    picked
}

/// A fitted type model, or the documented constant stand-in.
#[derive(Debug, Clone)]
pub enum TypePredictor {
    Gp(GprModel),
    Constant { mean: f64, variance: f64 },
}

#[derive(Debug, Clone)]
pub struct TypeGpr {
    pub predictor: TypePredictor,
    pub records: usize,
    pub low_confidence: bool,
}

impl TypeGpr {
    pub fn predict_many(&self, xs: &[f64], features: usize) -> Result<Vec<GprPrediction>> {
        match &self.predictor {
            TypePredictor::Gp(m) => m.predict_many(xs),
            TypePredictor::Constant { mean, variance } => Ok((0..xs.len() / features.max(1))
                .map(|_| GprPrediction {
                    mean: *mean,
                    variance: *variance,
                    clamped: false,
                })
                .collect()),
        }
    }
}

fn variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
}

/// Fits one type: prior mean = train mean, `s^2` = train variance,
/// `alpha = alpha_fraction * s^2`.
pub fn fit_type(x: &[f64], features: usize, y: &[f64], config: &GprConfig) -> Result<GprModel> {
    let mean = y.iter().sum::<f64>() / y.len().max(1) as f64;
    let s2 = variance(y).max(1e-6);
    let alpha = config.alpha_fraction * s2;
    let grid: Vec<f64> = if config.select_length_scale {
        LENGTH_SCALE_GRID.to_vec()
    } else {
        vec![config.length_scale]
    };
    let mut best: Option<GprModel> = None;
    for ell in grid {
        let kernel = RbfKernel {
            length_scale: ell,
            signal_variance: s2,
        };
        let m = fit_gpr_with_mean(x, features, y, mean, kernel, alpha)?;
        if best
            .as_ref()
            .is_none_or(|b| m.log_marginal_likelihood() > b.log_marginal_likelihood())
        {
            best = Some(m);
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// One model per vocabulary entry. `rows[t]` holds type `t`'s training
/// inputs in chronological order with their targets.
pub fn fit_all_types(features: &GprFeatures, rows: &[Vec<(RequestInputs, f64)>], seed: u64) -> Result<Vec<TypeGpr>> {
    let all_y: Vec<f64> = rows.iter().flatten().map(|(_, y)| *y).collect();
    let global_mean = if all_y.is_empty() {
        0.0
    } else {
        all_y.iter().sum::<f64>() / all_y.len() as f64
    };
    let global_var = if all_y.is_empty() { 1.0 } else { variance(&all_y) };
    let f = features.dim();
    let mut out = Vec::with_capacity(rows.len());
    for (t, type_rows) in rows.iter().enumerate() {
        if type_rows.is_empty() {
            warn!("type {t} has no training records; using a constant predictor");
            out.push(TypeGpr {
                predictor: TypePredictor::Constant {
                    mean: global_mean,
                    variance: global_var,
                },
                records: 0,
                low_confidence: true,
            });
            continue;
        }
        let keep = subsample_indices(type_rows.len(), features.config.subsample_cap, seed ^ (t as u64));
        let inputs: Vec<RequestInputs> = keep.iter().map(|&i| type_rows[i].0).collect();
        let y: Vec<f64> = keep.iter().map(|&i| type_rows[i].1).collect();
        let x = features.encode_all(&inputs);
        let model = fit_type(&x, f, &y, &features.config)?;
        out.push(TypeGpr {
            predictor: TypePredictor::Gp(model),
            records: type_rows.len(),
            low_confidence: type_rows.len() < LOW_CONFIDENCE_RECORDS,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn kernel(ell: f64, s2: f64) -> RbfKernel {
        RbfKernel {
            length_scale: ell,
            signal_variance: s2,
        }
    }

    /// Direct dense-inverse computation of mean and variance.
    fn dense_oracle(x: &[f64], f: usize, y: &[f64], k: RbfKernel, alpha: f64, q: &[f64]) -> (f64, f64) {
        let l = y.len();
        let km = DMatrix::from_fn(l, l, |i, j| {
            k.eval(&x[i * f..(i + 1) * f], &x[j * f..(j + 1) * f]) + if i == j { alpha } else { 0.0 }
        });
        let inv = km.try_inverse().unwrap();
        let ks = DVector::from_fn(l, |i, _| k.eval(&x[i * f..(i + 1) * f], q));
        let yv = DVector::from_column_slice(y);
        let mean = (ks.transpose() * &inv * yv)[(0, 0)];
        let var = k.eval(q, q) - (ks.transpose() * &inv * &ks)[(0, 0)];
        (mean, var)
    }

    fn random_set(l: usize, f: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..l * f).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = (0..l).map(|_| rng.random_range(0.0..10.0)).collect();
        (x, y)
    }

    #[test]
    fn interpolates_single_point_with_tiny_noise() {
        let m = fit_gpr(&[0.3, -1.0], 2, &[5.0], kernel(1.0, 1.0), 1e-12).unwrap();
        let p = m.predict(&[0.3, -1.0]).unwrap();
        assert!((p.mean - 5.0).abs() < 1e-6);
        assert!(p.variance < 1e-6);
    }

    #[test]
    fn two_point_closed_form() {
        let k = kernel(0.8, 2.0);
        let alpha = 0.3;
        let x = [0.0, 1.0];
        let y = [1.5, -0.5];
        let q = [0.4];
        let m = fit_gpr(&x, 1, &y, k, alpha).unwrap();
        let p = m.predict(&q).unwrap();

        let a = k.eval(&[0.0], &[0.0]) + alpha;
        let b = k.eval(&[0.0], &[1.0]);
        let d = k.eval(&[1.0], &[1.0]) + alpha;
        let det = a * d - b * b;
        let inv = [d / det, -b / det, -b / det, a / det];
        let ks = [k.eval(&[0.0], &q), k.eval(&[1.0], &q)];
        let w = [inv[0] * y[0] + inv[1] * y[1], inv[2] * y[0] + inv[3] * y[1]];
        let mean = ks[0] * w[0] + ks[1] * w[1];
        let quad = ks[0] * (inv[0] * ks[0] + inv[1] * ks[1]) + ks[1] * (inv[2] * ks[0] + inv[3] * ks[1]);
        assert!((p.mean - mean).abs() < 1e-8);
        assert!((p.variance - (2.0 - quad)).abs() < 1e-8);
    }

    #[test]
    fn far_point_recovers_prior() {
        let (x, y) = random_set(6, 3, 1);
        let m = fit_gpr(&x, 3, &y, kernel(1.0, 2.5), 0.1).unwrap();
        let p = m.predict(&[1e3, 1e3, 1e3]).unwrap();
        assert_eq!(p.mean, 0.0);
        assert_eq!(p.variance, 2.5);
    }

    #[test]
    fn smooth_function_residual_shrinks() {
        let x: Vec<f64> = (0..30).map(|i| i as f64 / 5.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v.sin() + 2.0).collect();
        let m = fit_gpr(&x, 1, &y, kernel(1.0, 1.0), 1e-2).unwrap();
        let pred = m.predict_many(&x).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let resid: f64 = y.iter().zip(&pred).map(|(a, p)| (a - p.mean).powi(2)).sum();
        let centered: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
        assert!(resid.sqrt() < centered.sqrt());
    }

    #[test]
    fn variance_grows_away_from_data() {
        let x = [0.0, 0.5, 1.0];
        let m = fit_gpr(&x, 1, &[1.0, 2.0, 1.5], kernel(0.5, 1.0), 0.01).unwrap();
        let at = m.predict(&[0.5]).unwrap().variance;
        let far = m.predict(&[5.0]).unwrap().variance;
        assert!(at <= far);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(fit_gpr(&[], 1, &[], kernel(1.0, 1.0), 0.1).is_err());
        assert!(fit_gpr(&[0.0], 1, &[1.0], kernel(1.0, 1.0), 0.0).is_err());
        let m = fit_gpr(&[0.0, 1.0], 2, &[1.0], kernel(1.0, 1.0), 0.1).unwrap();
        assert!(matches!(
            m.predict(&[0.0, 1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn subsample_keeps_recent_tail_and_is_seeded() {
        let a = subsample_indices(5000, 2000, 3);
        assert_eq!(a.len(), 2000);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(&a[1000..], &(4000..5000).collect::<Vec<_>>()[..]);
        assert_eq!(a, subsample_indices(5000, 2000, 3));
        assert_eq!(subsample_indices(10, 2000, 3), (0..10).collect::<Vec<_>>());
    }

    fn inputs(n: usize, seed: u64) -> Vec<(RequestInputs, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = NaiveDate::from_ymd_opt(2022, 1, 1).unwrap();
        (0..n)
            .map(|i| {
                (
                    RequestInputs {
                        region: rng.random_range(0..3),
                        date: start + chrono::Duration::days(i as i64),
                        demand: rng.random_range(0.0..20.0),
                        workload: rng.random_range(0.0..10.0),
                    },
                    rng.random_range(0.5..9.0),
                )
            })
            .collect()
    }

    #[test]
    fn fit_all_types_handles_empty_and_identical_types() {
        let a = inputs(40, 1);
        let rows = vec![a.clone(), Vec::new(), a.clone(), inputs(5, 2)];
        let flat: Vec<RequestInputs> = rows.iter().flatten().map(|r| r.0).collect();
        let feats = GprFeatures::fit(&GprConfig::default(), 3, &flat);
        assert_eq!(feats.dim(), 3 + 11);
        let models = fit_all_types(&feats, &rows, 9).unwrap();
        assert_eq!(models.len(), 4);
        assert!(matches!(models[1].predictor, TypePredictor::Constant { .. }));
        assert!(models[3].low_confidence && !models[0].low_confidence);
        let q = feats.encode_all(&inputs(3, 5).iter().map(|r| r.0).collect::<Vec<_>>());
        let p0 = models[0].predict_many(&q, feats.dim()).unwrap();
        let p2 = models[2].predict_many(&q, feats.dim()).unwrap();
        assert_eq!(p0, p2);
    }

    #[test]
    fn length_scale_selection_picks_from_grid() {
        let rows = inputs(60, 4);
        let flat: Vec<RequestInputs> = rows.iter().map(|r| r.0).collect();
        let cfg = GprConfig {
            select_length_scale: true,
            ..Default::default()
        };
        let feats = GprFeatures::fit(&cfg, 3, &flat);
        let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let m = fit_type(&feats.encode_all(&flat), feats.dim(), &y, &cfg).unwrap();
        assert!(LENGTH_SCALE_GRID.contains(&m.kernel.length_scale));
        for ell in LENGTH_SCALE_GRID {
            let other = fit_gpr_with_mean(
                &m.x,
                m.features,
                &y,
                m.prior_mean,
                RbfKernel {
                    length_scale: ell,
                    ..m.kernel
                },
                m.alpha,
            )
            .unwrap();
            assert!(other.log_marginal_likelihood() <= m.log_marginal_likelihood() + 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn matches_dense_inverse(l in 1usize..50, f in 1usize..5, seed in 0u64..1000, ell in 0.3f64..3.0, alpha in 0.01f64..1.0) {
            let (x, y) = random_set(l, f, seed);
            let k = kernel(ell, 1.7);
            let m = fit_gpr(&x, f, &y, k, alpha).unwrap();
            let (q, _) = random_set(1, f, seed + 7);
            let p = m.predict(&q).unwrap();
            let (mean, var) = dense_oracle(&x, f, &y, k, alpha, &q);
            prop_assert!((p.mean - mean).abs() < 1e-8, "{} vs {}", p.mean, mean);
            prop_assert!((p.variance - var.max(0.0)).abs() < 1e-8);
        }

        #[test]
        fn variance_bounds_and_linearity(l in 1usize..30, seed in 0u64..1000, alpha in 0.01f64..1.0) {
            let (x, y) = random_set(l, 2, seed);
            let k = kernel(1.0, 2.0);
            let m = fit_gpr(&x, 2, &y, k, alpha).unwrap();
            let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
            let m2 = fit_gpr(&x, 2, &y2, k, alpha).unwrap();
            let (q, _) = random_set(5, 2, seed + 1);
            let p = m.predict_many(&q).unwrap();
            let p2 = m2.predict_many(&q).unwrap();
            for (a, b) in p.iter().zip(&p2) {
                prop_assert!(a.variance >= 0.0 && a.variance <= 2.0 + alpha);
                prop_assert!((2.0 * a.mean - b.mean).abs() < 1e-9 * (1.0 + b.mean.abs()));
            }
        }

        #[test]
        fn duplicate_point_never_raises_variance(l in 1usize..20, seed in 0u64..1000, dup in 0usize..20) {
            let (x, y) = random_set(l, 2, seed);
            let k = kernel(1.0, 1.0);
            let m = fit_gpr(&x, 2, &y, k, 0.1).unwrap();
            let d = dup % l;
            let mut x2 = x.clone();
            x2.extend_from_slice(&x[d * 2..d * 2 + 2]);
            let mut y2 = y.clone();
            y2.push(y[d]);
            let m2 = fit_gpr(&x2, 2, &y2, k, 0.1).unwrap();
            let (q, _) = random_set(8, 2, seed + 3);
            for (a, b) in m.predict_many(&q).unwrap().iter().zip(m2.predict_many(&q).unwrap()) {
                prop_assert!(b.variance <= a.variance + 1e-12);
            }
        }

        #[test]
        fn kernel_column_consistency(l in 2usize..15, seed in 0u64..1000, pick in 0usize..15) {
            let (x, y) = random_set(l, 3, seed);
            let m = fit_gpr(&x, 3, &y, kernel(1.3, 1.0), 0.2).unwrap();
            let j = pick % l;
            let col = m.cross(&x[j * 3..j * 3 + 3], 1);
            for i in 0..l {
                prop_assert_eq!(col[i], m.kernel.eval(&x[i * 3..i * 3 + 3], &x[j * 3..j * 3 + 3]));
            }
        }
    }
}
