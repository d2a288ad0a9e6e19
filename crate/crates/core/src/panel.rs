//! Daily region x type panel of request volume and mean service time.
//!
//! Binary layout written by [`Panel::write_to`] (all little endian):
//!
//! ```text
//! magic      8 bytes  "STPANEL1"
//! regions    u32
//! types      u32
//! days       u32
//! start      i32      days since 0001-01-01 (proleptic Gregorian, CE day 1)
//! r          f64 x regions*types*days
//! d          f64 x regions*types*days
//! mask       u8  x regions*types*days   (0 or 1)
//! ```
//!
//! Cells are ordered region-major, then type, then day.

use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Dataset;

/// Trailing window used to impute empty cells.
pub const IMPUTE_WINDOW_DAYS: usize = 28;
const STD_FLOOR: f64 = 1e-6;
const MAGIC: &[u8; 8] = b"STPANEL1";

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub start: NaiveDate,
    pub regions: usize,
    pub types: usize,
    pub days: usize,
    /// Request counts.
    pub r: Vec<f64>,
    /// Mean service time in days (imputed where `mask` is false).
    pub d: Vec<f64>,
    /// True where at least one completed request was observed.
    pub mask: Vec<bool>,
}

impl Panel {
    #[inline]
    pub fn index(&self, region: usize, type_index: usize, day: usize) -> usize {
        (region * self.types + type_index) * self.days + day
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start + chrono::Duration::days(day as i64)
    }

    /// Day offset of `date` from the panel start (may be negative or past the end).
    pub fn day_offset(&self, date: NaiveDate) -> i64 {
        (date - self.start).num_days()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        (0..self.days).map(|t| self.date(t)).collect()
    }

    pub fn r_at(&self, region: usize, type_index: usize, day: usize) -> f64 {
        self.r[self.index(region, type_index, day)]
    }

    pub fn d_at(&self, region: usize, type_index: usize, day: usize) -> f64 {
        self.d[self.index(region, type_index, day)]
    }

    pub fn observed(&self, region: usize, type_index: usize, day: usize) -> bool {
        self.mask[self.index(region, type_index, day)]
    }

    /// City-wide request count of a type on a day.
    pub fn type_volume(&self, type_index: usize, day: usize) -> f64 {
        (0..self.regions).map(|i| self.r_at(i, type_index, day)).sum()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.regions, self.types, self.days] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.start.num_days_from_ce().to_le_bytes())?;
        for v in self.r.iter().chain(&self.d) {
            w.write_all(&v.to_le_bytes())?;
        }
        let mask: Vec<u8> = self.mask.iter().map(|&m| m as u8).collect();
        w.write_all(&mask)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::InvalidInput("not a panel file".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            r.read_exact(&mut u32buf)?;
            *d = u32::from_le_bytes(u32buf) as usize;
        }
        r.read_exact(&mut u32buf)?;
        let start = NaiveDate::from_num_days_from_ce_opt(i32::from_le_bytes(u32buf))
            .ok_or_else(|| Error::InvalidInput("bad panel start date".into()))?;
        let n = dims[0] * dims[1] * dims[2];
        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let rv = read_f64s(n)?;
        let dv = read_f64s(n)?;
        let mut mask = vec![0u8; n];
        r.read_exact(&mut mask)?;
        Ok(Self {
            start,
            regions: dims[0],
            types: dims[1],
            days: dims[2],
            r: rv,
            d: dv,
            mask: mask.into_iter().map(|m| m != 0).collect(),
        })
    }
}

/// Global mean service time per type over the training period of `ds`
/// (records before the split boundary, or all records when unset).
/// Types without any completed training record fall back to the overall mean.
pub fn train_type_means(ds: &Dataset) -> Vec<f64> {
    train_type_means_for(ds, &ds.type_vocabulary)
}

fn train_type_means_for(ds: &Dataset, vocab: &[String]) -> Vec<f64> {
    let lookup = crate::ingest::vocabulary_index(vocab);
    let n = vocab.len();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for r in ds.train_requests() {
        if let (Some(&l), Some(s)) = (lookup.get(r.request_type.as_str()), r.service_time_days) {
            sum[l] += s;
            count[l] += 1;
        }
    }
    let total: f64 = sum.iter().sum();
    let total_n: usize = count.iter().sum();
    let overall = if total_n > 0 { total / total_n as f64 } else { 0.0 };
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { overall })
        .collect()
}

/// Aggregates requests into a panel spanning the first to the last created day.
///
/// Empty cells take the trailing 28-day request-weighted mean of the same
/// (region, type); when no history exists yet, the training-period mean of
/// the type.
pub fn build_panel(ds: &Dataset, region_count: usize, type_vocabulary: &[String]) -> Result<Panel> {
    let fallback = train_type_means_for(ds, type_vocabulary);
    build_panel_with_fallback(ds, region_count, type_vocabulary, &fallback, None)
}

/// Like [`build_panel`] with explicit imputation fallbacks and an optional
/// end date (inclusive) to extend the panel past the last request.
pub fn build_panel_with_fallback(
    ds: &Dataset,
    region_count: usize,
    type_vocabulary: &[String],
    fallback_means: &[f64],
    through: Option<NaiveDate>,
) -> Result<Panel> {
    if ds.is_empty() {
        return Err(Error::Precondition("cannot build a panel from an empty dataset".into()));
    }
    if region_count == 0 {
        return Err(Error::Precondition("region count must be positive".into()));
    }
    let types = type_vocabulary.len();
    let lookup = crate::ingest::vocabulary_index(type_vocabulary);
    let start = ds.requests.iter().map(|r| r.created_day()).min().unwrap();
    let mut end = ds.requests.iter().map(|r| r.created_day()).max().unwrap();
    if let Some(t) = through {
        end = end.max(t);
    }
    let days = (end - start).num_days() as usize + 1;
    let cells = region_count * types * days;
    let mut panel = Panel {
        start,
        regions: region_count,
        types,
        days,
        r: vec![0.0; cells],
        d: vec![0.0; cells],
        mask: vec![false; cells],
    };
    let mut sums = vec![0.0; cells];
    let mut counts = vec![0.0; cells];
    for req in &ds.requests {
        let l = *lookup
            .get(req.request_type.as_str())
            .ok_or_else(|| Error::UnknownType {
                label: req.request_type.clone(),
                known: type_vocabulary.to_vec(),
            })?;
        if req.region_id >= region_count {
            return Err(Error::InvalidInput(format!(
                "region id {} out of range for {region_count} regions",
                req.region_id
            )));
        }
        let t = (req.created_day() - start).num_days() as usize;
        let idx = panel.index(req.region_id, l, t);
        panel.r[idx] += 1.0;
        if let Some(s) = req.service_time_days {
            sums[idx] += s;
            counts[idx] += 1.0;
        }
    }
    for i in 0..region_count {
        for l in 0..types {
            let base = panel.index(i, l, 0);
            let (mut win_sum, mut win_count) = (0.0, 0.0);
            for t in 0..days {
                let idx = base + t;
                if counts[idx] > 0.0 {
                    panel.d[idx] = sums[idx] / counts[idx];
                    panel.mask[idx] = true;
                } else if win_count > 0.0 {
                    panel.d[idx] = win_sum / win_count;
                } else {
                    panel.d[idx] = fallback_means.get(l).copied().unwrap_or(0.0);
                }
                win_sum += sums[idx];
                win_count += counts[idx];
                if t >= IMPUTE_WINDOW_DAYS {
                    win_sum -= sums[idx - IMPUTE_WINDOW_DAYS];
                    win_count -= counts[idx - IMPUTE_WINDOW_DAYS];
                }
            }
        }
    }
    Ok(panel)
}

/// Look-back sequence of `[r, d]` pairs for one (region, type).
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub region: usize,
    pub type_index: usize,
    pub anchor: usize,
    /// Oldest first; covers days `anchor - T .. anchor - 1`.
    pub seq: Vec<[f64; 2]>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    /// Every token replaced by the window's mean token.
    pub fn mean_flattened(&self) -> Window {
        let n = self.seq.len().max(1) as f64;
        let mean = self
            .seq
            .iter()
            .fold([0.0, 0.0], |acc, p| [acc[0] + p[0] / n, acc[1] + p[1] / n]);
        Window {
            seq: vec![mean; self.seq.len()],
            ..self.clone()
        }
    }
}

pub fn cut_window(panel: &Panel, region: usize, type_index: usize, anchor: usize, window: usize) -> Result<Window> {
    if anchor < window || anchor > panel.days {
        return Err(Error::InsufficientHistory {
            anchor: anchor as i64,
            window,
        });
    }
    if region >= panel.regions || type_index >= panel.types {
        return Err(Error::InvalidInput(format!(
            "cell ({region}, {type_index}) outside panel"
        )));
    }
    let seq = (anchor - window..anchor)
        .map(|t| [panel.r_at(region, type_index, t), panel.d_at(region, type_index, t)])
        .collect();
    Ok(Window {
        region,
        type_index,
        anchor,
        seq,
    })
}

/// Per-type standardization statistics of both channels, computed on
/// training days only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelStats {
    pub r_mean: Vec<f64>,
    pub r_std: Vec<f64>,
    pub d_mean: Vec<f64>,
    pub d_std: Vec<f64>,
}

impl PanelStats {
    /// Statistics over days `0 .. train_days`. Imputed `d` values are excluded.
    pub fn compute(panel: &Panel, train_days: usize) -> Self {
        let train_days = train_days.min(panel.days);
        let n = panel.types;
        let mut stats = Self {
            r_mean: vec![0.0; n],
            r_std: vec![1.0; n],
            d_mean: vec![0.0; n],
            d_std: vec![1.0; n],
        };
        for l in 0..n {
            let mut rs = Vec::new();
            let mut ds = Vec::new();
            for i in 0..panel.regions {
                for t in 0..train_days {
                    let idx = panel.index(i, l, t);
                    rs.push(panel.r[idx]);
                    if panel.mask[idx] {
                        ds.push(panel.d[idx]);
                    }
                }
            }
            (stats.r_mean[l], stats.r_std[l]) = mean_std(&rs);
            (stats.d_mean[l], stats.d_std[l]) = mean_std(&ds);
        }
        stats
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

/// Z-scores both channels per type.
pub fn standardize(panel: &Panel, stats: &PanelStats) -> Panel {
    map_channels(panel, |l, r, d| {
        (
            (r - stats.r_mean[l]) / stats.r_std[l].max(STD_FLOOR),
            (d - stats.d_mean[l]) / stats.d_std[l].max(STD_FLOOR),
        )
    })
}

pub fn inverse_standardize(panel: &Panel, stats: &PanelStats) -> Panel {
    map_channels(panel, |l, r, d| {
        (
            r * stats.r_std[l].max(STD_FLOOR) + stats.r_mean[l],
            d * stats.d_std[l].max(STD_FLOOR) + stats.d_mean[l],
        )
    })
}

fn map_channels(panel: &Panel, f: impl Fn(usize, f64, f64) -> (f64, f64)) -> Panel {
    let mut out = panel.clone();
    for i in 0..panel.regions {
        for l in 0..panel.types {
            for t in 0..panel.days {
                let idx = panel.index(i, l, t);
                let (r, d) = f(l, panel.r[idx], panel.d[idx]);
                out.r[idx] = r;
                out.d[idx] = d;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_timestamp, ServiceRequest};

    fn req(day: u32, region: usize, ty: &str, service: Option<f64>) -> ServiceRequest {
        let created = parse_timestamp(&format!("2023-01-{:02} 10:00", day)).unwrap();
        ServiceRequest {
            request_id: format!("{day}-{region}-{ty}-{service:?}"),
            created_at: created,
            completed_at: service.map(|s| created + chrono::Duration::seconds((s * 86400.0) as i64)),
            department: "D".into(),
            request_type: ty.into(),
            longitude: 0.0,
            latitude: 0.0,
            region_id: region,
            description: None,
            service_time_days: service,
        }
    }

    fn vocab() -> Vec<String> {
        vec!["A".into(), "B".into()]
    }

    #[test]
    fn aggregates_counts_and_means() {
        let ds = Dataset::new(
            vec![
                req(1, 0, "A", Some(2.0)),
                req(1, 0, "A", Some(4.0)),
                req(2, 1, "B", Some(7.5)),
            ],
            vocab(),
        );
        let p = build_panel(&ds, 2, &vocab()).unwrap();
        assert_eq!(p.days, 2);
        assert_eq!(
            (p.r_at(0, 0, 0), p.d_at(0, 0, 0), p.observed(0, 0, 0)),
            (2.0, 3.0, true)
        );
        assert_eq!((p.r_at(1, 1, 1), p.d_at(1, 1, 1)), (1.0, 7.5));
        assert_eq!(p.r.iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn empty_cell_takes_trailing_mean_then_type_mean() {
        let mut reqs = vec![req(1, 0, "A", Some(4.0)), req(2, 0, "A", Some(6.0))];
        reqs.push(req(20, 1, "B", Some(1.0)));
        let ds = Dataset::new(reqs, vocab());
        let p = build_panel(&ds, 2, &vocab()).unwrap();
        // day 3 for (0, A): trailing mean of 4 and 6
        assert!(!p.observed(0, 0, 2));
        assert_eq!(p.r_at(0, 0, 2), 0.0);
        assert_eq!(p.d_at(0, 0, 2), 5.0);
        // (1, A) never observed: global type mean
        assert_eq!(p.d_at(1, 0, 0), 5.0);
        // trailing window expires after 28 days
        let far = Dataset::new(vec![req(1, 0, "A", Some(4.0)), req(31, 0, "B", Some(1.0))], vocab());
        let p = build_panel(&far, 1, &vocab()).unwrap();
        assert_eq!(p.d_at(0, 0, 28), 4.0);
        assert_eq!(p.d_at(0, 0, 29), 4.0, "falls back to type mean");
    }

    #[test]
    fn unknown_type_is_an_error() {
        let ds = Dataset::new(vec![req(1, 0, "Pony Rides", Some(1.0))], vocab());
        assert!(matches!(build_panel(&ds, 1, &vocab()), Err(Error::UnknownType { .. })));
    }

    fn long_panel() -> Panel {
        let reqs: Vec<_> = (1..=28).map(|d| req(d, 0, "A", Some(d as f64))).collect();
        build_panel(&Dataset::new(reqs, vocab()), 1, &vocab()).unwrap()
    }

    #[test]
    fn window_index_arithmetic() {
        let p = long_panel();
        let w = cut_window(&p, 0, 0, 20, 14).unwrap();
        assert_eq!(w.seq.len(), 14);
        assert_eq!(w.seq[0][1], 7.0, "day index 6 holds day-7 data");
        assert_eq!(w.seq[13][1], 20.0);
        let w7 = cut_window(&p, 0, 0, 7, 7).unwrap();
        assert_eq!(w7.seq[0][1], 1.0);
        assert!(matches!(
            cut_window(&p, 0, 0, 10, 14),
            Err(Error::InsufficientHistory { .. })
        ));
        let a = cut_window(&p, 0, 0, 15, 7).unwrap();
        let b = cut_window(&p, 0, 0, 16, 7).unwrap();
        assert_eq!(a.seq[1..], b.seq[..6]);
    }

    #[test]
    fn standardization_examples() {
        let p = long_panel();
        let stats = PanelStats {
            r_mean: vec![4.0, 0.0],
            r_std: vec![2.0, 1.0],
            d_mean: vec![0.0, 0.0],
            d_std: vec![1.0, 1.0],
        };
        let mut p8 = p.clone();
        p8.r[0] = 8.0;
        assert_eq!(standardize(&p8, &stats).r[0], 2.0);

        let computed = PanelStats::compute(&p, p.days);
        assert_eq!(computed.r_std[0], 1e-6, "constant r channel is floored");
        let z = standardize(&p, &computed);
        assert!(z.r[..p.days].iter().all(|v| *v == 0.0));

        let back = inverse_standardize(&z, &computed);
        for (a, b) in back.d.iter().zip(&p.d) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn imputed_cells_do_not_enter_statistics() {
        let ds = Dataset::new(vec![req(1, 0, "A", Some(2.0)), req(5, 0, "A", Some(4.0))], vocab());
        let p = build_panel(&ds, 1, &vocab()).unwrap();
        let s = PanelStats::compute(&p, p.days);
        assert_eq!(s.d_mean[0], 3.0);
    }

    #[test]
    fn binary_round_trip() {
        let p = long_panel();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(Panel::read_from(buf.as_slice()).unwrap(), p);
    }
}
