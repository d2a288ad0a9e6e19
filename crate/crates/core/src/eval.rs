//! Error metrics, per-type report tables, the ablation harness and the
//! exploratory analyses (spatial scatter, daily series, demand/service
//! correlation, per-type distributions).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Dataset, RegionMap};
use crate::panel::Panel;
use crate::predictor::{
    predict_samples, train, ModelConfig, PreparedData, Sample, ServiceTimeModel, TrainConfig, Variant,
};

/// Denominator floor for MAPE, in days.
pub const MAPE_EPSILON: f64 = 0.5;
pub const BASELINE_LABEL: &str = "baseline";
pub const ALL_TYPES: &str = "all";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

/// Metrics over `(actual, predicted)` pairs.
pub fn compute_metrics(pairs: &[(f64, f64)]) -> Result<Metrics> {
    if pairs.is_empty() {
        return Err(Error::Precondition("cannot compute metrics on an empty set".into()));
    }
    let n = pairs.len() as f64;
    let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
    for &(y, p) in pairs {
        let e = (y - p).abs();
        abs += e;
        sq += e * e;
        pct += e / y.max(MAPE_EPSILON);
    }
    let mse = sq / n;
    Ok(Metrics {
        count: pairs.len(),
        mae: abs / n,
        mse,
        rmse: mse.sqrt(),
        mape: 100.0 * pct / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub request_type: String,
    pub variant: String,
    pub count: usize,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub mape: f64,
}

impl MetricRow {
    fn new(request_type: &str, variant: &str, m: Metrics) -> Self {
        Self {
            request_type: request_type.to_string(),
            variant: variant.to_string(),
            count: m.count,
            mae: m.mae,
            mse: m.mse,
            rmse: m.rmse,
            mape: m.mape,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// MAPE denominator floor used for every row.
    pub mape_epsilon: f64,
}

impl MetricReport {
    pub fn new() -> Self {
        Self {
            rows: Vec::new(),
            mape_epsilon: MAPE_EPSILON,
        }
    }

    pub fn row(&self, request_type: &str, variant: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.request_type == request_type && r.variant == variant)
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rows = Vec::new();
        for rec in csv::Reader::from_reader(r).deserialize() {
            rows.push(rec?);
        }
        Ok(Self {
            rows,
            mape_epsilon: MAPE_EPSILON,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_csv(fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        Ok(())
    }

    /// Plain-text table, one line per row.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<28} {:<9} {:>6} {:>9} {:>9} {:>9} {:>9}\n",
            "type", "variant", "n", "MAE", "MSE", "RMSE", "MAPE%"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<28} {:<9} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.2}",
                r.request_type, r.variant, r.count, r.mae, r.mse, r.rmse, r.mape
            );
        }
        s
    }
}

/// One row per type plus an `all` row, for one set of predictions.
pub fn evaluate_by_type(
    vocabulary: &[String],
    samples: &[Sample],
    predicted: &[f64],
    variant: &str,
) -> Result<MetricReport> {
    if samples.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            expected: samples.len(),
            got: predicted.len(),
        });
    }
    let mut report = MetricReport::new();
    for (l, name) in vocabulary.iter().enumerate() {
        let pairs: Vec<(f64, f64)> = samples
            .iter()
            .zip(predicted)
            .filter(|(s, _)| s.type_index == l)
            .map(|(s, p)| (s.target, *p))
            .collect();
        if !pairs.is_empty() {
            report
                .rows
                .push(MetricRow::new(name, variant, compute_metrics(&pairs)?));
        }
    }
    let all: Vec<(f64, f64)> = samples.iter().zip(predicted).map(|(s, p)| (s.target, *p)).collect();
    report
        .rows
        .push(MetricRow::new(ALL_TYPES, variant, compute_metrics(&all)?));
    Ok(report)
}

/// Per-type train-period mean for each sample.
pub fn baseline_predictions(data: &PreparedData, samples: &[Sample]) -> Vec<f64> {
    samples.iter().map(|s| data.type_means[s.type_index]).collect()
}

/// Test-split report of a trained model.
pub fn evaluate_model(model: &ServiceTimeModel, data: &PreparedData) -> Result<MetricReport> {
    if data.test.is_empty() {
        return Err(Error::Precondition("test split has no evaluable requests".into()));
    }
    let pred = predict_samples(model, data, &data.test)?;
    evaluate_by_type(&data.vocabulary, &data.test, &pred, model.variant().label())
}

pub fn evaluate_baseline(data: &PreparedData) -> Result<MetricReport> {
    let pred = baseline_predictions(data, &data.test);
    evaluate_by_type(&data.vocabulary, &data.test, &pred, BASELINE_LABEL)
}

/// Report comparing already-trained variants on one prepared dataset,
/// headed by the train-mean baseline.
pub fn ablation_report(
    data: &PreparedData,
    models: &[&ServiceTimeModel],
    variants: &[Variant],
) -> Result<MetricReport> {
    let mut report = evaluate_baseline(data)?;
    for v in variants {
        let model = models
            .iter()
            .find(|m| m.variant() == *v)
            .ok_or_else(|| Error::Precondition(format!("no trained model for variant {v}")))?;
        report.extend(evaluate_model(model, data)?);
    }
    Ok(report)
}

/// Trains every variant with the same data, seed and settings, then
/// reports them side by side. Variants train in parallel.
pub fn run_ablation(
    data: &PreparedData,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    variants: &[Variant],
) -> Result<(MetricReport, Vec<ServiceTimeModel>)> {
    let models = std::thread::scope(|s| {
        let handles: Vec<_> = variants
            .iter()
            .map(|&v| {
                let cfg = TrainConfig {
                    variant: v,
                    ..train_config.clone()
                };
                s.spawn(move || train(data, model_config, &cfg).map(|(m, _)| m))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let refs: Vec<&ServiceTimeModel> = models.iter().collect();
    let report = ablation_report(data, &refs, variants)?;
    Ok((report, models))
}

/// Pearson correlation; `None` for fewer than 3 pairs or a constant series.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 3 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// City-wide daily request count of a type.
pub fn daily_demand(panel: &Panel, type_index: usize) -> Vec<f64> {
    (0..panel.days).map(|t| panel.type_volume(type_index, t)).collect()
}

/// City-wide daily mean service time of a type over observed cells,
/// weighted by request counts; `None` on days without observations.
pub fn daily_service_time(panel: &Panel, type_index: usize) -> Vec<Option<f64>> {
    (0..panel.days)
        .map(|t| {
            let (mut s, mut w) = (0.0, 0.0);
            for i in 0..panel.regions {
                if panel.observed(i, type_index, t) {
                    let r = panel.r_at(i, type_index, t).max(1.0);
                    s += r * panel.d_at(i, type_index, t);
                    w += r;
                }
            }
            (w > 0.0).then(|| s / w)
        })
        .collect()
}

/// Correlation between the daily demand of `demand_type` and the daily
/// service time of `service_type`; days without service observations are
/// dropped.
pub fn pearson_demand_service(panel: &Panel, demand_type: usize, service_type: usize) -> Option<f64> {
    let demand = daily_demand(panel, demand_type);
    let service = daily_service_time(panel, service_type);
    let (x, y): (Vec<f64>, Vec<f64>) = demand
        .iter()
        .zip(&service)
        .filter_map(|(d, s)| s.map(|s| (*d, s)))
        .unzip();
    pearson(&x, &y)
}

/// Regions sharing a polygon boundary. Regions without polygons use the
/// three nearest centroids from `fallback_centroids`.
pub fn region_neighbors(map: &RegionMap, fallback_centroids: &[Option<(f64, f64)>]) -> Vec<Vec<usize>> {
    const K: usize = 3;
    let m = map.len();
    let centroid = |i: usize| map.centroid(i).or_else(|| fallback_centroids.get(i).copied().flatten());
    (0..m)
        .map(|a| {
            let mine: Vec<_> = map.polygons.iter().filter(|(i, _)| *i == a).map(|(_, p)| p).collect();
            if !mine.is_empty() {
                return (0..m)
                    .filter(|&b| b != a)
                    .filter(|&b| {
                        map.polygons
                            .iter()
                            .filter(|(i, _)| *i == b)
                            .any(|(_, q)| mine.iter().any(|p| p.touches(q)))
                    })
                    .collect();
            }
            let Some(ca) = centroid(a) else {
                return Vec::new();
            };
            let mut by_dist: Vec<(f64, usize)> = (0..m)
                .filter(|&b| b != a)
                .filter_map(|b| centroid(b).map(|cb| ((ca.0 - cb.0).powi(2) + (ca.1 - cb.1).powi(2), b)))
                .collect();
            by_dist.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            by_dist.into_iter().take(K).map(|(_, b)| b).collect()
        })
        .collect()
}

/// Mean request coordinates per region, for maps without polygons.
pub fn request_centroids(ds: &Dataset, regions: usize) -> Vec<Option<(f64, f64)>> {
    let mut acc = vec![(0.0, 0.0, 0usize); regions];
    for r in &ds.requests {
        if r.region_id < regions && r.longitude.is_finite() && r.latitude.is_finite() {
            let a = &mut acc[r.region_id];
            a.0 += r.longitude;
            a.1 += r.latitude;
            a.2 += 1;
        }
    }
    acc.into_iter()
        .map(|(x, y, n)| (n > 0).then(|| (x / n as f64, y / n as f64)))
        .collect()
}

/// Daily mean service time of a region over all observed types.
pub fn region_daily_service_time(panel: &Panel, region: usize) -> Vec<Option<f64>> {
    (0..panel.days)
        .map(|t| {
            let (mut s, mut w) = (0.0, 0.0);
            for l in 0..panel.types {
                if panel.observed(region, l, t) {
                    let r = panel.r_at(region, l, t).max(1.0);
                    s += r * panel.d_at(region, l, t);
                    w += r;
                }
            }
            (w > 0.0).then(|| s / w)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub region: usize,
    pub day: usize,
    pub value: f64,
    pub neighbor_mean: f64,
}

/// Region-day mean service time against the mean over its neighbours on
/// the same day (days where either side is unobserved are skipped).
pub fn spatial_scatter(panel: &Panel, neighbors: &[Vec<usize>]) -> Vec<ScatterPoint> {
    let series: Vec<Vec<Option<f64>>> = (0..panel.regions)
        .map(|i| region_daily_service_time(panel, i))
        .collect();
    let mut out = Vec::new();
    for (i, nb) in neighbors.iter().enumerate().take(panel.regions) {
        for t in 0..panel.days {
            let Some(v) = series[i][t] else { continue };
            let vals: Vec<f64> = nb.iter().filter_map(|&j| series[j][t]).collect();
            if vals.is_empty() {
                continue;
            }
            out.push(ScatterPoint {
                region: i,
                day: t,
                value: v,
                neighbor_mean: vals.iter().sum::<f64>() / vals.len() as f64,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub request_type: String,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of ascending `sorted`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_stats(request_type: &str, values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(BoxStats {
        request_type: request_type.to_string(),
        count: v.len(),
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
    })
}

/// Paths written by [`challenge_plots`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotFiles {
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct SeriesRow<'a> {
    date: String,
    region: &'a str,
    mean_service_time: Option<f64>,
}

#[derive(Serialize)]
struct CorrelationRow<'a> {
    demand_type: &'a str,
    service_type: &'a str,
    pearson: Option<f64>,
}

/// Writes the exploratory tables (CSV) and charts (SVG) into `dir`.
pub fn challenge_plots(panel: &Panel, region_map: &RegionMap, ds: &Dataset, dir: &Path) -> Result<PlotFiles> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let labels: Vec<String> = (0..panel.regions)
        .map(|i| region_map.labels.get(i).cloned().unwrap_or_else(|| i.to_string()))
        .collect();

    let neighbors = region_neighbors(region_map, &request_centroids(ds, panel.regions));
    let scatter = spatial_scatter(panel, &neighbors);
    let p = dir.join("spatial_scatter.csv");
    let mut w = csv::Writer::from_path(&p)?;
    for s in &scatter {
        w.serialize(s)?;
    }
    w.flush()?;
    files.push(p);
    let p = dir.join("spatial_scatter.svg");
    fs::write(&p, svg_scatter(&scatter))?;
    files.push(p);

    let series: Vec<Vec<Option<f64>>> = (0..panel.regions)
        .map(|i| region_daily_service_time(panel, i))
        .collect();
    let p = dir.join("daily_series.csv");
    let mut w = csv::Writer::from_path(&p)?;
    for t in 0..panel.days {
        for (i, s) in series.iter().enumerate() {
            w.serialize(SeriesRow {
                date: panel.date(t).to_string(),
                region: &labels[i],
                mean_service_time: s[t],
            })?;
        }
    }
    w.flush()?;
    files.push(p);
    let p = dir.join("daily_series.svg");
    fs::write(&p, svg_lines(&series, &labels))?;
    files.push(p);

    let p = dir.join("demand_service_correlation.csv");
    let mut w = csv::Writer::from_path(&p)?;
    for a in 0..panel.types {
        for b in 0..panel.types {
            w.serialize(CorrelationRow {
                demand_type: &ds.type_vocabulary[a],
                service_type: &ds.type_vocabulary[b],
                pearson: pearson_demand_service(panel, a, b),
            })?;
        }
    }
    w.flush()?;
    files.push(p);

    let mut per_type: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in ds.completed() {
        if let Some(l) = ds.type_index(&r.request_type) {
            per_type
                .entry(l)
                .or_default()
                .push(r.service_time_days.unwrap_or_default());
        }
    }
    let boxes: Vec<BoxStats> = per_type
        .iter()
        .filter_map(|(l, v)| box_stats(&ds.type_vocabulary[*l], v))
        .collect();
    let p = dir.join("type_boxplot.csv");
    let mut w = csv::Writer::from_path(&p)?;
    for b in &boxes {
        w.serialize(b)?;
    }
    w.flush()?;
    files.push(p);
    let p = dir.join("type_boxplot.svg");
    fs::write(&p, svg_boxes(&boxes))?;
    files.push(p);
    Ok(PlotFiles { files })
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            return Self {
                lo: lo - 0.5,
                hi: hi + 0.5,
            };
        }
        Self { lo, hi }
    }

    fn map(&self, v: f64, from: f64, to: f64) -> f64 {
        from + (v - self.lo) / (self.hi - self.lo) * (to - from)
    }
}

fn svg_frame(title: &str, x: &Axis, y: &Axis, body: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n",
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            "<text x=\"{cx}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n",
            "<line x1=\"{p}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<line x1=\"{p}\" y1=\"{p}\" x2=\"{p}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<text x=\"{p}\" y=\"{bl}\">{xlo:.2}</text><text x=\"{r}\" y=\"{bl}\" text-anchor=\"end\">{xhi:.2}</text>\n",
            "<text x=\"4\" y=\"{b}\">{ylo:.2}</text><text x=\"4\" y=\"{p}\">{yhi:.2}</text>\n",
            "{body}</svg>\n"
        ),
        w = W,
        h = H,
        cx = W / 2.0,
        title = title,
        p = PAD,
        b = H - PAD,
        r = W - PAD,
        bl = H - PAD + 16.0,
        xlo = x.lo,
        xhi = x.hi,
        ylo = y.lo,
        yhi = y.hi,
        body = body
    )
}

fn svg_scatter(points: &[ScatterPoint]) -> String {
    let x = Axis::fit(points.iter().map(|p| p.neighbor_mean));
    let y = Axis::fit(points.iter().map(|p| p.value));
    let mut body = String::new();
    for p in points {
        let _ = writeln!(
            body,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2\" fill=\"{}\" fill-opacity=\"0.5\"/>",
            x.map(p.neighbor_mean, PAD, W - PAD),
            y.map(p.value, H - PAD, PAD),
            PALETTE[p.region % PALETTE.len()]
        );
    }
    svg_frame("Region vs neighbour mean service time (days)", &x, &y, &body)
}

fn svg_lines(series: &[Vec<Option<f64>>], labels: &[String]) -> String {
    let days = series.first().map_or(0, |s| s.len());
    let x = Axis::fit([0.0, days.saturating_sub(1) as f64].into_iter());
    let y = Axis::fit(series.iter().flatten().flatten().copied());
    let mut body = String::new();
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .iter()
            .enumerate()
            .filter_map(|(t, v)| {
                v.map(|v| format!("{:.1},{:.1}", x.map(t as f64, PAD, W - PAD), y.map(v, H - PAD, PAD)))
            })
            .collect();
        if pts.len() == 1 {
            let (cx, cy) = pts[0].split_once(',').expect("point");
            let _ = writeln!(body, "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"2\" fill=\"{color}\"/>");
        } else if !pts.is_empty() {
            let _ = writeln!(
                body,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1\" points=\"{}\"/>",
                pts.join(" ")
            );
        }
        let _ = writeln!(
            body,
            "<text x=\"{:.0}\" y=\"{:.0}\" fill=\"{color}\">{}</text>",
            W - PAD + 4.0,
            PAD + 14.0 * i as f64,
            labels[i]
        );
    }
    svg_frame("Daily mean service time by region (days)", &x, &y, &body)
}

fn svg_boxes(boxes: &[BoxStats]) -> String {
    let y = Axis::fit(boxes.iter().flat_map(|b| [b.min, b.max]));
    let slot = (W - 2.0 * PAD) / boxes.len().max(1) as f64;
    let mut body = String::new();
    for (k, b) in boxes.iter().enumerate() {
        let cx = PAD + slot * (k as f64 + 0.5);
        let half = slot * 0.3;
        let py = |v: f64| y.map(v, H - PAD, PAD);
        let _ = writeln!(
            body,
            "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
            py(b.min),
            py(b.max)
        );
        let _ = writeln!(
            body,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\" stroke=\"black\"/>",
            cx - half,
            py(b.q3),
            2.0 * half,
            (py(b.q1) - py(b.q3)).max(0.5),
            PALETTE[k % PALETTE.len()]
        );
        let _ = writeln!(
            body,
            "<line x1=\"{:.1}\" y1=\"{m:.1}\" x2=\"{:.1}\" y2=\"{m:.1}\" stroke=\"black\" stroke-width=\"2\"/>",
            cx - half,
            cx + half,
            m = py(b.median)
        );
        let _ = writeln!(
            body,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            H - PAD + 28.0,
            b.request_type
        );
    }
    svg_frame(
        "Service time by request type (days)",
        &Axis {
            lo: 0.0,
            hi: boxes.len() as f64,
        },
        &y,
        &body,
    )
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;
    use proptest::prelude::*;

    use super::*;
    use crate::ingest::Polygon;

    #[test]
    fn perfect_predictions_score_zero() {
        let m = compute_metrics(&[(1.0, 1.0), (3.5, 3.5)]).unwrap();
        assert_eq!((m.mae, m.mse, m.rmse, m.mape), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_computed_pairs() {
        let m = compute_metrics(&[(2.0, 3.0), (4.0, 2.0)]).unwrap();
        assert!((m.mae - 1.5).abs() < 1e-9);
        assert!((m.mse - 2.5).abs() < 1e-9);
        assert!((m.rmse - 2.5f64.sqrt()).abs() < 1e-9);
        assert!((m.rmse - 1.5811).abs() < 1e-4);
        assert!((m.mape - 50.0).abs() < 1e-9);
    }

    #[test]
    fn mape_guard_applies_below_half_a_day() {
        let m = compute_metrics(&[(0.1, 0.2)]).unwrap();
        assert!((m.mape - 20.0).abs() < 1e-9);
    }

    #[test]
    fn empty_metrics_is_an_error() {
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn pearson_extremes() {
        let x: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let z: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &z).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&x, &[1.0; 10]), None);
        assert_eq!(pearson(&x[..2], &y[..2]), None);
    }

    fn panel_with(regions: usize, types: usize, days: usize, f: impl Fn(usize, usize, usize) -> (f64, f64)) -> Panel {
        let cells = regions * types * days;
        let mut p = Panel {
            start: NaiveDate::from_ymd_opt(2023, 1, 1).unwrap(),
            regions,
            types,
            days,
            r: vec![0.0; cells],
            d: vec![0.0; cells],
            mask: vec![false; cells],
        };
        for i in 0..regions {
            for l in 0..types {
                for t in 0..days {
                    let idx = p.index(i, l, t);
                    let (r, d) = f(i, l, t);
                    p.r[idx] = r;
                    p.d[idx] = d;
                    p.mask[idx] = r > 0.0;
                }
            }
        }
        p
    }

    #[test]
    fn demand_service_correlation_on_a_planted_panel() {
        // Type 1's service time rises one-for-one with type 0's demand.
        let p = panel_with(2, 2, 30, |_, l, t| {
            let load = (t % 7) as f64 + 1.0;
            if l == 0 {
                (load, 1.0)
            } else {
                (1.0, 0.5 + load)
            }
        });
        assert!((pearson_demand_service(&p, 0, 1).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pearson_demand_service(&p, 1, 0), None);
    }

    #[test]
    fn constant_panel_scatter_lies_on_diagonal() {
        let p = panel_with(3, 2, 5, |_, _, _| (2.0, 4.0));
        let nb = vec![vec![1], vec![0, 2], vec![1]];
        let pts = spatial_scatter(&p, &nb);
        assert_eq!(pts.len(), 15);
        assert!(pts.iter().all(|s| s.value == s.neighbor_mean));
    }

    #[test]
    fn touching_polygons_are_neighbours() {
        let rect = |x0: f64| Polygon::new(vec![(x0, 0.0), (x0 + 1.0, 0.0), (x0 + 1.0, 1.0), (x0, 1.0), (x0, 0.0)]);
        let mut map = RegionMap::from_labels(["a", "b", "c"]);
        map.polygons = vec![(0, rect(0.0)), (1, rect(1.0)), (2, rect(2.0))];
        assert_eq!(region_neighbors(&map, &[]), vec![vec![1], vec![0, 2], vec![1]]);
        let bare = RegionMap::from_labels(["a", "b", "c", "d", "e"]);
        let cents: Vec<_> = (0..5).map(|i| Some((i as f64, 0.0))).collect();
        let nb = region_neighbors(&bare, &cents);
        assert_eq!(nb[0], vec![1, 2, 3]);
        assert_eq!(nb[2], vec![1, 3, 0]);
    }

    #[test]
    fn single_day_plots_do_not_fail() {
        use crate::ingest::ServiceRequest;
        let p = panel_with(2, 1, 1, |_, _, _| (1.0, 3.0));
        let at = NaiveDate::from_ymd_opt(2023, 1, 1)
            .unwrap()
            .and_hms_opt(9, 0, 0)
            .unwrap();
        let req = ServiceRequest {
            request_id: "1".into(),
            created_at: at,
            completed_at: Some(at),
            department: "d".into(),
            request_type: "T".into(),
            longitude: 0.0,
            latitude: 0.0,
            region_id: 0,
            description: None,
            service_time_days: Some(3.0),
        };
        let ds = Dataset::from_requests(vec![req]);
        let dir = tempfile::tempdir().unwrap();
        let out = challenge_plots(&p, &RegionMap::from_labels(["1", "2"]), &ds, dir.path()).unwrap();
        assert!(out.files.iter().all(|f| f.exists()));
    }

    proptest! {
        #[test]
        fn metric_identities(pairs in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0), 1..60)) {
            let m = compute_metrics(&pairs).unwrap();
            prop_assert!((m.rmse * m.rmse - m.mse).abs() <= 1e-9 * m.mse.max(1.0));
            prop_assert!(m.mae <= m.rmse + 1e-12);
            prop_assert!(m.mae >= 0.0 && m.mape >= 0.0);
        }

        #[test]
        fn pearson_is_affine_invariant(
            xs in prop::collection::vec(-10.0f64..10.0, 5..40),
            noise in prop::collection::vec(-1.0f64..1.0, 40),
            a in 0.1f64..5.0, b in -5.0f64..5.0, c in 0.1f64..5.0, d in -5.0f64..5.0,
        ) {
            let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| x * 0.5 + e).collect();
            let base = pearson(&xs, &ys);
            let ax: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let cy: Vec<f64> = ys.iter().map(|y| c * y + d).collect();
            match (base, pearson(&ax, &cy)) {
                (Some(p), Some(q)) => prop_assert!((p - q).abs() < 1e-9),
                (None, None) => {}
                other => prop_assert!(false, "{other:?}"),
            }
        }

        #[test]
        fn quartiles_match_sorted_positions(k in 1usize..30, seed in prop::collection::vec(-100.0f64..100.0, 121)) {
            // With n = 4k + 1 the quartiles fall exactly on order statistics.
            let n = 4 * k + 1;
            let v = &seed[..n];
            let b = box_stats("t", v).unwrap();
            let mut brute = v.to_vec();
            for i in 0..n {
                for j in 0..n - 1 - i {
                    if brute[j] > brute[j + 1] {
                        brute.swap(j, j + 1);
                    }
                }
            }
            prop_assert_eq!(b.q1, brute[k]);
            prop_assert_eq!(b.median, brute[2 * k]);
            prop_assert_eq!(b.q3, brute[3 * k]);
            prop_assert_eq!((b.min, b.max), (brute[0], brute[n - 1]));
        }
    }
}
