//! Discrete-event simulator for synthetic service-request logs.
//!
//! Requests arrive between 08:00 and 18:00. Each department clears its FIFO
//! queue of work units at a fixed daily capacity spread evenly over the day
//! (reduced on weekends). A request starts once the work queued ahead of it
//! is cleared and then takes `work_units * unit_time * access_factor` days. The access
//! factor is a log-AR(1) process per region whose innovations spill over to
//! adjacent regions. Demand is Poisson with a weekday profile and a
//! persistent per-type shock.
//!
//! Every type draws from its own random stream so that changing one type's
//! demand leaves the other types' arrivals and workloads untouched.

use std::io::Write;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::pearson;
use crate::ingest::{days_between, write_requests, Dataset, Polygon, RegionMap, ServiceRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepartmentSpec {
    pub name: String,
    /// Work units cleared per weekday, spread over working hours.
    pub daily_capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeSpec {
    pub name: String,
    pub department: usize,
    /// Mean arrivals per region per day before modulation.
    pub base_rate: f64,
    /// Item nouns used in descriptions; quantities multiply the work.
    pub items: Vec<String>,
    /// Mean extra quantity per listed item (quantity is `1 + Poisson`).
    pub extra_quantity: f64,
    /// Upper bound on distinct items per request.
    pub max_items: usize,
    /// Days of processing per work unit.
    pub unit_time: f64,
    /// Log-normal spread of work around the item count.
    pub work_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub regions: usize,
    pub departments: Vec<DepartmentSpec>,
    pub types: Vec<TypeSpec>,
    /// Relative demand level of each region; empty means all 1.
    pub region_scale: Vec<f64>,
    /// Amplitude of the weekday demand profile.
    pub weekly_amplitude: f64,
    /// Capacity multiplier on Saturday and Sunday.
    pub weekend_capacity: f64,
    /// Persistence and innovation scale of the per-type demand shock.
    pub demand_persistence: f64,
    pub demand_shock: f64,
    /// Persistence and innovation scale of the regional access factor.
    pub access_persistence: f64,
    pub access_shock: f64,
    /// Weight of adjacent regions' innovations in each region's access factor.
    pub spillover: f64,
    pub missing_description_rate: f64,
    pub access_note_rate: f64,
    pub start: NaiveDate,
    pub horizon_days: usize,
    pub seed: u64,
}

fn items(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for SimConfig {
    fn default() -> Self {
        let types = vec![
            TypeSpec {
                name: "Brush Collection".into(),
                department: 0,
                base_rate: 2.0,
                items: items(&["piles of brush", "tree limbs", "bundles of branches", "stumps"]),
                extra_quantity: 1.2,
                max_items: 2,
                unit_time: 0.15,
                work_noise: 0.1,
            },
            TypeSpec {
                name: "Bulk Trash".into(),
                department: 0,
                base_rate: 0.8,
                items: items(&[
                    "chairs",
                    "mattress",
                    "sofa",
                    "desk",
                    "cabinet",
                    "bed frame",
                    "hamper",
                    "flag pole",
                ]),
                extra_quantity: 0.3,
                max_items: 1,
                unit_time: 0.15,
                work_noise: 0.1,
            },
            TypeSpec {
                name: "Bagged Yard Waste".into(),
                department: 1,
                base_rate: 2.0,
                items: items(&["bags of leaves", "bags of grass clippings", "bags of pine straw"]),
                extra_quantity: 2.0,
                max_items: 2,
                unit_time: 0.15,
                work_noise: 0.1,
            },
            TypeSpec {
                name: "Missed Garbage Pickup".into(),
                department: 1,
                base_rate: 0.8,
                items: items(&["garbage cart", "extra bags", "recycling bin"]),
                extra_quantity: 0.3,
                max_items: 1,
                unit_time: 0.15,
                work_noise: 0.1,
            },
        ];
        let mut cfg = Self {
            regions: 5,
            departments: vec![
                DepartmentSpec {
                    name: "Solid Waste".into(),
                    daily_capacity: 0.0,
                },
                DepartmentSpec {
                    name: "Sanitation".into(),
                    daily_capacity: 0.0,
                },
            ],
            types,
            region_scale: vec![0.8, 1.2, 1.0, 0.9, 1.1],
            weekly_amplitude: 0.5,
            weekend_capacity: 0.25,
            demand_persistence: 0.8,
            // stationary sd 0.3
            demand_shock: 0.3 * 0.36f64.sqrt(),
            access_persistence: 0.8,
            access_shock: 0.2,
            spillover: 0.8,
            missing_description_rate: 0.1,
            access_note_rate: 0.15,
            start: NaiveDate::from_ymd_opt(2022, 1, 1).expect("valid date"),
            horizon_days: 365,
            seed: 311,
        };
        cfg.size_capacities(0.7);
        cfg
    }
}

impl SimConfig {
    /// Mean work units of one request of type `t`.
    pub fn expected_work(&self, t: usize) -> f64 {
        let s = &self.types[t];
        let k = (1 + s.max_items.min(s.items.len())) as f64 / 2.0;
        let note = self.access_note_rate * 1.5;
        k * (1.0 + s.extra_quantity) + 0.5 * k + note + 1.0
    }

    /// Sets every department's capacity so that long-run utilization is
    /// `utilization` given the weekend reduction and demand shocks.
    pub fn size_capacities(&mut self, utilization: f64) {
        let regions: f64 = (0..self.regions).map(|i| self.scale(i)).sum();
        let shock_var = self.demand_shock.powi(2) / (1.0 - self.demand_persistence.powi(2)).max(1e-6);
        let shock_mean = (shock_var / 2.0).exp();
        let effective_days = (5.0 + 2.0 * self.weekend_capacity) / 7.0;
        for d in 0..self.departments.len() {
            let load: f64 = (0..self.types.len())
                .filter(|&t| self.types[t].department == d)
                .map(|t| self.types[t].base_rate * regions * shock_mean * self.expected_work(t))
                .sum();
            self.departments[d].daily_capacity = (load / (utilization * effective_days)).max(1.0);
        }
    }

    /// Gives every type its own department with the same utilization.
    pub fn with_separate_departments(&self) -> Self {
        let mut c = self.clone();
        c.departments = self
            .types
            .iter()
            .map(|t| DepartmentSpec {
                name: format!("{} Crew", t.name),
                daily_capacity: 0.0,
            })
            .collect();
        for (i, t) in c.types.iter_mut().enumerate() {
            t.department = i;
        }
        let util = self.utilization();
        c.size_capacities(util);
        c
    }

    fn utilization(&self) -> f64 {
        let mut probe = self.clone();
        probe.size_capacities(1.0);
        let d = &self.departments[0];
        (probe.departments[0].daily_capacity / d.daily_capacity).clamp(0.05, 5.0)
    }

    fn scale(&self, region: usize) -> f64 {
        self.region_scale.get(region).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 || self.types.is_empty() || self.departments.is_empty() {
            return Err(Error::Config("simulator needs regions, types and departments".into()));
        }
        if self.departments.iter().any(|d| !(d.daily_capacity > 0.0)) {
            return Err(Error::Config("department capacities must be positive".into()));
        }
        for t in &self.types {
            if t.department >= self.departments.len() {
                return Err(Error::Config(format!("type {} references unknown department", t.name)));
            }
            if t.base_rate < 0.0 || t.items.is_empty() || t.max_items == 0 || !(t.unit_time > 0.0) {
                return Err(Error::Config(format!("invalid demand or workload for type {}", t.name)));
            }
        }
        if !(0.0..1.0).contains(&self.demand_persistence) || !(0.0..1.0).contains(&self.access_persistence) {
            return Err(Error::Config("persistence parameters must lie in [0, 1)".into()));
        }
        if self.horizon_days == 0 {
            return Err(Error::Config("horizon_days must be positive".into()));
        }
        Ok(())
    }

    /// Side-by-side rectangles, one per region, labelled `1..=M`.
    pub fn region_map(&self) -> RegionMap {
        let mut map = RegionMap::from_labels((1..=self.regions).map(|i| i.to_string()));
        map.polygons = (0..self.regions)
            .map(|i| {
                let (x0, x1) = region_lon_bounds(i);
                (
                    i,
                    Polygon::new(vec![(x0, LAT0), (x1, LAT0), (x1, LAT1), (x0, LAT1), (x0, LAT0)]),
                )
            })
            .collect();
        map
    }
}

const LON0: f64 = -85.40;
const LON_STEP: f64 = 0.04;
const LAT0: f64 = 35.00;
const LAT1: f64 = 35.08;

fn region_lon_bounds(i: usize) -> (f64, f64) {
    (LON0 + LON_STEP * i as f64, LON0 + LON_STEP * (i + 1) as f64)
}

/// Ground-truth decomposition of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub request_id: String,
    pub type_index: usize,
    pub department: usize,
    pub work_units: f64,
    pub access_factor: f64,
    /// `None` while pending at the end of the horizon.
    pub wait_days: Option<f64>,
    pub processing_days: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub config: SimConfig,
    /// In arrival order.
    pub requests: Vec<ServiceRequest>,
    pub truth: Vec<GroundTruth>,
    pub region_map: RegionMap,
    pub arrivals: usize,
    pub completed: usize,
    pub pending: usize,
    /// Log access factor per region (outer) and day (inner).
    pub access_log: Vec<Vec<f64>>,
    /// Per-type demand shock per day.
    pub demand_shock: Vec<Vec<f64>>,
}

struct Arrival {
    time: NaiveDateTime,
    type_index: usize,
    region: usize,
    work: f64,
    description: Option<String>,
    lon: f64,
    lat: f64,
}

fn type_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Zero-mean weekday demand shape, Monday first.
const WEEKDAY_SHAPE: [f64; 7] = [0.8, 0.6, 0.4, 0.3, 0.2, -1.0, -1.3];

fn weekday_factor(amplitude: f64, date: NaiveDate) -> f64 {
    let dow = date.weekday().num_days_from_monday() as usize;
    (1.0 + amplitude * WEEKDAY_SHAPE[dow]).max(0.0)
}

fn is_weekend(date: NaiveDate) -> bool {
    date.weekday().num_days_from_monday() >= 5
}

const OPEN: f64 = 0.0;
const CLOSE: f64 = 1.0;

fn day_rate(day: i64, capacity: f64, config: &SimConfig) -> f64 {
    let date = config.start + Duration::days(day);
    let f = if is_weekend(date) { config.weekend_capacity } else { 1.0 };
    capacity * f / (CLOSE - OPEN)
}

/// Earliest working instant at or after `t` (days since start).
fn next_working(t: f64, config: &SimConfig) -> f64 {
    let mut day = t.floor();
    let mut frac = t - day;
    loop {
        if frac < OPEN {
            frac = OPEN;
        }
        if frac < CLOSE && day_rate(day as i64, 1.0, config) > 0.0 {
            return day + frac;
        }
        day += 1.0;
        frac = OPEN;
    }
}

/// Time at which `work` units started at `t` are cleared.
fn serve(mut t: f64, mut work: f64, capacity: f64, config: &SimConfig) -> f64 {
    loop {
        t = next_working(t, config);
        let day = t.floor();
        let rate = day_rate(day as i64, capacity, config);
        let available = (day + CLOSE - t) * rate;
        if work <= available {
            return t + work / rate;
        }
        work -= available;
        t = day + 1.0;
    }
}

fn describe<R: Rng>(spec: &TypeSpec, note: bool, rng: &mut R) -> (String, f64) {
    let k = rng.random_range(1..=spec.max_items.min(spec.items.len()));
    let picked = rand::seq::index::sample(rng, spec.items.len(), k);
    let extra = Poisson::new(spec.extra_quantity.max(1e-9)).expect("positive rate");
    let mut parts = Vec::with_capacity(k + 1);
    let mut quantity = 0.0;
    for idx in picked.iter() {
        let q = 1 + extra.sample(rng) as u32;
        quantity += f64::from(q);
        let item = &spec.items[idx];
        parts.push(if q == 1 { item.clone() } else { format!("{q} {item}") });
    }
    let mut work = 1.0 + quantity + 0.5 * k as f64;
    if note {
        parts.push("pick up in rear".into());
        work += 1.5;
    }
    (parts.join(", "), work)
}

pub fn simulate(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let m = config.regions;
    let n = config.types.len();
    let days = config.horizon_days;
    let minute = Duration::minutes(1);

    // Regional access factor with neighbour spillover.
    let mut access_rng = type_stream(config.seed, 1_000);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let spill_norm = (1.0 + config.spillover.powi(2)).sqrt();
    let mut access_log = vec![vec![0.0; days]; m];
    let mut z = vec![0.0; m];
    for s in 0..days {
        let eps: Vec<f64> = (0..m).map(|_| unit.sample(&mut access_rng)).collect();
        for i in 0..m {
            let nb: Vec<usize> = [i.checked_sub(1), (i + 1 < m).then_some(i + 1)]
                .into_iter()
                .flatten()
                .collect();
            let nb_mean = if nb.is_empty() {
                0.0
            } else {
                nb.iter().map(|&j| eps[j]).sum::<f64>() / nb.len() as f64
            };
            let innov = (eps[i] + config.spillover * nb_mean) / spill_norm;
            z[i] = config.access_persistence * z[i] + config.access_shock * innov;
            access_log[i][s] = z[i];
        }
    }

    // Arrivals per type, each from its own stream.
    let mut arrivals: Vec<Arrival> = Vec::new();
    let mut demand_shock = vec![vec![0.0; days]; n];
    for (t, spec) in config.types.iter().enumerate() {
        let mut rng = type_stream(config.seed, t as u64);
        let mut g = 0.0;
        for s in 0..days {
            g = config.demand_persistence * g + config.demand_shock * unit.sample(&mut rng);
            demand_shock[t][s] = g;
            let date = config.start + Duration::days(s as i64);
            for i in 0..m {
                let lambda = spec.base_rate * config.scale(i) * weekday_factor(config.weekly_amplitude, date) * g.exp();
                let count = if lambda > 0.0 {
                    Poisson::new(lambda).expect("positive rate").sample(&mut rng) as usize
                } else {
                    0
                };
                for _ in 0..count {
                    let minutes = rng.random_range(8 * 60..18 * 60);
                    let time = date.and_time(NaiveTime::MIN) + minute * minutes;
                    let note = rng.random::<f64>() < config.access_note_rate;
                    let (text, work_base) = describe(spec, note, &mut rng);
                    let noise = (spec.work_noise.max(0.0) * unit.sample(&mut rng)).exp();
                    let missing = rng.random::<f64>() < config.missing_description_rate;
                    let (x0, x1) = region_lon_bounds(i);
                    let lon = rng.random_range(x0 + 1e-4..x1 - 1e-4);
                    let lat = rng.random_range(LAT0 + 1e-4..LAT1 - 1e-4);
                    arrivals.push(Arrival {
                        time,
                        type_index: t,
                        region: i,
                        work: work_base * noise,
                        description: (!missing).then_some(text),
                        lon,
                        lat,
                    });
                }
            }
        }
    }
    arrivals.sort_by(|a, b| (a.time, a.type_index, a.region).cmp(&(b.time, b.type_index, b.region)));

    // Department queues: FIFO fluid service during working hours.
    let horizon_end = (config.start + Duration::days(days as i64)).and_time(NaiveTime::MIN);
    let origin = config.start.and_time(NaiveTime::MIN);
    let mut start_time: Vec<Option<NaiveDateTime>> = vec![None; arrivals.len()];
    let mut free_at = vec![0.0f64; config.departments.len()];
    for (k, a) in arrivals.iter().enumerate() {
        let d = config.types[a.type_index].department;
        let arrival = (a.time - origin).num_seconds() as f64 / 86_400.0;
        let begin = next_working(arrival.max(free_at[d]), config);
        free_at[d] = serve(begin, a.work, config.departments[d].daily_capacity, config);
        if begin < days as f64 {
            start_time[k] = Some(origin + Duration::seconds((begin * 86_400.0).round() as i64));
        }
    }

    let mut requests = Vec::with_capacity(arrivals.len());
    let mut truth = Vec::with_capacity(arrivals.len());
    let mut completed = 0;
    for (k, a) in arrivals.iter().enumerate() {
        let spec = &config.types[a.type_index];
        let day = (a.time.date() - config.start).num_days() as usize;
        let start_day = start_time[k].map_or(day, |st| (st.date() - config.start).num_days() as usize);
        let factor = access_log[a.region][start_day.min(days - 1)].exp();
        let processing = a.work * spec.unit_time * factor;
        let finish = start_time[k].map(|st| st + Duration::seconds((processing * 86_400.0).round() as i64));
        let finish = finish.filter(|f| *f <= horizon_end);
        let finish = finish.map(|f| {
            // Quantize to whole minutes, never before creation.
            let secs = f.and_utc().timestamp();
            let q = secs - secs.rem_euclid(60);
            chrono::DateTime::from_timestamp(q, 0)
                .expect("in range")
                .naive_utc()
                .max(a.time)
        });
        if finish.is_some() {
            completed += 1;
        }
        let id = format!("SIM-{:06}", k + 1);
        requests.push(ServiceRequest {
            request_id: id.clone(),
            created_at: a.time,
            completed_at: finish,
            department: config.departments[spec.department].name.clone(),
            request_type: spec.name.clone(),
            longitude: a.lon,
            latitude: a.lat,
            region_id: a.region,
            description: a.description.clone(),
            service_time_days: finish.map(|f| days_between(a.time, f)),
        });
        truth.push(GroundTruth {
            request_id: id,
            type_index: a.type_index,
            department: spec.department,
            work_units: a.work,
            access_factor: factor,
            wait_days: finish.and(start_time[k]).map(|st| days_between(a.time, st)),
            processing_days: processing,
        });
    }
    Ok(SimOutput {
        config: config.clone(),
        arrivals: arrivals.len(),
        completed,
        pending: arrivals.len() - completed,
        requests,
        truth,
        region_map: config.region_map(),
        access_log,
        demand_shock,
    })
}

impl SimOutput {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_requests(w, &self.requests, &self.region_map)
    }

    pub fn write_truth<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for t in &self.truth {
            out.serialize(t)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn geojson(&self) -> serde_json::Value {
        self.region_map.to_geojson("region")
    }

    /// The request log with the simulator's type order as vocabulary.
    pub fn dataset(&self) -> Dataset {
        Dataset::new(
            self.requests.clone(),
            self.config.types.iter().map(|t| t.name.clone()).collect(),
        )
    }

    pub fn region_labels(&self) -> Vec<String> {
        (0..self.region_map.len())
            .map(|i| self.region_map.label(i).to_string())
            .collect()
    }
}

/// Subtracts the day-of-week mean from each entry.
fn deseasonalize(values: &[Option<f64>], start: NaiveDate) -> Vec<Option<f64>> {
    let mut sum = [0.0; 7];
    let mut cnt = [0usize; 7];
    for (s, v) in values.iter().enumerate() {
        if let Some(v) = v {
            let d = (start + Duration::days(s as i64)).weekday().num_days_from_monday() as usize;
            sum[d] += v;
            cnt[d] += 1;
        }
    }
    values
        .iter()
        .enumerate()
        .map(|(s, v)| {
            let d = (start + Duration::days(s as i64)).weekday().num_days_from_monday() as usize;
            v.map(|v| v - sum[d] / cnt[d].max(1) as f64)
        })
        .collect()
}

fn paired(a: &[Option<f64>], b: &[Option<f64>]) -> (Vec<f64>, Vec<f64>) {
    a.iter().zip(b).filter_map(|(x, y)| Some((((*x)?), (*y)?))).unzip()
}

fn acf(series: &[f64], lag: usize) -> f64 {
    let n = series.len();
    if lag >= n {
        return 0.0;
    }
    let m = series.iter().sum::<f64>() / n as f64;
    let var: f64 = series.iter().map(|v| (v - m) * (v - m)).sum();
    if var == 0.0 {
        return 0.0;
    }
    (0..n - lag)
        .map(|i| (series[i] - m) * (series[i + lag] - m))
        .sum::<f64>()
        / var
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossTypeCorrelation {
    pub demand_type: usize,
    pub service_type: usize,
    pub shared_department: bool,
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhenomenaReport {
    /// Mean correlation between adjacent regions' day-to-day changes in
    /// ground-truth processing time per work unit.
    pub spatial_neighbor_correlation: f64,
    /// Autocorrelation of day-over-day changes in the daily mean service
    /// time, lags `1..=14`.
    pub service_time_acf: Vec<f64>,
    pub weekly_peak: bool,
    pub cross_type: Vec<CrossTypeCorrelation>,
    /// Mean over same-department pairs, if any.
    pub shared_cross_type_mean: Option<f64>,
    /// Mean over pairs in different departments.
    pub separate_cross_type_mean: Option<f64>,
    /// Same-department pair with the largest correlation.
    pub strongest_shared: Option<CrossTypeCorrelation>,
    pub interquartile_range: Vec<f64>,
    pub failures: Vec<String>,
}

impl PhenomenaReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub const MIN_VERIFY_DAYS: usize = 120;
pub const SPATIAL_NULL_BOUND: f64 = 0.1;
pub const CROSS_TYPE_THRESHOLD: f64 = 0.3;

/// Checks that the simulated log exhibits the planted correlations.
/// Failures are listed in the report.
pub fn verify_phenomena(out: &SimOutput) -> PhenomenaReport {
    let cfg = &out.config;
    let days = cfg.horizon_days;
    let n = cfg.types.len();
    let m = cfg.regions;
    let mut failures = Vec::new();
    if days < MIN_VERIFY_DAYS {
        failures.push(format!("horizon {days} days is shorter than {MIN_VERIFY_DAYS}"));
    }

    // (a) spatial: neighbour correlation of the differenced access series.
    let diffs: Vec<Vec<f64>> = out
        .access_log
        .iter()
        .map(|z| z.windows(2).map(|w| w[1] - w[0]).collect())
        .collect();
    let pairs: Vec<f64> = (0..m.saturating_sub(1))
        .filter_map(|i| pearson(&diffs[i], &diffs[i + 1]))
        .collect();
    let spatial = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().sum::<f64>() / pairs.len() as f64
    };
    if cfg.spillover > 0.0 && m > 1 && spatial <= SPATIAL_NULL_BOUND {
        failures.push(format!(
            "neighbour correlation {spatial:.3} not positive despite spillover"
        ));
    }
    if cfg.spillover == 0.0 && spatial.abs() >= SPATIAL_NULL_BOUND {
        failures.push(format!("neighbour correlation {spatial:.3} without spillover"));
    }

    // Daily series by creation day.
    let mut count = vec![vec![0.0; days]; n];
    let mut st_sum = vec![vec![0.0; days]; n];
    let mut st_cnt = vec![vec![0usize; days]; n];
    let mut all_sum = vec![0.0; days];
    let mut all_cnt = vec![0usize; days];
    let mut per_type: Vec<Vec<f64>> = vec![Vec::new(); n];
    for (r, t) in out.requests.iter().zip(&out.truth) {
        let s = (r.created_at.date() - cfg.start).num_days() as usize;
        count[t.type_index][s] += 1.0;
        if let Some(st) = r.service_time_days {
            st_sum[t.type_index][s] += st;
            st_cnt[t.type_index][s] += 1;
            all_sum[s] += st;
            all_cnt[s] += 1;
            per_type[t.type_index].push(st);
        }
    }

    // (b) weekly autocorrelation of day-over-day changes; the backlog level
    // is too persistent for the raw series to show a lag-7 peak.
    let daily: Vec<f64> = (0..days)
        .filter(|&s| all_cnt[s] > 0)
        .map(|s| all_sum[s] / all_cnt[s] as f64)
        .collect::<Vec<_>>()
        .windows(2)
        .map(|w| w[1] - w[0])
        .collect();
    let service_time_acf: Vec<f64> = (1..=14).map(|l| acf(&daily, l)).collect();
    let weekly_peak = service_time_acf.len() >= 8
        && service_time_acf[6] > service_time_acf[5]
        && service_time_acf[6] > service_time_acf[7];
    if !weekly_peak {
        failures.push("no autocorrelation peak at lag 7".into());
    }

    // (c) cross-type demand vs service time.
    let demand: Vec<Vec<Option<f64>>> = count
        .iter()
        .map(|c| deseasonalize(&c.iter().map(|v| Some(*v)).collect::<Vec<_>>(), cfg.start))
        .collect();
    let service: Vec<Vec<Option<f64>>> = (0..n)
        .map(|t| {
            let raw: Vec<Option<f64>> = (0..days)
                .map(|s| (st_cnt[t][s] > 0).then(|| st_sum[t][s] / st_cnt[t][s] as f64))
                .collect();
            deseasonalize(&raw, cfg.start)
        })
        .collect();
    let mut cross_type = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let (x, y) = paired(&demand[a], &service[b]);
            cross_type.push(CrossTypeCorrelation {
                demand_type: a,
                service_type: b,
                shared_department: cfg.types[a].department == cfg.types[b].department,
                pearson: pearson(&x, &y),
            });
        }
    }
    let mean_of = |shared: bool| {
        let v: Vec<f64> = cross_type
            .iter()
            .filter(|c| c.shared_department == shared)
            .filter_map(|c| c.pearson)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let shared_cross_type_mean = mean_of(true);
    let separate_cross_type_mean = mean_of(false);
    let strongest_shared = cross_type
        .iter()
        .filter(|c| c.shared_department && c.pearson.is_some())
        .max_by(|a, b| a.pearson.unwrap().total_cmp(&b.pearson.unwrap()))
        .cloned();
    if let Some(c) = &strongest_shared {
        let r = c.pearson.unwrap_or(0.0);
        if r <= CROSS_TYPE_THRESHOLD {
            failures.push(format!(
                "strongest shared-department demand/service correlation {r:.3} <= {CROSS_TYPE_THRESHOLD}"
            ));
        }
    }

    // (d) within-type dispersion.
    let interquartile_range: Vec<f64> = per_type
        .iter_mut()
        .map(|v| {
            if v.len() < 2 {
                return 0.0;
            }
            v.sort_by(f64::total_cmp);
            quantile_sorted(v, 0.75) - quantile_sorted(v, 0.25)
        })
        .collect();
    for (t, iqr) in interquartile_range.iter().enumerate() {
        if *iqr <= 0.0 {
            failures.push(format!("type {t} has zero interquartile range"));
        }
    }

    PhenomenaReport {
        spatial_neighbor_correlation: spatial,
        service_time_acf,
        weekly_peak,
        cross_type,
        shared_cross_type_mean,
        separate_cross_type_mean,
        strongest_shared,
        interquartile_range,
        failures,
    }
}
