//! Parsing raw service-request exports into a [`Dataset`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest service time kept for modeling, in days.
pub const SERVICE_TIME_CAP_DAYS: f64 = 80.0;

const TIMESTAMP_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
    "%m/%d/%Y %I:%M:%S %p",
    "%m/%d/%Y %I:%M %p",
    "%Y-%m-%dT%H:%M:%S%.f",
];

/// Canonical timestamp format used when writing requests back out.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

pub fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    if raw.is_empty() {
        return None;
    }
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(raw, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

/// Fractional days between two timestamps.
pub fn days_between(from: NaiveDateTime, to: NaiveDateTime) -> f64 {
    (to - from).num_seconds() as f64 / 86_400.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub request_id: String,
    pub created_at: NaiveDateTime,
    pub completed_at: Option<NaiveDateTime>,
    pub department: String,
    pub request_type: String,
    pub longitude: f64,
    pub latitude: f64,
    pub region_id: usize,
    pub description: Option<String>,
    pub service_time_days: Option<f64>,
}

impl ServiceRequest {
    pub fn created_day(&self) -> NaiveDate {
        self.created_at.date()
    }
}

/// A simple polygon in lon/lat with optional holes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub exterior: Vec<(f64, f64)>,
    #[serde(default)]
    pub holes: Vec<Vec<(f64, f64)>>,
}

impl Polygon {
    pub fn new(exterior: Vec<(f64, f64)>) -> Self {
        Self {
            exterior,
            holes: Vec::new(),
        }
    }

    pub fn centroid(&self) -> (f64, f64) {
        // area-weighted centroid of the exterior ring
        let ring = &self.exterior;
        let n = ring.len();
        let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let (x0, y0) = ring[i];
            let (x1, y1) = ring[(i + 1) % n];
            let cross = x0 * y1 - x1 * y0;
            a += cross;
            cx += (x0 + x1) * cross;
            cy += (y0 + y1) * cross;
        }
        if a.abs() < 1e-15 {
            let (sx, sy) = ring.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
            return (sx / n as f64, sy / n as f64);
        }
        (cx / (3.0 * a), cy / (3.0 * a))
    }

    fn on_boundary(&self, p: (f64, f64)) -> bool {
        std::iter::once(&self.exterior)
            .chain(self.holes.iter())
            .any(|ring| ring_on_boundary(ring, p))
    }

    fn contains_interior(&self, p: (f64, f64)) -> bool {
        ring_contains(&self.exterior, p) && !self.holes.iter().any(|h| ring_contains(h, p))
    }

    /// Containment including the boundary.
    pub fn contains(&self, p: (f64, f64)) -> bool {
        self.on_boundary(p) || self.contains_interior(p)
    }

    /// True when the two polygons share at least one boundary segment
    /// (collinear overlap) or vertex.
    pub fn touches(&self, other: &Polygon) -> bool {
        self.exterior.iter().any(|&p| ring_on_boundary(&other.exterior, p))
            || other.exterior.iter().any(|&p| ring_on_boundary(&self.exterior, p))
    }
}

fn ring_contains(ring: &[(f64, f64)], (px, py): (f64, f64)) -> bool {
    let mut inside = false;
    let n = ring.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (xi, yi) = ring[i];
        let (xj, yj) = ring[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn ring_on_boundary(ring: &[(f64, f64)], (px, py): (f64, f64)) -> bool {
    const TOL: f64 = 1e-12;
    let n = ring.len();
    (0..n).any(|i| {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % n];
        let cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt().max(1.0);
        cross.abs() <= TOL * len
            && px >= x0.min(x1) - TOL
            && px <= x0.max(x1) + TOL
            && py >= y0.min(y1) - TOL
            && py <= y0.max(y1) + TOL
    })
}

/// Mapping from raw district labels to contiguous region ids, optionally
/// with boundary polygons for point-in-polygon assignment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    /// Raw label of each region; the index is the region id.
    pub labels: Vec<String>,
    #[serde(default)]
    pub polygons: Vec<(usize, Polygon)>,
}

impl RegionMap {
    /// Builds a map from raw labels. Ids follow a stable sort of the labels
    /// (numeric when every label parses as a number).
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = labels
            .into_iter()
            .map(|s| normalize_label(s.as_ref()))
            .filter(|s| !s.is_empty())
            .collect();
        let mut labels: Vec<String> = set.into_iter().collect();
        if labels.iter().all(|l| l.parse::<f64>().is_ok()) {
            labels.sort_by(|a, b| {
                a.parse::<f64>()
                    .unwrap()
                    .partial_cmp(&b.parse::<f64>().unwrap())
                    .unwrap()
            });
        }
        Self {
            labels,
            polygons: Vec::new(),
        }
    }

    /// Reads a GeoJSON `FeatureCollection` of `Polygon`/`MultiPolygon`
    /// features, taking each region's label from `id_property`.
    pub fn from_geojson(text: &str, id_property: &str) -> Result<Self> {
        let doc: serde_json::Value = serde_json::from_str(text)?;
        let features = doc
            .get("features")
            .and_then(|f| f.as_array())
            .ok_or_else(|| Error::InvalidInput("GeoJSON has no `features` array".into()))?;
        let mut raw: Vec<(String, Vec<Polygon>)> = Vec::new();
        for f in features {
            let label = match f.get("properties").and_then(|p| p.get(id_property)) {
                Some(serde_json::Value::String(s)) => s.clone(),
                Some(serde_json::Value::Number(n)) => n.to_string(),
                _ => return Err(Error::InvalidInput(format!("feature without `{id_property}` property"))),
            };
            let geom = f
                .get("geometry")
                .ok_or_else(|| Error::InvalidInput("feature without geometry".into()))?;
            raw.push((label, parse_geometry(geom)?));
        }
        let mut map = Self::from_labels(raw.iter().map(|(l, _)| l.as_str()));
        for (label, polys) in raw {
            let id = map.id_of(&label).expect("label registered above");
            map.polygons.extend(polys.into_iter().map(|p| (id, p)));
        }
        Ok(map)
    }

    pub fn to_geojson(&self, id_property: &str) -> serde_json::Value {
        let features: Vec<serde_json::Value> = self
            .polygons
            .iter()
            .map(|(id, poly)| {
                let mut rings = vec![close_ring(&poly.exterior)];
                rings.extend(poly.holes.iter().map(|h| close_ring(h)));
                serde_json::json!({
                    "type": "Feature",
                    "properties": { id_property: self.labels[*id] },
                    "geometry": { "type": "Polygon", "coordinates": rings },
                })
            })
            .collect();
        serde_json::json!({ "type": "FeatureCollection", "features": features })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id_of(&self, raw_label: &str) -> Option<usize> {
        let norm = normalize_label(raw_label);
        self.labels.iter().position(|l| *l == norm)
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn centroid(&self, id: usize) -> Option<(f64, f64)> {
        self.polygons.iter().find(|(i, _)| *i == id).map(|(_, p)| p.centroid())
    }
}

fn close_ring(ring: &[(f64, f64)]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = ring.iter().map(|&(x, y)| [x, y]).collect();
    if let (Some(first), Some(last)) = (out.first().copied(), out.last().copied()) {
        if first != last {
            out.push(first);
        }
    }
    out
}

fn normalize_label(raw: &str) -> String {
    let t = raw.trim();
    // "2.0" and "2" name the same district
    match t.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v.abs() < 1e12 => format!("{}", v as i64),
        _ => t.to_string(),
    }
}

fn parse_ring(v: &serde_json::Value) -> Result<Vec<(f64, f64)>> {
    let pts = v
        .as_array()
        .ok_or_else(|| Error::InvalidInput("ring is not an array".into()))?;
    let mut ring: Vec<(f64, f64)> = pts
        .iter()
        .map(|p| {
            let a = p.as_array().filter(|a| a.len() >= 2);
            match a {
                Some(a) => match (a[0].as_f64(), a[1].as_f64()) {
                    (Some(x), Some(y)) => Ok((x, y)),
                    _ => Err(Error::InvalidInput("non-numeric coordinate".into())),
                },
                None => Err(Error::InvalidInput("malformed coordinate".into())),
            }
        })
        .collect::<Result<_>>()?;
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    Ok(ring)
}

fn parse_polygon(coords: &serde_json::Value) -> Result<Polygon> {
    let rings = coords
        .as_array()
        .ok_or_else(|| Error::InvalidInput("polygon coordinates not an array".into()))?;
    let mut parsed = rings.iter().map(parse_ring).collect::<Result<Vec<_>>>()?;
    if parsed.is_empty() {
        return Err(Error::InvalidInput("polygon without rings".into()));
    }
    let exterior = parsed.remove(0);
    Ok(Polygon {
        exterior,
        holes: parsed,
    })
}

fn parse_geometry(geom: &serde_json::Value) -> Result<Vec<Polygon>> {
    let kind = geom.get("type").and_then(|t| t.as_str()).unwrap_or("");
    let coords = geom
        .get("coordinates")
        .ok_or_else(|| Error::InvalidInput("geometry without coordinates".into()))?;
    match kind {
        "Polygon" => Ok(vec![parse_polygon(coords)?]),
        "MultiPolygon" => coords
            .as_array()
            .ok_or_else(|| Error::InvalidInput("multipolygon not an array".into()))?
            .iter()
            .map(parse_polygon)
            .collect(),
        other => Err(Error::InvalidInput(format!("unsupported geometry `{other}`"))),
    }
}

/// Region lookup result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionAssignment {
    Region(usize),
    Unassigned,
}

/// Point-in-polygon lookup; a point on a shared boundary resolves to the
/// lowest region id.
pub fn assign_region(lon: f64, lat: f64, region_map: &RegionMap) -> RegionAssignment {
    region_map
        .polygons
        .iter()
        .filter(|(_, poly)| poly.contains((lon, lat)))
        .map(|(id, _)| *id)
        .min()
        .map_or(RegionAssignment::Unassigned, RegionAssignment::Region)
}

/// Column names of the raw export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSchema {
    pub request_id: Option<String>,
    pub created: String,
    pub completed: String,
    pub department: String,
    pub request_type: String,
    pub longitude: Option<String>,
    pub latitude: Option<String>,
    /// Single column holding `(lon, lat)`, used when separate columns are absent.
    pub location: Option<String>,
    pub district: Option<String>,
    pub description: Option<String>,
    /// Keep only these request types (all types when absent).
    pub types: Option<Vec<String>>,
}

impl Default for IngestSchema {
    fn default() -> Self {
        Self {
            request_id: Some("request_id".into()),
            created: "created_at".into(),
            completed: "completed_at".into(),
            department: "department".into(),
            request_type: "request_type".into(),
            longitude: Some("longitude".into()),
            latitude: Some("latitude".into()),
            location: None,
            district: Some("region".into()),
            description: Some("description".into()),
            types: None,
        }
    }
}

/// Row accounting for one ingest run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub total_rows: usize,
    pub retained: usize,
    pub skipped: usize,
    pub capped: usize,
    pub unassigned: usize,
    /// Retained rows without a completion timestamp.
    pub open: usize,
    pub skip_reasons: BTreeMap<String, usize>,
}

impl IngestReport {
    fn skip(&mut self, reason: &str) {
        self.skipped += 1;
        *self.skip_reasons.entry(reason.to_string()).or_default() += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Sorted by `created_at`.
    pub requests: Vec<ServiceRequest>,
    pub type_vocabulary: Vec<String>,
    /// Train records are strictly before this instant.
    pub split_boundary: Option<NaiveDateTime>,
}

impl Dataset {
    pub fn new(mut requests: Vec<ServiceRequest>, type_vocabulary: Vec<String>) -> Self {
        requests.sort_by(|a, b| {
            a.created_at
                .cmp(&b.created_at)
                .then_with(|| a.request_id.cmp(&b.request_id))
        });
        Self {
            requests,
            type_vocabulary,
            split_boundary: None,
        }
    }

    /// Vocabulary as the sorted set of labels present in `requests`.
    pub fn from_requests(requests: Vec<ServiceRequest>) -> Self {
        let vocab: BTreeSet<String> = requests.iter().map(|r| r.request_type.clone()).collect();
        Self::new(requests, vocab.into_iter().collect())
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn type_index(&self, label: &str) -> Option<usize> {
        self.type_vocabulary.iter().position(|t| t == label)
    }

    /// Records with a known service time.
    pub fn completed(&self) -> impl Iterator<Item = &ServiceRequest> {
        self.requests.iter().filter(|r| r.service_time_days.is_some())
    }

    /// Records strictly before the split boundary (all records if unset).
    pub fn train_requests(&self) -> impl Iterator<Item = &ServiceRequest> {
        let b = self.split_boundary;
        self.requests.iter().filter(move |r| b.is_none_or(|b| r.created_at < b))
    }
}

struct Columns {
    request_id: Option<usize>,
    created: usize,
    completed: usize,
    department: usize,
    request_type: usize,
    lon: Option<usize>,
    lat: Option<usize>,
    location: Option<usize>,
    district: Option<usize>,
    description: Option<usize>,
}

fn resolve_columns(headers: &csv::StringRecord, schema: &IngestSchema) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let optional = |name: &Option<String>| -> Result<Option<usize>> {
        match name {
            Some(n) => need(n).map(Some),
            None => Ok(None),
        }
    };
    let cols = Columns {
        request_id: optional(&schema.request_id)?,
        created: need(&schema.created)?,
        completed: need(&schema.completed)?,
        department: need(&schema.department)?,
        request_type: need(&schema.request_type)?,
        lon: optional(&schema.longitude)?,
        lat: optional(&schema.latitude)?,
        location: optional(&schema.location)?,
        district: optional(&schema.district)?,
        description: optional(&schema.description)?,
    };
    if cols.location.is_none() && (cols.lon.is_none() || cols.lat.is_none()) {
        return Err(Error::MissingColumn(
            schema
                .location
                .clone()
                .or_else(|| schema.longitude.clone())
                .unwrap_or_else(|| "longitude".into()),
        ));
    }
    Ok(cols)
}

fn parse_location(raw: &str) -> Option<(f64, f64)> {
    let cleaned: String = raw.chars().filter(|c| !matches!(c, '(' | ')' | '[' | ']')).collect();
    let mut parts = cleaned.split(',').map(|p| p.trim().parse::<f64>());
    match (parts.next(), parts.next()) {
        (Some(Ok(lon)), Some(Ok(lat))) => Some((lon, lat)),
        _ => None,
    }
}

/// Collects distinct district labels from a CSV so a [`RegionMap`] can be
/// built before parsing.
pub fn discover_regions<R: Read>(file: R, schema: &IngestSchema) -> Result<RegionMap> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = rdr.headers()?.clone();
    let col = schema
        .district
        .as_deref()
        .ok_or_else(|| Error::MissingColumn("district".into()))?;
    let idx = headers
        .iter()
        .position(|h| h.trim() == col)
        .ok_or_else(|| Error::MissingColumn(col.to_string()))?;
    let mut labels = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        if let Some(v) = rec.get(idx) {
            labels.insert(v.to_string());
        }
    }
    Ok(RegionMap::from_labels(labels))
}

/// Parses a service-request CSV.
///
/// Malformed rows are skipped and counted; completed records whose service
/// time exceeds [`SERVICE_TIME_CAP_DAYS`] are dropped; records that cannot be
/// placed in a region are counted as unassigned.
pub fn parse_requests<R: Read>(
    file: R,
    region_map: &RegionMap,
    schema: &IngestSchema,
) -> Result<(Dataset, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = rdr.headers()?.clone();
    let cols = resolve_columns(&headers, schema)?;
    let type_filter: Option<BTreeSet<&str>> = schema.types.as_ref().map(|t| t.iter().map(String::as_str).collect());
    let mut report = IngestReport::default();
    let mut requests = Vec::new();

    for (row_no, rec) in rdr.records().enumerate() {
        report.total_rows += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                log::warn!("row {}: unreadable record: {e}", row_no + 2);
                report.skip("unreadable");
                continue;
            }
        };
        let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        let Some(created_at) = parse_timestamp(field(cols.created)) else {
            log::warn!("row {}: unparseable created timestamp", row_no + 2);
            report.skip("bad_created");
            continue;
        };
        let completed_raw = field(cols.completed);
        let completed_at = if completed_raw.is_empty() {
            None
        } else {
            match parse_timestamp(completed_raw) {
                Some(t) => Some(t),
                None => {
                    log::warn!("row {}: unparseable completed timestamp", row_no + 2);
                    report.skip("bad_completed");
                    continue;
                }
            }
        };
        if completed_at.is_some_and(|c| c < created_at) {
            report.skip("completed_before_created");
            continue;
        }
        let request_type = field(cols.request_type).to_string();
        if request_type.is_empty() {
            report.skip("missing_type");
            continue;
        }
        if type_filter.as_ref().is_some_and(|f| !f.contains(request_type.as_str())) {
            report.skip("filtered_type");
            continue;
        }
        let coords = match cols.location {
            Some(i) if cols.lon.is_none() => parse_location(field(i)),
            _ => match (
                field(cols.lon.unwrap()).parse::<f64>(),
                field(cols.lat.unwrap()).parse::<f64>(),
            ) {
                (Ok(lon), Ok(lat)) => Some((lon, lat)),
                _ => cols.location.and_then(|i| parse_location(field(i))),
            },
        };
        let (longitude, latitude) = coords.unwrap_or((f64::NAN, f64::NAN));

        let service_time_days = completed_at.map(|c| days_between(created_at, c));
        if service_time_days.is_some_and(|s| s > SERVICE_TIME_CAP_DAYS) {
            report.capped += 1;
            continue;
        }

        let district_id = cols
            .district
            .map(|i| field(i))
            .filter(|s| !s.is_empty())
            .and_then(|s| region_map.id_of(s));
        let region_id = match district_id {
            Some(id) => Some(id),
            None if !region_map.polygons.is_empty() && longitude.is_finite() && latitude.is_finite() => {
                match assign_region(longitude, latitude, region_map) {
                    RegionAssignment::Region(id) => Some(id),
                    RegionAssignment::Unassigned => None,
                }
            }
            None => None,
        };
        let Some(region_id) = region_id else {
            report.unassigned += 1;
            continue;
        };

        let request_id = cols
            .request_id
            .map(|i| field(i).to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| format!("row-{}", row_no + 2));
        let description = cols.description.map(|i| field(i).to_string()).filter(|s| !s.is_empty());
        if completed_at.is_none() {
            report.open += 1;
        }
        report.retained += 1;
        requests.push(ServiceRequest {
            request_id,
            created_at,
            completed_at,
            department: field(cols.department).to_string(),
            request_type,
            longitude,
            latitude,
            region_id,
            description,
            service_time_days,
        });
    }

    let dataset = match &schema.types {
        Some(types) => Dataset::new(requests, types.clone()),
        None => Dataset::from_requests(requests),
    };
    Ok((dataset, report))
}

/// Writes requests in the canonical schema ([`IngestSchema::default`]).
pub fn write_requests<W: Write>(out: W, requests: &[ServiceRequest], region_map: &RegionMap) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "request_id",
        "created_at",
        "completed_at",
        "department",
        "request_type",
        "longitude",
        "latitude",
        "region",
        "description",
    ])?;
    for r in requests {
        w.write_record([
            r.request_id.clone(),
            r.created_at.format(TIMESTAMP_FORMAT).to_string(),
            r.completed_at
                .map(|c| c.format(TIMESTAMP_FORMAT).to_string())
                .unwrap_or_default(),
            r.department.clone(),
            r.request_type.clone(),
            format!("{}", r.longitude),
            format!("{}", r.latitude),
            region_map.label(r.region_id).to_string(),
            r.description.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Splits at the `train_fraction` quantile of `created_at`; train records are
/// strictly before the boundary.
pub fn chronological_split(ds: &Dataset, train_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Precondition(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    if ds.is_empty() {
        return Err(Error::Precondition("cannot split an empty dataset".into()));
    }
    let boundary = split_boundary(ds, train_fraction)?;
    let (train, test): (Vec<_>, Vec<_>) = ds.requests.iter().cloned().partition(|r| r.created_at < boundary);
    let mut train = Dataset::new(train, ds.type_vocabulary.clone());
    let mut test = Dataset::new(test, ds.type_vocabulary.clone());
    train.split_boundary = Some(boundary);
    test.split_boundary = Some(boundary);
    Ok((train, test))
}

/// The boundary instant [`chronological_split`] would use.
pub fn split_boundary(ds: &Dataset, train_fraction: f64) -> Result<NaiveDateTime> {
    let mut times: Vec<NaiveDateTime> = ds.requests.iter().map(|r| r.created_at).collect();
    times.sort();
    let n = times.len();
    let idx = ((train_fraction * n as f64).floor() as usize).min(n - 1);
    let boundary = times[idx];
    let n_train = times.partition_point(|t| *t < boundary);
    if n_train == 0 || n_train == n {
        return Err(Error::Precondition(
            "degenerate dataset: split leaves an empty partition".into(),
        ));
    }
    Ok(boundary)
}

/// Index of each vocabulary label.
pub fn vocabulary_index(vocab: &[String]) -> HashMap<&str, usize> {
    vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    fn request(id: &str, created: NaiveDateTime) -> ServiceRequest {
        ServiceRequest {
            request_id: id.into(),
            created_at: created,
            completed_at: Some(created + Duration::hours(30)),
            department: "PW".into(),
            request_type: "A".into(),
            longitude: 0.0,
            latitude: 0.0,
            region_id: 0,
            description: None,
            service_time_days: Some(1.25),
        }
    }

    fn portal_schema() -> IngestSchema {
        IngestSchema {
            request_id: None,
            created: "Created Date".into(),
            completed: "Completed At".into(),
            department: "Department".into(),
            request_type: "Request Type".into(),
            longitude: None,
            latitude: None,
            location: Some("GPS".into()),
            district: Some("Council District".into()),
            description: Some("Description".into()),
            types: None,
        }
    }

    #[test]
    fn parses_example_row_with_fractional_service_time() {
        let csv = "Created Date,Completed At,Department,Request Type,GPS,Council District,Description\n\
                   1/2/2023 8:13,1/4/2023 10:31,PW - Solid Waste,Brush Collection,\"(-85.2846, 35.0979)\",2,Holiday tree pickup\n";
        let map = RegionMap::from_labels(["1", "2", "3"]);
        let (ds, report) = parse_requests(csv.as_bytes(), &map, &portal_schema()).unwrap();
        assert_eq!(report.retained, 1);
        let r = &ds.requests[0];
        // 2 days + 2h18m
        assert!((r.service_time_days.unwrap() - (2.0 + 138.0 / 1440.0)).abs() < 1e-12);
        assert!((r.service_time_days.unwrap() - 2.0958).abs() < 1e-4);
        assert_eq!(r.region_id, 1);
        assert_eq!(r.longitude, -85.2846);
        assert_eq!(r.description.as_deref(), Some("Holiday tree pickup"));
    }

    #[test]
    fn zero_duration_and_cap_accounting() {
        let csv = "Created Date,Completed At,Department,Request Type,GPS,Council District,Description\n\
                   1/2/2023 8:13,1/2/2023 8:13,PW,A,\"(1, 1)\",1,\n\
                   1/1/2023 0:00,3/23/2023 0:00,PW,A,\"(1, 1)\",1,x\n\
                   garbage,1/2/2023 8:13,PW,A,\"(1, 1)\",1,x\n\
                   1/1/2023 0:00,,PW,A,\"(1, 1)\",9,x\n";
        let map = RegionMap::from_labels(["1"]);
        let (ds, report) = parse_requests(csv.as_bytes(), &map, &portal_schema()).unwrap();
        assert_eq!(ds.requests[0].service_time_days, Some(0.0));
        assert_eq!(report.capped, 1, "81 days is over the cap");
        assert_eq!(report.skipped, 1);
        assert_eq!(report.unassigned, 1);
        assert_eq!(
            report.retained + report.skipped + report.capped + report.unassigned,
            report.total_rows
        );
    }

    #[test]
    fn missing_column_names_the_column() {
        let csv = "Created Date,Department\n";
        let err = parse_requests(csv.as_bytes(), &RegionMap::default(), &portal_schema()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "Completed At"));
    }

    fn square(x0: f64, y0: f64, side: f64) -> Polygon {
        Polygon::new(vec![(x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side)])
    }

    fn grid_map() -> RegionMap {
        let mut map = RegionMap::from_labels(["0", "1", "2", "3", "4"]);
        map.polygons = vec![
            (0, square(10.0, 10.0, 1.0)),
            (4, square(1.0, 0.0, 1.0)),
            (1, square(0.0, 0.0, 1.0)),
            (3, square(5.0, 5.0, 2.0)),
        ];
        map
    }

    #[test]
    fn assigns_regions_by_containment_with_lowest_id_on_shared_edge() {
        let map = grid_map();
        let c = map.centroid(3).unwrap();
        assert_eq!(assign_region(c.0, c.1, &map), RegionAssignment::Region(3));
        assert_eq!(assign_region(-4.0, 3.0, &map), RegionAssignment::Unassigned);
        assert_eq!(assign_region(1.0, 0.5, &map), RegionAssignment::Region(1));
    }

    #[test]
    fn geojson_round_trip() {
        let map = grid_map();
        let json = map.to_geojson("district").to_string();
        let back = RegionMap::from_geojson(&json, "district").unwrap();
        assert_eq!(back.labels, vec!["0", "1", "3", "4"]);
        let c = map.centroid(3).unwrap();
        let id = match assign_region(c.0, c.1, &back) {
            RegionAssignment::Region(id) => id,
            _ => panic!("unassigned"),
        };
        assert_eq!(back.label(id), "3");
    }

    #[test]
    fn split_examples() {
        let start = ts("2023-01-01 09:00");
        let ds = Dataset::from_requests(
            (0..10)
                .map(|i| request(&format!("r{i}"), start + Duration::days(i)))
                .collect(),
        );
        let (train, test) = chronological_split(&ds, 0.8).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert!(train
            .requests
            .iter()
            .all(|r| r.created_at < test.requests[0].created_at));

        let ds4 = Dataset::from_requests(ds.requests[..4].to_vec());
        let (a, b) = chronological_split(&ds4, 0.5).unwrap();
        assert_eq!((a.len(), b.len()), (2, 2));

        assert!(matches!(chronological_split(&ds, 1.0), Err(Error::Precondition(_))));
        let same = Dataset::from_requests((0..5).map(|i| request(&format!("s{i}"), start)).collect());
        assert!(chronological_split(&same, 0.8).is_err());
    }
}
