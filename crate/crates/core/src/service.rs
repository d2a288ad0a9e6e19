//! HTTP prediction endpoint.
//!
//! `POST /predict` takes `{created_at, request_type, longitude, latitude,
//! description?}` and answers with the predicted service time. `GET
//! /healthz` reports readiness. Workloads come from the score cache or the
//! heuristic; the handler never waits on a language model.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{Duration, NaiveDateTime};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::ingest::{assign_region, parse_timestamp, RegionAssignment, RegionMap};
use crate::panel::Panel;
use crate::predictor::{PredictRequest, Predictor, ServiceTimeModel};
use crate::workload::WorkloadScorer;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictBody {
    pub created_at: String,
    pub request_type: String,
    pub longitude: f64,
    pub latitude: f64,
    #[serde(default)]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub gpr_mean: f64,
    pub gpr_variance: f64,
    pub workload: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub service_time_days: f64,
    pub estimated_completion_date: String,
    pub components: Components,
    pub fallback: bool,
    pub region: String,
}

/// Shared state behind the router. The predictor is swapped whole when the
/// panel is refreshed; in-flight requests keep the snapshot they started with.
pub struct ServiceState {
    predictor: RwLock<Arc<Predictor>>,
    model: ServiceTimeModel,
    regions: RegionMap,
    /// Per-region points used when the map has no polygons.
    anchors: Vec<Option<(f64, f64)>>,
    scorer: WorkloadScorer,
}

impl ServiceState {
    pub fn new(
        model: ServiceTimeModel,
        panel: Panel,
        regions: RegionMap,
        anchors: Vec<Option<(f64, f64)>>,
        scorer: WorkloadScorer,
    ) -> Result<Self> {
        if regions.len() != model.manifest.region_labels.len() {
            return Err(Error::Precondition(format!(
                "region map has {} regions, model expects {}",
                regions.len(),
                model.manifest.region_labels.len()
            )));
        }
        let predictor = Predictor::new(model.clone(), panel)?;
        predictor.warm()?;
        Ok(Self {
            predictor: RwLock::new(Arc::new(predictor)),
            model,
            regions,
            anchors,
            scorer,
        })
    }

    pub fn predictor(&self) -> Arc<Predictor> {
        self.predictor.read().expect("predictor lock").clone()
    }

    /// Replaces the serving panel.
    pub fn refresh_panel(&self, panel: Panel) -> Result<()> {
        let next = Predictor::new(self.model.clone(), panel)?;
        next.warm()?;
        *self.predictor.write().expect("predictor lock") = Arc::new(next);
        Ok(())
    }

    fn locate(&self, lon: f64, lat: f64) -> Option<usize> {
        if !self.regions.polygons.is_empty() {
            return match assign_region(lon, lat, &self.regions) {
                RegionAssignment::Region(i) => Some(i),
                RegionAssignment::Unassigned => None,
            };
        }
        self.anchors
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|(x, y)| ((x - lon).powi(2) + (y - lat).powi(2), i)))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, i)| i)
    }

    pub fn handle(&self, body: &[u8]) -> (StatusCode, serde_json::Value) {
        let req: PredictBody = match serde_json::from_slice(body) {
            Ok(r) => r,
            Err(e) => {
                return (
                    StatusCode::BAD_REQUEST,
                    json!({ "error": format!("malformed request: {e}") }),
                )
            }
        };
        let Some(created_at) = parse_timestamp(&req.created_at) else {
            return (
                StatusCode::BAD_REQUEST,
                json!({ "error": format!("unparseable created_at `{}`", req.created_at) }),
            );
        };
        if !req.longitude.is_finite() || !req.latitude.is_finite() {
            return (
                StatusCode::BAD_REQUEST,
                json!({ "error": "coordinates must be finite" }),
            );
        }
        let vocabulary = &self.model.manifest.type_vocabulary;
        if !vocabulary.contains(&req.request_type) {
            return (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({
                    "error": format!("unknown request type `{}`", req.request_type),
                    "known_types": vocabulary,
                }),
            );
        }
        let Some(region) = self.locate(req.longitude, req.latitude) else {
            return (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": "location is outside every region" }),
            );
        };
        let workload = self.scorer.score_cached(req.description.as_deref(), created_at.date());
        let predictor = self.predictor();
        let input = PredictRequest {
            created_at,
            request_type: req.request_type,
            region,
            workload: workload.w,
        };
        match predictor.predict(&input) {
            Ok(p) => {
                let body = PredictResponse {
                    service_time_days: p.service_time_days,
                    estimated_completion_date: completion_date(created_at, p.service_time_days),
                    components: Components {
                        gpr_mean: p.components.mean,
                        gpr_variance: p.components.variance,
                        workload: p.components.workload,
                    },
                    fallback: p.fallback,
                    region: self.regions.label(region).to_string(),
                };
                (StatusCode::OK, serde_json::to_value(body).expect("response serializes"))
            }
            Err(e @ Error::UnknownType { .. }) => (StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": e.to_string() })),
            Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": e.to_string() })),
        }
    }
}

/// `created_at + days`, to the second.
pub fn completion_date(created_at: NaiveDateTime, days: f64) -> String {
    let secs = (days * 86_400.0).round() as i64;
    (created_at + Duration::seconds(secs))
        .format("%Y-%m-%dT%H:%M:%S")
        .to_string()
}

async fn predict(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let (status, value) = state.handle(&body);
    (status, Json(value)).into_response()
}

async fn healthz(State(state): State<Arc<ServiceState>>) -> Response {
    let p = state.predictor();
    let days = p.servable_days();
    Json(json!({
        "status": "ok",
        "types": state.model.manifest.type_vocabulary.len(),
        "regions": state.regions.len(),
        "panel_start": p.panel().start.to_string(),
        "panel_days": p.panel().days,
        "servable_days": [days.start(), days.end()],
    }))
    .into_response()
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
