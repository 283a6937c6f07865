//! JSON inference service over one frozen model.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ivsgen::arbitrage::{ArbitrageChecker, ViolationReport};
use ivsgen::cvae::CvaeModel;
use ivsgen::features::AnchorRegression;
use ivsgen::repair::{repair_surface, RepairConfig, StopReason};
use ivsgen::{Feature, FeatureVector, IVSurface};

/// Environment variable naming the default checkpoint.
pub const CHECKPOINT_ENV: &str = "IVSGEN_CHECKPOINT";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    pub checkpoint: Option<PathBuf>,
    pub max_batch: usize,
    pub max_body_bytes: usize,
    pub enable_repair: bool,
    /// Wall-clock budget per repair request.
    pub repair_seconds: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            checkpoint: None,
            max_batch: 64,
            max_body_bytes: 1 << 20,
            enable_repair: true,
            repair_seconds: 10.0,
        }
    }
}

struct Loaded {
    model: CvaeModel,
    regression: AnchorRegression,
    checker: ArbitrageChecker,
    fingerprint: String,
}

/// Shared read-only state. `model` is `None` until a checkpoint is loaded.
#[derive(Clone)]
pub struct AppState {
    loaded: Option<Arc<Loaded>>,
    cfg: Arc<ServerConfig>,
}

impl AppState {
    pub fn new(model: Option<CvaeModel>, cfg: ServerConfig) -> ivsgen::Result<Self> {
        let loaded = match model {
            Some(model) => {
                let grid = Arc::clone(model.grid());
                Some(Arc::new(Loaded {
                    regression: AnchorRegression::for_grid(Arc::clone(&grid))?,
                    checker: ArbitrageChecker::new(grid),
                    fingerprint: model.fingerprint(),
                    model,
                }))
            }
            None => None,
        };
        Ok(Self {
            loaded,
            cfg: Arc::new(cfg),
        })
    }

    /// Loads and validates the configured checkpoint.
    pub fn from_config(cfg: ServerConfig) -> ivsgen::Result<Self> {
        let model = cfg.checkpoint.as_ref().map(CvaeModel::load).transpose()?;
        Self::new(model, cfg)
    }

    pub fn fingerprint(&self) -> Option<&str> {
        self.loaded.as_ref().map(|l| l.fingerprint.as_str())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn bad_field(field: &str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            field: Some(field.into()),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'a str>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: &self.message,
            field: self.field.as_deref(),
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))
}

fn loaded(state: &AppState) -> Result<Arc<Loaded>, ApiError> {
    state
        .loaded
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded"))
}

pub fn router(state: AppState) -> Router {
    let limit = state.cfg.max_body_bytes;
    Router::new()
        .route("/model/info", get(model_info))
        .route("/decode", post(decode))
        .route("/repair", post(repair))
        .route("/features", post(features))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(state: AppState) -> std::io::Result<()> {
    let bind = state.cfg.bind;
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridInfo {
    pub m_values: Vec<f64>,
    pub tau_values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelInfo {
    pub feature_names: Vec<String>,
    pub feature_ranges: BTreeMap<String, [f64; 2]>,
    pub d_z: usize,
    pub grid: GridInfo,
    pub fingerprint: String,
    pub repair_enabled: bool,
}

async fn model_info(State(state): State<AppState>) -> ApiResult<ModelInfo> {
    let l = loaded(&state)?;
    let m = &l.model;
    Ok(Json(ModelInfo {
        feature_names: m.features().iter().map(|f| f.to_string()).collect(),
        feature_ranges: m
            .features()
            .iter()
            .zip(m.feature_ranges())
            .map(|(f, &(lo, hi))| (f.to_string(), [lo, hi]))
            .collect(),
        d_z: m.d_z(),
        grid: GridInfo {
            m_values: m.grid().m_values().to_vec(),
            tau_values: m.grid().tau_values().to_vec(),
        },
        fingerprint: l.fingerprint.clone(),
        repair_enabled: state.cfg.enable_repair,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointRequest {
    pub y: BTreeMap<String, f64>,
    pub z: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(PointRequest),
    Many(Vec<PointRequest>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeViolation {
    pub kind: String,
    pub m_index: usize,
    pub tau_index: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrageSummary {
    pub is_free: bool,
    /// Absent when the surface has a non-positive volatility.
    pub l_calendar: Option<f64>,
    pub l_butterfly: Option<f64>,
    pub violation_nodes: Vec<NodeViolation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl ArbitrageSummary {
    fn from_report(r: &ViolationReport) -> Self {
        let node = |kind: &str, v: &ivsgen::arbitrage::Violation| NodeViolation {
            kind: kind.into(),
            m_index: v.m_index,
            tau_index: v.tau_index,
            magnitude: v.magnitude,
        };
        Self {
            is_free: r.is_free,
            l_calendar: Some(r.l_calendar),
            l_butterfly: Some(r.l_butterfly),
            violation_nodes: r
                .calendar_violations
                .iter()
                .map(|v| node("calendar", v))
                .chain(r.butterfly_violations.iter().map(|v| node("butterfly", v)))
                .collect(),
            message: None,
        }
    }

    fn audit(checker: &ArbitrageChecker, sigma: &[f64]) -> Self {
        match checker.audit_values(sigma) {
            Ok(r) => Self::from_report(&r),
            Err(e) => Self {
                is_free: false,
                l_calendar: None,
                l_butterfly: None,
                violation_nodes: Vec::new(),
                message: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    /// `surface[j][i]`: maturity `j`, log-moneyness `i`.
    pub surface: Vec<Vec<f64>>,
    /// Extracted values of the model's conditioning features.
    pub features: BTreeMap<String, f64>,
    /// All four extracted features.
    pub all_features: BTreeMap<String, f64>,
    pub arbitrage: ArbitrageSummary,
}

fn condition(l: &Loaded, y: &BTreeMap<String, f64>) -> Result<FeatureVector, ApiError> {
    let unknown: Vec<&String> = y
        .keys()
        .filter(|k| !l.model.features().iter().any(|f| f.name() == k.as_str()))
        .collect();
    if !unknown.is_empty() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "unknown feature names {unknown:?}; the model is conditioned on {:?}",
                l.model.features().iter().map(|f| f.name()).collect::<Vec<_>>()
            ),
        ));
    }
    let mut values = Vec::new();
    for f in l.model.features() {
        match y.get(f.name()) {
            Some(v) if v.is_finite() => values.push(*v),
            Some(_) => return Err(ApiError::bad_field("y", format!("{f} is not finite"))),
            None => {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("missing feature {f}"),
                ))
            }
        }
    }
    FeatureVector::new(l.model.features().to_vec(), values).map_err(ApiError::internal)
}

fn latent(l: &Loaded, z: &[f64]) -> Result<(), ApiError> {
    if z.len() != l.model.d_z() {
        return Err(ApiError::bad_field(
            "z",
            format!("z must have {} entries, got {}", l.model.d_z(), z.len()),
        ));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::bad_field("z", "z entries must be finite"));
    }
    Ok(())
}

fn rows(l: &Loaded, sigma: &[f64]) -> Vec<Vec<f64>> {
    let g = l.model.grid();
    (0..g.n_tau())
        .map(|j| (0..g.n_m()).map(|i| sigma[g.flat_index(i, j)]).collect())
        .collect()
}

fn feature_map(features: &[Feature], values: &[f64]) -> BTreeMap<String, f64> {
    features.iter().zip(values).map(|(f, v)| (f.to_string(), *v)).collect()
}

fn finite(values: &[f64]) -> Result<(), ApiError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ApiError::internal("model produced a non-finite value"))
    }
}

fn decode_one(l: &Loaded, req: &PointRequest) -> Result<DecodeResponse, ApiError> {
    let y = condition(l, &req.y)?;
    latent(l, &req.z)?;
    let sigma = l.model.decode_values(&y, &req.z).map_err(ApiError::internal)?;
    finite(&sigma)?;
    let all = l
        .regression
        .features_from_values(&sigma, &Feature::ALL)
        .map_err(ApiError::internal)?;
    finite(&all)?;
    let own: Vec<f64> = l
        .model
        .features()
        .iter()
        .map(|f| all[Feature::ALL.iter().position(|g| g == f).expect("known feature")])
        .collect();
    Ok(DecodeResponse {
        surface: rows(l, &sigma),
        features: feature_map(l.model.features(), &own),
        all_features: feature_map(&Feature::ALL, &all),
        arbitrage: ArbitrageSummary::audit(&l.checker, &sigma),
    })
}

async fn decode(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let l = loaded(&state)?;
    match parse::<OneOrMany>(&body)? {
        OneOrMany::One(req) => Ok(Json(decode_one(&l, &req)?).into_response()),
        OneOrMany::Many(reqs) => {
            if reqs.len() > state.cfg.max_batch {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    format!("batch of {} exceeds the limit of {}", reqs.len(), state.cfg.max_batch),
                ));
            }
            let out = reqs.iter().map(|r| decode_one(&l, r)).collect::<Result<Vec<_>, _>>()?;
            Ok(Json(out).into_response())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairResponse {
    pub z_optimized: Vec<f64>,
    pub surface: Vec<Vec<f64>>,
    pub repaired: bool,
    pub converged: bool,
    pub iterations: usize,
    pub stop: StopReason,
    pub feature_drift: BTreeMap<String, f64>,
    pub before: ArbitrageSummary,
    pub after: ArbitrageSummary,
}

async fn repair(State(state): State<AppState>, body: Bytes) -> ApiResult<RepairResponse> {
    let l = loaded(&state)?;
    if !state.cfg.enable_repair {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "repair is disabled on this server"));
    }
    let req: PointRequest = parse(&body)?;
    let y = condition(&l, &req.y)?;
    latent(&l, &req.z)?;
    let cfg = RepairConfig {
        time_budget: Some(state.cfg.repair_seconds),
        ..RepairConfig::default()
    };
    let worker = Arc::clone(&l);
    let result = tokio::task::spawn_blocking(move || repair_surface(&worker.model, &y, &req.z, &cfg))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    finite(result.surface.values())?;
    finite(&result.z_optimized)?;
    Ok(Json(RepairResponse {
        surface: rows(&l, result.surface.values()),
        repaired: result.repaired,
        converged: result.converged,
        iterations: result.iterations,
        stop: result.stop,
        feature_drift: feature_map(l.model.features(), &result.feature_drift),
        before: ArbitrageSummary::from_report(&result.before),
        after: ArbitrageSummary::from_report(&result.after),
        z_optimized: result.z_optimized,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesRequest {
    /// `surface[j][i]`: maturity `j`, log-moneyness `i`.
    pub surface: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesResponse {
    pub features: BTreeMap<String, f64>,
}

async fn features(State(state): State<AppState>, body: Bytes) -> ApiResult<FeaturesResponse> {
    let l = loaded(&state)?;
    let req: FeaturesRequest = parse(&body)?;
    let g = l.model.grid();
    if req.surface.len() != g.n_tau() || req.surface.iter().any(|r| r.len() != g.n_m()) {
        return Err(ApiError::bad_field(
            "surface",
            format!("surface must be {} rows of {} values", g.n_tau(), g.n_m()),
        ));
    }
    let mut sigma = vec![0.0; g.len()];
    for (j, row) in req.surface.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            sigma[g.flat_index(i, j)] = *v;
        }
    }
    let surface = IVSurface::new(Arc::clone(g), sigma).map_err(|e| ApiError::bad_field("surface", e.to_string()))?;
    let fv = l
        .regression
        .extract(&surface, &Feature::ALL)
        .map_err(ApiError::internal)?;
    finite(fv.values())?;
    Ok(Json(FeaturesResponse {
        features: feature_map(fv.features(), fv.values()),
    }))
}
