//! Local HTTP service for the measurement viewer. Schemas are documented in `docs/http-api.md`.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get};
use axum::{Json, Router};
use daem_core::attribution::{attribute, encode_png, render_heatmap, top_patches, Attribution, Scale};
use daem_core::dataset::{CellType, Label};
use daem_core::model::{ModelConfig, ModelParams};
use daem_core::tme::{propose_tumor_region, DEFAULT_GRID_PX};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::{OnceCell, Semaphore};

use crate::failure::{CliResult, Failure};
use crate::store::{MeasurementInput, MeasurementStore};
use crate::workspace::{load_checkpoint, load_thumbnail, scan_cohort, shrink, SlideEntry, THUMBNAIL_DOWNSAMPLE};

/// Thumbnail levels: level L is shrunk 2^L times from the stored thumbnail.
pub const MAX_LEVEL: u32 = 6;
const TOP_PER_TIER: usize = 4;

pub struct LoadedModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub threshold: f64,
    /// SHA-256 of the checkpoint file.
    pub hash: String,
}

type AttrCell = Arc<OnceCell<Arc<Attribution>>>;

pub struct AppState {
    pub slides: BTreeMap<String, SlideEntry>,
    pub model: Option<LoadedModel>,
    pub store: MeasurementStore,
    attributions: Mutex<HashMap<(String, String), AttrCell>>,
    workers: Semaphore,
}

impl AppState {
    pub fn new(slides: Vec<SlideEntry>, model: Option<LoadedModel>, store: MeasurementStore, workers: usize) -> Self {
        AppState {
            slides: slides.into_iter().map(|e| (e.bag.wsi_id.clone(), e)).collect(),
            model,
            store,
            attributions: Mutex::new(HashMap::new()),
            workers: Semaphore::new(workers.max(1)),
        }
    }

    pub fn load(data: &Path, ckpt: Option<&Path>, workers: usize) -> CliResult<Self> {
        let slides = scan_cohort(data)?;
        let model = ckpt
            .map(|p| {
                load_checkpoint(p).map(|(c, hash)| LoadedModel {
                    params: c.state.inference_params().clone(),
                    config: c.config.model,
                    threshold: c.config.threshold,
                    hash,
                })
            })
            .transpose()?;
        let store = MeasurementStore::open(data)?;
        Ok(AppState::new(slides, model, store, workers))
    }
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<Failure> for ApiError {
    fn from(f: Failure) -> Self {
        let status = match f {
            Failure::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Failure::Missing(_) => StatusCode::NOT_FOUND,
            Failure::Other(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, f.to_string())
    }
}

impl From<daem_core::Error> for ApiError {
    fn from(e: daem_core::Error) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/wsis", get(list_wsis))
        .route("/wsi/{id}/thumbnail", get(thumbnail))
        .route("/wsi/{id}/cells", get(cells))
        .route("/wsi/{id}/heatmap", get(heatmap))
        .route("/wsi/{id}/tumor-region", get(tumor_region))
        .route("/wsi/{id}/measurements", get(list_measurements).post(add_measurement))
        .route("/wsi/{id}/measurements/{mid}", delete(delete_measurement))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> CliResult<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Failure::Other(format!("bind {addr}: {e}")))?;
    eprintln!("listening on http://{}", listener.local_addr().map_err(|e| Failure::Other(e.to_string()))?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Failure::Other(e.to_string()))
}

fn slide<'a>(state: &'a AppState, id: &str) -> ApiResult<&'a SlideEntry> {
    state
        .slides
        .get(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown wsi id {id:?}")))
}

fn model(state: &AppState) -> ApiResult<&LoadedModel> {
    state
        .model
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded"))
}

/// Attribution of one slide, computed at most once per (checkpoint, slide) on the bounded
/// worker pool.
async fn attribution(state: &Shared, id: &str) -> ApiResult<Arc<Attribution>> {
    let hash = model(state)?.hash.clone();
    slide(state, id)?;
    let cell = {
        let mut map = state.attributions.lock().unwrap_or_else(|p| p.into_inner());
        map.entry((hash, id.to_string())).or_default().clone()
    };
    cell.get_or_try_init(|| async {
        let _permit = state
            .workers
            .acquire()
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        let st = state.clone();
        let id = id.to_string();
        let attr = tokio::task::spawn_blocking(move || {
            let m = st.model.as_ref().expect("checked above");
            attribute(&st.slides[&id].bag, &m.params, &m.config)
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
        Ok::<_, ApiError>(Arc::new(attr))
    })
    .await
    .cloned()
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "max-age=3600")], bytes).into_response()
}

async fn list_wsis(State(state): State<Shared>) -> ApiResult<Json<serde_json::Value>> {
    let mut out = Vec::with_capacity(state.slides.len());
    for (id, e) in &state.slides {
        let prediction = match &state.model {
            Some(m) => {
                let p = attribution(&state, id).await?.stas_probability;
                let label = if p >= m.threshold { Label::Stas } else { Label::NonStas };
                json!({ "probability": p, "label": label })
            }
            None => serde_json::Value::Null,
        };
        out.push(json!({
            "wsi_id": id,
            "patient_id": e.bag.patient_id,
            "label": e.bag.label,
            "section_kind": e.bag.section_kind,
            "subtype": e.bag.subtype,
            "mpp": e.bag.mpp,
            "prediction": prediction,
        }));
    }
    Ok(Json(json!(out)))
}

#[derive(Deserialize)]
struct LevelQuery {
    level: Option<u32>,
}

async fn thumbnail(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<LevelQuery>,
) -> ApiResult<Response> {
    let e = slide(&state, &id)?;
    let level = q.level.unwrap_or(0);
    if level > MAX_LEVEL {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("level must be at most {MAX_LEVEL}"),
        ));
    }
    let img = shrink(&load_thumbnail(e)?, 1 << level);
    Ok(png_response(encode_png(&img)?))
}

async fn cells(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let e = slide(&state, &id)?;
    Ok(Json(json!({ "wsi_id": id, "mpp": e.bag.mpp, "cells": e.bag.cells })))
}

#[derive(Deserialize)]
struct HeatmapQuery {
    scale: Option<String>,
    format: Option<String>,
}

async fn heatmap(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HeatmapQuery>,
) -> ApiResult<Response> {
    let e = slide(&state, &id)?;
    let tag = q.scale.as_deref().unwrap_or("20x");
    let scale = Scale::parse(tag)
        .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("scale must be 20x or 10x, got {tag:?}")))?;
    let attr = attribution(&state, &id).await?;
    let map = attr.map(scale);
    match q.format.as_deref().unwrap_or("png") {
        "png" => {
            let img = render_heatmap(map, Some(&load_thumbnail(e)?), THUMBNAIL_DOWNSAMPLE)?;
            Ok(png_response(encode_png(&img)?))
        }
        "json" => Ok(Json(json!({
            "wsi_id": id,
            "scale": scale,
            "downsample": THUMBNAIL_DOWNSAMPLE,
            "stas_probability": attr.stas_probability,
            "map": map,
            "top": top_patches(map, TOP_PER_TIER).ok(),
        }))
        .into_response()),
        other => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("format must be png or json, got {other:?}"),
        )),
    }
}

async fn tumor_region(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let e = slide(&state, &id)?;
    let region = propose_tumor_region(&e.bag.cells, DEFAULT_GRID_PX, None)?;
    let candidates: Vec<_> = region
        .candidates
        .iter()
        .map(|&i| {
            let c = &e.bag.cells[i];
            let px = region.boundary_distance([c.x, c.y]);
            json!({
                "index": i,
                "x": c.x,
                "y": c.y,
                "cell_type": CellType::Tumor,
                "distance_px": px,
                "distance_um": px.map(|d| d * e.bag.mpp),
            })
        })
        .collect();
    Ok(Json(json!({
        "wsi_id": id,
        "mpp": e.bag.mpp,
        "grid_px": region.grid_px,
        "threshold": region.threshold,
        "boundaries": region.boundaries,
        "tumor_cells": region.tumor_cells,
        "inside_cells": region.inside(),
        "candidate_count": candidates.len(),
        "candidates": candidates,
    })))
}

async fn list_measurements(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let e = slide(&state, &id)?;
    let list = state.store.list(&id, e.bag.mpp)?;
    Ok(([(header::CACHE_CONTROL, "no-cache")], Json(list)).into_response())
}

async fn add_measurement(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<MeasurementInput>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<crate::store::Measurement>)> {
    let e = slide(&state, &id)?;
    let Json(input) = body.map_err(|r| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, r.body_text()))?;
    if input.p.iter().chain(&input.a).chain(&input.b).any(|v| !v.is_finite()) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "coordinates must be finite"));
    }
    let st = state.clone();
    let mpp = e.bag.mpp;
    let m = tokio::task::spawn_blocking(move || st.store.insert(&id, &input, mpp))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((StatusCode::CREATED, Json(m)))
}

async fn delete_measurement(
    State(state): State<Shared>,
    UrlPath((id, mid)): UrlPath<(String, u64)>,
) -> ApiResult<StatusCode> {
    slide(&state, &id)?;
    let st = state.clone();
    let wsi = id.clone();
    let found = tokio::task::spawn_blocking(move || st.store.delete(&wsi, mid))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    if found {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::new(StatusCode::NOT_FOUND, format!("no measurement {mid} on {id:?}")))
    }
}
