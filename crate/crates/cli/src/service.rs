//! HTTP service answering point prompts against precomputed color fields.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{error, info};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use icl_core::eval::mask_iou;
use icl_core::io::{encode_field_png, DatasetManifest};
use icl_core::prompt::{prompt_mask, PromptPoint, DEFAULT_THRESHOLD};
use icl_core::{BinaryMask, ColorField, LabelMap, Rle};

use crate::data::{load_entry, load_entry_field};

pub struct ImageRecord {
    pub id: String,
    pub field: ColorField,
    pub labels: LabelMap,
    pub image_png: Vec<u8>,
    pub field_png: Vec<u8>,
}

/// Immutable state shared by every request.
pub struct AppState {
    pub images: Vec<ImageRecord>,
    index: HashMap<String, usize>,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(images: Vec<ImageRecord>, workers: usize) -> Self {
        let index = images.iter().enumerate().map(|(k, r)| (r.id.clone(), k)).collect();
        Self {
            images,
            index,
            workers: Arc::new(Semaphore::new(workers.max(1))),
        }
    }

    /// Loads every manifest entry with its field and pre-encodes the PNGs.
    pub fn load(manifest: &DatasetManifest, fields: Option<&Path>, workers: usize) -> anyhow::Result<Arc<Self>> {
        let mut images = Vec::with_capacity(manifest.entries.len());
        for meta in &manifest.entries {
            let entry = load_entry(manifest, meta)?;
            let field = load_entry_field(manifest, meta, fields)?;
            field
                .same_dims(&entry.labels)
                .with_context(|| format!("field for {}", entry.id))?;
            images.push(ImageRecord {
                image_png: encode_field_png(&entry.image)?,
                field_png: encode_field_png(&field)?,
                id: entry.id,
                field,
                labels: entry.labels,
            });
        }
        info!("loaded {} images", images.len());
        Ok(Arc::new(Self::new(images, workers)))
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.index.get(id).map(|&k| &self.images[k])
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/images", get(list_images))
        .route("/api/images/:id", get(image_png))
        .route("/api/images/:id/field", get(field_png))
        .route("/api/prompt", post(prompt))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(id: &str) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: format!("unknown image id {id:?}"),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
        }
    }

    fn internal(detail: impl std::fmt::Display) -> Self {
        error!("{detail}");
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: "internal error".into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ImageInfo {
    pub id: String,
    pub width: usize,
    pub height: usize,
}

async fn list_images(State(state): State<Arc<AppState>>) -> Json<Vec<ImageInfo>> {
    Json(
        state
            .images
            .iter()
            .map(|r| ImageInfo {
                id: r.id.clone(),
                width: r.field.width(),
                height: r.field.height(),
            })
            .collect(),
    )
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn image_png(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let rec = state.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(png(rec.image_png.clone()))
}

async fn field_png(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let rec = state.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(png(rec.field_png.clone()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptRequest {
    pub image_id: String,
    pub points: Vec<PromptPoint>,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub gt_instance_id: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptResponse {
    pub mask: Rle,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou_vs_gt: Option<f64>,
    pub timing_ms: f64,
}

async fn prompt(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<PromptResponse>, ApiError> {
    let req: PromptRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("malformed request: {e}")))?;
    let index = *state
        .index
        .get(&req.image_id)
        .ok_or_else(|| ApiError::not_found(&req.image_id))?;
    let rec = &state.images[index];
    if req.points.is_empty() {
        return Err(ApiError::unprocessable("at least one point is required"));
    }
    for p in &req.points {
        p.check_bounds(rec.field.width(), rec.field.height())
            .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    }
    let threshold = req.threshold.unwrap_or(DEFAULT_THRESHOLD);
    if !threshold.is_finite() {
        return Err(ApiError::unprocessable("threshold must be finite"));
    }
    if let Some(id) = req.gt_instance_id {
        if id as usize > rec.labels.instance_count() {
            return Err(ApiError::unprocessable(format!("unknown gt_instance_id {id}")));
        }
    }

    let _permit = state.workers.acquire().await.map_err(ApiError::internal)?;
    let job_state = Arc::clone(&state);
    let result = tokio::task::spawn_blocking(move || -> icl_core::Result<(BinaryMask, Option<f64>, f64)> {
        let start = Instant::now();
        let rec = &job_state.images[index];
        let mask = prompt_mask(&rec.field, &req.points, threshold)?;
        let iou = match req.gt_instance_id {
            Some(id) => Some(mask_iou(&rec.labels.mask_of(id), &mask)?),
            None => None,
        };
        Ok((mask, iou, start.elapsed().as_secs_f64() * 1e3))
    })
    .await
    .map_err(ApiError::internal)?;
    let (mask, iou_vs_gt, timing_ms) = result.map_err(ApiError::internal)?;
    Ok(Json(PromptResponse {
        mask: mask.to_rle(),
        iou_vs_gt,
        timing_ms,
    }))
}
