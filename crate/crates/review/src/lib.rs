//! HTTP service for reviewing and flipping coarse patch labels.
//!
//! Routes:
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/sheets` | sheets with patch counts and label coverage |
//! | GET | `/sheets/{sheet}/patches?class=wood&page=1&page_size=20` | patch records, row-major |
//! | POST | `/patches/{patch_id}/labels/{class}` | body `{"present": bool}`, stores a human label |
//! | GET | `/export/labels` | effective labels, one JSON record per line |
//! | GET | `/patches/{patch_id}/image` | patch PNG |
//! | GET | `/patches/{patch_id}/overlay/{class}` | attention overlay PNG, if a map exists |
//!
//! Writes go through a single lock and are fsync'd before the response is sent.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use attn_distill::attnmap::{map_file_name, read_map};
use attn_distill::evaluator::render_patch_overlay;
use attn_distill::labels::{LabelRecord, LabelStore};
use attn_distill::tiler::{index_patches, ManifestEntry};
use attn_distill::{ClassName, CoarseLabel, LabelSource, PatchId, SheetId};
use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

pub const DEFAULT_PAGE_SIZE: usize = 20;
pub const MAX_PAGE_SIZE: usize = 500;
pub const DEFAULT_UI_ORIGIN: &str = "http://localhost:5173";

#[derive(Debug, Clone)]
pub struct ReviewConfig {
    /// Label file from the labeler; corrections go to its `.corrections.jsonl` log.
    pub labels: PathBuf,
    /// Directory with patch PNGs and manifests.
    pub patches: PathBuf,
    /// Attention map root with one directory per class, as written by `extract`.
    pub maps: Option<PathBuf>,
    /// Built UI assets, served for any path no route matches.
    pub static_dir: Option<PathBuf>,
    pub cors_origin: String,
    pub overlay_alpha: f64,
}

impl ReviewConfig {
    pub fn new(labels: impl Into<PathBuf>, patches: impl Into<PathBuf>) -> Self {
        ReviewConfig {
            labels: labels.into(),
            patches: patches.into(),
            maps: None,
            static_dir: None,
            cors_origin: DEFAULT_UI_ORIGIN.to_string(),
            overlay_alpha: 0.5,
        }
    }
}

pub struct AppState {
    store: RwLock<LabelStore>,
    patches: BTreeMap<PatchId, (PathBuf, ManifestEntry)>,
    maps: Option<PathBuf>,
    overlay_alpha: f64,
    overlays: Mutex<HashMap<(PatchId, ClassName), Bytes>>,
}

impl AppState {
    pub fn load(cfg: &ReviewConfig) -> attn_distill::Result<Self> {
        Ok(AppState {
            store: RwLock::new(LabelStore::open(&cfg.labels)?),
            patches: index_patches(&cfg.patches)?,
            maps: cfg.maps.clone(),
            overlay_alpha: cfg.overlay_alpha,
            overlays: Mutex::new(HashMap::new()),
        })
    }
}

type Shared = Arc<AppState>;

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn not_found(what: impl Into<String>) -> Self {
        ApiError(StatusCode::NOT_FOUND, what.into())
    }
    fn bad_request(what: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, what.into())
    }
}

impl From<attn_distill::Error> for ApiError {
    fn from(e: attn_distill::Error) -> Self {
        log::error!("{e}");
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn parse_class(s: &str) -> Result<ClassName, ApiError> {
    s.parse().map_err(|_| ApiError::not_found(format!("unknown class {s:?}")))
}

fn parse_patch(state: &AppState, s: &str) -> Result<PatchId, ApiError> {
    let id: PatchId = s.parse().map_err(|_| ApiError::not_found(format!("unknown patch {s:?}")))?;
    if !state.patches.contains_key(&id) {
        return Err(ApiError::not_found(format!("unknown patch {s:?}")));
    }
    Ok(id)
}

fn read_store(state: &AppState) -> std::sync::RwLockReadGuard<'_, LabelStore> {
    state.store.read().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SheetStats {
    pub sheet: SheetId,
    pub patches: usize,
    /// Effective labels over all classes.
    pub labels: usize,
    /// `labels / (patches × classes)`.
    pub coverage: f64,
    pub human_overrides: usize,
}

async fn list_sheets(State(state): State<Shared>) -> Json<Vec<SheetStats>> {
    let mut stats: BTreeMap<&SheetId, SheetStats> = BTreeMap::new();
    for id in state.patches.keys() {
        stats
            .entry(&id.sheet)
            .or_insert_with(|| SheetStats {
                sheet: id.sheet.clone(),
                patches: 0,
                labels: 0,
                coverage: 0.0,
                human_overrides: 0,
            })
            .patches += 1;
    }
    let store = read_store(&state);
    for label in store.effective() {
        if let Some(s) = stats.get_mut(&label.patch.sheet) {
            if state.patches.contains_key(&label.patch) {
                s.labels += 1;
                if label.source == LabelSource::Human {
                    s.human_overrides += 1;
                }
            }
        }
    }
    let classes = ClassName::ALL.len();
    Json(
        stats
            .into_values()
            .map(|mut s| {
                s.coverage = s.labels as f64 / (s.patches * classes) as f64;
                s
            })
            .collect(),
    )
}

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    class: Option<String>,
    page: Option<usize>,
    page_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: PatchId,
    pub image_url: String,
    pub overlay_url: Option<String>,
    pub label: Option<bool>,
    pub source: Option<LabelSource>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPage {
    pub sheet: SheetId,
    pub class: ClassName,
    /// 1-based.
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub items: Vec<PatchRecord>,
}

fn map_path(state: &AppState, id: &PatchId, class: ClassName) -> Option<PathBuf> {
    let p = state.maps.as_ref()?.join(class.key()).join(map_file_name(id, class));
    p.exists().then_some(p)
}

async fn list_patches(
    State(state): State<Shared>,
    UrlPath(sheet): UrlPath<String>,
    Query(q): Query<PageQuery>,
) -> Result<Json<PatchPage>, ApiError> {
    let class = parse_class(q.class.as_deref().ok_or_else(|| ApiError::bad_request("class is required"))?)?;
    let page = q.page.unwrap_or(1);
    let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page == 0 || page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!(
            "page starts at 1 and page_size must be in 1..={MAX_PAGE_SIZE}"
        )));
    }
    let ids: Vec<&PatchId> = state.patches.keys().filter(|p| p.sheet.as_str() == sheet).collect();
    if ids.is_empty() {
        return Err(ApiError::not_found(format!("unknown sheet {sheet:?}")));
    }
    let store = read_store(&state);
    let items = ids
        .iter()
        .skip((page - 1).saturating_mul(page_size))
        .take(page_size)
        .map(|id| {
            let label = store.get(id, class);
            PatchRecord {
                patch_id: (*id).clone(),
                image_url: format!("/patches/{id}/image"),
                overlay_url: map_path(&state, id, class).map(|_| format!("/patches/{id}/overlay/{}", class.key())),
                label: label.map(|l| l.present),
                source: label.map(|l| l.source),
                reason: label.and_then(|l| l.reason.clone()),
            }
        })
        .collect();
    Ok(Json(PatchPage {
        sheet: ids[0].sheet.clone(),
        class,
        page,
        page_size,
        total: ids.len(),
        items,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlipBody {
    present: bool,
}

async fn set_label(
    State(state): State<Shared>,
    UrlPath((patch, class)): UrlPath<(String, String)>,
    body: Bytes,
) -> Result<Json<CoarseLabel>, ApiError> {
    let id = parse_patch(&state, &patch)?;
    let class = parse_class(&class)?;
    let body: FlipBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("expected {{\"present\": bool}}: {e}")))?;
    let label = tokio::task::spawn_blocking(move || {
        let mut store = state.store.write().unwrap_or_else(|e| e.into_inner());
        store.set_human(&id, class, body.present)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(label))
}

async fn export_labels(State(state): State<Shared>) -> Result<Response, ApiError> {
    let records: Vec<LabelRecord> = read_store(&state).export();
    let mut body = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut body, r).map_err(attn_distill::Error::from)?;
        body.push(b'\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

fn png(bytes: Bytes) -> Response {
    (
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
            (header::CACHE_CONTROL, HeaderValue::from_static("public, max-age=3600")),
        ],
        Body::from(bytes),
    )
        .into_response()
}

async fn patch_image(State(state): State<Shared>, UrlPath(patch): UrlPath<String>) -> Result<Response, ApiError> {
    let id = parse_patch(&state, &patch)?;
    let path = state.patches[&id].0.clone();
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| attn_distill::Error::io(path, e))?;
    Ok(png(bytes.into()))
}

fn render_overlay(state: &AppState, id: &PatchId, map: &Path) -> attn_distill::Result<Bytes> {
    let patch = attn_distill::tiler::read_rgb(&state.patches[id].0)?;
    let map = read_map(map)?;
    let img = render_patch_overlay(&patch, &map.map, state.overlay_alpha);
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner().into())
}

async fn patch_overlay(
    State(state): State<Shared>,
    UrlPath((patch, class)): UrlPath<(String, String)>,
) -> Result<Response, ApiError> {
    let id = parse_patch(&state, &patch)?;
    let class = parse_class(&class)?;
    let key = (id.clone(), class);
    if let Some(b) = state.overlays.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
        return Ok(png(b.clone()));
    }
    let map = map_path(&state, &id, class).ok_or_else(|| ApiError::not_found(format!("no attention map for {id}")))?;
    let st = state.clone();
    let bytes = tokio::task::spawn_blocking(move || render_overlay(&st, &id, &map))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    state
        .overlays
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .insert(key, bytes.clone());
    Ok(png(bytes))
}

pub fn router(state: AppState, cfg: &ReviewConfig) -> Router {
    let cors = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE])
        .allow_origin(
            cfg.cors_origin
                .parse::<HeaderValue>()
                .unwrap_or_else(|_| HeaderValue::from_static(DEFAULT_UI_ORIGIN)),
        );
    let mut app = Router::new()
        .route("/sheets", get(list_sheets))
        .route("/sheets/{sheet}/patches", get(list_patches))
        .route("/patches/{patch}/labels/{class}", post(set_label))
        .route("/patches/{patch}/image", get(patch_image))
        .route("/patches/{patch}/overlay/{class}", get(patch_overlay))
        .route("/export/labels", get(export_labels));
    if let Some(dir) = &cfg.static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app.layer(cors).with_state(Arc::new(state))
}

/// Serve until the process is stopped.
pub async fn serve(cfg: ReviewConfig, addr: SocketAddr) -> attn_distill::Result<()> {
    let state = AppState::load(&cfg)?;
    let app = router(state, &cfg);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| attn_distill::Error::io(addr.to_string(), e))?;
    log::info!("review service on http://{addr}");
    axum::serve(listener, app)
        .await
        .map_err(|e| attn_distill::Error::io(addr.to_string(), e))
}
