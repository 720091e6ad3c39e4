//! JSON-over-HTTP inference service.

use std::io::Cursor;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use ctrlcap::harness::caption_region;
use ctrlcap::image::Image;
use ctrlcap::metrics::is_controlled;
use ctrlcap::model::{CaptionModel, CaptionOutput, InferenceOptions};
use ctrlcap::synthworld::{render, BBox, DatasetManifest, Split};

pub const MAX_CONTROL_WORDS: usize = 8;
pub const MAX_CONTROL_CHARS: usize = 32;
pub const MAX_BEAM: usize = 8;
pub const DEFAULT_PAGE: usize = 100;
pub const MAX_PAGE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    #[serde(default)]
    pub scene_id: Option<u64>,
    /// Inline image as base64-encoded PNG, used when `scene_id` is absent.
    #[serde(default)]
    pub image_png_base64: Option<String>,
    #[serde(rename = "box")]
    pub bbox: [i64; 4],
    #[serde(default)]
    pub control_words: Vec<String>,
    #[serde(default)]
    pub tag_threshold: Option<f64>,
    #[serde(default)]
    pub beam_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub caption: String,
    pub self_tags: Vec<(String, f64)>,
    pub used_controls: Vec<String>,
    pub controlled: bool,
    pub model_version: String,
}

impl CaptionResponse {
    pub fn from_output(out: &CaptionOutput, model_version: &str) -> Self {
        Self {
            caption: out.text(),
            self_tags: out.self_tags.clone(),
            used_controls: out.used_controls.clone(),
            controlled: is_controlled(&out.tokens, &out.used_controls),
            model_version: model_version.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

struct Job {
    canvas: Arc<Image>,
    bbox: BBox,
    controls: Vec<String>,
    opts: InferenceOptions,
    reply: oneshot::Sender<ctrlcap::Result<CaptionOutput>>,
}

/// Worker threads, each holding its own copy of the parameters. Jobs are
/// taken from a shared queue, so one worker serializes all requests.
struct InferencePool {
    queue: Mutex<mpsc::Sender<Job>>,
}

impl InferencePool {
    fn start(model: &CaptionModel, workers: usize) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..workers.max(1) {
            let model = model.clone();
            let rx = Arc::clone(&rx);
            thread::spawn(move || loop {
                let job = match rx.lock() {
                    Ok(guard) => guard.recv(),
                    Err(_) => return,
                };
                let Ok(job) = job else { return };
                let out = caption_region(&model, &job.canvas, job.bbox, &job.controls, &job.opts);
                let _ = job.reply.send(out);
            });
        }
        Self { queue: Mutex::new(tx) }
    }

    async fn run(&self, job: Job, rx: oneshot::Receiver<ctrlcap::Result<CaptionOutput>>) -> Result<CaptionOutput, ApiError> {
        let sent = self.queue.lock().map(|q| q.send(job).is_ok()).unwrap_or(false);
        if !sent {
            return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "inference workers stopped"));
        }
        match rx.await {
            Ok(Ok(out)) => Ok(out),
            Ok(Err(e @ (ctrlcap::Error::InvalidBox(_) | ctrlcap::Error::Shape(_)))) => Err(ApiError::bad_request(e.to_string())),
            Ok(Err(e)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
            Err(_) => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "inference worker dropped the request")),
        }
    }
}

struct Loaded {
    pool: InferencePool,
    version: String,
    canvas: usize,
    defaults: InferenceOptions,
}

struct Inner {
    model: Option<Loaded>,
    manifest: Option<DatasetManifest>,
    scene_ids: Vec<u64>,
    hints: bool,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub workers: usize,
    /// Include object boxes and region boxes in scene metadata.
    pub hints: bool,
    pub defaults: InferenceOptions,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            hints: true,
            defaults: InferenceOptions::default(),
        }
    }
}

/// Version string derived from the checkpoint bytes.
pub fn model_version(checkpoint_bytes: &[u8]) -> String {
    let h = checkpoint_bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
    format!("ctrlcap-{h:016x}")
}

impl AppState {
    pub fn new(model: Option<(CaptionModel, String)>, manifest: Option<DatasetManifest>, opts: ServeOptions) -> Self {
        let model = model.map(|(m, version)| {
            let mut defaults = opts.defaults;
            defaults.beam.max_len = m.config.max_len;
            Loaded {
                pool: InferencePool::start(&m, opts.workers),
                version,
                canvas: m.config.canvas,
                defaults,
            }
        });
        let scene_ids = manifest.as_ref().map(|m| m.scene_ids()).unwrap_or_default();
        Self {
            inner: Arc::new(Inner {
                model,
                manifest,
                scene_ids,
                hints: opts.hints,
            }),
        }
    }

    fn scene_canvas(&self, id: u64) -> Result<Image, ApiError> {
        let manifest = self
            .inner
            .manifest
            .as_ref()
            .ok_or_else(|| ApiError::not_found("no dataset mounted"))?;
        if self.inner.scene_ids.binary_search(&id).is_err() {
            return Err(ApiError::not_found(format!("unknown scene {id}")));
        }
        let scene = manifest
            .scene(id)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        Ok(render(&scene))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/caption", post(caption))
        .route("/v1/scenes", get(scenes))
        .route("/v1/scene/{id}", get(scene))
        .route("/v1/scene/{id}/image.png", get(scene_png))
        .with_state(state)
}

pub fn encode_png(img: &Image) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory PNG header");
        w.write_image_data(&img.to_rgba8()).expect("in-memory PNG data");
    }
    out
}

pub fn decode_png(bytes: &[u8]) -> Result<Image, String> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("PNG too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err("unexpanded palette PNG".into()),
    };
    let rgb: Vec<u8> = data
        .chunks_exact(channels)
        .flat_map(|px| if channels < 3 { [px[0], px[0], px[0]] } else { [px[0], px[1], px[2]] })
        .collect();
    Ok(Image::from_rgb8(w, h, &rgb))
}

fn validate(req: &CaptionRequest, max_beam: usize) -> Result<(), ApiError> {
    let [x, y, w, h] = req.bbox;
    if x < 0 || y < 0 || w <= 0 || h <= 0 {
        return Err(ApiError::bad_request(format!("malformed box {:?}", req.bbox)));
    }
    if req.control_words.len() > MAX_CONTROL_WORDS {
        return Err(ApiError::bad_request(format!("at most {MAX_CONTROL_WORDS} control words")));
    }
    for c in &req.control_words {
        if c.trim().is_empty() || c.chars().count() > MAX_CONTROL_CHARS || c.chars().any(char::is_whitespace) {
            return Err(ApiError::bad_request(format!(
                "control words must be single tokens of 1..={MAX_CONTROL_CHARS} characters, got {c:?}"
            )));
        }
    }
    if let Some(t) = req.tag_threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(ApiError::bad_request("tag_threshold must lie in [0, 1]"));
        }
    }
    if let Some(b) = req.beam_size {
        if b == 0 || b > max_beam {
            return Err(ApiError::bad_request(format!("beam_size must lie in 1..={max_beam}")));
        }
    }
    if req.scene_id.is_none() && req.image_png_base64.is_none() {
        return Err(ApiError::bad_request("either scene_id or image_png_base64 is required"));
    }
    Ok(())
}

async fn caption(State(state): State<AppState>, body: Bytes) -> Result<Json<CaptionResponse>, ApiError> {
    let req: CaptionRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    validate(&req, MAX_BEAM)?;
    let loaded = state
        .inner
        .model
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"))?;

    let canvas = match (req.scene_id, &req.image_png_base64) {
        (Some(id), _) => state.scene_canvas(id)?,
        (None, Some(b64)) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| ApiError::bad_request(format!("bad base64: {e}")))?;
            let img = decode_png(&bytes).map_err(|e| ApiError::bad_request(format!("bad PNG: {e}")))?;
            if img.width != loaded.canvas || img.height != loaded.canvas {
                return Err(ApiError::bad_request(format!(
                    "inline image must be {0}x{0}, got {1}x{2}",
                    loaded.canvas, img.width, img.height
                )));
            }
            img
        }
        (None, None) => unreachable!("validated above"),
    };

    let [x, y, w, h] = req.bbox.map(|v| v as u64);
    if x + w > canvas.width as u64 || y + h > canvas.height as u64 {
        return Err(ApiError::bad_request(format!(
            "box {:?} exceeds the {}x{} image",
            req.bbox, canvas.width, canvas.height
        )));
    }
    let bbox = BBox::new(x as u32, y as u32, w as u32, h as u32);

    let mut opts = loaded.defaults;
    if let Some(t) = req.tag_threshold {
        opts.tag_threshold = t;
    }
    if let Some(b) = req.beam_size {
        opts.beam.beam_size = b;
    }
    let (tx, rx) = oneshot::channel();
    let job = Job {
        canvas: Arc::new(canvas),
        bbox,
        controls: req.control_words.clone(),
        opts,
        reply: tx,
    };
    let out = loaded.pool.run(job, rx).await?;
    Ok(Json(CaptionResponse::from_output(&out, &loaded.version)))
}

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePage {
    pub ids: Vec<u64>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub next_offset: Option<usize>,
}

async fn scenes(State(state): State<AppState>, Query(q): Query<PageQuery>) -> Result<Json<ScenePage>, ApiError> {
    let ids = &state.inner.scene_ids;
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE);
    if limit == 0 || limit > MAX_PAGE {
        return Err(ApiError::bad_request(format!("limit must lie in 1..={MAX_PAGE}")));
    }
    let end = (offset + limit).min(ids.len());
    let page = if offset < ids.len() { ids[offset..end].to_vec() } else { Vec::new() };
    Ok(Json(ScenePage {
        ids: page,
        total: ids.len(),
        offset,
        limit,
        next_offset: (end < ids.len()).then_some(end),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionHint {
    pub split: Split,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetadata {
    pub scene_id: u64,
    pub width: usize,
    pub height: usize,
    pub image_png_base64: String,
    /// Scene objects; omitted when hints are off.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<ctrlcap::synthworld::SceneObject>>,
    /// Boxes of the manifest's region samples in this scene.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regions: Option<Vec<RegionHint>>,
}

fn parse_id(raw: &str) -> Result<u64, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::bad_request(format!("scene id must be a non-negative integer, got {raw:?}")))
}

async fn scene(State(state): State<AppState>, Path(raw): Path<String>) -> Result<Json<SceneMetadata>, ApiError> {
    let id = parse_id(&raw)?;
    let canvas = state.scene_canvas(id)?;
    let manifest = state.inner.manifest.as_ref().expect("checked by scene_canvas");
    let (objects, regions) = if state.inner.hints {
        let graph = manifest
            .scene(id)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        let regions: Vec<RegionHint> = [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .flat_map(|split| {
                manifest
                    .split(split)
                    .iter()
                    .filter(move |s| s.scene_id == id)
                    .map(move |s| RegionHint { split, bbox: s.bbox })
            })
            .collect();
        (Some(graph.objects), Some(regions))
    } else {
        (None, None)
    };
    Ok(Json(SceneMetadata {
        scene_id: id,
        width: canvas.width,
        height: canvas.height,
        image_png_base64: base64::engine::general_purpose::STANDARD.encode(encode_png(&canvas)),
        objects,
        regions,
    }))
}

async fn scene_png(State(state): State<AppState>, Path(raw): Path<String>) -> Result<Response, ApiError> {
    let id = parse_id(&raw)?;
    let canvas = state.scene_canvas(id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], encode_png(&canvas)).into_response())
}
