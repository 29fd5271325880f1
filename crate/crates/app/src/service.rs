//! HTTP generation service over a read-only model snapshot.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use condmdi::diffusion::NoiseSchedule;
use condmdi::eval::keyframe_error;
use condmdi::io::{encode_mseq, Checkpoint};
use condmdi::mask::{FieldError, KeyframeFile};
use condmdi::motion::{recover_joint_positions, FeatureLayout, MotionSequence, NormalizationStats, SkeletonSpec};
use condmdi::nn::{Denoiser, HashedBagOfTokens, TextEncoder};
use condmdi::sampling::{generate, GuidanceMode, SamplerConfig, Strategy};
use condmdi::{Error, Network};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

/// Frames per second reported for generated clips.
pub const OUTPUT_FPS: f32 = 20.0;

/// Everything needed to answer requests, frozen at startup.
pub struct ModelSnapshot {
    pub model: Network,
    pub schedule: NoiseSchedule,
    pub stats: NormalizationStats<f32>,
    pub skeleton: SkeletonSpec,
    pub layout: FeatureLayout,
    pub text: HashedBagOfTokens,
    pub digest: String,
    pub step: u64,
    pub use_ema: bool,
}

impl ModelSnapshot {
    pub fn from_checkpoint(ckpt: &Checkpoint, use_ema: bool) -> condmdi::Result<Self> {
        let model = ckpt.model(use_ema)?;
        let text = HashedBagOfTokens::new(model.config().text_width);
        Ok(Self {
            schedule: ckpt.schedule()?,
            stats: ckpt.manifest.stats.clone(),
            skeleton: ckpt.skeleton()?,
            layout: ckpt.layout()?,
            text,
            digest: ckpt.manifest.payload_digest.clone(),
            step: ckpt.manifest.step,
            use_ema: use_ema && ckpt.ema.is_some(),
            model,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceConfig {
    /// Concurrent sampling jobs.
    pub workers: usize,
    /// Requests allowed to wait for a worker before 503.
    pub queue: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            queue: 64,
        }
    }
}

/// Counts admitted requests; refuses once workers and queue are full.
pub struct Admission {
    admitted: AtomicUsize,
    capacity: usize,
}

/// Held while a request is admitted.
pub struct Ticket<'a>(&'a Admission);

impl Admission {
    pub fn try_enter(&self) -> Option<Ticket<'_>> {
        let mut current = self.admitted.load(Ordering::Acquire);
        loop {
            if current >= self.capacity {
                return None;
            }
            match self
                .admitted
                .compare_exchange(current, current + 1, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => return Some(Ticket(self)),
                Err(now) => current = now,
            }
        }
    }

    pub fn in_flight(&self) -> usize {
        self.admitted.load(Ordering::Acquire)
    }
}

impl Drop for Ticket<'_> {
    fn drop(&mut self) {
        self.0.admitted.fetch_sub(1, Ordering::AcqRel);
    }
}

pub struct AppState {
    snapshot: Arc<ModelSnapshot>,
    workers: Semaphore,
    admission: Admission,
    config: ServiceConfig,
}

impl AppState {
    pub fn new(snapshot: Arc<ModelSnapshot>, config: ServiceConfig) -> Arc<Self> {
        let workers = config.workers.max(1);
        Arc::new(Self {
            snapshot,
            workers: Semaphore::new(workers),
            admission: Admission {
                admitted: AtomicUsize::new(0),
                capacity: workers + config.queue,
            },
            config: ServiceConfig { workers, ..config },
        })
    }

    pub fn admission(&self) -> &Admission {
        &self.admission
    }

    pub fn snapshot(&self) -> &ModelSnapshot {
        &self.snapshot
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/skeleton", get(skeleton))
        .route("/generate", post(generate_handler))
        .with_state(state)
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub model_digest: String,
    pub checkpoint_step: u64,
    pub use_ema: bool,
    pub skeleton: String,
    pub feature_width: usize,
    pub max_frames: usize,
    pub diffusion_steps: usize,
    pub mask_conditioned: bool,
    pub workers: usize,
    pub queue: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let s = &state.snapshot;
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        model_digest: s.digest.clone(),
        checkpoint_step: s.step,
        use_ema: s.use_ema,
        skeleton: s.skeleton.name.clone(),
        feature_width: s.layout.width(),
        max_frames: s.model.max_frames(),
        diffusion_steps: s.schedule.steps(),
        mask_conditioned: s.model.mask_conditioned(),
        workers: state.config.workers,
        queue: state.config.queue,
    })
}

async fn skeleton(State(state): State<Arc<AppState>>) -> Json<SkeletonSpec> {
    Json(state.snapshot.skeleton.clone())
}

/// Body of `POST /generate`. Omitted fields take the sampler defaults; the
/// response echoes the request with every field filled in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    #[serde(default)]
    pub prompt: Option<String>,
    /// Frames to generate; defaults to the model length.
    #[serde(default)]
    pub length: Option<usize>,
    #[serde(default)]
    pub keyframes: KeyframeFile,
    #[serde(default)]
    pub strategy: Option<String>,
    #[serde(default)]
    pub w: Option<f64>,
    #[serde(default)]
    pub w_r: Option<f64>,
    #[serde(default, rename = "C")]
    pub stop_step: Option<usize>,
    #[serde(default)]
    pub guidance_mode: Option<GuidanceMode>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub length: usize,
    pub fps: f32,
    /// Base64 MSEQ1 bytes of the generated clip in world units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_mseq: Option<String>,
    /// Row-major features, present with `?fmt=json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f32>>>,
    /// `[length][joints][3]` world positions.
    pub joint_positions: Vec<Vec<[f32; 3]>>,
    /// Mean root ground-plane distance to the keyframes, meters.
    pub keyframe_error_m: Option<f64>,
    pub evaluations: usize,
    pub timing_ms: f64,
    pub model_digest: String,
    pub config: GenerateRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub errors: Vec<FieldError>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    errors: Vec<FieldError>,
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        self.status
    }

    pub fn errors(&self) -> &[FieldError] {
        &self.errors
    }

    fn internal(e: Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "", e.to_string())
    }

    fn new(status: StatusCode, path: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            errors: vec![FieldError::new(path, message)],
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .errors
            .iter()
            .map(|e| if e.path.is_empty() { e.message.clone() } else { format!("{}: {}", e.path, e.message) })
            .collect();
        write!(f, "{}", parts.join("; "))
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { errors: self.errors })).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct FormatQuery {
    #[serde(default)]
    pub fmt: Option<String>,
}

/// Fills defaults and validates everything that does not need the model.
pub fn resolve(request: &GenerateRequest, snapshot: &ModelSnapshot) -> Result<(GenerateRequest, SamplerConfig), Vec<FieldError>> {
    let defaults = SamplerConfig::default();
    let mut errors = Vec::new();
    let max = snapshot.model.max_frames();
    let length = request.length.unwrap_or(max);
    if length == 0 || length > max {
        errors.push(FieldError::new("length", format!("must lie in 1..={max}")));
    }
    let strategy = match request.strategy.as_deref() {
        None => Some(defaults.strategy),
        Some(s) => match Strategy::parse(s) {
            Ok(s) => Some(s),
            Err(e) => {
                errors.push(FieldError::new("strategy", e.to_string()));
                None
            }
        },
    };
    let w = request.w.unwrap_or(defaults.cfg_weight);
    if !(w >= 0.0 && w.is_finite()) {
        errors.push(FieldError::new("w", "must be a finite non-negative number"));
    }
    let w_r = request.w_r.unwrap_or(defaults.guidance_weight);
    if !(w_r >= 0.0 && w_r.is_finite()) {
        errors.push(FieldError::new("w_r", "must be a finite non-negative number"));
    }
    let stop_step = request.stop_step.unwrap_or(defaults.stop_step);
    if stop_step > snapshot.schedule.steps() {
        errors.push(FieldError::new("C", format!("must not exceed T = {}", snapshot.schedule.steps())));
    }
    if matches!(&request.prompt, Some(p) if p.trim().is_empty()) {
        errors.push(FieldError::new("prompt", "use null for the empty prompt"));
    }
    let (Some(strategy), true) = (strategy, errors.is_empty()) else {
        return Err(errors);
    };
    let config = SamplerConfig {
        strategy,
        cfg_weight: w,
        guidance_weight: w_r,
        stop_step,
        guidance_mode: request.guidance_mode.unwrap_or(defaults.guidance_mode),
        seed: request.seed.unwrap_or(defaults.seed),
    };
    let echo = GenerateRequest {
        prompt: request.prompt.clone(),
        length: Some(length),
        keyframes: request.keyframes.clone(),
        strategy: Some(strategy.name().to_string()),
        w: Some(w),
        w_r: Some(w_r),
        stop_step: Some(stop_step),
        guidance_mode: Some(config.guidance_mode),
        seed: Some(config.seed),
    };
    Ok((echo, config))
}

/// A generated clip in world units, trimmed to the requested length.
pub struct Generated {
    pub config: GenerateRequest,
    pub motion: MotionSequence<f32>,
    /// `[length × joints × 3]` world positions.
    pub positions: Array3<f32>,
    pub keyframe_error_m: Option<f64>,
    pub evaluations: usize,
}

/// Validates and samples one request on the calling thread.
pub fn generate_clip(snapshot: &ModelSnapshot, request: &GenerateRequest) -> Result<Generated, ApiError> {
    let bad = |errors| ApiError {
        status: StatusCode::BAD_REQUEST,
        errors,
    };
    let (echo, config) = resolve(request, snapshot).map_err(bad)?;
    let length = echo.length.expect("resolved");
    let rows = snapshot.model.max_frames();
    let obs = request
        .keyframes
        .to_observation::<f32>(&snapshot.skeleton, &snapshot.layout, length, rows)
        .map_err(bad)?;
    let text = snapshot.text.encode::<f32>(request.prompt.as_deref());
    let (seq, out) = generate(&snapshot.model, &snapshot.schedule, &snapshot.stats, &config, &text, &obs, length, OUTPUT_FPS)
        .map_err(|e| match e {
            Error::StrategyMismatch { .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "strategy", e.to_string()),
            Error::Invalid(_) | Error::Shape(_) => ApiError::new(StatusCode::BAD_REQUEST, "", e.to_string()),
            e => ApiError::internal(e),
        })?;
    let keyframe_error_m = if obs.root_keyframes().is_empty() {
        None
    } else {
        Some(keyframe_error(&seq, &obs).map_err(ApiError::internal)?)
    };
    let motion = seq.pad_or_trim(length).map_err(ApiError::internal)?;
    let positions = recover_joint_positions(&motion, &snapshot.skeleton, &snapshot.layout).map_err(ApiError::internal)?;
    Ok(Generated {
        config: echo,
        motion,
        positions,
        keyframe_error_m,
        evaluations: out.evaluations,
    })
}

/// [`generate_clip`] packaged as a response body.
pub fn run_generate(snapshot: &ModelSnapshot, request: &GenerateRequest, inline: bool) -> Result<GenerateResponse, ApiError> {
    let started = Instant::now();
    let g = generate_clip(snapshot, request)?;
    let joint_positions = g
        .positions
        .outer_iter()
        .map(|frame| frame.outer_iter().map(|p| [p[0], p[1], p[2]]).collect())
        .collect();
    let (features_mseq, features) = if inline {
        (None, Some(g.motion.data().outer_iter().map(|r| r.to_vec()).collect()))
    } else {
        (Some(base64::engine::general_purpose::STANDARD.encode(encode_mseq(&g.motion))), None)
    };
    Ok(GenerateResponse {
        length: g.motion.frames(),
        fps: OUTPUT_FPS,
        features_mseq,
        features,
        joint_positions,
        keyframe_error_m: g.keyframe_error_m,
        evaluations: g.evaluations,
        timing_ms: started.elapsed().as_secs_f64() * 1e3,
        model_digest: snapshot.digest.clone(),
        config: g.config,
    })
}

fn parse_request(body: &[u8]) -> Result<GenerateRequest, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { String::new() } else { path };
        ApiError::new(StatusCode::BAD_REQUEST, &path, e.inner().to_string())
    })
}

async fn generate_handler(State(state): State<Arc<AppState>>, Query(query): Query<FormatQuery>, body: Bytes) -> Result<Json<GenerateResponse>, ApiError> {
    let inline = match query.fmt.as_deref() {
        None | Some("mseq") => false,
        Some("json") => true,
        Some(other) => return Err(ApiError::new(StatusCode::BAD_REQUEST, "fmt", format!("unknown format `{other}`"))),
    };
    let request = parse_request(&body)?;
    let _ticket = state
        .admission
        .try_enter()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "", "generation queue is full"))?;
    let _permit = state
        .workers
        .acquire()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "", "service is shutting down"))?;
    let snapshot = Arc::clone(&state.snapshot);
    let response = tokio::task::spawn_blocking(move || run_generate(&snapshot, &request, inline))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "", e.to_string()))??;
    Ok(Json(response))
}
