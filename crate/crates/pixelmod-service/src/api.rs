//! The `/v1` HTTP JSON API.
//!
//! Every success body carries `schema_version`; request bodies reject
//! unknown fields. POST requests may send an `Idempotency-Key` header: a
//! repeat with the same key and body replays the first response, a repeat
//! with a different body is refused.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, FromRequest, Path, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use pixelmod::corpus_store::{read_manifest, ManifestEntry, StoreError};
use pixelmod::pipeline::{BatchCandidate, Decision, QueryResult};
use pixelmod::stories::ClusterParams;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ConfigOverrides;
use crate::error::{ApiError, ErrorCode};
use crate::state::{JobWork, ReviewRecord, Shared, Verdict};

pub const SCHEMA_VERSION: u32 = 1;
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const REPLAY_HEADER: &str = "idempotent-replay";
const MAX_BODY: usize = 32 << 20;
const MAX_PAGE_SIZE: usize = 500;

type AppState = Arc<Shared>;

/// A success body with the schema version alongside.
#[derive(Debug, Serialize)]
struct Envelope<T> {
    schema_version: u32,
    #[serde(flatten)]
    data: T,
}

fn reply<T: Serialize>(status: StatusCode, data: T) -> Response {
    (
        status,
        Json(Envelope {
            schema_version: SCHEMA_VERSION,
            data,
        }),
    )
        .into_response()
}

/// JSON body whose rejections become validation errors.
struct ApiJson<T>(T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| ApiJson(v))
            .map_err(|rej| ApiError::validation(rej.body_text()))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))?
}

pub fn router(state: AppState) -> Router {
    let v1 = Router::new()
        .route("/ingest", post(ingest))
        .route("/jobs/{id}", get(job))
        .route("/query", post(query))
        .route("/batch-query", post(batch_query))
        .route("/candidates", get(candidates))
        .route("/stories", get(stories))
        .route("/stories/rebuild", post(rebuild_stories))
        .route("/review", post(review))
        .route("/images/{id}", get(image_bytes))
        .route("/images/{id}/meta", get(image_meta))
        .route("/metrics", get(metrics))
        .layer(middleware::from_fn_with_state(state.clone(), idempotency))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .layer(DefaultBodyLimit::max(MAX_BODY));
    Router::new()
        .nest("/v1", v1)
        .fallback(|| async { ApiError::new(ErrorCode::NotFound, "no such endpoint") })
        .with_state(state)
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn auth(State(s): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &s.token {
        let given = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if !given.is_some_and(|g| constant_time_eq(g.as_bytes(), token.as_bytes())) {
            return ApiError::new(ErrorCode::Unauthorized, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub(crate) enum IdempotentSlot {
    InFlight {
        fingerprint: [u8; 32],
    },
    Done {
        fingerprint: [u8; 32],
        status: StatusCode,
        content_type: Option<HeaderValue>,
        body: Bytes,
    },
}

async fn idempotency(State(s): State<AppState>, req: Request, next: Next) -> Response {
    if req.method() != Method::POST {
        return next.run(req).await;
    }
    let Some(key) = req
        .headers()
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
    else {
        return next.run(req).await;
    };
    let (parts, body) = req.into_parts();
    let bytes = match axum::body::to_bytes(body, MAX_BODY).await {
        Ok(b) => b,
        Err(e) => return ApiError::validation(format!("reading body: {e}")).into_response(),
    };
    let slot_key = format!("{} {key}", parts.uri.path());
    let fingerprint: [u8; 32] = Sha256::digest(&bytes).into();
    {
        let mut slots = s.idempotency.lock();
        match slots.get(&slot_key) {
            Some(IdempotentSlot::Done {
                fingerprint: f,
                status,
                content_type,
                body,
            }) if *f == fingerprint => {
                let mut resp = Response::new(Body::from(body.clone()));
                *resp.status_mut() = *status;
                if let Some(ct) = content_type {
                    resp.headers_mut().insert(header::CONTENT_TYPE, ct.clone());
                }
                resp.headers_mut().insert(REPLAY_HEADER, HeaderValue::from_static("true"));
                return resp;
            }
            Some(IdempotentSlot::InFlight { fingerprint: f }) if *f == fingerprint => {
                return ApiError::new(ErrorCode::IdempotencyInFlight, "a request with this key is still running")
                    .into_response();
            }
            Some(_) => {
                return ApiError::new(ErrorCode::IdempotencyKeyReused, "idempotency key was used with a different body")
                    .with_details(serde_json::json!({ "key": key }))
                    .into_response();
            }
            None => {
                slots.insert(slot_key.clone(), IdempotentSlot::InFlight { fingerprint });
            }
        }
    }
    let resp = next.run(Request::from_parts(parts, Body::from(bytes))).await;
    let (rparts, rbody) = resp.into_parts();
    let rbytes = match axum::body::to_bytes(rbody, usize::MAX).await {
        Ok(b) => b,
        Err(e) => {
            s.idempotency.lock().remove(&slot_key);
            return ApiError::internal(format!("buffering response: {e}")).into_response();
        }
    };
    let mut slots = s.idempotency.lock();
    if rparts.status.is_server_error() {
        // transient failures may be retried under the same key
        slots.remove(&slot_key);
    } else {
        slots.insert(
            slot_key,
            IdempotentSlot::Done {
                fingerprint,
                status: rparts.status,
                content_type: rparts.headers.get(header::CONTENT_TYPE).cloned(),
                body: rbytes.clone(),
            },
        );
    }
    Response::from_parts(rparts, Body::from(rbytes))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestRequest {
    /// Server-side manifest path.
    manifest: Option<PathBuf>,
    /// Inline manifest entries.
    entries: Option<Vec<ManifestEntry>>,
    /// Base for relative paths of inline entries; the server's working
    /// directory by default.
    base_dir: Option<PathBuf>,
    /// OCR every new image right away.
    #[serde(default)]
    label: bool,
    /// Add the ingested images to this seed set, creating it if needed.
    seed_set: Option<String>,
}

#[derive(Debug, Serialize)]
struct JobAccepted {
    job_id: String,
    status_url: String,
}

fn accepted(job: crate::state::Job) -> Response {
    reply(
        StatusCode::ACCEPTED,
        JobAccepted {
            status_url: format!("/v1/jobs/{}", job.id),
            job_id: job.id,
        },
    )
}

async fn ingest(State(s): State<AppState>, ApiJson(req): ApiJson<IngestRequest>) -> Result<Response, ApiError> {
    let (entries, base) = match (req.manifest, req.entries) {
        (Some(path), None) => {
            let base = path.parent().map(PathBuf::from).unwrap_or_default();
            let entries = blocking(move || read_manifest(&path).map_err(ApiError::from)).await?;
            (entries, base)
        }
        (None, Some(entries)) => (
            entries.into_iter().enumerate().map(|(i, e)| (i + 1, e)).collect(),
            req.base_dir.unwrap_or_default(),
        ),
        _ => return Err(ApiError::validation("give exactly one of manifest and entries")),
    };
    if req.seed_set.as_deref().is_some_and(|n| n.trim().is_empty()) {
        return Err(ApiError::validation("seed_set is empty"));
    }
    Ok(accepted(s.submit(JobWork::Ingest {
        entries,
        base,
        label: req.label,
        seed_set: req.seed_set,
    })))
}

async fn job(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let job = s.job(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    Ok(reply(StatusCode::OK, job))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRequest {
    query_id: Option<String>,
    image_id: Option<String>,
    image_base64: Option<String>,
    #[serde(default)]
    config: ConfigOverrides,
}

#[derive(Debug, Serialize)]
struct QueryResponse {
    query: String,
    #[serde(flatten)]
    result: QueryResult,
}

async fn query(State(s): State<AppState>, ApiJson(req): ApiJson<QueryRequest>) -> Result<Response, ApiError> {
    let upload = req
        .image_base64
        .map(|b| {
            base64::engine::general_purpose::STANDARD
                .decode(b.as_bytes())
                .map_err(|e| ApiError::validation(format!("image_base64: {e}")))
        })
        .transpose()?;
    let config = req.config.apply(&s.config.pipeline);
    let (set, result) = blocking(move || s.query(req.query_id, req.image_id.as_deref(), upload, config)).await?;
    Ok(reply(
        StatusCode::OK,
        QueryResponse {
            query: set.query.clone(),
            result,
        },
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchQueryRequest {
    seed_set: String,
    #[serde(default)]
    config: ConfigOverrides,
}

async fn batch_query(State(s): State<AppState>, ApiJson(req): ApiJson<BatchQueryRequest>) -> Result<Response, ApiError> {
    let config = req.config.apply(&s.config.pipeline);
    config.validate().map_err(ApiError::from)?;
    if s.with_store(|st| st.seed_set(&req.seed_set).is_none()) {
        return Err(ApiError::not_found("seed set", &req.seed_set));
    }
    Ok(accepted(s.submit(JobWork::BatchQuery {
        seed_set: req.seed_set,
        config,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidatesParams {
    query: String,
    #[serde(default = "first_page")]
    page: usize,
    page_size: Option<usize>,
    decision: Option<Decision>,
}

fn first_page() -> usize {
    1
}

#[derive(Debug, Serialize)]
struct CandidateView {
    #[serde(flatten)]
    candidate: BatchCandidate,
    #[serde(skip_serializing_if = "Option::is_none")]
    review: Option<ReviewRecord>,
}

#[derive(Debug, Serialize)]
struct CandidatePage {
    query: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed_set: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed_set_version: Option<u64>,
    page: usize,
    page_size: usize,
    total: usize,
    pages: usize,
    candidates: Vec<CandidateView>,
}

async fn candidates(
    State(s): State<AppState>,
    params: Result<Query<CandidatesParams>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(p) = params.map_err(|e| ApiError::validation(e.body_text()))?;
    let page_size = p.page_size.unwrap_or(s.config.page_size);
    if p.page == 0 || page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(ApiError::validation(format!(
            "page must be >= 1 and page_size in 1..={MAX_PAGE_SIZE}"
        )));
    }
    let set = s.result(&p.query).ok_or_else(|| ApiError::not_found("query", &p.query))?;
    let matching: Vec<&BatchCandidate> = set
        .candidates
        .iter()
        .filter(|c| p.decision.is_none_or(|d| c.decision == d))
        .collect();
    let total = matching.len();
    let candidates = matching
        .into_iter()
        .skip((p.page - 1) * page_size)
        .take(page_size)
        .map(|c| CandidateView {
            review: s.latest_review(&set.query, &c.image_id),
            candidate: c.clone(),
        })
        .collect();
    Ok(reply(
        StatusCode::OK,
        CandidatePage {
            query: set.query.clone(),
            seed_set: set.seed_set.clone(),
            seed_set_version: set.seed_set_version,
            page: p.page,
            page_size,
            total,
            pages: total.div_ceil(page_size),
            candidates,
        },
    ))
}

async fn stories(State(s): State<AppState>) -> Result<Response, ApiError> {
    let snap = blocking(move || Ok(s.stories())).await?;
    Ok(match snap {
        Some(snap) => reply(StatusCode::OK, snap),
        None => reply(StatusCode::OK, serde_json::json!({ "stories": [] })),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RebuildRequest {
    eps: Option<u32>,
    min_cluster_size: Option<usize>,
    /// Cluster only the accepted candidates of this result set.
    query: Option<String>,
}

async fn rebuild_stories(State(s): State<AppState>, ApiJson(req): ApiJson<RebuildRequest>) -> Result<Response, ApiError> {
    let defaults = s.config.stories;
    let params = ClusterParams {
        eps: req.eps.unwrap_or(defaults.eps),
        min_cluster_size: req.min_cluster_size.unwrap_or(defaults.min_cluster_size),
    };
    params
        .validate(pixelmod::hashing::HashKind::Pdq256)
        .map_err(ApiError::from)?;
    if let Some(q) = &req.query {
        if s.result(q).is_none() {
            return Err(ApiError::not_found("query", q));
        }
    }
    Ok(accepted(s.submit(JobWork::StoriesRebuild {
        params,
        query: req.query,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReviewRequest {
    query_id: String,
    image_id: String,
    verdict: Verdict,
    reviewer: String,
    note: Option<String>,
    timestamp_ms: Option<u64>,
    #[serde(default)]
    promote_to_seed: bool,
    /// Target seed set; defaults to the set the batch ran over.
    seed_set: Option<String>,
    /// Refuse the promotion unless the seed set is at this version.
    expected_version: Option<u64>,
}

#[derive(Debug, Serialize)]
struct ReviewResponse {
    review: ReviewRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed_set: Option<pixelmod::corpus_store::SeedSet>,
}

async fn review(State(s): State<AppState>, ApiJson(req): ApiJson<ReviewRequest>) -> Result<Response, ApiError> {
    if !req.promote_to_seed && (req.seed_set.is_some() || req.expected_version.is_some()) {
        return Err(ApiError::validation("seed_set and expected_version need promote_to_seed"));
    }
    let (review, seed_set) = blocking(move || {
        let promote = req.promote_to_seed.then_some((req.seed_set, req.expected_version));
        s.review(
            &req.query_id,
            &req.image_id,
            req.verdict,
            &req.reviewer,
            req.note,
            req.timestamp_ms,
            promote,
        )
    })
    .await?;
    Ok(reply(StatusCode::OK, ReviewResponse { review, seed_set }))
}

async fn image_bytes(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let path = s
        .with_store(|st| st.blob_path(&id))
        .ok_or_else(|| ApiError::not_found("image", &id))?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::from(StoreError::Io(e)))?;
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("jpg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

#[derive(Debug, Serialize)]
struct ImageMeta {
    #[serde(flatten)]
    record: pixelmod::corpus_store::ImageRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<pixelmod::ocr::OcrLabel>,
}

async fn image_meta(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let meta = s
        .with_store(|st| {
            st.get(&id).map(|r| ImageMeta {
                record: r.clone(),
                label: st.label(&id).cloned(),
            })
        })
        .ok_or_else(|| ApiError::not_found("image", &id))?;
    Ok(reply(StatusCode::OK, meta))
}

async fn metrics(State(s): State<AppState>) -> Result<Response, ApiError> {
    let m = blocking(move || Ok(s.metrics())).await?;
    Ok(reply(StatusCode::OK, m))
}

/// Serves `router` on `bind` until Ctrl-C.
pub async fn serve(state: AppState, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
