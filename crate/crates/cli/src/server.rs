//! JSON API under `/v1/`.
//!
//! Every response body, errors included, carries `model_fingerprint`.
//! Handlers only read shared state, so identical requests get identical bytes.

use std::sync::Arc;

use attention_lens::analysis::{head_outputs, inspect_head, scan_prompt, transfer_divergence, TransferReport, DEFAULT_K};
use attention_lens::corpus::{Corpus, Tokenizer};
use attention_lens::lens::BaselineMode;
use attention_lens::model::ModelBundle;
use attention_lens::Error;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::lenses::LensSet;

/// Upper bound on `n_eval` for `/v1/transfer`.
pub const MAX_TRANSFER_EVAL: usize = 1000;

pub struct AppState {
    pub model: ModelBundle,
    pub tokenizer: Tokenizer,
    pub lenses: LensSet,
    /// Held-out text for `/v1/transfer`; without it that endpoint answers 422.
    pub corpus: Option<Corpus>,
}

impl AppState {
    fn fingerprint(&self) -> &str {
        self.model.fingerprint()
    }

    fn available(&self) -> Value {
        json!(self
            .lenses
            .available()
            .into_iter()
            .map(|(layer, head)| json!({ "layer": layer, "head": head }))
            .collect::<Vec<_>>())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/model", get(model_info))
        .route("/v1/lenses", get(list_lenses))
        .route("/v1/inspect", post(inspect))
        .route("/v1/scan", post(scan))
        .route("/v1/transfer", post(transfer))
        .fallback(not_found)
        .with_state(state)
}

pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    fingerprint: String,
    extra: Option<(&'static str, Value)>,
}

impl ApiError {
    fn new(state: &AppState, status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
            fingerprint: state.fingerprint().to_string(),
            extra: None,
        }
    }

    fn bad_request(state: &AppState, message: impl Into<String>) -> Self {
        Self::new(state, StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn missing_lens(state: &AppState, layer: usize, head: usize) -> Self {
        let mut e = Self::new(
            state,
            StatusCode::NOT_FOUND,
            "lens_not_found",
            format!("no trained lens for layer {layer} head {head}"),
        );
        e.extra = Some(("available", state.available()));
        e
    }

    /// Input and index failures here come from the prompt, so they map to 422.
    /// Anything else is reported without detail.
    fn from_core(state: &AppState, err: Error) -> Self {
        match err {
            Error::Input(_) | Error::Index { .. } => {
                Self::new(state, StatusCode::UNPROCESSABLE_ENTITY, "tokenization", err.to_string())
            }
            other => {
                eprintln!("internal error: {other}");
                Self::new(state, StatusCode::INTERNAL_SERVER_ERROR, "internal", "internal error")
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({
            "model_fingerprint": self.fingerprint,
            "error": { "kind": self.kind, "message": self.message },
        });
        if let Some((key, value)) = self.extra {
            body[key] = value;
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn parse<T: DeserializeOwned>(state: &AppState, body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(state, format!("malformed request body: {e}")))
}

fn with_fingerprint(state: &AppState, value: impl serde::Serialize) -> Json<Value> {
    let mut v = serde_json::to_value(value).expect("response serializes");
    v["model_fingerprint"] = json!(state.fingerprint());
    Json(v)
}

fn check_k(state: &AppState, k: usize) -> Result<(), ApiError> {
    let v = state.model.config().vocab_size;
    if k < 1 || k > v {
        return Err(ApiError::bad_request(state, format!("k must be between 1 and {v}")));
    }
    Ok(())
}

async fn blocking<F>(state: Arc<AppState>, f: F) -> ApiResult
where
    F: FnOnce(&AppState) -> ApiResult + Send + 'static,
{
    let s = state.clone();
    match tokio::task::spawn_blocking(move || f(&s)).await {
        Ok(r) => r,
        Err(e) => {
            eprintln!("handler task failed: {e}");
            Err(ApiError::new(&state, StatusCode::INTERNAL_SERVER_ERROR, "internal", "internal error"))
        }
    }
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "model_fingerprint": state.fingerprint(),
        "config": state.model.config(),
        "parameter_count": state.model.weights().parameter_count(),
        "lens_count": state.lenses.len(),
    }))
}

async fn list_lenses(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "model_fingerprint": state.fingerprint(),
        "lenses": state.lenses.infos(),
        "rejected": state.lenses.rejected(),
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InspectRequest {
    prompt: String,
    layer: usize,
    head: usize,
    #[serde(default = "default_k")]
    k: usize,
    position: Option<usize>,
    #[serde(default)]
    baseline: Option<BaselineMode>,
}

fn default_k() -> usize {
    DEFAULT_K
}

async fn inspect(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    blocking(state, move |s| {
        let req: InspectRequest = parse(s, &body)?;
        check_k(s, req.k)?;
        let lens = s.lenses.get(req.layer, req.head).ok_or_else(|| ApiError::missing_lens(s, req.layer, req.head))?;
        let mode = req.baseline.unwrap_or(BaselineMode::FinalLayerNorm);
        let report = inspect_head(&s.model, &s.tokenizer, lens, &req.prompt, req.position, req.k, mode)
            .map_err(|e| ApiError::from_core(s, e))?;
        Ok(with_fingerprint(s, report))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanRequest {
    prompt: String,
    #[serde(default)]
    flagged_vocab: Vec<String>,
    #[serde(default = "default_k")]
    k: usize,
}

async fn scan(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    blocking(state, move |s| {
        let req: ScanRequest = parse(s, &body)?;
        check_k(s, req.k)?;
        let report = scan_prompt(&s.model, &s.tokenizer, &s.lenses.lenses(), &req.prompt, &req.flagged_vocab, req.k)
            .map_err(|e| ApiError::from_core(s, e))?;
        Ok(with_fingerprint(s, report))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransferRequest {
    layer_a: usize,
    head_a: usize,
    layer_b: usize,
    head_b: usize,
    n_eval: usize,
    #[serde(default)]
    seed: u64,
}

async fn transfer(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    blocking(state, move |s| {
        let req: TransferRequest = parse(s, &body)?;
        if req.n_eval < 1 || req.n_eval > MAX_TRANSFER_EVAL {
            return Err(ApiError::bad_request(s, format!("n_eval must be between 1 and {MAX_TRANSFER_EVAL}")));
        }
        let a = s.lenses.get(req.layer_a, req.head_a).ok_or_else(|| ApiError::missing_lens(s, req.layer_a, req.head_a))?;
        let b = s.lenses.get(req.layer_b, req.head_b).ok_or_else(|| ApiError::missing_lens(s, req.layer_b, req.head_b))?;
        let corpus = s.corpus.as_ref().ok_or_else(|| {
            ApiError::new(s, StatusCode::UNPROCESSABLE_ENTITY, "no_corpus", "server was started without an evaluation corpus")
        })?;
        let seq_len = s.model.config().max_seq_len.min(64);
        let entry = corpus
            .heldout_windows(seq_len, req.n_eval, req.seed)
            .and_then(|w| head_outputs(&s.model, a.layer, a.head, &w))
            .and_then(|inputs| transfer_divergence(a, b, &inputs))
            .map_err(|e| ApiError::from_core(s, e))?;
        Ok(with_fingerprint(
            s,
            TransferReport {
                model_fingerprint: s.fingerprint().to_string(),
                entries: vec![entry],
            },
        ))
    })
    .await
}

async fn not_found(State(state): State<Arc<AppState>>) -> ApiError {
    ApiError::new(&state, StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}
