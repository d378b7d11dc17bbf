//! HTTP routes over a [`Store`].

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hgcn::corpus::{Provenance, SentenceRecord};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::error::StoreError;
use crate::store::{AnnotationRecord, Stats, Store};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocSummary {
    pub id: usize,
    pub text: String,
    pub targets: usize,
    pub human: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetView {
    pub index: usize,
    /// Inclusive token indices, as in dataset files.
    pub span: [usize; 2],
    pub text: String,
    pub polarity: String,
    pub annotation: AnnotationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocView {
    pub id: usize,
    pub tokens: Vec<String>,
    pub tree: String,
    pub targets: Vec<TargetView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaveRequest {
    pub bio: Vec<String>,
    /// Version the client last saw. The `If-Match` header takes precedence.
    #[serde(default)]
    pub version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bio: Vec<String>,
    pub provenance: Provenance,
    /// Inclusive token indices of the opinion words used.
    pub opinion_spans: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub struct ApiError(StoreError);

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(ErrorBody { error: self.0.to_string() })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(store: &Arc<Store>, f: F) -> ApiResult<T>
where
    F: FnOnce(&Store) -> crate::error::Result<T> + Send + 'static,
    T: Send + 'static,
{
    let store = Arc::clone(store);
    match tokio::task::spawn_blocking(move || f(&store)).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(StoreError::Invalid(format!("worker failed: {e}")))),
    }
}

fn phrase(tokens: &[String], span: [usize; 2]) -> String {
    tokens[span[0]..=span[1].min(tokens.len() - 1)].join(" ")
}

async fn list_docs(State(store): State<Arc<Store>>) -> ApiResult<Json<Vec<DocSummary>>> {
    let docs = blocking(&store, |s| s.documents()).await?;
    Ok(Json(
        docs.iter()
            .map(|d| DocSummary {
                id: d.id,
                text: d.record.tokens.join(" "),
                targets: d.annotations.len(),
                human: d.annotations.iter().filter(|a| a.provenance == Provenance::Human).count(),
                complete: d.is_complete(),
            })
            .collect(),
    ))
}

async fn get_doc(State(store): State<Arc<Store>>, Path(id): Path<usize>) -> ApiResult<Json<DocView>> {
    let doc = blocking(&store, move |s| s.read(id)).await?;
    let targets = doc
        .record
        .targets
        .iter()
        .zip(&doc.annotations)
        .enumerate()
        .map(|(index, (t, a))| TargetView {
            index,
            span: t.span,
            text: phrase(&doc.record.tokens, t.span),
            polarity: t.polarity.clone(),
            annotation: a.clone(),
        })
        .collect();
    Ok(Json(DocView {
        id: doc.id,
        tokens: doc.record.tokens.clone(),
        tree: doc.record.ptb.clone(),
        targets,
    }))
}

fn if_match(headers: &HeaderMap) -> Result<Option<u64>, StoreError> {
    let Some(v) = headers.get(header::IF_MATCH) else {
        return Ok(None);
    };
    let raw = v.to_str().unwrap_or_default().trim();
    let raw = raw.strip_prefix("W/").unwrap_or(raw).trim_matches('"');
    raw.parse()
        .map(Some)
        .map_err(|_| StoreError::Invalid(format!("If-Match must carry a record version, got {raw:?}")))
}

async fn save_scope(
    State(store): State<Arc<Store>>,
    Path((id, target)): Path<(usize, usize)>,
    headers: HeaderMap,
    Json(body): Json<SaveRequest>,
) -> ApiResult<Response> {
    let expected = if_match(&headers)?.or(body.version);
    let rec = blocking(&store, move |s| s.save(id, target, &body.bio, expected)).await?;
    let etag = format!("\"{}\"", rec.version);
    Ok(([(header::ETAG, etag)], Json(rec)).into_response())
}

async fn pre_annotate(
    State(store): State<Arc<Store>>,
    Path((id, target)): Path<(usize, usize)>,
) -> ApiResult<Json<Proposal>> {
    let (bio, provenance, opinions) = blocking(&store, move |s| s.propose(id, target)).await?;
    Ok(Json(Proposal {
        bio,
        provenance,
        opinion_spans: opinions.iter().map(|s| s.to_inclusive()).collect(),
    }))
}

async fn export(State(store): State<Arc<Store>>) -> ApiResult<Json<Vec<SentenceRecord>>> {
    Ok(Json(blocking(&store, |s| s.export()).await?))
}

async fn stats(State(store): State<Arc<Store>>) -> ApiResult<Json<Stats>> {
    Ok(Json(blocking(&store, |s| s.stats()).await?))
}

/// The API routes, plus static files from `ui_dir` at `/` when given.
pub fn router(store: Arc<Store>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/docs", get(list_docs))
        .route("/api/docs/{id}", get(get_doc))
        .route("/api/docs/{id}/targets/{k}/scope", post(save_scope))
        .route("/api/docs/{id}/targets/{k}/pre-annotate", post(pre_annotate))
        .route("/api/export", get(export))
        .route("/api/stats", get(stats))
        .with_state(store);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
