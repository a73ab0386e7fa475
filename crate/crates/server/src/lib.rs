//! JSON API and static hosting for the ranking study.
//!
//! Routes:
//! - `GET /api/health`
//! - `GET /api/assignment?rater=<token>`
//! - `POST /api/response` with `{rater, sample_id, ordering}`
//! - `GET /api/results[?sample=<id>]`
//! - `GET /images/{sample}/{image}`
//! - everything else from the optional static directory

use std::collections::BTreeMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ifqa::studysvc::{Assignment, SampleResult, Study, SubmitAck};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub struct ApiError(ifqa::Error);

impl From<ifqa::Error> for ApiError {
    fn from(e: ifqa::Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        use ifqa::Error as E;
        let status = match &self.0 {
            E::Validation { .. } | E::Parameter(_) => StatusCode::BAD_REQUEST,
            E::Conflict(_) => StatusCode::CONFLICT,
            E::NotFound(_) | E::EmptyScope(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = serde_json::json!({ "error": self.0.to_string() });
        if let E::Validation { field, .. } = &self.0 {
            body["field"] = field.clone().into();
        }
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(body)).into_response()
    }
}

type Shared = Arc<Mutex<Study>>;

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub url: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AssignmentBody {
    Assigned {
        sample_id: String,
        images: Vec<ImageRef>,
        answered: usize,
        total: usize,
    },
    Complete {
        answered: usize,
        total: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResponseBody {
    pub rater: String,
    pub sample_id: String,
    pub ordering: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResultsBody {
    pub results: Vec<SampleResult>,
    pub coverage: BTreeMap<String, usize>,
}

#[derive(Deserialize)]
struct RaterQuery {
    rater: Option<String>,
}

#[derive(Deserialize)]
struct SampleQuery {
    sample: Option<String>,
}

fn lock(s: &Shared) -> std::sync::MutexGuard<'_, Study> {
    s.lock().unwrap_or_else(|p| p.into_inner())
}

async fn health(State(s): State<Shared>) -> Json<serde_json::Value> {
    let st = lock(&s);
    Json(serde_json::json!({
        "status": "ok",
        "samples": st.sample_ids().len(),
        "responses": st.response_count(),
        "format_version": ifqa::FORMAT_VERSION,
    }))
}

async fn assignment(State(s): State<Shared>, Query(q): Query<RaterQuery>) -> Result<Json<AssignmentBody>, ApiError> {
    let rater = q.rater.unwrap_or_default();
    let a = lock(&s).next_assignment(&rater)?;
    Ok(Json(match a {
        Assignment::Assigned {
            sample_id,
            images,
            answered,
            total,
        } => AssignmentBody::Assigned {
            images: images
                .into_iter()
                .map(|id| ImageRef {
                    url: format!("/images/{sample_id}/{id}"),
                    id,
                })
                .collect(),
            sample_id,
            answered,
            total,
        },
        Assignment::Complete { answered, total } => AssignmentBody::Complete { answered, total },
    }))
}

async fn response(State(s): State<Shared>, Json(b): Json<ResponseBody>) -> Result<Json<SubmitAck>, ApiError> {
    Ok(Json(lock(&s).submit_response(&b.rater, &b.sample_id, b.ordering)?))
}

async fn results(State(s): State<Shared>, Query(q): Query<SampleQuery>) -> Result<Json<ResultsBody>, ApiError> {
    let st = lock(&s);
    let results = st.results(q.sample.as_deref())?;
    let coverage = st.coverage();
    Ok(Json(ResultsBody { results, coverage }))
}

async fn image(State(s): State<Shared>, Path((sample, image)): Path<(String, String)>) -> Result<Response, ApiError> {
    let path = lock(&s)
        .image_path(&sample, &image)
        .map(|p| p.to_path_buf())
        .ok_or_else(|| ifqa::Error::NotFound(format!("image `{sample}/{image}`")))?;
    let bytes = tokio::fs::read(&path).await.map_err(ifqa::Error::from)?;
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        _ => "image/jpeg",
    };
    Ok(([(header::CONTENT_TYPE, mime), (header::CACHE_CONTROL, "no-store")], bytes).into_response())
}

/// Builds the application; `static_dir` is served at `/` when given.
pub fn router(study: Study, static_dir: Option<PathBuf>) -> Router {
    let app = Router::new()
        .route("/api/health", get(health))
        .route("/api/assignment", get(assignment))
        .route("/api/response", post(response))
        .route("/api/results", get(results))
        .route("/images/{sample}/{image}", get(image))
        .with_state(Arc::new(Mutex::new(study)));
    match static_dir {
        Some(d) => app.fallback_service(ServeDir::new(d).append_index_html_on_directories(true)),
        None => app,
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
