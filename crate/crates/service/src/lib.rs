//! HTTP annotation API over a [`SessionStore`].
//!
//! | route | |
//! |---|---|
//! | `GET /api/session` | status document, 404 without a session |
//! | `GET /api/queries` | unlabeled pending items, 409 unless awaiting labels |
//! | `POST /api/labels` | `{id, label}`; 404 unknown id, 422 bad label, 409 closed round |
//! | `GET /api/metrics` | round records so far |
//!
//! No payload ever carries a ground-truth label: the store only ever holds
//! pixels and the labels people post.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;

use asklearn_core::engine::{run_single_trial, EngineError, RoundRecord};
use asklearn_core::session::{PendingItem, PostError, PostOutcome};
use asklearn_core::{ExperimentConfig, SessionSnapshot, SessionStore};
use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

#[derive(Clone, Default)]
pub struct ApiState {
    pub session: Option<Arc<SessionStore>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryItem {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    /// Base64 of 8-bit grayscale bytes, row-major.
    pub pixels: String,
    pub classes: Vec<String>,
}

impl QueryItem {
    fn new(item: PendingItem, classes: &[String]) -> Self {
        Self {
            id: item.id,
            width: item.width,
            height: item.height,
            pixels: BASE64.encode(&item.pixels),
            classes: classes.to_vec(),
        }
    }

    pub fn decode_pixels(&self) -> Option<Vec<u8>> {
        BASE64.decode(&self.pixels).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPost {
    pub id: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAck {
    pub id: usize,
    pub overwrote: bool,
    pub round_complete: bool,
    pub pending_count: usize,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

fn no_session() -> Response {
    error(StatusCode::NOT_FOUND, "no session")
}

async fn get_session(State(state): State<ApiState>) -> Response {
    match &state.session {
        Some(s) => Json::<SessionSnapshot>(s.snapshot()).into_response(),
        None => no_session(),
    }
}

async fn get_queries(State(state): State<ApiState>) -> Response {
    let Some(s) = &state.session else {
        return no_session();
    };
    match s.open_queries() {
        Some(items) => {
            let out: Vec<QueryItem> = items.into_iter().map(|i| QueryItem::new(i, s.class_names())).collect();
            Json(out).into_response()
        }
        None => error(StatusCode::CONFLICT, "not awaiting labels"),
    }
}

async fn post_label(State(state): State<ApiState>, body: Result<Json<LabelPost>, JsonRejection>) -> Response {
    let Some(s) = &state.session else {
        return no_session();
    };
    let body = match body {
        Ok(Json(body)) => body,
        Err(rejection) => return error(rejection.status(), rejection.body_text()),
    };
    match s.post_label(body.id, body.label) {
        Ok(outcome) => {
            if let PostOutcome::Overwrote { previous } = outcome {
                eprintln!("label for {} overwritten ({previous} -> {})", body.id, body.label);
            }
            Json(LabelAck {
                id: body.id,
                overwrote: matches!(outcome, PostOutcome::Overwrote { .. }),
                round_complete: outcome == PostOutcome::RoundComplete,
                pending_count: s.snapshot().pending_count,
            })
            .into_response()
        }
        Err(e @ PostError::UnknownId(_)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e @ PostError::LabelOutOfRange { .. }) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e @ PostError::RoundClosed) => error(StatusCode::CONFLICT, e.to_string()),
    }
}

async fn get_metrics(State(state): State<ApiState>) -> Json<Vec<RoundRecord>> {
    Json(state.session.as_ref().map(|s| s.history()).unwrap_or_default())
}

/// The API routes, with permissive CORS. When `ui_dir` is given its files
/// are served for every other path.
pub fn router(state: ApiState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/session", get(get_session))
        .route("/api/queries", get(get_queries))
        .route("/api/labels", post(post_label))
        .route("/api/metrics", get(get_metrics))
        .with_state(state);
    let app = match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(CorsLayer::permissive())
}

#[derive(Debug)]
pub enum ServeError {
    Engine(EngineError),
    Io(std::io::Error),
}

impl std::fmt::Display for ServeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServeError::Engine(e) => write!(f, "{e}"),
            ServeError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for ServeError {}

impl From<EngineError> for ServeError {
    fn from(e: EngineError) -> Self {
        ServeError::Engine(e)
    }
}

impl From<std::io::Error> for ServeError {
    fn from(e: std::io::Error) -> Self {
        ServeError::Io(e)
    }
}

/// Run the first trial of `config` with a human oracle behind the API on
/// `port`. The engine runs on its own thread; the server keeps answering
/// after the trial ends so the final metrics stay visible, until Ctrl-C.
pub fn serve_session(config: ExperimentConfig, port: u16, ui_dir: Option<PathBuf>) -> Result<(), ServeError> {
    config.validate()?;
    let (train, test) = config.dataset.load(std::path::Path::new("."))?;
    let session = Arc::new(SessionStore::new(
        format!("{}-{}", config.strategy, config.seed),
        SessionStore::numbered_classes(train.num_classes),
    ));
    let engine_session = Arc::clone(&session);
    let engine = thread::spawn(move || {
        let result = run_single_trial(&config, 0, train, test, Some(Arc::clone(&engine_session)));
        match &result {
            Ok(records) => eprintln!("trial finished after {} rounds", records.len()),
            Err(e) => {
                eprintln!("engine stopped: {e}");
                engine_session.cancel();
            }
        }
        result
    });

    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let addr = SocketAddr::from(([127, 0, 0, 1], port));
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{addr}");
        let app = router(ApiState { session: Some(Arc::clone(&session)) }, ui_dir);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    session.cancel();
    match engine.join() {
        Ok(Ok(_)) | Ok(Err(EngineError::Oracle(_))) => Ok(()),
        Ok(Err(e)) => Err(e.into()),
        Err(_) => Err(ServeError::Io(std::io::Error::other("engine thread panicked"))),
    }
}
