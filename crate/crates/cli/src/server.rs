//! HTTP front end: `POST /retrieve`, `GET /healthz`, `GET /stats`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use ci_retrieval::engine::Engine;
use ci_retrieval::error::{Error, Stage};

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub query: String,
    #[serde(default)]
    pub top_k: Option<usize>,
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/retrieve", post(retrieve))
        .route("/healthz", get(healthz))
        .route("/stats", get(stats))
        .with_state(engine)
}

pub async fn serve(listener: tokio::net::TcpListener, engine: Arc<Engine>) -> anyhow::Result<()> {
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn error(status: StatusCode, message: String, stage: Option<Stage>) -> Response {
    (status, Json(json!({ "error": message, "stage": stage }))).into_response()
}

async fn retrieve(State(engine): State<Arc<Engine>>, body: Bytes) -> Response {
    let req: RetrieveRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request body: {e}"), None),
    };
    let top_k = req.top_k.unwrap_or(engine.settings().top_k);
    let outcome = tokio::task::spawn_blocking(move || engine.retrieve(&req.query, top_k)).await;
    match outcome {
        Ok(Ok(result)) => Json(result).into_response(),
        Ok(Err(Error::Retrieval { stage: Stage::Normalize, source })) => {
            error(StatusCode::BAD_REQUEST, source.to_string(), Some(Stage::Normalize))
        }
        Ok(Err(Error::Retrieval { stage, source })) => {
            error(StatusCode::INTERNAL_SERVER_ERROR, source.to_string(), Some(stage))
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}"), None),
    }
}

async fn healthz(State(engine): State<Arc<Engine>>) -> Response {
    let st = engine.state();
    Json(json!({
        "status": "ready",
        "trie_version": st.trie.version(),
        "index_version": st.index.version(),
        "intents": st.trie.len(),
        "ads": st.index.ad_count(),
        "cached_queries": st.cache.len(),
    }))
    .into_response()
}

async fn stats(State(engine): State<Arc<Engine>>) -> Response {
    Json(json!({
        "cache": engine.cache_stats(),
        "latency": engine.latency_summary(),
    }))
    .into_response()
}
