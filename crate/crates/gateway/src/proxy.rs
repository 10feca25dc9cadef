//! Standalone dashboard: serves the UI and forwards `/api/*` to a running
//! supervisor, streams included.

use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Request, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::Router;

use crate::{error, UI};

const MAX_BODY: usize = 1 << 20;

struct Upstream {
    client: reqwest::Client,
    base: String,
}

pub fn proxy_router(upstream: impl Into<String>) -> Router {
    let up = Upstream { client: reqwest::Client::new(), base: upstream.into().trim_end_matches('/').to_string() };
    Router::new().route("/", get(|| async { Html(UI) })).fallback(forward).with_state(Arc::new(up))
}

async fn forward(State(up): State<Arc<Upstream>>, req: Request) -> Response {
    let Some(path) = req.uri().path_and_query().map(|p| p.as_str().to_string()) else {
        return error(StatusCode::NOT_FOUND, "not found");
    };
    if !path.starts_with("/api/") {
        return error(StatusCode::NOT_FOUND, format!("{path} not found"));
    }
    let method = req.method().clone();
    let content_type = req.headers().get(header::CONTENT_TYPE).cloned();
    let body = match axum::body::to_bytes(req.into_body(), MAX_BODY).await {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let mut out = up.client.request(method, format!("{}{path}", up.base)).body(body);
    if let Some(ct) = content_type {
        out = out.header(header::CONTENT_TYPE, ct);
    }
    match out.send().await {
        Ok(resp) => {
            let mut builder = Response::builder().status(resp.status());
            for name in [header::CONTENT_TYPE, header::CACHE_CONTROL] {
                if let Some(v) = resp.headers().get(&name) {
                    builder = builder.header(name, v.clone());
                }
            }
            builder
                .body(Body::from_stream(resp.bytes_stream()))
                .unwrap_or_else(|e| error(StatusCode::BAD_GATEWAY, e))
        }
        Err(e) => error(StatusCode::BAD_GATEWAY, format!("supervisor unreachable: {e}")).into_response(),
    }
}
