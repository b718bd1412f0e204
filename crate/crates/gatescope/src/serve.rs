//! Read-only HTTP service over a page bundle directory.
//!
//! - `GET /index` returns `index.json`.
//! - `GET /pages/{id}` returns `pages/{id}.json`.
//! - Any other GET path is served as a static file from the directory
//!   (viewer assets), with `/` mapped to `index.html`.
//!
//! Other methods get 405.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;

use crate::page::{page_path, INDEX_FILE};

#[derive(Debug)]
struct ServeState {
    dir: PathBuf,
}

pub fn router(dir: impl Into<PathBuf>) -> Router {
    let state = Arc::new(ServeState { dir: dir.into() });
    Router::new()
        .route("/index", get(index))
        .route("/pages/{id}", get(page))
        .fallback(static_file)
        .with_state(state)
}

pub fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "json" | "map" => "application/json",
        "html" | "htm" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "txt" => "text/plain; charset=utf-8",
        "wasm" => "application/wasm",
        "woff2" => "font/woff2",
        _ => "application/octet-stream",
    }
}

async fn send_file(path: PathBuf) -> Response {
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => not_found(),
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

fn not_found() -> Response {
    (StatusCode::NOT_FOUND, "not found\n").into_response()
}

async fn index(State(s): State<Arc<ServeState>>) -> Response {
    send_file(s.dir.join(INDEX_FILE)).await
}

fn valid_page_id(id: &str) -> bool {
    !id.is_empty() && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

async fn page(State(s): State<Arc<ServeState>>, UrlPath(id): UrlPath<String>) -> Response {
    let id = id.strip_suffix(".json").unwrap_or(&id);
    if !valid_page_id(id) {
        return not_found();
    }
    send_file(page_path(&s.dir, id)).await
}

async fn static_file(State(s): State<Arc<ServeState>>, method: Method, uri: Uri) -> Response {
    if method != Method::GET && method != Method::HEAD {
        return StatusCode::METHOD_NOT_ALLOWED.into_response();
    }
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = Path::new(rel);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return not_found();
    }
    let path = s.dir.join(rel);
    if path.is_dir() {
        return send_file(path.join("index.html")).await;
    }
    send_file(path).await
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(dir: PathBuf, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("serving {} on http://{}", dir.display(), listener.local_addr()?);
    axum::serve(listener, router(dir)).await
}
