//! HTTP plumbing shared by every node: an abortable server, the envelope
//! extractor and reply helpers, and a client that meters envelope bodies.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Request};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use hyper_util::rt::TokioIo;
use hyper_util::service::TowerToHyperService;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::{JoinHandle, JoinSet};

use crate::model::{decode_envelope, encode_envelope, MsgType, WireEnvelope};

const BODY_LIMIT: usize = 512 * 1024 * 1024;

/// A running HTTP server. Dropping or aborting it closes the listener and
/// every open connection, which is how tests kill a node.
pub struct Server {
    pub addr: SocketAddr,
    task: JoinHandle<()>,
}

impl Server {
    pub fn abort(&self) {
        self.task.abort();
    }

    pub fn is_finished(&self) -> bool {
        self.task.is_finished()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.task.abort();
    }
}

pub async fn serve(router: Router, bind: &str) -> std::io::Result<Server> {
    serve_on(TcpListener::bind(bind).await?, router)
}

/// Serves on an already bound listener, so the caller can learn its address
/// before building the router.
pub fn serve_on(listener: TcpListener, router: Router) -> std::io::Result<Server> {
    let addr = listener.local_addr()?;
    let router = router.layer(DefaultBodyLimit::max(BODY_LIMIT));
    let task = tokio::spawn(async move {
        let mut conns = JoinSet::new();
        loop {
            tokio::select! {
                accepted = listener.accept() => {
                    let Ok((stream, _)) = accepted else { continue };
                    let _ = stream.set_nodelay(true);
                    let svc = TowerToHyperService::new(router.clone());
                    conns.spawn(async move {
                        let _ = hyper::server::conn::http1::Builder::new()
                            .serve_connection(TokioIo::new(stream), svc)
                            .await;
                    });
                }
                Some(_) = conns.join_next(), if !conns.is_empty() => {}
            }
        }
    });
    Ok(Server { addr, task })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn unavailable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            kind: self.kind.into(),
            error: self.message,
        };
        let mut resp = reply("", MsgType::Error, &body);
        *resp.status_mut() = self.status;
        resp
    }
}

/// Request body decoded as a wire envelope.
pub struct Envelope(pub WireEnvelope);

impl Envelope {
    pub fn body<T: DeserializeOwned>(&self) -> Result<T, ApiError> {
        self.0.body_as().map_err(|e| ApiError::bad_request(e.to_string()))
    }
}

impl<S: Send + Sync> FromRequest<S> for Envelope {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        decode_envelope(&bytes)
            .map(Envelope)
            .map_err(|e| ApiError::bad_request(e.to_string()))
    }
}

pub fn reply<T: Serialize>(sender: &str, msg_type: MsgType, body: &T) -> Response {
    match WireEnvelope::new(msg_type, sender, body).and_then(|e| encode_envelope(&e)) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

/// Running total of envelope body bytes, shared by every client of a
/// deployment.
#[derive(Debug, Default)]
pub struct ByteMeter {
    total: AtomicU64,
}

impl ByteMeter {
    pub fn add(&self, n: u64) {
        self.total.fetch_add(n, Ordering::Relaxed);
    }

    pub fn total(&self) -> u64 {
        self.total.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("{status} {kind}: {message}")]
    Remote { status: u16, kind: String, message: String },
    #[error("protocol: {0}")]
    Protocol(String),
}

impl NetError {
    pub fn is_transport(&self) -> bool {
        matches!(self, NetError::Transport(_))
    }

    pub fn kind(&self) -> &str {
        match self {
            NetError::Remote { kind, .. } => kind,
            NetError::Transport(_) => "transport",
            NetError::Protocol(_) => "protocol",
        }
    }
}

#[derive(Clone)]
pub struct NetClient {
    http: reqwest::Client,
    sender_id: String,
    meter: Arc<ByteMeter>,
    timeout: Duration,
}

impl NetClient {
    pub fn new(sender_id: impl Into<String>, meter: Arc<ByteMeter>) -> Self {
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(2))
            .pool_idle_timeout(Duration::from_secs(30))
            .build()
            .expect("http client");
        Self {
            http,
            sender_id: sender_id.into(),
            meter,
            timeout: Duration::from_secs(30),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn sender_id(&self) -> &str {
        &self.sender_id
    }

    pub fn meter(&self) -> &Arc<ByteMeter> {
        &self.meter
    }

    pub async fn get(&self, addr: &str, path: &str) -> Result<WireEnvelope, NetError> {
        self.send(reqwest::Method::GET, addr, path, None, self.timeout).await
    }

    pub async fn get_with_timeout(&self, addr: &str, path: &str, timeout: Duration) -> Result<WireEnvelope, NetError> {
        self.send(reqwest::Method::GET, addr, path, None, timeout).await
    }

    pub async fn post<T: Serialize>(
        &self,
        addr: &str,
        path: &str,
        msg_type: MsgType,
        body: &T,
    ) -> Result<WireEnvelope, NetError> {
        let env = WireEnvelope::new(msg_type, self.sender_id.clone(), body).map_err(|e| NetError::Protocol(e.to_string()))?;
        self.send(reqwest::Method::POST, addr, path, Some(env), self.timeout).await
    }

    async fn send(
        &self,
        method: reqwest::Method,
        addr: &str,
        path: &str,
        env: Option<WireEnvelope>,
        timeout: Duration,
    ) -> Result<WireEnvelope, NetError> {
        let url = format!("http://{addr}{path}");
        let mut req = self.http.request(method, &url).timeout(timeout);
        if let Some(env) = &env {
            let bytes = encode_envelope(env).map_err(|e| NetError::Protocol(e.to_string()))?;
            self.meter.add(env.body_bytes);
            req = req.header(header::CONTENT_TYPE, "application/json").body(bytes);
        }
        let resp = req.send().await.map_err(|e| NetError::Transport(format!("{url}: {e}")))?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| NetError::Transport(format!("{url}: {e}")))?;
        let env = decode_envelope(&bytes).map_err(|e| NetError::Protocol(format!("{url}: {e}")))?;
        self.meter.add(env.body_bytes);
        if !status.is_success() {
            let body: ErrorBody = env.body_as().unwrap_or(ErrorBody {
                kind: "unknown".into(),
                error: String::new(),
            });
            return Err(NetError::Remote {
                status: status.as_u16(),
                kind: body.kind,
                message: body.error,
            });
        }
        Ok(env)
    }
}

pub fn body<T: DeserializeOwned>(env: &WireEnvelope) -> Result<T, NetError> {
    env.body_as().map_err(|e| NetError::Protocol(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::routing::{get, post};

    #[tokio::test]
    async fn round_trip_and_meter() {
        let app = Router::new()
            .route("/echo", post(|env: Envelope| async move { reply("s", MsgType::Ack, &env.0.body) }))
            .route("/missing", get(|| async { ApiError::not_found("nothing here") }));
        let server = serve(app, "127.0.0.1:0").await.unwrap();
        let addr = server.addr.to_string();
        let meter = Arc::new(ByteMeter::default());
        let c = NetClient::new("c", meter.clone());
        let out = c.post(&addr, "/echo", MsgType::Ack, &serde_json::json!({"a": 1})).await.unwrap();
        assert_eq!(out.body, serde_json::json!({"a": 1}));
        assert_eq!(meter.total(), 14);
        let err = c.get(&addr, "/missing").await.unwrap_err();
        assert_eq!(err.kind(), "not_found");

        server.abort();
        tokio::time::sleep(Duration::from_millis(50)).await;
        let err = c.post(&addr, "/echo", MsgType::Ack, &serde_json::json!({})).await.unwrap_err();
        assert!(err.is_transport(), "{err}");
    }
}
