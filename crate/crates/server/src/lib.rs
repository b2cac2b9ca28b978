//! HTTP front end for [`LockboxServer`].
//!
//! A fixed pool of worker threads pulls requests from a `tiny_http`
//! listener and hands them to [`lockbox_core::api::handle`]. TLS is left to
//! whatever terminates connections in front of the daemon.

use std::io::Read;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use lockbox_core::api::{self, ApiRequest, ApiResponse};
use lockbox_core::server::LockboxServer;
use thiserror::Error;
use tiny_http::{Header, Request, Response};

/// Largest request body accepted; larger uploads get 413.
pub const MAX_BODY_BYTES: u64 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("cannot listen on {addr}: {reason}")]
    Bind { addr: String, reason: String },
}

pub struct HttpServer {
    http: Arc<tiny_http::Server>,
    app: Arc<LockboxServer>,
    addr: SocketAddr,
}

impl HttpServer {
    /// Binds `addr`; port 0 picks a free port.
    pub fn bind(addr: &str, app: Arc<LockboxServer>) -> Result<Self, HttpError> {
        let bind_err = |reason: String| HttpError::Bind {
            addr: addr.to_owned(),
            reason,
        };
        let http = tiny_http::Server::http(addr).map_err(|e| bind_err(e.to_string()))?;
        let addr = http
            .server_addr()
            .to_ip()
            .ok_or_else(|| bind_err("not an IP listener".into()))?;
        Ok(Self {
            http: Arc::new(http),
            app,
            addr,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn app(&self) -> &Arc<LockboxServer> {
        &self.app
    }

    /// Serves on `workers` threads until [`Running::shutdown`].
    pub fn spawn(self, workers: usize) -> Running {
        let handles = (0..workers.max(1))
            .map(|i| {
                let http = self.http.clone();
                let app = self.app.clone();
                std::thread::Builder::new()
                    .name(format!("lockbox-http-{i}"))
                    .spawn(move || worker(&http, &app))
                    .expect("spawn worker")
            })
            .collect();
        Running {
            http: self.http,
            addr: self.addr,
            handles,
        }
    }
}

pub struct Running {
    http: Arc<tiny_http::Server>,
    addr: SocketAddr,
    handles: Vec<JoinHandle<()>>,
}

impl Running {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until every worker exits.
    pub fn join(mut self) {
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in &self.handles {
            self.http.unblock();
        }
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        self.stop();
    }
}

fn worker(http: &tiny_http::Server, app: &LockboxServer) {
    while let Ok(request) = http.recv() {
        serve(app, request);
    }
}

fn bearer(request: &Request) -> Option<String> {
    request
        .headers()
        .iter()
        .find(|h| h.field.equiv("Authorization"))
        .and_then(|h| h.value.as_str().strip_prefix("Bearer "))
        .map(|t| t.trim().to_owned())
}

fn serve(app: &LockboxServer, mut request: Request) {
    let mut body = Vec::new();
    let read = request
        .as_reader()
        .take(MAX_BODY_BYTES + 1)
        .read_to_end(&mut body);
    let response = match read {
        Err(e) => plain_error(400, "bad_request", &format!("cannot read body: {e}")),
        Ok(n) if n as u64 > MAX_BODY_BYTES => plain_error(413, "payload_too_large", "request body too large"),
        Ok(_) => {
            let req = ApiRequest {
                method: request.method().as_str().to_owned(),
                path: request.url().to_owned(),
                bearer: bearer(&request),
                body,
            };
            api::handle(app, &req)
        }
    };
    let content_type = Header::from_bytes("Content-Type", response.content_type).expect("static header");
    let reply = Response::from_data(response.body)
        .with_status_code(response.status)
        .with_header(content_type);
    if let Err(e) = request.respond(reply) {
        tracing::debug!(error = %e, "client went away");
    }
}

fn plain_error(status: u16, code: &str, message: &str) -> ApiResponse {
    ApiResponse {
        status,
        content_type: api::JSON,
        body: serde_json::json!({"error": code, "message": message}).to_string().into_bytes(),
    }
}
