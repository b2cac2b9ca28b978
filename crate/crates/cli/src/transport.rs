//! How a [`Client`](crate::Client) reaches the server.

use std::io::Read;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use lockbox_core::api::{self, ApiRequest, ApiResponse};
use lockbox_core::server::LockboxServer;

pub trait Transport: Send + Sync {
    fn send(&self, req: &ApiRequest) -> Result<ApiResponse, String>;
}

/// HTTP over a plain TCP connection.
pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base_url: &str) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_owned(),
            agent: ureq::AgentBuilder::new()
                .timeout_connect(Duration::from_secs(10))
                .timeout(Duration::from_secs(120))
                .build(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &ApiRequest) -> Result<ApiResponse, String> {
        let url = format!("{}{}", self.base, req.path);
        let mut call = self.agent.request(&req.method, &url);
        if let Some(token) = &req.bearer {
            call = call.set("Authorization", &format!("Bearer {token}"));
        }
        let sent = if req.body.is_empty() && req.method == "GET" {
            call.call()
        } else {
            call.set("Content-Type", api::OCTET_STREAM).send_bytes(&req.body)
        };
        let resp = match sent {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(e) => return Err(format!("cannot reach {}: {e}", self.base)),
        };
        let status = resp.status();
        let content_type = if resp.content_type().starts_with("application/json") {
            api::JSON
        } else {
            api::OCTET_STREAM
        };
        let mut body = Vec::new();
        resp.into_reader()
            .read_to_end(&mut body)
            .map_err(|e| format!("reading response: {e}"))?;
        Ok(ApiResponse {
            status,
            content_type,
            body,
        })
    }
}

/// Calls the request handler directly, without sockets.
pub struct InProcess {
    server: Arc<LockboxServer>,
}

impl InProcess {
    pub fn new(server: Arc<LockboxServer>) -> Self {
        Self { server }
    }
}

impl Transport for InProcess {
    fn send(&self, req: &ApiRequest) -> Result<ApiResponse, String> {
        Ok(api::handle(&self.server, req))
    }
}

/// Records every exchange passing through the inner transport.
pub struct Recording<T> {
    inner: T,
    log: Mutex<Vec<(ApiRequest, ApiResponse)>>,
}

impl<T: Transport> Recording<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn exchanges(&self) -> Vec<(ApiRequest, ApiResponse)> {
        self.log.lock().unwrap().clone()
    }

    /// Everything sent, bearer tokens and paths included.
    pub fn sent_bytes(&self) -> Vec<Vec<u8>> {
        self.exchanges()
            .into_iter()
            .map(|(req, _)| {
                let mut b = format!("{} {} {:?}\n", req.method, req.path, req.bearer).into_bytes();
                b.extend_from_slice(&req.body);
                b
            })
            .collect()
    }

    pub fn received_bytes(&self) -> Vec<Vec<u8>> {
        self.exchanges().into_iter().map(|(_, r)| r.body).collect()
    }
}

impl<T: Transport> Transport for Recording<T> {
    fn send(&self, req: &ApiRequest) -> Result<ApiResponse, String> {
        let resp = self.inner.send(req)?;
        self.log.lock().unwrap().push((req.clone(), resp.clone()));
        Ok(resp)
    }
}

impl<T: Transport + ?Sized> Transport for &T {
    fn send(&self, req: &ApiRequest) -> Result<ApiResponse, String> {
        (**self).send(req)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&self, req: &ApiRequest) -> Result<ApiResponse, String> {
        (**self).send(req)
    }
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn send(&self, req: &ApiRequest) -> Result<ApiResponse, String> {
        (**self).send(req)
    }
}
