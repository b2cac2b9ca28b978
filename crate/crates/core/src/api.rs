//! HTTP+JSON surface of the server, independent of any HTTP library.
//!
//! | method | path                          | body                  | response                    |
//! |--------|-------------------------------|-----------------------|-----------------------------|
//! | POST   | `/auth/login`                 | `{username,password}` | `{token,expires_at}`        |
//! | POST   | `/uploads/begin`              |                       | [`BeginUpload`]             |
//! | POST   | `/uploads/{session}/complete` | envelope bytes        | `{document_id}`             |
//! | GET    | `/documents`                  |                       | `[DocumentMeta]`            |
//! | POST   | `/documents/{id}/analyze`     |                       | `{analysis_id,status,...}`  |
//! | GET    | `/analyses/{id}`              |                       | [`AnalysisResult`]          |
//! | GET    | `/audit?op=&principal=&...`   |                       | `[AuditEvent]`              |
//! | POST   | `/admin/retention/sweep`      | `{now?}`              | `{purged:[...]}`            |
//! | GET    | `/health`                     |                       | `{status}`                  |
//!
//! Everything but login and health needs `Authorization: Bearer <token>`.
//! Errors are `{error, message}` with a stable `error` code.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analyzer::AnalysisResult;
use crate::audit::EventFilter;
use crate::identity::{AccessToken, Role};
use crate::server::{AnalysisStatus, LockboxServer, ServerError};
use crate::time::Timestamp;

pub const JSON: &str = "application/json";
pub const OCTET_STREAM: &str = "application/octet-stream";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApiRequest {
    pub method: String,
    /// Path including any query string.
    pub path: String,
    pub bearer: Option<String>,
    pub body: Vec<u8>,
}

impl ApiRequest {
    pub fn new(method: &str, path: &str) -> Self {
        Self {
            method: method.to_owned(),
            path: path.to_owned(),
            bearer: None,
            body: Vec::new(),
        }
    }

    pub fn bearer(mut self, token: &str) -> Self {
        self.bearer = Some(token.to_owned());
        self
    }

    pub fn body(mut self, body: Vec<u8>) -> Self {
        self.body = body;
        self
    }

    pub fn json<T: Serialize>(self, value: &T) -> Self {
        self.body(serde_json::to_vec(value).expect("request body serializes"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApiResponse {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl ApiResponse {
    fn json<T: Serialize>(status: u16, value: &T) -> Self {
        Self {
            status,
            content_type: JSON,
            body: serde_json::to_vec(value).expect("response serializes"),
        }
    }

    fn error(status: u16, code: &str, message: String) -> Self {
        Self::json(
            status,
            &ErrorBody {
                error: code.to_owned(),
                message,
            },
        )
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

impl From<ServerError> for ApiResponse {
    fn from(e: ServerError) -> Self {
        ApiResponse::error(e.http_status(), e.code(), e.public_message())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Serialize, Deserialize)]
pub struct LoginRequest {
    pub username: String,
    pub password: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginResponse {
    pub token: String,
    pub principal: String,
    pub roles: Vec<Role>,
    pub expires_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadResponse {
    pub document_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzeResponse {
    pub analysis_id: String,
    pub document_id: String,
    pub status: AnalysisStatus,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepRequest {
    #[serde(default)]
    pub now: Option<Timestamp>,
}

/// Query-string form of an audit filter, as accepted by `GET /audit`.
pub fn filter_to_query(f: &EventFilter) -> String {
    let mut q = form_urlencoded::Serializer::new(String::new());
    if let Some(op) = f.op {
        q.append_pair("op", op.as_str());
    }
    if let Some(p) = &f.principal {
        q.append_pair("principal", p);
    }
    if let Some(r) = &f.resource {
        q.append_pair("resource", r);
    }
    if let Some(o) = f.outcome {
        q.append_pair("outcome", &o.to_string());
    }
    if let Some(t) = f.from {
        q.append_pair("from", &t.to_string());
    }
    if let Some(t) = f.to {
        q.append_pair("to", &t.to_string());
    }
    if let Some(c) = &f.correlation_id {
        q.append_pair("correlation_id", c);
    }
    q.finish()
}

pub fn filter_from_query(query: &str) -> Result<EventFilter, ServerError> {
    let bad = |k: &str, v: &str| ServerError::BadRequest(format!("invalid {k}: {v:?}"));
    let ts = |k: &str, v: &str| v.parse::<i64>().map(Timestamp).map_err(|_| bad(k, v));
    let mut f = EventFilter::default();
    for (k, v) in form_urlencoded::parse(query.as_bytes()) {
        match k.as_ref() {
            "op" => f.op = Some(v.parse().map_err(|_| bad(&k, &v))?),
            "principal" => f.principal = Some(v.into_owned()),
            "resource" => f.resource = Some(v.into_owned()),
            "outcome" => f.outcome = Some(v.parse().map_err(|_| bad(&k, &v))?),
            "from" => f.from = Some(ts(&k, &v)?),
            "to" => f.to = Some(ts(&k, &v)?),
            "correlation_id" => f.correlation_id = Some(v.into_owned()),
            other => return Err(ServerError::BadRequest(format!("unknown filter {other:?}"))),
        }
    }
    Ok(f)
}

fn token(req: &ApiRequest) -> Result<AccessToken, ServerError> {
    let wire = req.bearer.as_deref().ok_or(ServerError::TokenInvalid)?;
    Ok(AccessToken::from_wire(wire)?)
}

fn parse_json<'a, T: Deserialize<'a>>(body: &'a [u8]) -> Result<T, ServerError> {
    serde_json::from_slice(body).map_err(|e| ServerError::BadRequest(e.to_string()))
}

/// Serves one request. Request and response bodies are never logged.
pub fn handle(server: &LockboxServer, req: &ApiRequest) -> ApiResponse {
    let started = Instant::now();
    let response = {
        let _boundary = server.enter();
        route(server, req).unwrap_or_else(ApiResponse::from)
    };
    let path = req.path.split('?').next().unwrap_or_default();
    tracing::info!(
        method = %req.method,
        path,
        status = response.status,
        elapsed_ms = started.elapsed().as_millis() as u64,
        "request"
    );
    response
}

fn route(server: &LockboxServer, req: &ApiRequest) -> Result<ApiResponse, ServerError> {
    let (path, query) = req.path.split_once('?').unwrap_or((&req.path, ""));
    let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
    let method = req.method.as_str();
    match (method, segments.as_slice()) {
        ("GET", ["health"]) => Ok(ApiResponse::json(200, &serde_json::json!({"status": "ok"}))),
        ("POST", ["auth", "login"]) => {
            let body: LoginRequest = parse_json(&req.body)?;
            let t = server.login(&body.username, &body.password)?;
            Ok(ApiResponse::json(
                200,
                &LoginResponse {
                    token: t.to_wire(),
                    principal: t.principal.clone(),
                    roles: t.roles.iter().copied().collect(),
                    expires_at: t.expires_at,
                },
            ))
        }
        ("POST", ["uploads", "begin"]) => Ok(ApiResponse::json(200, &server.begin_upload(&token(req)?)?)),
        ("POST", ["uploads", session, "complete"]) => {
            let document_id = server.complete_upload(&token(req)?, session, &req.body)?;
            Ok(ApiResponse::json(201, &UploadResponse { document_id }))
        }
        ("GET", ["documents"]) => Ok(ApiResponse::json(200, &server.list_documents(&token(req)?)?)),
        ("POST", ["documents", id, "analyze"]) => {
            let r = server.initiate_analysis(&token(req)?, id)?;
            Ok(ApiResponse::json(
                201,
                &AnalyzeResponse {
                    analysis_id: r.analysis_id,
                    document_id: r.document_id,
                    status: r.status,
                },
            ))
        }
        ("GET", ["analyses", id]) => {
            let result: AnalysisResult = server.get_result(&token(req)?, id)?;
            Ok(ApiResponse::json(200, &result))
        }
        ("GET", ["audit"]) => {
            let t = token(req)?;
            let filter = filter_from_query(query)?;
            Ok(ApiResponse::json(200, &server.query_audit(&t, &filter)?))
        }
        ("POST", ["admin", "retention", "sweep"]) => {
            let t = token(req)?;
            let body: SweepRequest = if req.body.iter().all(u8::is_ascii_whitespace) {
                SweepRequest::default()
            } else {
                parse_json(&req.body)?
            };
            Ok(ApiResponse::json(200, &server.sweep(&t, body.now)?))
        }
        (_, ["health"] | ["auth", "login"] | ["uploads", "begin"] | ["uploads", _, "complete"] | ["documents"]
            | ["documents", _, "analyze"] | ["analyses", _] | ["audit"] | ["admin", "retention", "sweep"]) => {
            Ok(ApiResponse::error(405, "method_not_allowed", format!("{method} not allowed on {path}")))
        }
        _ => Ok(ApiResponse::error(404, "not_found", format!("no route for {path}"))),
    }
}
