//! Typed calls against the HTTP API.

use serde::de::DeserializeOwned;
use thiserror::Error;

use lockbox_core::analyzer::AnalysisResult;
use lockbox_core::api::{
    filter_to_query, AnalyzeResponse, ApiRequest, ApiResponse, ErrorBody, LoginRequest, LoginResponse,
    SweepRequest, UploadResponse,
};
use lockbox_core::audit::{AuditEvent, EventFilter};
use lockbox_core::crypto::{seal_for_upload, UploadTarget};
use lockbox_core::entropy::{EntropySource, OsEntropy};
use lockbox_core::instrument::LiveTracker;
use lockbox_core::server::{BeginUpload, DocumentMeta, SweepReport};
use lockbox_core::time::Timestamp;

use crate::transport::Transport;

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const AUTH: i32 = 3;
    pub const FORBIDDEN: i32 = 4;
    pub const NOT_FOUND: i32 = 5;
    pub const INTEGRITY: i32 = 6;
    pub const SERVER: i32 = 7;
    pub const FILE: i32 = 8;
    pub const CONFLICT: i32 = 9;
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{message}")]
    Api { status: u16, code: String, message: String },
    #[error("{0}")]
    Transport(String),
    #[error("not logged in; run `lockbox login <username>` first")]
    NoSession,
    #[error("session expired; log in again")]
    SessionExpired,
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("encryption failed: {0}")]
    Crypto(String),
    #[error("{0}")]
    Usage(String),
    #[error("unexpected response: {0}")]
    Decode(String),
}

impl ClientError {
    /// Stable identifier, the server's error code where there is one.
    pub fn code(&self) -> &str {
        match self {
            ClientError::Api { code, .. } => code,
            ClientError::Transport(_) => "unreachable",
            ClientError::NoSession => "no_session",
            ClientError::SessionExpired => "token_expired",
            ClientError::File { .. } => "file_error",
            ClientError::Crypto(_) => "encryption_failed",
            ClientError::Usage(_) => "usage",
            ClientError::Decode(_) => "bad_response",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Api { code, status, .. } => match code.as_str() {
                "invalid_credentials" | "token_invalid" | "token_expired" => exit::AUTH,
                "unauthorized" | "not_initiator" => exit::FORBIDDEN,
                "session_not_found" | "document_not_found" | "result_not_found" | "not_found" => {
                    exit::NOT_FOUND
                }
                "malformed_envelope" | "kek_mismatch" | "integrity_error" => exit::INTEGRITY,
                "session_consumed" | "duplicate_document" | "analysis_in_progress" => exit::CONFLICT,
                "bad_request" | "method_not_allowed" => exit::USAGE,
                _ if *status == 401 => exit::AUTH,
                _ if *status == 403 => exit::FORBIDDEN,
                _ if *status == 404 => exit::NOT_FOUND,
                _ => exit::SERVER,
            },
            ClientError::NoSession | ClientError::SessionExpired => exit::AUTH,
            ClientError::File { .. } => exit::FILE,
            ClientError::Usage(_) => exit::USAGE,
            ClientError::Transport(_) | ClientError::Crypto(_) | ClientError::Decode(_) => exit::SERVER,
        }
    }
}

pub struct Client<'a> {
    transport: &'a dyn Transport,
    token: Option<String>,
    tracker: LiveTracker,
    entropy: &'a dyn EntropySource,
}

impl<'a> Client<'a> {
    pub fn new(transport: &'a dyn Transport) -> Self {
        Self {
            transport,
            token: None,
            tracker: LiveTracker::new(),
            entropy: &OsEntropy,
        }
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn with_entropy(mut self, entropy: &'a dyn EntropySource) -> Self {
        self.entropy = entropy;
        self
    }

    /// Counts data keys and plaintext buffers this client still holds.
    pub fn tracker(&self) -> &LiveTracker {
        &self.tracker
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    fn authed(&self, method: &str, path: &str) -> Result<ApiRequest, ClientError> {
        let token = self.token.as_deref().ok_or(ClientError::NoSession)?;
        Ok(ApiRequest::new(method, path).bearer(token))
    }

    fn exchange<T: DeserializeOwned>(&self, req: ApiRequest) -> Result<T, ClientError> {
        let resp = self.transport.send(&req).map_err(ClientError::Transport)?;
        decode(resp)
    }

    pub fn login(&mut self, username: &str, password: &str) -> Result<LoginResponse, ClientError> {
        let req = ApiRequest::new("POST", "/auth/login").json(&LoginRequest {
            username: username.to_owned(),
            password: password.to_owned(),
        });
        let resp: LoginResponse = self.exchange(req)?;
        self.token = Some(resp.token.clone());
        Ok(resp)
    }

    /// Encrypts `plaintext` locally and uploads only the sealed envelope.
    pub fn upload(&self, plaintext: &[u8], document_id: &str) -> Result<String, ClientError> {
        let session: BeginUpload = self.exchange(self.authed("POST", "/uploads/begin")?)?;
        let target = UploadTarget {
            public_key_pem: &session.public_key_pem,
            kek_name: &session.kek_name,
            kek_version: session.kek_version,
        };
        let envelope = seal_for_upload(plaintext, document_id, target, self.entropy, &self.tracker)
            .map_err(|e| ClientError::Crypto(e.to_string()))?;
        let path = format!("/uploads/{}/complete", session.session_id);
        let done: UploadResponse = self.exchange(self.authed("POST", &path)?.body(envelope))?;
        Ok(done.document_id)
    }

    pub fn list(&self) -> Result<Vec<DocumentMeta>, ClientError> {
        self.exchange(self.authed("GET", "/documents")?)
    }

    pub fn analyze(&self, document_id: &str) -> Result<AnalyzeResponse, ClientError> {
        self.exchange(self.authed("POST", &format!("/documents/{}/analyze", document_id))?)
    }

    pub fn result(&self, analysis_id: &str) -> Result<AnalysisResult, ClientError> {
        self.exchange(self.authed("GET", &format!("/analyses/{analysis_id}"))?)
    }

    pub fn audit(&self, filter: &EventFilter) -> Result<Vec<AuditEvent>, ClientError> {
        let q = filter_to_query(filter);
        let path = if q.is_empty() { "/audit".to_owned() } else { format!("/audit?{q}") };
        self.exchange(self.authed("GET", &path)?)
    }

    pub fn sweep(&self, now: Option<Timestamp>) -> Result<SweepReport, ClientError> {
        let req = self.authed("POST", "/admin/retention/sweep")?;
        self.exchange(req.json(&SweepRequest { now }))
    }
}

fn decode<T: DeserializeOwned>(resp: ApiResponse) -> Result<T, ClientError> {
    if resp.is_success() {
        return serde_json::from_slice(&resp.body).map_err(|e| ClientError::Decode(e.to_string()));
    }
    match serde_json::from_slice::<ErrorBody>(&resp.body) {
        Ok(e) => Err(ClientError::Api {
            status: resp.status,
            code: e.error,
            message: e.message,
        }),
        Err(_) => Err(ClientError::Api {
            status: resp.status,
            code: format!("http_{}", resp.status),
            message: format!("server returned HTTP {}", resp.status),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn api(code: &str, status: u16) -> ClientError {
        ClientError::Api {
            status,
            code: code.into(),
            message: String::new(),
        }
    }

    #[test]
    fn error_codes_map_to_exit_statuses() {
        assert_eq!(api("invalid_credentials", 401).exit_code(), exit::AUTH);
        assert_eq!(api("unauthorized", 403).exit_code(), exit::FORBIDDEN);
        assert_eq!(api("not_initiator", 403).exit_code(), exit::FORBIDDEN);
        assert_eq!(api("document_not_found", 404).exit_code(), exit::NOT_FOUND);
        assert_eq!(api("integrity_error", 422).exit_code(), exit::INTEGRITY);
        assert_eq!(api("session_consumed", 409).exit_code(), exit::CONFLICT);
        assert_eq!(api("audit_unavailable", 503).exit_code(), exit::SERVER);
        assert_eq!(api("http_404", 404).exit_code(), exit::NOT_FOUND);
        assert_eq!(ClientError::NoSession.exit_code(), exit::AUTH);
    }

    #[test]
    fn calls_without_a_token_never_reach_the_transport() {
        struct Unreachable;
        impl Transport for Unreachable {
            fn send(&self, _: &ApiRequest) -> Result<ApiResponse, String> {
                panic!("no request expected")
            }
        }
        let client = Client::new(&Unreachable);
        assert!(matches!(client.list(), Err(ClientError::NoSession)));
        assert!(matches!(client.upload(b"x", "d"), Err(ClientError::NoSession)));
    }

    #[test]
    fn non_json_error_bodies_still_map() {
        let resp = ApiResponse {
            status: 502,
            content_type: "text/plain",
            body: b"bad gateway".to_vec(),
        };
        let err = decode::<serde_json::Value>(resp).unwrap_err();
        assert_eq!(err.code(), "http_502");
        assert_eq!(err.exit_code(), exit::SERVER);
    }
}
