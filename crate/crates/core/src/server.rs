//! The orchestration layer: the only place plaintext exists.
//!
//! Upload never decrypts. Analysis runs the fixed sequence authorize,
//! fetch wrapped key, fetch ciphertext, unwrap (audited), decrypt in memory,
//! analyze, wipe, store the result. Key and plaintext are owned by the
//! analysis step and wiped on every exit path, including `?` returns, by
//! their `Drop` implementations.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analyzer::{AnalysisResult, Analyzer, TechniqueExtractor};
use crate::audit::{AuditEvent, AuditLog, DetailValue, EventFilter, NewEvent, Operation, Outcome};
use crate::context::Context;
use crate::crypto::{decode_envelope, decrypt_document, EncryptedPayload, SealingKey};
use crate::entropy::{EntropySource, OsEntropy};
use crate::fsutil::write_atomic;
use crate::identity::{
    evaluate, AccessToken, Action, Caller, Credential, Denied, IdentityError, IdentityProvider, Role,
    TokenKey, UserRegistry,
};
use crate::ids;
use crate::instrument::LiveCounts;
use crate::store::{BlobSpec, Container, ObjectStore, PurgedBlob, RetentionPolicy, StoreError, STORE_MASTER_KEY_ENV};
use crate::time::{Clock, SystemClock, Timestamp, MINUTE};
use crate::vault::{KeyFactory, KeyHandle, KeyVault, SecretVault, VaultError, VAULT_MASTER_KEY_ENV};

pub const SESSION_LIFETIME_SECS: i64 = 10 * MINUTE;
/// The managed identity the server uses toward vaults and the store.
pub const BACKEND_PRINCIPAL: &str = "lockbox-backend";
pub const TOKEN_KEY_ENV: &str = "LOCKBOX_TOKEN_KEY";
pub const DEFAULT_KEK_NAME: &str = "app-kek";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KekMode {
    /// One application key pair, created at first start.
    #[default]
    Single,
    /// A fresh key pair per upload session.
    PerDocument,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetentionConfig {
    #[serde(default = "default_document_days")]
    pub encrypted_document_days: i64,
    #[serde(default = "default_result_days")]
    pub analysis_result_days: i64,
}

fn default_document_days() -> i64 {
    7
}

fn default_result_days() -> i64 {
    90
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self {
            encrypted_document_days: default_document_days(),
            analysis_result_days: default_result_days(),
        }
    }
}

fn default_listen() -> String {
    "127.0.0.1:7878".into()
}

fn default_workers() -> usize {
    4
}

/// Server configuration file. Relative paths resolve against the file's
/// directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub data_root: PathBuf,
    #[serde(default)]
    pub kek_mode: KekMode,
    #[serde(default)]
    pub retention: RetentionConfig,
    pub user_registry: PathBuf,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Run a retention sweep on this period; sweeps are manual when absent.
    #[serde(default)]
    pub sweep_interval_secs: Option<u64>,
}

impl ServerConfig {
    pub fn load(path: &Path) -> Result<Self, ServerError> {
        let text = fs::read_to_string(path).map_err(|e| ServerError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ServerConfig =
            serde_json::from_str(&text).map_err(|e| ServerError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.data_root.is_relative() {
            cfg.data_root = base.join(&cfg.data_root);
        }
        if cfg.user_registry.is_relative() {
            cfg.user_registry = base.join(&cfg.user_registry);
        }
        if cfg.workers == 0 {
            return Err(ServerError::Config("workers must be positive".into()));
        }
        Ok(cfg)
    }
}

/// The three service secrets: vault master key, store master key, token MAC key.
pub struct MasterKeys {
    pub vault: SealingKey,
    pub store: SealingKey,
    pub token: TokenKey,
}

impl MasterKeys {
    pub fn from_env() -> Result<Self, ServerError> {
        fn var(name: &str) -> Result<String, ServerError> {
            std::env::var(name).map_err(|_| ServerError::Config(format!("{name} is not set")))
        }
        let bad = |name: &str| ServerError::Config(format!("{name} must be 64 hex digits"));
        Ok(Self {
            vault: SealingKey::from_hex(&var(VAULT_MASTER_KEY_ENV)?).map_err(|_| bad(VAULT_MASTER_KEY_ENV))?,
            store: SealingKey::from_hex(&var(STORE_MASTER_KEY_ENV)?).map_err(|_| bad(STORE_MASTER_KEY_ENV))?,
            token: TokenKey::from_hex(&var(TOKEN_KEY_ENV)?).map_err(|_| bad(TOKEN_KEY_ENV))?,
        })
    }

    pub fn generate(source: &dyn EntropySource) -> Result<Self, ServerError> {
        let internal = |e: &dyn std::fmt::Display| ServerError::Internal(e.to_string());
        Ok(Self {
            vault: SealingKey::generate(source).map_err(|e| internal(&e))?,
            store: SealingKey::generate(source).map_err(|e| internal(&e))?,
            token: TokenKey::generate(source).map_err(|e| internal(&e))?,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServerError {
    #[error("invalid username or password")]
    InvalidCredentials,
    #[error("token invalid")]
    TokenInvalid,
    #[error("token expired")]
    TokenExpired,
    #[error(transparent)]
    Unauthorized(#[from] Denied),
    #[error("only the initiator of an analysis may view its result")]
    NotInitiator,
    #[error("upload session not found")]
    SessionNotFound,
    #[error("upload session expired")]
    SessionExpired,
    #[error("upload session already used")]
    SessionConsumed,
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(String),
    #[error("envelope key does not match the upload session")]
    KekMismatch,
    #[error("document {0} already exists")]
    DuplicateDocument(String),
    #[error("document {0} not found")]
    DocumentNotFound(String),
    #[error("document failed integrity verification")]
    IntegrityError,
    #[error("analysis failed: {0}")]
    AnalysisFailed(String),
    #[error("analysis of {0} already in progress")]
    AnalysisInProgress(String),
    #[error("result {0} not found")]
    ResultNotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("audit unavailable")]
    AuditUnavailable(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServerError {
    /// Stable machine-readable code. Expired and unknown sessions share one
    /// code; the audit log keeps the precise cause.
    pub fn code(&self) -> &'static str {
        use ServerError::*;
        match self {
            InvalidCredentials => "invalid_credentials",
            TokenInvalid => "token_invalid",
            TokenExpired => "token_expired",
            Unauthorized(_) => "unauthorized",
            NotInitiator => "not_initiator",
            SessionNotFound | SessionExpired => "session_not_found",
            SessionConsumed => "session_consumed",
            MalformedEnvelope(_) => "malformed_envelope",
            KekMismatch => "kek_mismatch",
            DuplicateDocument(_) => "duplicate_document",
            DocumentNotFound(_) => "document_not_found",
            IntegrityError => "integrity_error",
            AnalysisFailed(_) => "analysis_failed",
            AnalysisInProgress(_) => "analysis_in_progress",
            ResultNotFound(_) => "result_not_found",
            BadRequest(_) => "bad_request",
            AuditUnavailable(_) => "audit_unavailable",
            Config(_) | Internal(_) => "internal",
        }
    }

    pub fn http_status(&self) -> u16 {
        use ServerError::*;
        match self {
            InvalidCredentials | TokenInvalid | TokenExpired => 401,
            Unauthorized(_) | NotInitiator => 403,
            SessionNotFound | SessionExpired | DocumentNotFound(_) | ResultNotFound(_) => 404,
            SessionConsumed | DuplicateDocument(_) | AnalysisInProgress(_) => 409,
            MalformedEnvelope(_) | KekMismatch | IntegrityError => 422,
            BadRequest(_) => 400,
            AuditUnavailable(_) => 503,
            AnalysisFailed(_) | Config(_) | Internal(_) => 500,
        }
    }

    /// Message safe to show an end user.
    pub fn public_message(&self) -> String {
        use ServerError::*;
        match self {
            Unauthorized(_) => "not permitted".into(),
            SessionExpired => SessionNotFound.to_string(),
            AuditUnavailable(_) => "audit log unavailable; operation refused".into(),
            AnalysisFailed(_) => "analysis failed".into(),
            Config(_) | Internal(_) => "internal error".into(),
            other => other.to_string(),
        }
    }
}

impl From<IdentityError> for ServerError {
    fn from(e: IdentityError) -> Self {
        match e {
            IdentityError::InvalidCredentials => ServerError::InvalidCredentials,
            IdentityError::TokenInvalid => ServerError::TokenInvalid,
            IdentityError::TokenExpired => ServerError::TokenExpired,
            IdentityError::Registry(m) => ServerError::Internal(m),
        }
    }
}

#[derive(Clone, Debug)]
struct UploadSession {
    principal: String,
    kek: KeyHandle,
    expires_at: Timestamp,
    consumed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeginUpload {
    pub session_id: String,
    pub public_key_pem: String,
    pub kek_name: String,
    pub kek_version: u32,
    pub expires_at: Timestamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocumentStatus {
    Stored,
    Purged,
}

/// Listing metadata. Never carries content.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentMeta {
    pub document_id: String,
    pub uploader: String,
    pub created_at: Timestamp,
    pub kek_name: String,
    pub kek_version: u32,
    pub status: DocumentStatus,
    pub size: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DocumentRecord {
    #[serde(flatten)]
    meta: DocumentMeta,
    /// SHA-256 of the stored nonce||ciphertext||tag, checked before any unwrap.
    payload_sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisStatus {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub analysis_id: String,
    pub document_id: String,
    pub initiator: String,
    pub started_at: Timestamp,
    pub status: AnalysisStatus,
    pub result_blob_id: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepReport {
    pub purged: Vec<PurgedBlob>,
}

/// Live-object checks at request boundaries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BoundaryReport {
    pub checks: u64,
    pub violations: u64,
}

#[derive(Default)]
struct Boundary {
    active: AtomicUsize,
    checks: AtomicU64,
    violations: AtomicU64,
}

/// Marks one request in flight. Boundary checks run whenever the server
/// goes idle or leaves idle, where no request can legitimately hold keys or
/// plaintext.
pub struct RequestGuard<'a> {
    server: &'a LockboxServer,
}

impl Drop for RequestGuard<'_> {
    fn drop(&mut self) {
        if self.server.boundary.active.fetch_sub(1, Ordering::SeqCst) == 1 {
            self.server.check_boundary();
        }
    }
}

struct InFlight<'a> {
    set: &'a Mutex<HashSet<String>>,
    id: String,
}

impl<'a> InFlight<'a> {
    fn acquire(set: &'a Mutex<HashSet<String>>, id: &str) -> Option<Self> {
        set.lock()
            .expect("in-flight set poisoned")
            .insert(id.to_owned())
            .then(|| Self { set, id: id.to_owned() })
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.set.lock().expect("in-flight set poisoned").remove(&self.id);
    }
}

pub struct ServerBuilder {
    data_root: Option<PathBuf>,
    kek_mode: KekMode,
    retention: RetentionPolicy,
    registry: Option<UserRegistry>,
    clock: Arc<dyn Clock>,
    entropy: Arc<dyn EntropySource>,
    key_factory: KeyFactory,
    analyzer: Arc<dyn Analyzer>,
    keys: Option<MasterKeys>,
    token_lifetime_secs: Option<i64>,
}

impl Default for ServerBuilder {
    fn default() -> Self {
        Self {
            data_root: None,
            kek_mode: KekMode::Single,
            retention: RetentionPolicy::default(),
            registry: None,
            clock: Arc::new(SystemClock),
            entropy: Arc::new(OsEntropy),
            key_factory: KeyFactory::fresh(),
            analyzer: Arc::new(TechniqueExtractor::default()),
            keys: None,
            token_lifetime_secs: None,
        }
    }
}

impl ServerBuilder {
    /// Persist under `root`; without it everything lives in memory.
    pub fn data_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.data_root = Some(root.into());
        self
    }

    pub fn kek_mode(mut self, mode: KekMode) -> Self {
        self.kek_mode = mode;
        self
    }

    pub fn retention(mut self, policy: RetentionPolicy) -> Self {
        self.retention = policy;
        self
    }

    pub fn registry(mut self, registry: UserRegistry) -> Self {
        self.registry = Some(registry);
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn entropy(mut self, entropy: Arc<dyn EntropySource>) -> Self {
        self.entropy = entropy;
        self
    }

    pub fn key_factory(mut self, factory: KeyFactory) -> Self {
        self.key_factory = factory;
        self
    }

    pub fn analyzer(mut self, analyzer: Arc<dyn Analyzer>) -> Self {
        self.analyzer = analyzer;
        self
    }

    pub fn master_keys(mut self, keys: MasterKeys) -> Self {
        self.keys = Some(keys);
        self
    }

    pub fn token_lifetime_secs(mut self, secs: i64) -> Self {
        self.token_lifetime_secs = Some(secs);
        self
    }

    pub fn from_config(cfg: &ServerConfig) -> Result<Self, ServerError> {
        let retention = RetentionPolicy::from_days(
            cfg.retention.encrypted_document_days,
            cfg.retention.analysis_result_days,
        )
        .map_err(|e| ServerError::Config(e.to_string()))?;
        Ok(Self::default()
            .data_root(&cfg.data_root)
            .kek_mode(cfg.kek_mode)
            .retention(retention)
            .registry(UserRegistry::load(&cfg.user_registry)?))
    }

    pub fn build(self) -> Result<LockboxServer, ServerError> {
        let keys = match (self.keys, &self.data_root) {
            (Some(k), _) => k,
            (None, None) => MasterKeys::generate(self.entropy.as_ref())?,
            (None, Some(_)) => return Err(ServerError::Config("a persistent server needs master keys".into())),
        };
        let audit = match &self.data_root {
            Some(root) => {
                fs::create_dir_all(root).map_err(internal)?;
                AuditLog::open(&root.join("audit.log"), self.clock.clone()).map_err(internal)?
            }
            None => AuditLog::in_memory(self.clock.clone()),
        };
        let ctx = Context::new(self.clock, self.entropy, Arc::new(audit));
        let (key_vault, secrets, store) = match &self.data_root {
            Some(root) => (
                KeyVault::open(&root.join("vault-a"), keys.vault.clone(), self.key_factory, ctx.clone()).map_err(internal)?,
                SecretVault::open(&root.join("vault-b"), keys.vault, ctx.clone()).map_err(internal)?,
                ObjectStore::open(&root.join("store"), keys.store, self.retention, ctx.clone()).map_err(internal)?,
            ),
            None => (
                KeyVault::in_memory(keys.vault.clone(), self.key_factory, ctx.clone()),
                SecretVault::in_memory(keys.vault, ctx.clone()),
                ObjectStore::in_memory(keys.store, self.retention, ctx.clone()),
            ),
        };
        let mut identity = IdentityProvider::new(
            self.registry.unwrap_or_else(|| UserRegistry::from_records(vec![]).expect("empty registry")),
            keys.token,
            ctx.audit.clone(),
        );
        if let Some(secs) = self.token_lifetime_secs {
            identity = identity.with_lifetime_secs(secs);
        }
        let backend = Caller::new(BACKEND_PRINCIPAL, [Role::ServiceBackend]);
        let app_kek = match self.kek_mode {
            KekMode::Single => Some(match key_vault.latest(DEFAULT_KEK_NAME) {
                Some(h) => h,
                None => key_vault.create_rsa_key(DEFAULT_KEK_NAME, &backend).map_err(internal)?,
            }),
            KekMode::PerDocument => None,
        };
        let meta_root = self.data_root.as_ref().map(|r| r.join("server"));
        let (documents, analyses) = match &meta_root {
            Some(root) => (load_records(&root.join("documents"))?, load_records(&root.join("analyses"))?),
            None => (BTreeMap::new(), BTreeMap::new()),
        };
        Ok(LockboxServer {
            ctx,
            identity,
            keys: key_vault,
            secrets,
            store,
            analyzer: self.analyzer,
            backend,
            kek_mode: self.kek_mode,
            app_kek,
            sessions: Mutex::default(),
            documents: RwLock::new(
                documents
                    .into_values()
                    .map(|r: DocumentRecord| (r.meta.document_id.clone(), r))
                    .collect(),
            ),
            analyses: RwLock::new(
                analyses
                    .into_values()
                    .map(|r: AnalysisRecord| (r.analysis_id.clone(), r))
                    .collect(),
            ),
            in_flight: Mutex::default(),
            meta_root,
            boundary: Boundary::default(),
        })
    }
}

fn internal(e: impl std::fmt::Display) -> ServerError {
    ServerError::Internal(e.to_string())
}

fn load_records<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<BTreeMap<PathBuf, T>, ServerError> {
    fs::create_dir_all(dir).map_err(internal)?;
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(internal)? {
        let path = entry.map_err(internal)?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let record = serde_json::from_slice(&fs::read(&path).map_err(internal)?)
                .map_err(|e| internal(format!("{}: {e}", path.display())))?;
            out.insert(path, record);
        }
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct LockboxServer {
    ctx: Context,
    identity: IdentityProvider,
    keys: KeyVault,
    secrets: SecretVault,
    store: ObjectStore,
    analyzer: Arc<dyn Analyzer>,
    backend: Caller,
    kek_mode: KekMode,
    app_kek: Option<KeyHandle>,
    sessions: Mutex<HashMap<String, UploadSession>>,
    documents: RwLock<BTreeMap<String, DocumentRecord>>,
    analyses: RwLock<BTreeMap<String, AnalysisRecord>>,
    in_flight: Mutex<HashSet<String>>,
    meta_root: Option<PathBuf>,
    boundary: Boundary,
}

impl std::fmt::Debug for LockboxServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LockboxServer")
            .field("kek_mode", &self.kek_mode)
            .field("meta_root", &self.meta_root)
            .finish_non_exhaustive()
    }
}

impl LockboxServer {
    pub fn builder() -> ServerBuilder {
        ServerBuilder::default()
    }

    pub fn context(&self) -> &Context {
        &self.ctx
    }

    pub fn audit(&self) -> &AuditLog {
        &self.ctx.audit
    }

    pub fn store(&self) -> &ObjectStore {
        &self.store
    }

    pub fn key_vault(&self) -> &KeyVault {
        &self.keys
    }

    pub fn secret_vault(&self) -> &SecretVault {
        &self.secrets
    }

    pub fn identity(&self) -> &IdentityProvider {
        &self.identity
    }

    pub fn kek_mode(&self) -> KekMode {
        self.kek_mode
    }

    pub fn now(&self) -> Timestamp {
        self.ctx.clock.now()
    }

    pub fn live_counts(&self) -> LiveCounts {
        self.ctx.tracker.counts()
    }

    /// Call at the start of every request; drop the guard after the
    /// response is written.
    pub fn enter(&self) -> RequestGuard<'_> {
        if self.boundary.active.fetch_add(1, Ordering::SeqCst) == 0 {
            self.check_boundary();
        }
        RequestGuard { server: self }
    }

    fn check_boundary(&self) {
        self.boundary.checks.fetch_add(1, Ordering::SeqCst);
        let counts = self.live_counts();
        if !counts.is_zero() {
            self.boundary.violations.fetch_add(1, Ordering::SeqCst);
            tracing::error!(
                data_keys = counts.data_keys,
                plaintext_buffers = counts.plaintext_buffers,
                "live secrets at request boundary"
            );
        }
    }

    pub fn boundary_report(&self) -> BoundaryReport {
        BoundaryReport {
            checks: self.boundary.checks.load(Ordering::SeqCst),
            violations: self.boundary.violations.load(Ordering::SeqCst),
        }
    }

    fn record(&self, caller: &Caller, op: Operation, resource: &str, outcome: Outcome, details: Vec<(&str, DetailValue)>) -> Result<(), ServerError> {
        let mut ev = NewEvent::new(&caller.principal, op, resource, outcome);
        for (k, v) in details {
            ev = ev.detail(k, v);
        }
        self.ctx
            .audit
            .record(ev.correlation(caller.correlation.as_deref()))
            .map(|_| ())
            .map_err(|e| ServerError::AuditUnavailable(e.to_string()))
    }

    /// Audits a failure with its precise cause and returns it.
    fn fail(&self, caller: &Caller, op: Operation, resource: &str, err: ServerError) -> ServerError {
        let outcome = match err {
            ServerError::Unauthorized(_) | ServerError::NotInitiator => Outcome::Denied,
            _ => Outcome::Error,
        };
        // Authorization denials were already audited by the policy point.
        if !matches!(err, ServerError::Unauthorized(_)) {
            let _ = self.record(caller, op, resource, outcome, vec![("reason", err.to_string().into())]);
        }
        err
    }

    fn persist<T: Serialize>(&self, kind: &str, id: &str, record: &T) -> Result<(), ServerError> {
        if let Some(root) = &self.meta_root {
            let bytes = serde_json::to_vec_pretty(record).map_err(internal)?;
            write_atomic(&root.join(kind).join(format!("{id}.json")), &bytes).map_err(internal)?;
        }
        Ok(())
    }

    pub fn login(&self, username: &str, password: &str) -> Result<AccessToken, ServerError> {
        Ok(self.identity.authenticate(&Credential::new(username, password), self.now())?)
    }

    /// Validates a token and tags the caller with a fresh correlation id.
    pub fn caller(&self, token: &AccessToken) -> Result<Caller, ServerError> {
        let caller = self.identity.validate_token(token, self.now())?;
        Ok(caller.with_correlation(ids::fresh()))
    }

    pub fn begin_upload(&self, token: &AccessToken) -> Result<BeginUpload, ServerError> {
        let caller = self.caller(token)?;
        self.ctx.authz.require(&caller, Action::Upload, "uploads")?;
        let session_id = ids::fresh();
        let resource = format!("uploads/{session_id}");
        let backend = self.backend_for(&caller);
        let result = (|| {
            let kek = match &self.app_kek {
                Some(h) => h.clone(),
                None => self
                    .keys
                    .create_rsa_key(&format!("doc-kek-{session_id}"), &backend)
                    .map_err(vault_error)?,
            };
            let public_key_pem = self.keys.get_public_key(&kek, &backend).map_err(vault_error)?;
            Ok((kek, public_key_pem))
        })();
        let (kek, public_key_pem) = result.map_err(|e| self.fail(&caller, Operation::BeginUpload, &resource, e))?;
        let now = self.now();
        let expires_at = now.plus_secs(SESSION_LIFETIME_SECS);
        {
            let mut sessions = self.sessions.lock().expect("sessions poisoned");
            sessions.retain(|_, s| s.expires_at > now);
            sessions.insert(
                session_id.clone(),
                UploadSession {
                    principal: caller.principal.clone(),
                    kek: kek.clone(),
                    expires_at,
                    consumed: false,
                },
            );
        }
        self.record(&caller, Operation::BeginUpload, &resource, Outcome::Success, vec![("kek", kek.label().into())])?;

        Ok(BeginUpload {
            session_id,
            public_key_pem,
            kek_name: kek.name,
            kek_version: kek.version,
            expires_at,
        })
    }

    fn backend_for(&self, caller: &Caller) -> Caller {
        match &caller.correlation {
            Some(c) => self.backend.with_correlation(c.clone()),
            None => self.backend.clone(),
        }
    }

    /// Stores an envelope produced by the client. Nothing is decrypted.
    pub fn complete_upload(&self, token: &AccessToken, session_id: &str, envelope: &[u8]) -> Result<String, ServerError> {
        let caller = self.caller(token)?;
        let resource = format!("uploads/{session_id}");
        self.ctx.authz.require(&caller, Action::Upload, &resource)?;
        let now = self.now();
        // Take the session out so concurrent completions cannot both use it.
        let session = {
            let mut sessions = self.sessions.lock().expect("sessions poisoned");
            match sessions.get(session_id) {
                None => Err(ServerError::SessionNotFound),
                Some(s) if s.principal != caller.principal => Err(ServerError::SessionNotFound),
                Some(s) if s.consumed => Err(ServerError::SessionConsumed),
                Some(s) if now >= s.expires_at => Err(ServerError::SessionExpired),
                Some(_) => Ok(sessions.remove(session_id).expect("present")),
            }
        }
        .map_err(|e| self.fail(&caller, Operation::Upload, &resource, e))?;
        let result = self.store_envelope(&caller, &session, envelope);
        let mut sessions = self.sessions.lock().expect("sessions poisoned");
        match result {
            Ok(document_id) => {
                sessions.insert(session_id.to_owned(), UploadSession { consumed: true, ..session });
                drop(sessions);
                self.record(
                    &caller,
                    Operation::Upload,
                    &format!("documents/{document_id}"),
                    Outcome::Success,
                    vec![("session_id", session_id.into()), ("bytes", envelope.len().into())],
                )?;
                Ok(document_id)
            }
            Err(e) => {
                sessions.insert(session_id.to_owned(), session);
                drop(sessions);
                Err(self.fail(&caller, Operation::Upload, &resource, e))
            }
        }
    }

    fn store_envelope(&self, caller: &Caller, session: &UploadSession, bytes: &[u8]) -> Result<String, ServerError> {
        let envelope = decode_envelope(bytes).map_err(|e| ServerError::MalformedEnvelope(e.to_string()))?;
        let document_id = envelope.document_id.clone();
        ids::validate(&document_id).map_err(|e| ServerError::MalformedEnvelope(e.to_string()))?;
        if envelope.wrapped_key.kek_name != session.kek.name || envelope.wrapped_key.kek_version != session.kek.version {
            return Err(ServerError::KekMismatch);
        }
        let backend = self.backend_for(caller);
        let mut documents = self.documents.write().expect("documents poisoned");
        if documents.contains_key(&document_id)
            || self.secrets.contains(&document_id)
            || self.store.contains(Container::Documents, &document_id)
        {
            return Err(ServerError::DuplicateDocument(document_id));
        }
        let payload = envelope.payload.to_bytes();
        let spec = BlobSpec::new(Container::Documents, &document_id, &caller.principal)
            .nonce(envelope.payload.nonce.as_bytes());
        self.store.put_blob(spec, &payload, &backend).map_err(store_error)?;
        if let Err(e) = self.secrets.put_secret(&document_id, &envelope.wrapped_key, &backend) {
            self.store.rollback(Container::Documents, &document_id, &backend);
            return Err(vault_error(e));
        }
        let record = DocumentRecord {
            meta: DocumentMeta {
                document_id: document_id.clone(),
                uploader: caller.principal.clone(),
                created_at: self.now(),
                kek_name: session.kek.name.clone(),
                kek_version: session.kek.version,
                status: DocumentStatus::Stored,
                size: payload.len() as u64,
            },
            payload_sha256: sha256_hex(&payload),
        };
        if let Err(e) = self.persist("documents", &document_id, &record) {
            self.store.rollback(Container::Documents, &document_id, &backend);
            let _ = self.secrets.delete_secret(&document_id, &backend);
            return Err(e);
        }
        documents.insert(document_id.clone(), record);
        Ok(document_id)
    }

    /// Red team sees its own uploads, blue team sees every live document.
    pub fn list_documents(&self, token: &AccessToken) -> Result<Vec<DocumentMeta>, ServerError> {
        let caller = self.caller(token)?;
        let all = evaluate(&caller.roles, Action::ListDocuments).allowed;
        if !all {
            self.ctx.authz.require(&caller, Action::ListOwnDocuments, "documents")?;
        }
        let mut list: Vec<DocumentMeta> = self
            .documents
            .read()
            .expect("documents poisoned")
            .values()
            .filter(|r| r.meta.status == DocumentStatus::Stored)
            .filter(|r| all || r.meta.uploader == caller.principal)
            .map(|r| r.meta.clone())
            .collect();
        list.sort_by(|a, b| (a.created_at, &a.document_id).cmp(&(b.created_at, &b.document_id)));
        self.record(&caller, Operation::ListDocuments, "documents", Outcome::Success, vec![("count", list.len().into())])?;
        Ok(list)
    }

    pub fn initiate_analysis(&self, token: &AccessToken, document_id: &str) -> Result<AnalysisRecord, ServerError> {
        let caller = self.caller(token)?;
        let resource = format!("documents/{document_id}");
        self.ctx.authz.require(&caller, Action::InitiateAnalysis, &resource)?;
        let op = Operation::InitiateAnalysis;
        let document = self
            .documents
            .read()
            .expect("documents poisoned")
            .get(document_id)
            .filter(|r| r.meta.status == DocumentStatus::Stored)
            .cloned()
            .ok_or_else(|| ServerError::DocumentNotFound(document_id.to_owned()))
            .map_err(|e| self.fail(&caller, op, &resource, e))?;
        let _in_flight = InFlight::acquire(&self.in_flight, document_id)
            .ok_or_else(|| self.fail(&caller, op, &resource, ServerError::AnalysisInProgress(document_id.to_owned())))?;
        let analysis_id = ids::fresh();
        let started_at = self.now();
        let outcome = self.run_analysis(&caller, &document, &analysis_id);
        let status = match &outcome {
            Ok(_) => AnalysisStatus::Complete,
            Err(ServerError::IntegrityError | ServerError::AnalysisFailed(_)) => AnalysisStatus::Failed,
            Err(e) => return Err(self.fail(&caller, op, &resource, e.clone())),
        };
        let record = AnalysisRecord {
            analysis_id: analysis_id.clone(),
            document_id: document_id.to_owned(),
            initiator: caller.principal.clone(),
            started_at,
            status,
            result_blob_id: outcome.is_ok().then(|| analysis_id.clone()),
        };
        self.persist("analyses", &analysis_id, &record)
            .map_err(|e| self.fail(&caller, op, &resource, e))?;
        self.analyses
            .write()
            .expect("analyses poisoned")
            .insert(analysis_id.clone(), record.clone());
        match outcome {
            Ok(findings) => {
                self.record(
                    &caller,
                    op,
                    &resource,
                    Outcome::Success,
                    vec![("analysis_id", analysis_id.into()), ("findings", findings.into())],
                )?;
                Ok(record)
            }
            Err(e) => Err(self.fail(&caller, op, &resource, e)),
        }
    }

    /// Returns the number of findings stored.
    fn run_analysis(&self, caller: &Caller, document: &DocumentRecord, analysis_id: &str) -> Result<usize, ServerError> {
        let id = document.meta.document_id.as_str();
        let backend = self.backend_for(caller);
        let not_found = || ServerError::DocumentNotFound(id.to_owned());
        let wrapped = self.secrets.get_secret(id, &backend).map_err(|e| match e {
            VaultError::SecretNotFound(_) => not_found(),
            other => vault_error(other),
        })?;
        let blob = self.store.get_blob(Container::Documents, id, &backend).map_err(|e| match e {
            StoreError::BlobNotFound(_) => not_found(),
            other => store_error(other),
        })?;
        // Tampered ciphertext is refused before any key is released.
        if sha256_hex(&blob.bytes) != document.payload_sha256 {
            return Err(ServerError::IntegrityError);
        }
        let payload = EncryptedPayload::from_bytes(&blob.bytes).map_err(|_| ServerError::IntegrityError)?;
        let handle = self
            .keys
            .describe(&wrapped.kek_name, wrapped.kek_version)
            .ok_or_else(not_found)?;
        let mut key = self.keys.unwrap_key(&handle, &wrapped, &backend).map_err(|e| match e {
            VaultError::KeyDisabled(_) | VaultError::KeyNotFound(_) => not_found(),
            other => vault_error(other),
        })?;
        let decrypted = decrypt_document(&payload, &key);
        key.wipe();
        let mut plaintext = decrypted.map_err(|_| ServerError::IntegrityError)?;
        let analyzed = self.analyzer.analyze(&plaintext, id, self.now());
        plaintext.wipe();
        let result = analyzed.map_err(|e| ServerError::AnalysisFailed(e.to_string()))?;
        let bytes = serde_json::to_vec(&result).map_err(|e| ServerError::AnalysisFailed(e.to_string()))?;
        let spec = BlobSpec::new(Container::Results, analysis_id, &caller.principal)
            .attribute("document_id", id);
        self.store
            .put_blob(spec, &bytes, &backend)
            .map_err(|e| ServerError::AnalysisFailed(e.to_string()))?;
        Ok(result.findings.len())
    }

    /// The stored result, for its initiator only.
    pub fn get_result(&self, token: &AccessToken, analysis_id: &str) -> Result<AnalysisResult, ServerError> {
        let caller = self.caller(token)?;
        let resource = format!("analyses/{analysis_id}");
        self.ctx.authz.require(&caller, Action::GetResult, &resource)?;
        let op = Operation::GetResult;
        let result = (|| {
            let record = self
                .analyses
                .read()
                .expect("analyses poisoned")
                .get(analysis_id)
                .cloned()
                .ok_or_else(|| ServerError::ResultNotFound(analysis_id.to_owned()))?;
            if record.initiator != caller.principal {
                return Err(ServerError::NotInitiator);
            }
            let blob_id = record
                .result_blob_id
                .ok_or_else(|| ServerError::AnalysisFailed("analysis did not complete".into()))?;
            let blob = self
                .store
                .get_blob(Container::Results, &blob_id, &self.backend_for(&caller))
                .map_err(|e| match e {
                    StoreError::BlobNotFound(_) => ServerError::ResultNotFound(analysis_id.to_owned()),
                    other => store_error(other),
                })?;
            serde_json::from_slice::<AnalysisResult>(&blob.bytes).map_err(internal)
        })();
        match result {
            Ok(r) => {
                self.record(&caller, op, &resource, Outcome::Success, vec![])?;
                Ok(r)
            }
            Err(e) => Err(self.fail(&caller, op, &resource, e)),
        }
    }

    pub fn query_audit(&self, token: &AccessToken, filter: &EventFilter) -> Result<Vec<AuditEvent>, ServerError> {
        let caller = self.caller(token)?;
        self.ctx.authz.require(&caller, Action::QueryAudit, "audit")?;
        let events = self.ctx.audit.query(filter);
        self.record(&caller, Operation::QueryAudit, "audit", Outcome::Success, vec![("count", events.len().into())])?;
        Ok(events)
    }

    /// Retention sweep at `now` (default: the server clock).
    pub fn sweep(&self, token: &AccessToken, now: Option<Timestamp>) -> Result<SweepReport, ServerError> {
        let caller = self.caller(token)?;
        self.ctx.authz.require(&caller, Action::RunSweep, "store")?;
        let now = now.unwrap_or_else(|| self.now());
        let report = self.sweep_at(now, &self.backend_for(&caller));
        self.record(
            &caller,
            Operation::Sweep,
            "store",
            Outcome::Success,
            vec![("at", now.0.into()), ("purged", report.purged.len().into())],
        )?;
        Ok(report)
    }

    /// Sweep on the server's own authority, for the periodic timer.
    pub fn scheduled_sweep(&self) -> SweepReport {
        let backend = self.backend.with_correlation(ids::fresh());
        let report = self.sweep_at(self.now(), &backend);
        let _ = self.record(&backend, Operation::Sweep, "store", Outcome::Success, vec![("purged", report.purged.len().into())]);
        report
    }

    /// Purges expired blobs, then retires what belonged to purged documents:
    /// the wrapped key in the secret vault and, per-document, the key pair.
    fn sweep_at(&self, now: Timestamp, backend: &Caller) -> SweepReport {
        let purged = self.store.run_retention_sweep(now);
        for p in purged.iter().filter(|p| p.container == Container::Documents) {
            let mut documents = self.documents.write().expect("documents poisoned");
            let Some(record) = documents.get_mut(&p.blob_id) else {
                continue;
            };
            record.meta.status = DocumentStatus::Purged;
            if let Err(e) = self.persist("documents", &p.blob_id, record) {
                tracing::warn!(document = %p.blob_id, error = %e, "could not persist purge");
            }
            let _ = self.secrets.delete_secret(&p.blob_id, backend);
            if self.kek_mode == KekMode::PerDocument {
                if let Some(h) = self.keys.describe(&record.meta.kek_name, record.meta.kek_version) {
                    let _ = self.keys.disable_key(&h, backend);
                }
            }
        }
        self.sessions
            .lock()
            .expect("sessions poisoned")
            .retain(|_, s| s.expires_at > now);
        SweepReport { purged }
    }

    pub fn documents_snapshot(&self) -> Vec<DocumentMeta> {
        self.documents
            .read()
            .expect("documents poisoned")
            .values()
            .map(|r| r.meta.clone())
            .collect()
    }

    pub fn analyses_snapshot(&self) -> Vec<AnalysisRecord> {
        self.analyses.read().expect("analyses poisoned").values().cloned().collect()
    }

    /// Rewrites a stored document payload with valid at-rest protection but
    /// without updating the upload digest.
    #[cfg(any(test, feature = "test-hooks"))]
    pub fn tamper_document(&self, document_id: &str, f: impl FnOnce(&mut Vec<u8>)) -> Result<(), ServerError> {
        self.store.tamper_payload(Container::Documents, document_id, f).map_err(store_error)
    }

    /// Like [`tamper_document`](Self::tamper_document) but also forges the
    /// upload digest, so only the GCM tag can catch the change.
    #[cfg(any(test, feature = "test-hooks"))]
    pub fn tamper_document_and_digest(&self, document_id: &str, f: impl FnOnce(&mut Vec<u8>)) -> Result<(), ServerError> {
        let mut forged = None;
        self.store
            .tamper_payload(Container::Documents, document_id, |bytes| {
                f(bytes);
                forged = Some(sha256_hex(bytes));
            })
            .map_err(store_error)?;
        let mut documents = self.documents.write().expect("documents poisoned");
        let record = documents
            .get_mut(document_id)
            .ok_or_else(|| ServerError::DocumentNotFound(document_id.to_owned()))?;
        record.payload_sha256 = forged.expect("tamper ran");
        Ok(())
    }
}

fn vault_error(e: VaultError) -> ServerError {
    match e {
        VaultError::Unauthorized(d) => ServerError::Unauthorized(d),
        VaultError::AuditUnavailable(m) => ServerError::AuditUnavailable(m),
        VaultError::UnwrapFailure | VaultError::KekMismatch { .. } => ServerError::IntegrityError,
        other => ServerError::Internal(other.to_string()),
    }
}

fn store_error(e: StoreError) -> ServerError {
    match e {
        StoreError::Unauthorized(d) => ServerError::Unauthorized(d),
        StoreError::AuditUnavailable(m) => ServerError::AuditUnavailable(m),
        StoreError::Corrupted(_) => ServerError::IntegrityError,
        StoreError::DuplicateBlob(id) => ServerError::DuplicateDocument(id),
        other => ServerError::Internal(other.to_string()),
    }
}

#[cfg(test)]
mod tests;
