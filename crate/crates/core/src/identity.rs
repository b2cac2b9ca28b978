//! Emulated identity provider and the role-based policy engine.
//!
//! Users live in a static JSON registry with PBKDF2-HMAC-SHA256 password
//! hashes. Successful logins yield an [`AccessToken`] MAC-signed with the
//! server's token key; every request re-validates its token. Authority comes
//! only from [`role_permits`], a deny-by-default matrix.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use zeroize::{Zeroize, Zeroizing};

use crate::audit::{AuditLog, NewEvent, Operation, Outcome};
use crate::entropy::{random_bytes, EntropySource};
use crate::time::{Timestamp, MINUTE};

type HmacSha256 = Hmac<Sha256>;

pub const DEFAULT_TOKEN_LIFETIME_SECS: i64 = 60 * MINUTE;
pub const PBKDF2_ROUNDS: u32 = 100_000;
const MAC_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    RedTeam,
    BlueTeam,
    ServiceBackend,
    Auditor,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::RedTeam, Role::BlueTeam, Role::ServiceBackend, Role::Auditor];
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "RedTeam" => Ok(Role::RedTeam),
            "BlueTeam" => Ok(Role::BlueTeam),
            "ServiceBackend" => Ok(Role::ServiceBackend),
            "Auditor" => Ok(Role::Auditor),
            _ => Err(format!("unknown role {s:?}")),
        }
    }
}

pub type RoleSet = BTreeSet<Role>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Upload,
    ListOwnDocuments,
    ListDocuments,
    InitiateAnalysis,
    GetResult,
    QueryAudit,
    CreateKey,
    GetPublicKey,
    UnwrapKey,
    DisableKey,
    PutSecret,
    GetSecret,
    DeleteSecret,
    PutBlob,
    GetBlob,
    ListBlobs,
    RunSweep,
}

impl Action {
    /// Actions an end user can request through the API.
    pub const USER_ACTIONS: [Action; 6] = [
        Action::Upload,
        Action::ListOwnDocuments,
        Action::ListDocuments,
        Action::InitiateAnalysis,
        Action::GetResult,
        Action::QueryAudit,
    ];

    pub fn as_str(self) -> &'static str {
        use Action::*;
        match self {
            Upload => "upload",
            ListOwnDocuments => "list_own_documents",
            ListDocuments => "list_documents",
            InitiateAnalysis => "initiate_analysis",
            GetResult => "get_result",
            QueryAudit => "query_audit",
            CreateKey => "createKey",
            GetPublicKey => "getPublicKey",
            UnwrapKey => "unwrapKey",
            DisableKey => "disable_key",
            PutSecret => "put_secret",
            GetSecret => "get_secret",
            DeleteSecret => "delete_secret",
            PutBlob => "put_blob",
            GetBlob => "get_blob",
            ListBlobs => "list_blobs",
            RunSweep => "sweep",
        }
    }

    /// The audit operation a denial of this action is recorded under.
    pub fn audit_op(self) -> Operation {
        use Action::*;
        match self {
            Upload => Operation::Upload,
            ListOwnDocuments | ListDocuments => Operation::ListDocuments,
            InitiateAnalysis => Operation::InitiateAnalysis,
            GetResult => Operation::GetResult,
            QueryAudit => Operation::QueryAudit,
            CreateKey => Operation::CreateKey,
            GetPublicKey => Operation::GetPublicKey,
            UnwrapKey => Operation::UnwrapKey,
            DisableKey => Operation::DisableKey,
            PutSecret => Operation::PutSecret,
            GetSecret => Operation::GetSecret,
            DeleteSecret => Operation::DeleteSecret,
            PutBlob => Operation::PutBlob,
            GetBlob => Operation::GetBlob,
            ListBlobs => Operation::ListBlobs,
            RunSweep => Operation::Sweep,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The complete authority mapping. Anything not listed is denied.
pub fn role_permits(role: Role, action: Action) -> bool {
    use Action::*;
    match role {
        Role::RedTeam => matches!(action, Upload | ListOwnDocuments),
        Role::BlueTeam => matches!(action, ListDocuments | InitiateAnalysis | GetResult),
        Role::ServiceBackend => matches!(
            action,
            CreateKey
                | GetPublicKey
                | UnwrapKey
                | DisableKey
                | PutSecret
                | GetSecret
                | DeleteSecret
                | PutBlob
                | GetBlob
                | ListBlobs
                | RunSweep
        ),
        Role::Auditor => matches!(action, QueryAudit | RunSweep),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PolicyDecision {
    pub allowed: bool,
    pub reason: String,
}

/// Pure policy evaluation, no auditing.
pub fn evaluate(roles: &RoleSet, action: Action) -> PolicyDecision {
    match roles.iter().find(|r| role_permits(**r, action)) {
        Some(role) => PolicyDecision {
            allowed: true,
            reason: format!("{role:?} may {action}"),
        },
        None if roles.is_empty() => PolicyDecision {
            allowed: false,
            reason: "no roles".into(),
        },
        None => PolicyDecision {
            allowed: false,
            reason: format!("no role grants {action}"),
        },
    }
}

/// An authenticated principal acting on a request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caller {
    pub principal: String,
    pub roles: RoleSet,
    pub correlation: Option<String>,
}

impl Caller {
    pub fn new(principal: impl Into<String>, roles: impl IntoIterator<Item = Role>) -> Self {
        Self {
            principal: principal.into(),
            roles: roles.into_iter().collect(),
            correlation: None,
        }
    }

    pub fn with_correlation(&self, id: impl Into<String>) -> Self {
        Self {
            correlation: Some(id.into()),
            ..self.clone()
        }
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{principal} may not {action} on {resource}: {reason}")]
pub struct Denied {
    pub principal: String,
    pub action: Action,
    pub resource: String,
    pub reason: String,
}

/// Policy enforcement point shared by every component. Denials are audited.
#[derive(Clone, Debug)]
pub struct Authorizer {
    audit: Arc<AuditLog>,
}

impl Authorizer {
    pub fn new(audit: Arc<AuditLog>) -> Self {
        Self { audit }
    }

    pub fn authorize(
        &self,
        principal: &str,
        roles: &RoleSet,
        action: Action,
        resource: &str,
    ) -> PolicyDecision {
        self.authorize_correlated(principal, roles, action, resource, None)
    }

    fn authorize_correlated(
        &self,
        principal: &str,
        roles: &RoleSet,
        action: Action,
        resource: &str,
        correlation: Option<&str>,
    ) -> PolicyDecision {
        let decision = evaluate(roles, action);
        if !decision.allowed {
            // A failed append cannot turn a deny into an allow; the deny stands.
            let _ = self.audit.record(
                NewEvent::new(principal, action.audit_op(), resource, Outcome::Denied)
                    .detail("action", action.as_str())
                    .detail("reason", decision.reason.as_str())
                    .correlation(correlation),
            );
            tracing::debug!(principal, %action, resource, "denied");
        }
        decision
    }

    pub fn require(&self, caller: &Caller, action: Action, resource: &str) -> Result<(), Denied> {
        let d = self.authorize_correlated(
            &caller.principal,
            &caller.roles,
            action,
            resource,
            caller.correlation.as_deref(),
        );
        if d.allowed {
            Ok(())
        } else {
            Err(Denied {
                principal: caller.principal.clone(),
                action,
                resource: resource.to_owned(),
                reason: d.reason,
            })
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    /// Same shape for unknown users and wrong passwords.
    #[error("invalid username or password")]
    InvalidCredentials,
    #[error("token invalid")]
    TokenInvalid,
    #[error("token expired")]
    TokenExpired,
    #[error("user registry: {0}")]
    Registry(String),
}

pub fn hash_password(password: &str, salt: &[u8]) -> [u8; 32] {
    let mut out = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), salt, PBKDF2_ROUNDS, &mut out);
    out
}

/// One registry entry. Hash and salt are hex.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub username: String,
    pub password_hash: String,
    pub salt: String,
    pub roles: Vec<Role>,
}

impl UserRecord {
    pub fn new(
        username: &str,
        password: &str,
        roles: impl IntoIterator<Item = Role>,
        source: &dyn EntropySource,
    ) -> Result<Self, IdentityError> {
        let salt = random_bytes::<16>(source).map_err(|e| IdentityError::Registry(e.to_string()))?;
        Ok(Self {
            username: username.to_owned(),
            password_hash: hex::encode(hash_password(password, &salt)),
            salt: hex::encode(salt),
            roles: roles.into_iter().collect(),
        })
    }

    fn verify(&self, password: &str) -> bool {
        let (Ok(salt), Ok(expected)) = (hex::decode(&self.salt), hex::decode(&self.password_hash))
        else {
            return false;
        };
        let mut mac = HmacSha256::new_from_slice(&salt).expect("hmac accepts any key length");
        mac.update(&hash_password(password, &salt));
        // Compare MACs of the hashes so the comparison is constant-time.
        let mut check = HmacSha256::new_from_slice(&salt).expect("hmac accepts any key length");
        check.update(&expected);
        mac.verify_slice(&check.finalize().into_bytes()).is_ok()
    }
}

#[derive(Clone, Debug, Default)]
pub struct UserRegistry {
    users: HashMap<String, UserRecord>,
}

impl UserRegistry {
    pub fn from_records(records: Vec<UserRecord>) -> Result<Self, IdentityError> {
        let mut users = HashMap::new();
        for r in records {
            if users.insert(r.username.clone(), r).is_some() {
                return Err(IdentityError::Registry("duplicate username".into()));
            }
        }
        Ok(Self { users })
    }

    pub fn load(path: &Path) -> Result<Self, IdentityError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| IdentityError::Registry(format!("{}: {e}", path.display())))?;
        let records: Vec<UserRecord> =
            serde_json::from_str(&text).map_err(|e| IdentityError::Registry(e.to_string()))?;
        Self::from_records(records)
    }

    pub fn records(&self) -> Vec<&UserRecord> {
        let mut v: Vec<_> = self.users.values().collect();
        v.sort_by(|a, b| a.username.cmp(&b.username));
        v
    }

    pub fn get(&self, username: &str) -> Option<&UserRecord> {
        self.users.get(username)
    }
}

pub struct Credential {
    pub username: String,
    pub password: Zeroizing<String>,
}

impl Credential {
    pub fn new(username: &str, password: &str) -> Self {
        Self {
            username: username.to_owned(),
            password: Zeroizing::new(password.to_owned()),
        }
    }
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Credential")
            .field("username", &self.username)
            .finish_non_exhaustive()
    }
}

/// HMAC-SHA256 key used to sign access tokens.
pub struct TokenKey([u8; 32]);

impl TokenKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        TokenKey(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentityError> {
        let raw = Zeroizing::new(
            hex::decode(s.trim()).map_err(|_| IdentityError::Registry("token key hex".into()))?,
        );
        let bytes: [u8; 32] = raw
            .as_slice()
            .try_into()
            .map_err(|_| IdentityError::Registry("token key must be 32 bytes".into()))?;
        Ok(TokenKey(bytes))
    }

    pub fn generate(source: &dyn EntropySource) -> Result<Self, IdentityError> {
        random_bytes::<32>(source)
            .map(TokenKey)
            .map_err(|e| IdentityError::Registry(e.to_string()))
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("hmac accepts any key length")
    }
}

impl Drop for TokenKey {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

#[derive(Serialize, Deserialize)]
struct TokenBody {
    sub: String,
    roles: Vec<Role>,
    iat: Timestamp,
    exp: Timestamp,
}

/// A signed bearer token. Wire form: `base64(canonical body || 32-byte MAC)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessToken {
    pub principal: String,
    pub roles: RoleSet,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
    pub signature: [u8; MAC_LEN],
}

impl AccessToken {
    fn canonical_body(principal: &str, roles: &RoleSet, iat: Timestamp, exp: Timestamp) -> Vec<u8> {
        serde_json::to_vec(&TokenBody {
            sub: principal.to_owned(),
            roles: roles.iter().copied().collect(),
            iat,
            exp,
        })
        .expect("token body serializes")
    }

    fn body(&self) -> Vec<u8> {
        Self::canonical_body(&self.principal, &self.roles, self.issued_at, self.expires_at)
    }

    pub fn to_wire(&self) -> String {
        let mut raw = self.body();
        raw.extend_from_slice(&self.signature);
        B64.encode(raw)
    }

    /// Parses the wire form. Only the canonical body encoding is accepted;
    /// the signature is checked by [`IdentityProvider::validate_token`].
    pub fn from_wire(wire: &str) -> Result<Self, IdentityError> {
        let raw = B64.decode(wire.trim()).map_err(|_| IdentityError::TokenInvalid)?;
        if raw.len() <= MAC_LEN {
            return Err(IdentityError::TokenInvalid);
        }
        let (body, sig) = raw.split_at(raw.len() - MAC_LEN);
        let parsed: TokenBody =
            serde_json::from_slice(body).map_err(|_| IdentityError::TokenInvalid)?;
        let token = AccessToken {
            principal: parsed.sub,
            roles: parsed.roles.into_iter().collect(),
            issued_at: parsed.iat,
            expires_at: parsed.exp,
            signature: sig.try_into().map_err(|_| IdentityError::TokenInvalid)?,
        };
        if token.body() != body {
            return Err(IdentityError::TokenInvalid);
        }
        Ok(token)
    }
}

pub struct IdentityProvider {
    registry: UserRegistry,
    key: TokenKey,
    lifetime_secs: i64,
    audit: Arc<AuditLog>,
    decoy: UserRecord,
}

impl IdentityProvider {
    pub fn new(registry: UserRegistry, key: TokenKey, audit: Arc<AuditLog>) -> Self {
        let decoy = UserRecord {
            username: String::new(),
            password_hash: hex::encode([0u8; 32]),
            salt: hex::encode([0u8; 16]),
            roles: vec![],
        };
        Self {
            registry,
            key,
            lifetime_secs: DEFAULT_TOKEN_LIFETIME_SECS,
            audit,
            decoy,
        }
    }

    pub fn with_lifetime_secs(mut self, secs: i64) -> Self {
        assert!(secs > 0, "token lifetime must be positive");
        self.lifetime_secs = secs;
        self
    }

    pub fn registry(&self) -> &UserRegistry {
        &self.registry
    }

    pub fn authenticate(
        &self,
        credential: &Credential,
        now: Timestamp,
    ) -> Result<AccessToken, IdentityError> {
        let record = self.registry.get(&credential.username);
        // Unknown users still pay for a hash so timing does not reveal them.
        let verified = record.unwrap_or(&self.decoy).verify(&credential.password);
        let Some(record) = record.filter(|_| verified) else {
            let _ = self.audit.record(
                NewEvent::new(
                    credential.username.chars().take(64).collect::<String>(),
                    Operation::Login,
                    "identity",
                    Outcome::Denied,
                )
                .detail("reason", "invalid credentials"),
            );
            return Err(IdentityError::InvalidCredentials);
        };
        let token = self.issue(&record.username, record.roles.iter().copied().collect(), now);
        self.audit
            .record(
                NewEvent::new(&record.username, Operation::Login, "identity", Outcome::Success)
                    .detail("expires_at", token.expires_at.0),
            )
            .map_err(|e| IdentityError::Registry(e.to_string()))?;
        Ok(token)
    }

    /// Issues a token without a password check (service identities, tests).
    pub fn issue(&self, principal: &str, roles: RoleSet, now: Timestamp) -> AccessToken {
        let expires_at = now.plus_secs(self.lifetime_secs);
        let mut mac = self.key.mac();
        mac.update(&AccessToken::canonical_body(principal, &roles, now, expires_at));
        AccessToken {
            principal: principal.to_owned(),
            roles,
            issued_at: now,
            expires_at,
            signature: mac.finalize().into_bytes().into(),
        }
    }

    pub fn validate_token(&self, token: &AccessToken, now: Timestamp) -> Result<Caller, IdentityError> {
        let mut mac = self.key.mac();
        mac.update(&token.body());
        mac.verify_slice(&token.signature)
            .map_err(|_| IdentityError::TokenInvalid)?;
        if token.expires_at <= token.issued_at {
            return Err(IdentityError::TokenInvalid);
        }
        if now >= token.expires_at {
            return Err(IdentityError::TokenExpired);
        }
        Ok(Caller {
            principal: token.principal.clone(),
            roles: token.roles.clone(),
            correlation: None,
        })
    }
}
