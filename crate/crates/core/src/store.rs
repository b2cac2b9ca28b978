//! Emulated blob storage.
//!
//! Two containers, `documents` (encrypted envelopes' payloads) and `results`
//! (analysis output), each tied to one category. Payloads are sealed at rest
//! under the store master key with the blob's identity and metadata bound as
//! associated data, so neither payload nor metadata can be edited on disk
//! without detection. Retention is enforced by explicit sweeps against an
//! injected clock: a blob is purged once it is strictly older than its TTL.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditError, NewEvent, Operation, Outcome};
use crate::context::Context;
use crate::crypto::{SealingKey, SinkBytes, NONCE_LEN};
use crate::fsutil::{remove_if_exists, write_atomic};
use crate::identity::{Action, Caller, Denied};
use crate::ids::{self, InvalidIdentifier};
use crate::time::{Timestamp, DAY};

/// Environment variable holding the hex-encoded store master key.
pub const STORE_MASTER_KEY_ENV: &str = "LOCKBOX_STORE_MASTER_KEY";
/// Principal recorded on retention purge events.
pub const RETENTION_PRINCIPAL: &str = "lockbox-retention";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Container {
    Documents,
    Results,
}

impl Container {
    pub const ALL: [Container; 2] = [Container::Documents, Container::Results];

    pub fn as_str(self) -> &'static str {
        match self {
            Container::Documents => "documents",
            Container::Results => "results",
        }
    }

    pub fn category(self) -> Category {
        match self {
            Container::Documents => Category::EncryptedDocument,
            Container::Results => Category::AnalysisResult,
        }
    }
}

impl fmt::Display for Container {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Container {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "documents" => Ok(Container::Documents),
            "results" => Ok(Container::Results),
            _ => Err(format!("unknown container {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    EncryptedDocument,
    AnalysisResult,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::EncryptedDocument => "encrypted-document",
            Category::AnalysisResult => "analysis-result",
        }
    }
}

/// Time-to-live per category, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    pub encrypted_document_secs: i64,
    pub analysis_result_secs: i64,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        Self {
            encrypted_document_secs: 7 * DAY,
            analysis_result_secs: 90 * DAY,
        }
    }
}

impl RetentionPolicy {
    pub fn from_days(documents: i64, results: i64) -> Result<Self, StoreError> {
        if documents <= 0 || results <= 0 {
            return Err(StoreError::Storage("retention TTLs must be positive".into()));
        }
        Ok(Self {
            encrypted_document_secs: documents * DAY,
            analysis_result_secs: results * DAY,
        })
    }

    pub fn ttl_secs(&self, category: Category) -> i64 {
        match category {
            Category::EncryptedDocument => self.encrypted_document_secs,
            Category::AnalysisResult => self.analysis_result_secs,
        }
    }

    /// Alive while `now - created_at <= ttl`.
    pub fn is_expired(&self, category: Category, created_at: Timestamp, now: Timestamp) -> bool {
        now.since(created_at) > self.ttl_secs(category)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlobMeta {
    pub container: Container,
    pub blob_id: String,
    pub category: Category,
    pub created_at: Timestamp,
    pub owner: String,
    pub size: usize,
    /// IV of the stored ciphertext, mirrored from the envelope for documents.
    pub nonce: Option<String>,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    category: Category,
    created_at: Timestamp,
    owner: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nonce: Option<String>,
    seal_nonce: String,
    size: usize,
    #[serde(default)]
    attributes: BTreeMap<String, String>,
}

/// Describes a blob to be written.
#[derive(Clone, Debug)]
pub struct BlobSpec {
    pub container: Container,
    pub blob_id: String,
    pub category: Category,
    pub owner: String,
    pub nonce: Option<String>,
    pub attributes: BTreeMap<String, String>,
}

impl BlobSpec {
    pub fn new(container: Container, blob_id: &str, owner: &str) -> Self {
        Self {
            container,
            blob_id: blob_id.to_owned(),
            category: container.category(),
            owner: owner.to_owned(),
            nonce: None,
            attributes: BTreeMap::new(),
        }
    }

    pub fn nonce(mut self, nonce: &[u8]) -> Self {
        self.nonce = Some(hex::encode(nonce));
        self
    }

    pub fn attribute(mut self, key: &str, value: impl Into<String>) -> Self {
        self.attributes.insert(key.to_owned(), value.into());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredBlob {
    pub bytes: Vec<u8>,
    pub meta: BlobMeta,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurgedBlob {
    pub container: Container,
    pub blob_id: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error(transparent)]
    Unauthorized(#[from] Denied),
    #[error("refusing to store tainted plaintext")]
    PlaintextLeakRejected,
    #[error("blob {0} already exists")]
    DuplicateBlob(String),
    #[error("category {category} does not belong in container {container}")]
    CategoryMismatch { container: &'static str, category: &'static str },
    #[error("blob {0} not found")]
    BlobNotFound(String),
    #[error("blob {0} failed at-rest integrity check")]
    Corrupted(String),
    #[error(transparent)]
    InvalidIdentifier(#[from] InvalidIdentifier),
    #[error("audit unavailable: {0}")]
    AuditUnavailable(String),
    #[error("store: {0}")]
    Storage(String),
}

impl From<AuditError> for StoreError {
    fn from(e: AuditError) -> Self {
        StoreError::AuditUnavailable(e.to_string())
    }
}

fn storage(e: impl fmt::Display) -> StoreError {
    StoreError::Storage(e.to_string())
}

type Key = (Container, String);

pub struct ObjectStore {
    root: Option<PathBuf>,
    master: SealingKey,
    policy: RetentionPolicy,
    ctx: Context,
    index: RwLock<BTreeMap<Key, BlobMeta>>,
    /// Memory-only payloads when there is no root directory.
    memory: RwLock<BTreeMap<Key, Vec<u8>>>,
    /// Readers/writers share; a sweep is exclusive.
    sweep: RwLock<()>,
}

impl fmt::Debug for ObjectStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObjectStore")
            .field("root", &self.root)
            .field("policy", &self.policy)
            .finish_non_exhaustive()
    }
}

fn resource(container: Container, blob_id: &str) -> String {
    format!("store/{container}/{blob_id}")
}

/// Associated data binding a sealed payload to its identity and metadata.
fn seal_label(meta: &BlobMeta) -> Vec<u8> {
    let attrs = serde_json::to_string(&meta.attributes).expect("attributes serialize");
    format!(
        "store/{}/{}|{}|{}|{}|{}|{}|{}",
        meta.container,
        meta.blob_id,
        meta.category.as_str(),
        meta.created_at,
        meta.owner,
        meta.size,
        meta.nonce.as_deref().unwrap_or(""),
        attrs
    )
    .into_bytes()
}

impl ObjectStore {
    pub fn in_memory(master: SealingKey, policy: RetentionPolicy, ctx: Context) -> Self {
        Self {
            root: None,
            master,
            policy,
            ctx,
            index: RwLock::default(),
            memory: RwLock::default(),
            sweep: RwLock::default(),
        }
    }

    /// Opens `<root>/<container>/` directories, indexing existing blobs.
    pub fn open(root: &Path, master: SealingKey, policy: RetentionPolicy, ctx: Context) -> Result<Self, StoreError> {
        let mut index = BTreeMap::new();
        for container in Container::ALL {
            let dir = root.join(container.as_str());
            fs::create_dir_all(&dir).map_err(storage)?;
            for entry in fs::read_dir(&dir).map_err(storage)? {
                let path = entry.map_err(storage)?.path();
                let Some(blob_id) = path
                    .file_name()
                    .and_then(|f| f.to_str())
                    .and_then(|f| f.strip_suffix(".meta.json"))
                else {
                    continue;
                };
                let meta: MetaFile =
                    serde_json::from_slice(&fs::read(&path).map_err(storage)?).map_err(storage)?;
                index.insert(
                    (container, blob_id.to_owned()),
                    BlobMeta {
                        container,
                        blob_id: blob_id.to_owned(),
                        category: meta.category,
                        created_at: meta.created_at,
                        owner: meta.owner,
                        size: meta.size,
                        nonce: meta.nonce,
                        attributes: meta.attributes,
                    },
                );
            }
        }
        Ok(Self {
            root: Some(root.to_owned()),
            master,
            policy,
            ctx,
            index: RwLock::new(index),
            memory: RwLock::default(),
            sweep: RwLock::default(),
        })
    }

    pub fn policy(&self) -> RetentionPolicy {
        self.policy
    }

    /// Path of the sealed payload file, if the store is disk-backed.
    pub fn blob_path(&self, container: Container, blob_id: &str) -> Option<PathBuf> {
        self.root
            .as_ref()
            .map(|r| r.join(container.as_str()).join(format!("{blob_id}.blob")))
    }

    fn meta_path(&self, container: Container, blob_id: &str) -> Option<PathBuf> {
        self.root
            .as_ref()
            .map(|r| r.join(container.as_str()).join(format!("{blob_id}.meta.json")))
    }

    fn audit(&self, caller: &Caller, op: Operation, res: &str, outcome: Outcome, reason: Option<String>) -> Result<(), StoreError> {
        let mut ev = NewEvent::new(&caller.principal, op, res, outcome)
            .correlation(caller.correlation.as_deref());
        if let Some(r) = reason {
            ev = ev.detail("reason", r);
        }
        self.ctx.audit.record(ev)?;
        Ok(())
    }

    fn fail(&self, caller: &Caller, op: Operation, res: &str, err: StoreError) -> StoreError {
        let _ = self.audit(caller, op, res, Outcome::Error, Some(err.to_string()));
        err
    }

    fn write_sealed(&self, meta: &BlobMeta, bytes: &[u8]) -> Result<(), StoreError> {
        let sealed = self
            .master
            .seal(&seal_label(meta), bytes, self.ctx.entropy.as_ref())
            .map_err(storage)?;
        let key = (meta.container, meta.blob_id.clone());
        match (self.blob_path(meta.container, &meta.blob_id), self.meta_path(meta.container, &meta.blob_id)) {
            (Some(blob_path), Some(meta_path)) => {
                let (nonce, body) = sealed.split_at(NONCE_LEN);
                let file = MetaFile {
                    category: meta.category,
                    created_at: meta.created_at,
                    owner: meta.owner.clone(),
                    nonce: meta.nonce.clone(),
                    seal_nonce: hex::encode(nonce),
                    size: meta.size,
                    attributes: meta.attributes.clone(),
                };
                write_atomic(&blob_path, body).map_err(storage)?;
                write_atomic(&meta_path, &serde_json::to_vec_pretty(&file).map_err(storage)?)
                    .map_err(storage)?;
            }
            _ => {
                self.memory.write().expect("store poisoned").insert(key, sealed);
            }
        }
        Ok(())
    }

    fn read_sealed(&self, meta: &BlobMeta) -> Result<Vec<u8>, StoreError> {
        match (self.blob_path(meta.container, &meta.blob_id), self.meta_path(meta.container, &meta.blob_id)) {
            (Some(blob_path), Some(meta_path)) => {
                let not_found = |_| StoreError::BlobNotFound(meta.blob_id.clone());
                let file: MetaFile = serde_json::from_slice(&fs::read(meta_path).map_err(not_found)?)
                    .map_err(|_| StoreError::Corrupted(meta.blob_id.clone()))?;
                let mut sealed =
                    hex::decode(file.seal_nonce).map_err(|_| StoreError::Corrupted(meta.blob_id.clone()))?;
                sealed.extend(fs::read(blob_path).map_err(not_found)?);
                Ok(sealed)
            }
            _ => self
                .memory
                .read()
                .expect("store poisoned")
                .get(&(meta.container, meta.blob_id.clone()))
                .cloned()
                .ok_or_else(|| StoreError::BlobNotFound(meta.blob_id.clone())),
        }
    }

    fn delete_files(&self, container: Container, blob_id: &str) -> Result<(), StoreError> {
        if let (Some(b), Some(m)) = (self.blob_path(container, blob_id), self.meta_path(container, blob_id)) {
            remove_if_exists(&b).map_err(storage)?;
            remove_if_exists(&m).map_err(storage)?;
        } else {
            self.memory
                .write()
                .expect("store poisoned")
                .remove(&(container, blob_id.to_owned()));
        }
        Ok(())
    }

    pub fn put_blob<P: SinkBytes + ?Sized>(&self, spec: BlobSpec, bytes: &P, caller: &Caller) -> Result<(), StoreError> {
        let res = resource(spec.container, &spec.blob_id);
        self.ctx.authz.require(caller, Action::PutBlob, &res)?;
        let _shared = self.sweep.read().expect("store poisoned");
        let result = (|| {
            let bytes = bytes.sink_bytes().map_err(|_| StoreError::PlaintextLeakRejected)?;
            if spec.container.category() != spec.category {
                return Err(StoreError::CategoryMismatch {
                    container: spec.container.as_str(),
                    category: spec.category.as_str(),
                });
            }
            ids::validate(&spec.blob_id)?;
            let mut index = self.index.write().expect("store poisoned");
            let key = (spec.container, spec.blob_id.clone());
            if index.contains_key(&key) {
                return Err(StoreError::DuplicateBlob(spec.blob_id.clone()));
            }
            let meta = BlobMeta {
                container: spec.container,
                blob_id: spec.blob_id.clone(),
                category: spec.category,
                created_at: self.ctx.clock.now(),
                owner: spec.owner.clone(),
                size: bytes.len(),
                nonce: spec.nonce.clone(),
                attributes: spec.attributes.clone(),
            };
            self.write_sealed(&meta, bytes)?;
            index.insert(key, meta);
            Ok(())
        })();
        match result {
            Ok(()) => self.audit(caller, Operation::PutBlob, &res, Outcome::Success, None),
            Err(e) => Err(self.fail(caller, Operation::PutBlob, &res, e)),
        }
    }

    pub fn get_blob(&self, container: Container, blob_id: &str, caller: &Caller) -> Result<StoredBlob, StoreError> {
        let res = resource(container, blob_id);
        self.ctx.authz.require(caller, Action::GetBlob, &res)?;
        let _shared = self.sweep.read().expect("store poisoned");
        let result = (|| {
            let meta = self
                .index
                .read()
                .expect("store poisoned")
                .get(&(container, blob_id.to_owned()))
                .cloned()
                .ok_or_else(|| StoreError::BlobNotFound(blob_id.to_owned()))?;
            let sealed = self.read_sealed(&meta)?;
            let bytes = self
                .master
                .open(&seal_label(&meta), &sealed)
                .map_err(|_| StoreError::Corrupted(blob_id.to_owned()))?;
            Ok(StoredBlob {
                bytes: bytes.to_vec(),
                meta,
            })
        })();
        match result {
            Ok(blob) => {
                self.audit(caller, Operation::GetBlob, &res, Outcome::Success, None)?;
                Ok(blob)
            }
            Err(e) => Err(self.fail(caller, Operation::GetBlob, &res, e)),
        }
    }

    /// Live blobs in a container, sorted by id. Metadata only.
    pub fn list_blobs(&self, container: Container, caller: &Caller) -> Result<Vec<BlobMeta>, StoreError> {
        let res = format!("store/{container}");
        self.ctx.authz.require(caller, Action::ListBlobs, &res)?;
        let list: Vec<BlobMeta> = self
            .index
            .read()
            .expect("store poisoned")
            .iter()
            .filter(|((c, _), _)| *c == container)
            .map(|(_, m)| m.clone())
            .collect();
        self.audit(caller, Operation::ListBlobs, &res, Outcome::Success, None)?;
        Ok(list)
    }

    pub fn contains(&self, container: Container, blob_id: &str) -> bool {
        self.index
            .read()
            .expect("store poisoned")
            .contains_key(&(container, blob_id.to_owned()))
    }

    /// Removes a blob whose enclosing workflow failed after it was written.
    pub(crate) fn rollback(&self, container: Container, blob_id: &str, caller: &Caller) {
        let _shared = self.sweep.read().expect("store poisoned");
        let mut index = self.index.write().expect("store poisoned");
        if index.remove(&(container, blob_id.to_owned())).is_some() {
            let outcome = match self.delete_files(container, blob_id) {
                Ok(()) => Outcome::Success,
                Err(_) => Outcome::Error,
            };
            let _ = self.audit(caller, Operation::Purge, &resource(container, blob_id), outcome, Some("rollback".into()));
        }
    }

    /// Deletes every blob strictly older than its category's TTL at `now`.
    /// Failed deletions are audited and left for the next sweep.
    pub fn run_retention_sweep(&self, now: Timestamp) -> Vec<PurgedBlob> {
        let _exclusive = self.sweep.write().expect("store poisoned");
        let mut index = self.index.write().expect("store poisoned");
        let expired: Vec<Key> = index
            .iter()
            .filter(|(_, m)| self.policy.is_expired(m.category, m.created_at, now))
            .map(|(k, _)| k.clone())
            .collect();
        let system = Caller::new(RETENTION_PRINCIPAL, Vec::<crate::identity::Role>::new());
        let mut purged = Vec::new();
        for (container, blob_id) in expired {
            let res = resource(container, &blob_id);
            match self.delete_files(container, &blob_id) {
                Ok(()) => {
                    let meta = index.remove(&(container, blob_id.clone())).expect("indexed");
                    let _ = self.ctx.audit.record(
                        NewEvent::new(RETENTION_PRINCIPAL, Operation::Purge, &res, Outcome::Success)
                            .detail("category", meta.category.as_str())
                            .detail("age_secs", now.since(meta.created_at)),
                    );
                    purged.push(PurgedBlob { container, blob_id });
                }
                Err(e) => {
                    let _ = self.audit(&system, Operation::Purge, &res, Outcome::Error, Some(e.to_string()));
                }
            }
        }
        if !purged.is_empty() {
            tracing::info!(count = purged.len(), "retention sweep purged blobs");
        }
        purged
    }

    /// Decrypts a stored payload, lets `f` modify it, and re-seals it with
    /// valid at-rest protection. Simulates an attacker who can rewrite
    /// storage contents wholesale.
    #[cfg(any(test, feature = "test-hooks"))]
    pub fn tamper_payload(&self, container: Container, blob_id: &str, f: impl FnOnce(&mut Vec<u8>)) -> Result<(), StoreError> {
        let meta = self
            .index
            .read()
            .expect("store poisoned")
            .get(&(container, blob_id.to_owned()))
            .cloned()
            .ok_or_else(|| StoreError::BlobNotFound(blob_id.to_owned()))?;
        let mut bytes = self
            .master
            .open(&seal_label(&meta), &self.read_sealed(&meta)?)
            .map_err(|_| StoreError::Corrupted(blob_id.to_owned()))?
            .to_vec();
        f(&mut bytes);
        let meta = BlobMeta {
            size: bytes.len(),
            ..meta
        };
        self.write_sealed(&meta, &bytes)?;
        self.index
            .write()
            .expect("store poisoned")
            .insert((container, blob_id.to_owned()), meta);
        Ok(())
    }
}
