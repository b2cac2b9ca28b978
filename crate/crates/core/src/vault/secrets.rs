use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{storage, VaultError};
use crate::audit::{NewEvent, Operation, Outcome};
use crate::context::Context;
use crate::crypto::{SealingKey, WrappedDataKey};
use crate::fsutil::{remove_if_exists, write_atomic};
use crate::identity::{Action, Caller};
use crate::ids;
use crate::time::Timestamp;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecretRecord {
    pub secret_name: String,
    pub wrapped: WrappedDataKey,
    pub created_at: Timestamp,
}

#[derive(Serialize, Deserialize)]
struct StoredSecret {
    secret_name: String,
    kek_name: String,
    kek_version: u32,
    wrapped: String,
    created_at: Timestamp,
}

/// Store of wrapped data keys, named by document id. No versioning: a name
/// is written once.
pub struct SecretVault {
    dir: Option<PathBuf>,
    master: SealingKey,
    ctx: Context,
    secrets: RwLock<BTreeMap<String, SecretRecord>>,
}

impl fmt::Debug for SecretVault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecretVault")
            .field("dir", &self.dir)
            .finish_non_exhaustive()
    }
}

fn label(name: &str) -> Vec<u8> {
    format!("vault-b/{name}.v1").into_bytes()
}

fn resource(name: &str) -> String {
    format!("vault-b/{name}")
}

impl SecretVault {
    pub fn in_memory(master: SealingKey, ctx: Context) -> Self {
        Self {
            dir: None,
            master,
            ctx,
            secrets: RwLock::default(),
        }
    }

    pub fn open(dir: &Path, master: SealingKey, ctx: Context) -> Result<Self, VaultError> {
        fs::create_dir_all(dir).map_err(storage)?;
        let mut secrets = BTreeMap::new();
        for entry in fs::read_dir(dir).map_err(storage)? {
            let path = entry.map_err(storage)?.path();
            let Some(name) = path
                .file_name()
                .and_then(|f| f.to_str())
                .and_then(|f| f.strip_suffix(".v1"))
            else {
                continue;
            };
            let sealed = fs::read(&path).map_err(storage)?;
            let plain = master
                .open(&label(name), &sealed)
                .map_err(|_| VaultError::Storage(format!("cannot unseal secret {name}")))?;
            let stored: StoredSecret = serde_json::from_slice(&plain).map_err(storage)?;
            let record = SecretRecord {
                secret_name: stored.secret_name,
                wrapped: WrappedDataKey {
                    bytes: B64.decode(stored.wrapped).map_err(storage)?,
                    kek_name: stored.kek_name,
                    kek_version: stored.kek_version,
                },
                created_at: stored.created_at,
            };
            secrets.insert(record.secret_name.clone(), record);
        }
        Ok(Self {
            dir: Some(dir.to_owned()),
            master,
            ctx,
            secrets: RwLock::new(secrets),
        })
    }

    fn audit(&self, caller: &Caller, op: Operation, name: &str, outcome: Outcome, reason: Option<String>) -> Result<(), VaultError> {
        let mut ev = NewEvent::new(&caller.principal, op, resource(name), outcome)
            .correlation(caller.correlation.as_deref());
        if let Some(r) = reason {
            ev = ev.detail("reason", r);
        }
        self.ctx.audit.record(ev)?;
        Ok(())
    }

    fn fail(&self, caller: &Caller, op: Operation, name: &str, err: VaultError) -> VaultError {
        let _ = self.audit(caller, op, name, Outcome::Error, Some(err.to_string()));
        err
    }

    pub fn put_secret(&self, secret_name: &str, wrapped: &WrappedDataKey, caller: &Caller) -> Result<(), VaultError> {
        self.ctx.authz.require(caller, Action::PutSecret, &resource(secret_name))?;
        ids::validate(secret_name)?;
        let result = (|| {
            let mut secrets = self.secrets.write().expect("secret vault poisoned");
            if secrets.contains_key(secret_name) {
                return Err(VaultError::DuplicateSecret(secret_name.to_owned()));
            }
            let record = SecretRecord {
                secret_name: secret_name.to_owned(),
                wrapped: wrapped.clone(),
                created_at: self.ctx.clock.now(),
            };
            if let Some(dir) = &self.dir {
                let stored = StoredSecret {
                    secret_name: secret_name.to_owned(),
                    kek_name: wrapped.kek_name.clone(),
                    kek_version: wrapped.kek_version,
                    wrapped: B64.encode(&wrapped.bytes),
                    created_at: record.created_at,
                };
                let json = serde_json::to_vec(&stored).map_err(storage)?;
                let sealed = self.master.seal(&label(secret_name), &json, self.ctx.entropy.as_ref())?;
                write_atomic(&dir.join(format!("{secret_name}.v1")), &sealed).map_err(storage)?;
            }
            secrets.insert(secret_name.to_owned(), record);
            Ok(())
        })();
        match result {
            Ok(()) => self.audit(caller, Operation::PutSecret, secret_name, Outcome::Success, None),
            Err(e) => Err(self.fail(caller, Operation::PutSecret, secret_name, e)),
        }
    }

    pub fn get_secret(&self, secret_name: &str, caller: &Caller) -> Result<WrappedDataKey, VaultError> {
        self.ctx.authz.require(caller, Action::GetSecret, &resource(secret_name))?;
        let found = self
            .secrets
            .read()
            .expect("secret vault poisoned")
            .get(secret_name)
            .map(|r| r.wrapped.clone());
        match found {
            Some(w) => {
                self.audit(caller, Operation::GetSecret, secret_name, Outcome::Success, None)?;
                Ok(w)
            }
            None => Err(self.fail(
                caller,
                Operation::GetSecret,
                secret_name,
                VaultError::SecretNotFound(secret_name.to_owned()),
            )),
        }
    }

    /// Removes a secret (used when its document is purged).
    pub fn delete_secret(&self, secret_name: &str, caller: &Caller) -> Result<(), VaultError> {
        self.ctx.authz.require(caller, Action::DeleteSecret, &resource(secret_name))?;
        let result = (|| {
            let mut secrets = self.secrets.write().expect("secret vault poisoned");
            if !secrets.contains_key(secret_name) {
                return Err(VaultError::SecretNotFound(secret_name.to_owned()));
            }
            if let Some(dir) = &self.dir {
                remove_if_exists(&dir.join(format!("{secret_name}.v1"))).map_err(storage)?;
            }
            secrets.remove(secret_name);
            Ok(())
        })();
        match result {
            Ok(()) => self.audit(caller, Operation::DeleteSecret, secret_name, Outcome::Success, None),
            Err(e) => Err(self.fail(caller, Operation::DeleteSecret, secret_name, e)),
        }
    }

    pub fn contains(&self, secret_name: &str) -> bool {
        self.secrets
            .read()
            .expect("secret vault poisoned")
            .contains_key(secret_name)
    }

    pub fn len(&self) -> usize {
        self.secrets.read().expect("secret vault poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
