use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rsa::pkcs8::{DecodePrivateKey, EncodePrivateKey};
use rsa::RsaPrivateKey;
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use super::{storage, VaultError};
use crate::audit::{NewEvent, Operation, Outcome};
use crate::context::Context;
use crate::crypto::{generate_kek, unwrap_data_key, DataKey, KekPublicKey, SealingKey, WrappedDataKey, KEK_BITS};
use crate::entropy::EntropySource;
use crate::fsutil::write_atomic;
use crate::identity::{Action, Caller};
use crate::ids;
use crate::par::{self, Mode};
use crate::time::Timestamp;

/// Public reference to one key pair. `(name, version)` is the identity;
/// `enabled` reflects the vault's state when the handle was issued.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyHandle {
    pub name: String,
    pub version: u32,
    pub created_at: Timestamp,
    pub enabled: bool,
}

impl KeyHandle {
    pub fn label(&self) -> String {
        format!("{}.v{}", self.name, self.version)
    }

    fn resource(&self) -> String {
        format!("vault-a/{}", self.label())
    }
}

/// Where new key pairs come from.
#[derive(Clone)]
pub struct KeyFactory {
    inner: FactoryKind,
}

#[derive(Clone)]
enum FactoryKind {
    Fresh,
    #[cfg(any(test, feature = "test-hooks"))]
    Fixture(std::sync::Arc<std::sync::atomic::AtomicUsize>),
}

#[cfg(any(test, feature = "test-hooks"))]
const FIXTURE_POOL: usize = 4;

#[cfg(any(test, feature = "test-hooks"))]
fn fixture_pool() -> &'static [RsaPrivateKey] {
    static POOL: std::sync::OnceLock<Vec<RsaPrivateKey>> = std::sync::OnceLock::new();
    POOL.get_or_init(|| {
        par::map_range(Mode::default(), FIXTURE_POOL, |_| {
            generate_kek(KEK_BITS, &crate::entropy::OsEntropy).expect("fixture keygen")
        })
    })
}

impl KeyFactory {
    /// Generates a new 3072-bit key pair for every request.
    pub fn fresh() -> Self {
        Self {
            inner: FactoryKind::Fresh,
        }
    }

    /// Hands out key pairs from a small process-wide pool generated once.
    /// Keeps test suites from paying for RSA key generation per vault.
    #[cfg(any(test, feature = "test-hooks"))]
    pub fn shared_fixture() -> Self {
        Self {
            inner: FactoryKind::Fixture(Default::default()),
        }
    }

    /// Big-endian private exponents of the fixture pool, for leak scans.
    #[cfg(any(test, feature = "test-hooks"))]
    pub fn fixture_private_exponents() -> Vec<Vec<u8>> {
        use rsa::traits::PrivateKeyParts;
        fixture_pool().iter().map(|k| k.d().to_bytes_be()).collect()
    }

    fn generate(&self, entropy: &dyn EntropySource) -> Result<RsaPrivateKey, VaultError> {
        match &self.inner {
            FactoryKind::Fresh => Ok(generate_kek(KEK_BITS, entropy)?),
            #[cfg(any(test, feature = "test-hooks"))]
            FactoryKind::Fixture(next) => {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                Ok(fixture_pool()[i % FIXTURE_POOL].clone())
            }
        }
    }
}

impl fmt::Debug for KeyFactory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("KeyFactory")
    }
}

struct KekRecord {
    handle: KeyHandle,
    private: RsaPrivateKey,
    public_pem: String,
}

#[derive(Serialize, Deserialize)]
struct StoredKek {
    name: String,
    version: u32,
    created_at: Timestamp,
    enabled: bool,
    public_pem: String,
    private_pkcs8: String,
}

pub struct KeyVault {
    dir: Option<PathBuf>,
    master: SealingKey,
    factory: KeyFactory,
    ctx: Context,
    keys: RwLock<BTreeMap<String, Vec<KekRecord>>>,
    create_lock: Mutex<()>,
}

impl fmt::Debug for KeyVault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyVault")
            .field("dir", &self.dir)
            .finish_non_exhaustive()
    }
}

fn record_file(dir: &Path, name: &str, version: u32) -> PathBuf {
    dir.join(format!("{name}.v{version}"))
}

fn seal_label(name: &str, version: u32) -> Vec<u8> {
    format!("vault-a/{name}.v{version}").into_bytes()
}

impl KeyVault {
    pub fn in_memory(master: SealingKey, factory: KeyFactory, ctx: Context) -> Self {
        Self {
            dir: None,
            master,
            factory,
            ctx,
            keys: RwLock::default(),
            create_lock: Mutex::default(),
        }
    }

    /// Opens the vault directory, loading and unsealing every record.
    pub fn open(dir: &Path, master: SealingKey, factory: KeyFactory, ctx: Context) -> Result<Self, VaultError> {
        fs::create_dir_all(dir).map_err(storage)?;
        let mut keys: BTreeMap<String, Vec<KekRecord>> = BTreeMap::new();
        for entry in fs::read_dir(dir).map_err(storage)? {
            let path = entry.map_err(storage)?.path();
            let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
                continue;
            };
            let Some((name, version)) = file
                .rsplit_once(".v")
                .and_then(|(n, v)| v.parse::<u32>().ok().map(|v| (n.to_owned(), v)))
            else {
                continue;
            };
            let sealed = fs::read(&path).map_err(storage)?;
            let plain = master
                .open(&seal_label(&name, version), &sealed)
                .map_err(|_| VaultError::Storage(format!("cannot unseal {file}")))?;
            let stored: StoredKek = serde_json::from_slice(&plain).map_err(storage)?;
            let der = Zeroizing::new(B64.decode(&stored.private_pkcs8).map_err(storage)?);
            let private = RsaPrivateKey::from_pkcs8_der(&der).map_err(storage)?;
            keys.entry(name.clone()).or_default().push(KekRecord {
                handle: KeyHandle {
                    name,
                    version,
                    created_at: stored.created_at,
                    enabled: stored.enabled,
                },
                private,
                public_pem: stored.public_pem,
            });
        }
        for (name, versions) in keys.iter_mut() {
            versions.sort_by_key(|r| r.handle.version);
            if versions
                .iter()
                .enumerate()
                .any(|(i, r)| r.handle.version != i as u32 + 1)
            {
                return Err(VaultError::Storage(format!("versions of {name} are not contiguous")));
            }
        }
        Ok(Self {
            dir: Some(dir.to_owned()),
            master,
            factory,
            ctx,
            keys: RwLock::new(keys),
            create_lock: Mutex::default(),
        })
    }

    fn persist(&self, record: &KekRecord) -> Result<(), VaultError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let der = record.private.to_pkcs8_der().map_err(storage)?;
        let stored = StoredKek {
            name: record.handle.name.clone(),
            version: record.handle.version,
            created_at: record.handle.created_at,
            enabled: record.handle.enabled,
            public_pem: record.public_pem.clone(),
            private_pkcs8: B64.encode(der.as_bytes()),
        };
        let json = Zeroizing::new(serde_json::to_vec(&stored).map_err(storage)?);
        let mut stored = stored;
        zeroize::Zeroize::zeroize(&mut stored.private_pkcs8);
        let sealed = self.master.seal(
            &seal_label(&record.handle.name, record.handle.version),
            &json,
            self.ctx.entropy.as_ref(),
        )?;
        write_atomic(&record_file(dir, &record.handle.name, record.handle.version), &sealed)
            .map_err(storage)
    }

    fn audit(&self, caller: &Caller, op: Operation, resource: &str, outcome: Outcome, reason: Option<&str>) -> Result<u64, VaultError> {
        let mut ev = NewEvent::new(&caller.principal, op, resource, outcome)
            .correlation(caller.correlation.as_deref());
        if let Some(reason) = reason {
            ev = ev.detail("reason", reason);
        }
        Ok(self.ctx.audit.record(ev)?)
    }

    fn audit_error(&self, caller: &Caller, op: Operation, resource: &str, err: VaultError) -> VaultError {
        let _ = self.audit(caller, op, resource, Outcome::Error, Some(&err.to_string()));
        err
    }

    /// Generates and stores a new key pair. A repeated name gets the next
    /// version; earlier versions stay usable.
    pub fn create_rsa_key(&self, name: &str, caller: &Caller) -> Result<KeyHandle, VaultError> {
        self.ctx.authz.require(caller, Action::CreateKey, &format!("vault-a/{name}"))?;
        ids::validate(name)?;
        let _serial = self.create_lock.lock().expect("vault create lock poisoned");
        let version = self
            .keys
            .read()
            .expect("vault poisoned")
            .get(name)
            .map_or(1, |v| v.len() as u32 + 1);
        let resource = format!("vault-a/{name}.v{version}");
        let private = match self.factory.generate(self.ctx.entropy.as_ref()) {
            Ok(k) => k,
            Err(e) => return Err(self.audit_error(caller, Operation::CreateKey, &resource, e)),
        };
        let public_pem = KekPublicKey::from_private(&private)
            .to_pem().map_err(|e| VaultError::KeyGenerationFailure(e.to_string()))?;
        let record = KekRecord {
            handle: KeyHandle {
                name: name.to_owned(),
                version,
                created_at: self.ctx.clock.now(),
                enabled: true,
            },
            private,
            public_pem,
        };
        if let Err(e) = self.persist(&record) {
            return Err(self.audit_error(caller, Operation::CreateKey, &resource, e));
        }
        let handle = record.handle.clone();
        self.keys
            .write()
            .expect("vault poisoned")
            .entry(name.to_owned())
            .or_default()
            .push(record);
        self.audit(caller, Operation::CreateKey, &resource, Outcome::Success, None)?;
        tracing::info!(key = %handle.label(), "created key pair");
        Ok(handle)
    }

    /// Runs `f` against an enabled record, mapping lookup failures.
    fn with_enabled<T>(
        &self,
        handle: &KeyHandle,
        f: impl FnOnce(&KekRecord) -> Result<T, VaultError>,
    ) -> Result<T, VaultError> {
        let keys = self.keys.read().expect("vault poisoned");
        let record = keys
            .get(&handle.name)
            .and_then(|v| v.get(handle.version.checked_sub(1)? as usize))
            .ok_or_else(|| VaultError::KeyNotFound(handle.label()))?;
        if !record.handle.enabled {
            return Err(VaultError::KeyDisabled(handle.label()));
        }
        f(record)
    }

    pub fn get_public_key(&self, handle: &KeyHandle, caller: &Caller) -> Result<String, VaultError> {
        let resource = handle.resource();
        self.ctx.authz.require(caller, Action::GetPublicKey, &resource)?;
        match self.with_enabled(handle, |r| Ok(r.public_pem.clone())) {
            Ok(pem) => {
                self.audit(caller, Operation::GetPublicKey, &resource, Outcome::Success, None)?;
                Ok(pem)
            }
            Err(e) => Err(self.audit_error(caller, Operation::GetPublicKey, &resource, e)),
        }
    }

    /// Decrypts a wrapped data key inside the vault.
    ///
    /// The success event is appended before the key is returned; if the
    /// append fails the key is wiped and `AuditUnavailable` is returned, so
    /// every released key has exactly one `unwrapKey` success event.
    pub fn unwrap_key(&self, handle: &KeyHandle, wrapped: &WrappedDataKey, caller: &Caller) -> Result<DataKey, VaultError> {
        let resource = handle.resource();
        self.ctx.authz.require(caller, Action::UnwrapKey, &resource)?;
        let unwrapped = self.with_enabled(handle, |record| {
            if wrapped.kek_name != handle.name || wrapped.kek_version != handle.version {
                return Err(VaultError::KekMismatch {
                    wrapped: format!("{}.v{}", wrapped.kek_name, wrapped.kek_version),
                    handle: handle.label(),
                });
            }
            Ok(unwrap_data_key(
                &record.private,
                wrapped,
                self.ctx.entropy.as_ref(),
                &self.ctx.tracker,
            )?)
        });
        let mut key = match unwrapped {
            Ok(k) => k,
            Err(e) => return Err(self.audit_error(caller, Operation::UnwrapKey, &resource, e)),
        };
        if let Err(e) = self.audit(caller, Operation::UnwrapKey, &resource, Outcome::Success, None) {
            key.wipe();
            return Err(e);
        }
        Ok(key)
    }

    /// [`unwrap_key`](Self::unwrap_key) over a batch, in input order. Each
    /// item is authorized and audited independently.
    pub fn unwrap_batch(
        &self,
        handle: &KeyHandle,
        wrapped: &[WrappedDataKey],
        caller: &Caller,
        mode: Mode,
    ) -> Vec<Result<DataKey, VaultError>> {
        par::map(mode, wrapped, |w| self.unwrap_key(handle, w, caller))
    }

    pub fn disable_key(&self, handle: &KeyHandle, caller: &Caller) -> Result<(), VaultError> {
        let resource = handle.resource();
        self.ctx.authz.require(caller, Action::DisableKey, &resource)?;
        let result = (|| {
            let mut keys = self.keys.write().expect("vault poisoned");
            let record = keys
                .get_mut(&handle.name)
                .and_then(|v| v.get_mut(handle.version.checked_sub(1)? as usize))
                .ok_or_else(|| VaultError::KeyNotFound(handle.label()))?;
            record.handle.enabled = false;
            self.persist(record)
        })();
        match result {
            Ok(()) => {
                self.audit(caller, Operation::DisableKey, &resource, Outcome::Success, None)?;
                Ok(())
            }
            Err(e) => Err(self.audit_error(caller, Operation::DisableKey, &resource, e)),
        }
    }

    /// Current metadata for `(name, version)`. Carries no key material.
    pub fn describe(&self, name: &str, version: u32) -> Option<KeyHandle> {
        let keys = self.keys.read().expect("vault poisoned");
        keys.get(name)?
            .get(version.checked_sub(1)? as usize)
            .map(|r| r.handle.clone())
    }

    /// Newest version of `name`.
    pub fn latest(&self, name: &str) -> Option<KeyHandle> {
        let keys = self.keys.read().expect("vault poisoned");
        keys.get(name)?.last().map(|r| r.handle.clone())
    }
}
