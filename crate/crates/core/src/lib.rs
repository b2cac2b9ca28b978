//! Lockbox: a zero-trust pipeline for sensitive documents.
//!
//! Documents are encrypted on the client under a single-use AES-256-GCM data
//! key, the data key is wrapped under a non-exportable RSA-OAEP key held by an
//! emulated vault, and plaintext only ever exists in memory on the server's
//! analysis path. Every identity, key and storage operation is authorized
//! against a deny-by-default role matrix and appended to an audit log.
//!
//! The crate is organised by trust-boundary component:
//!
//! - [`crypto`]: data keys, AES-GCM payloads, RSA-OAEP wrapping, the `LBX1`
//!   envelope format and the taint-marked [`crypto::PlaintextBuffer`].
//! - [`vault`]: the key vault (RSA key pairs, `unwrapKey`) and the secret vault
//!   holding wrapped data keys.
//! - [`identity`]: users, MAC-signed access tokens and the RBAC matrix.
//! - [`store`]: blob storage with at-rest encryption and retention sweeps.
//! - [`audit`]: the append-only JSON-lines audit log.
//! - [`analyzer`]: the in-memory technique extractor.
//! - [`server`] and [`api`]: the orchestration layer and its HTTP contract.

pub mod analyzer;
pub mod api;
pub mod audit;
pub mod context;
pub mod crypto;
pub mod entropy;
mod fsutil;
pub mod identity;
pub mod ids;
pub mod instrument;
pub mod leakscan;
pub mod par;
pub mod server;
pub mod store;
pub mod time;
pub mod vault;

pub use context::Context;
pub use time::{Clock, ManualClock, SystemClock, Timestamp};
