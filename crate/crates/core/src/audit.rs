//! Append-only audit log.
//!
//! Events are persisted as JSON lines (`seq, ts, principal, op, resource,
//! outcome, details`) and fsynced before [`AuditLog::record`] returns. Sequence
//! numbers are assigned under a single append lock, so they are gap-free from
//! 1 regardless of how many threads record concurrently.
//!
//! Detail values are screened on the way in: plaintext buffers, data keys and
//! anything that looks like raw 32-byte key material are refused with
//! [`AuditError::PlaintextLeakRejected`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{DataKey, PlaintextBuffer};
use crate::time::{Clock, Timestamp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operation {
    #[serde(rename = "login")]
    Login,
    #[serde(rename = "createKey")]
    CreateKey,
    #[serde(rename = "getPublicKey")]
    GetPublicKey,
    #[serde(rename = "unwrapKey")]
    UnwrapKey,
    #[serde(rename = "disable_key")]
    DisableKey,
    #[serde(rename = "put_secret")]
    PutSecret,
    #[serde(rename = "get_secret")]
    GetSecret,
    #[serde(rename = "delete_secret")]
    DeleteSecret,
    #[serde(rename = "put_blob")]
    PutBlob,
    #[serde(rename = "get_blob")]
    GetBlob,
    #[serde(rename = "list_blobs")]
    ListBlobs,
    #[serde(rename = "purge")]
    Purge,
    #[serde(rename = "begin_upload")]
    BeginUpload,
    #[serde(rename = "upload")]
    Upload,
    #[serde(rename = "list_documents")]
    ListDocuments,
    #[serde(rename = "initiate_analysis")]
    InitiateAnalysis,
    #[serde(rename = "get_result")]
    GetResult,
    #[serde(rename = "query_audit")]
    QueryAudit,
    #[serde(rename = "sweep")]
    Sweep,
}

impl Operation {
    pub fn as_str(self) -> &'static str {
        use Operation::*;
        match self {
            Login => "login",
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
            Purge => "purge",
            BeginUpload => "begin_upload",
            Upload => "upload",
            ListDocuments => "list_documents",
            InitiateAnalysis => "initiate_analysis",
            GetResult => "get_result",
            QueryAudit => "query_audit",
            Sweep => "sweep",
        }
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Operation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| format!("unknown audit operation {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Denied,
    Error,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Denied => "denied",
            Outcome::Error => "error",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "success" => Ok(Outcome::Success),
            "denied" => Ok(Outcome::Denied),
            "error" => Ok(Outcome::Error),
            _ => Err(format!("unknown outcome {s:?}")),
        }
    }
}

/// Key under which workflow steps share a per-request correlation id.
pub const CORRELATION_KEY: &str = "correlation_id";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub ts: Timestamp,
    pub principal: String,
    pub op: Operation,
    pub resource: String,
    pub outcome: Outcome,
    #[serde(default)]
    pub details: BTreeMap<String, serde_json::Value>,
}

impl AuditEvent {
    pub fn correlation_id(&self) -> Option<&str> {
        self.details.get(CORRELATION_KEY).and_then(|v| v.as_str())
    }

    pub fn detail_str(&self, key: &str) -> Option<&str> {
        self.details.get(key).and_then(|v| v.as_str())
    }
}

/// A detail value before screening.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DetailValue {
    Text(String),
    Int(i64),
    Bool(bool),
    /// Stands in for a value that must never be logged.
    Sensitive(&'static str),
}

impl From<&str> for DetailValue {
    fn from(v: &str) -> Self {
        DetailValue::Text(v.to_owned())
    }
}

impl From<String> for DetailValue {
    fn from(v: String) -> Self {
        DetailValue::Text(v)
    }
}

impl From<&String> for DetailValue {
    fn from(v: &String) -> Self {
        DetailValue::Text(v.clone())
    }
}

impl From<i64> for DetailValue {
    fn from(v: i64) -> Self {
        DetailValue::Int(v)
    }
}

impl From<u32> for DetailValue {
    fn from(v: u32) -> Self {
        DetailValue::Int(v.into())
    }
}

impl From<usize> for DetailValue {
    fn from(v: usize) -> Self {
        DetailValue::Int(v as i64)
    }
}

impl From<bool> for DetailValue {
    fn from(v: bool) -> Self {
        DetailValue::Bool(v)
    }
}

impl From<&PlaintextBuffer> for DetailValue {
    fn from(_: &PlaintextBuffer) -> Self {
        DetailValue::Sensitive("plaintext")
    }
}

impl From<&DataKey> for DetailValue {
    fn from(_: &DataKey) -> Self {
        DetailValue::Sensitive("data key")
    }
}

/// True for strings that decode (hex or base64) to exactly 32 bytes.
fn looks_like_key_material(s: &str) -> bool {
    let s = s.trim();
    if s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit()) {
        return true;
    }
    if !(43..=44).contains(&s.len()) {
        return false;
    }
    use base64::engine::general_purpose::{STANDARD, STANDARD_NO_PAD, URL_SAFE, URL_SAFE_NO_PAD};
    [STANDARD, STANDARD_NO_PAD, URL_SAFE, URL_SAFE_NO_PAD]
        .iter()
        .any(|e| e.decode(s).map(|b| b.len() == 32).unwrap_or(false))
}

/// An event as submitted by a caller; the log assigns `seq` and `ts`.
#[derive(Clone, Debug)]
pub struct NewEvent {
    pub principal: String,
    pub op: Operation,
    pub resource: String,
    pub outcome: Outcome,
    pub details: Vec<(String, DetailValue)>,
}

impl NewEvent {
    pub fn new(
        principal: impl Into<String>,
        op: Operation,
        resource: impl Into<String>,
        outcome: Outcome,
    ) -> Self {
        Self {
            principal: principal.into(),
            op,
            resource: resource.into(),
            outcome,
            details: Vec::new(),
        }
    }

    pub fn detail(mut self, key: &str, value: impl Into<DetailValue>) -> Self {
        self.details.push((key.to_owned(), value.into()));
        self
    }

    pub fn correlation(self, id: Option<&str>) -> Self {
        match id {
            Some(id) => self.detail(CORRELATION_KEY, id),
            None => self,
        }
    }

    fn screen(self) -> Result<ScreenedEvent, AuditError> {
        let mut details = BTreeMap::new();
        for (key, value) in self.details {
            let json = match value {
                DetailValue::Sensitive(kind) => return Err(AuditError::PlaintextLeakRejected(kind)),
                DetailValue::Text(s) if looks_like_key_material(&s) => {
                    return Err(AuditError::PlaintextLeakRejected("key-like value"))
                }
                DetailValue::Text(s) => serde_json::Value::String(s),
                DetailValue::Int(i) => serde_json::Value::from(i),
                DetailValue::Bool(b) => serde_json::Value::Bool(b),
            };
            details.insert(key, json);
        }
        Ok(ScreenedEvent {
            principal: self.principal,
            op: self.op,
            resource: self.resource,
            outcome: self.outcome,
            details,
        })
    }
}

struct ScreenedEvent {
    principal: String,
    op: Operation,
    resource: String,
    outcome: Outcome,
    details: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuditError {
    #[error("refusing to log sensitive value ({0})")]
    PlaintextLeakRejected(&'static str),
    #[error("audit log unavailable: {0}")]
    AuditUnavailable(String),
    #[error("audit log is corrupt at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

/// Conjunctive filter; an empty filter matches every event. Time bounds are
/// inclusive.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventFilter {
    pub op: Option<Operation>,
    pub principal: Option<String>,
    pub resource: Option<String>,
    pub outcome: Option<Outcome>,
    pub from: Option<Timestamp>,
    pub to: Option<Timestamp>,
    pub correlation_id: Option<String>,
}

impl EventFilter {
    pub fn op(op: Operation) -> Self {
        Self {
            op: Some(op),
            ..Self::default()
        }
    }

    pub fn with_outcome(mut self, outcome: Outcome) -> Self {
        self.outcome = Some(outcome);
        self
    }

    pub fn matches(&self, e: &AuditEvent) -> bool {
        self.op.map_or(true, |op| e.op == op)
            && self.principal.as_ref().map_or(true, |p| &e.principal == p)
            && self.resource.as_ref().map_or(true, |r| &e.resource == r)
            && self.outcome.map_or(true, |o| e.outcome == o)
            && self.from.map_or(true, |t| e.ts >= t)
            && self.to.map_or(true, |t| e.ts <= t)
            && self
                .correlation_id
                .as_deref()
                .map_or(true, |c| e.correlation_id() == Some(c))
    }
}

enum Sink {
    File(File),
    Memory,
}

impl Sink {
    fn append(&mut self, line: &[u8]) -> io::Result<()> {
        match self {
            Sink::File(f) => {
                f.write_all(line)?;
                f.sync_data()
            }
            Sink::Memory => Ok(()),
        }
    }
}

struct Inner {
    sink: Sink,
    events: Vec<AuditEvent>,
}

pub struct AuditLog {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    unavailable: AtomicBool,
}

impl fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuditLog").field("len", &self.len()).finish()
    }
}

impl AuditLog {
    /// Opens (or creates) a JSON-lines log, replaying existing events so new
    /// sequence numbers continue where the file left off.
    pub fn open(path: &Path, clock: Arc<dyn Clock>) -> Result<Self, AuditError> {
        let unavailable = |e: io::Error| AuditError::AuditUnavailable(e.to_string());
        let mut events = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(unavailable)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(unavailable)?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: AuditEvent =
                    serde_json::from_str(&line).map_err(|e| AuditError::Corrupt {
                        line: i + 1,
                        reason: e.to_string(),
                    })?;
                if event.seq != events.len() as u64 + 1 {
                    return Err(AuditError::Corrupt {
                        line: i + 1,
                        reason: format!("sequence gap at {}", event.seq),
                    });
                }
                events.push(event);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(unavailable)?;
        Ok(Self::with_sink(Sink::File(file), events, clock))
    }

    /// A log that keeps events only in memory.
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self::with_sink(Sink::Memory, Vec::new(), clock)
    }

    fn with_sink(sink: Sink, events: Vec<AuditEvent>, clock: Arc<dyn Clock>) -> Self {
        Self {
            inner: Mutex::new(Inner { sink, events }),
            clock,
            unavailable: AtomicBool::new(false),
        }
    }

    pub fn record(&self, event: NewEvent) -> Result<u64, AuditError> {
        let screened = event.screen()?;
        if self.unavailable.load(Ordering::SeqCst) {
            return Err(AuditError::AuditUnavailable("log offline".into()));
        }
        let mut inner = self.inner.lock().expect("audit log poisoned");
        let event = AuditEvent {
            seq: inner.events.len() as u64 + 1,
            ts: self.clock.now(),
            principal: screened.principal,
            op: screened.op,
            resource: screened.resource,
            outcome: screened.outcome,
            details: screened.details,
        };
        let mut line = serde_json::to_vec(&event)
            .map_err(|e| AuditError::AuditUnavailable(e.to_string()))?;
        line.push(b'\n');
        inner
            .sink
            .append(&line)
            .map_err(|e| AuditError::AuditUnavailable(e.to_string()))?;
        let seq = event.seq;
        inner.events.push(event);
        Ok(seq)
    }

    /// Matching events in sequence order.
    pub fn query(&self, filter: &EventFilter) -> Vec<AuditEvent> {
        let inner = self.inner.lock().expect("audit log poisoned");
        inner
            .events
            .iter()
            .filter(|e| filter.matches(e))
            .cloned()
            .collect()
    }

    pub fn count(&self, filter: &EventFilter) -> usize {
        let inner = self.inner.lock().expect("audit log poisoned");
        inner.events.iter().filter(|e| filter.matches(e)).count()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("audit log poisoned").events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Simulates a persistence outage: every `record` fails until cleared.
    #[cfg(any(test, feature = "test-hooks"))]
    pub fn set_unavailable(&self, unavailable: bool) {
        self.unavailable.store(unavailable, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::LiveTracker;
    use crate::time::ManualClock;

    fn clock() -> Arc<dyn Clock> {
        Arc::new(ManualClock::new(Timestamp(1_700_000_000)))
    }

    fn ev(principal: &str, op: Operation) -> NewEvent {
        NewEvent::new(principal, op, "res", Outcome::Success)
    }

    #[test]
    fn gap_free_sequence() {
        let log = AuditLog::in_memory(clock());
        assert_eq!(log.record(ev("a", Operation::Login)).unwrap(), 1);
        assert_eq!(log.record(ev("b", Operation::Login)).unwrap(), 2);
    }

    #[test]
    fn tainted_details_are_rejected() {
        let log = AuditLog::in_memory(clock());
        let buf = PlaintextBuffer::with_tracker(b"secret".to_vec(), &LiveTracker::new());
        let key = DataKey::with_tracker([1; 32], &LiveTracker::new());
        for bad in [
            ev("a", Operation::Upload).detail("body", &buf),
            ev("a", Operation::Upload).detail("key", &key),
            ev("a", Operation::Upload).detail("hex", hex::encode([9u8; 32])),
            ev("a", Operation::Upload).detail(
                "b64",
                base64::engine::general_purpose::STANDARD.encode([9u8; 32]),
            ),
        ] {
            assert!(matches!(
                log.record(bad),
                Err(AuditError::PlaintextLeakRejected(_))
            ));
        }
        assert!(log.is_empty());
        log.record(ev("a", Operation::Upload).detail(CORRELATION_KEY, crate::ids::fresh()))
            .unwrap();
    }

    #[test]
    fn concurrent_records_are_exactly_one_to_n() {
        let log = Arc::new(AuditLog::in_memory(clock()));
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let log = log.clone();
                std::thread::spawn(move || {
                    (0..125)
                        .map(|_| log.record(ev(&format!("t{t}"), Operation::GetBlob)).unwrap())
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut seqs: Vec<u64> = handles
            .into_iter()
            .flat_map(|h| h.join().unwrap())
            .collect();
        seqs.sort_unstable();
        assert_eq!(seqs, (1..=1000).collect::<Vec<u64>>());
    }

    #[test]
    fn query_filters_in_seq_order() {
        let log = AuditLog::in_memory(clock());
        assert!(log.query(&EventFilter::default()).is_empty());
        for p in ["alice", "bob", "alice", "carol", "alice"] {
            log.record(ev(p, Operation::Login)).unwrap();
        }
        log.record(ev("alice", Operation::UnwrapKey)).unwrap();
        let alice = log.query(&EventFilter {
            principal: Some("alice".into()),
            ..Default::default()
        });
        assert_eq!(
            alice.iter().map(|e| e.seq).collect::<Vec<_>>(),
            vec![1, 3, 5, 6]
        );
        assert_eq!(log.count(&EventFilter::op(Operation::UnwrapKey)), 1);
    }

    #[test]
    fn persisted_lines_use_exact_field_names_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        {
            let log = AuditLog::open(&path, clock()).unwrap();
            log.record(ev("alice", Operation::UnwrapKey).detail("n", 3usize))
                .unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let value: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let mut keys: Vec<_> = value.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["details", "op", "outcome", "principal", "resource", "seq", "ts"]
        );
        assert_eq!(value["op"], "unwrapKey");
        let log = AuditLog::open(&path, clock()).unwrap();
        assert_eq!(log.record(ev("bob", Operation::Login)).unwrap(), 2);
    }

    #[test]
    fn outage_fails_closed() {
        let log = AuditLog::in_memory(clock());
        log.set_unavailable(true);
        assert!(matches!(
            log.record(ev("a", Operation::Login)),
            Err(AuditError::AuditUnavailable(_))
        ));
        log.set_unavailable(false);
        assert_eq!(log.record(ev("a", Operation::Login)).unwrap(), 1);
    }

    #[test]
    fn operation_names_roundtrip() {
        for op in [Operation::UnwrapKey, Operation::PutSecret, Operation::Purge] {
            assert_eq!(op.as_str().parse::<Operation>().unwrap(), op);
        }
        assert!("nope".parse::<Operation>().is_err());
    }
}
