use super::*;
use crate::audit::CORRELATION_KEY;
use crate::crypto::{seal_for_upload, PlaintextBuffer, UploadTarget};
use crate::identity::RoleSet;
use crate::instrument::LiveTracker;
use crate::time::ManualClock;
use std::sync::mpsc;

const T0: Timestamp = Timestamp(1_700_000_000);

struct Fixture {
    server: LockboxServer,
    clock: Arc<ManualClock>,
}

fn fixture_with(builder: ServerBuilder) -> Fixture {
    let clock = Arc::new(ManualClock::new(T0));
    let server = builder
        .clock(clock.clone())
        .key_factory(KeyFactory::shared_fixture())
        .build()
        .unwrap();
    Fixture { server, clock }
}

fn fixture() -> Fixture {
    fixture_with(LockboxServer::builder())
}

impl Fixture {
    fn token(&self, user: &str, roles: &[Role]) -> AccessToken {
        let roles: RoleSet = roles.iter().copied().collect();
        self.server.identity().issue(user, roles, self.server.now())
    }

    fn red(&self) -> AccessToken {
        self.token("rita", &[Role::RedTeam])
    }

    fn blue(&self) -> AccessToken {
        self.token("bob", &[Role::BlueTeam])
    }

    fn envelope(&self, session: &BeginUpload, doc: &str, text: &[u8]) -> Vec<u8> {
        let target = UploadTarget {
            public_key_pem: &session.public_key_pem,
            kek_name: &session.kek_name,
            kek_version: session.kek_version,
        };
        seal_for_upload(text, doc, target, &OsEntropy, &LiveTracker::new()).unwrap()
    }

    fn upload(&self, token: &AccessToken, doc: &str, text: &[u8]) -> String {
        let session = self.server.begin_upload(token).unwrap();
        let env = self.envelope(&session, doc, text);
        self.server.complete_upload(token, &session.session_id, &env).unwrap()
    }

    fn count(&self, op: Operation, outcome: Outcome) -> usize {
        self.server.audit().count(&EventFilter::op(op).with_outcome(outcome))
    }
}

const REPORT: &[u8] = b"Initial access via T1566.001 spearphishing; then T1059 execution.\nPersistence: T1547.001\n";

#[test]
fn upload_then_analyze_happy_path() {
    let f = fixture();
    let doc = f.upload(&f.red(), "report-1", REPORT);
    assert_eq!(doc, "report-1");
    assert_eq!(f.count(Operation::UnwrapKey, Outcome::Success), 0, "upload never unwraps");
    assert!(f.server.secret_vault().contains("report-1"));
    assert!(f.server.store().contains(Container::Documents, "report-1"));

    let record = f.server.initiate_analysis(&f.blue(), "report-1").unwrap();
    assert_eq!(record.status, AnalysisStatus::Complete);
    assert_eq!(f.count(Operation::UnwrapKey, Outcome::Success), 1);
    assert!(f.server.live_counts().is_zero());

    let result = f.server.get_result(&f.blue(), &record.analysis_id).unwrap();
    let ids: Vec<_> = result.findings.iter().map(|x| x.technique_id.as_str()).collect();
    assert_eq!(ids, ["T1566.001", "T1059", "T1547.001"]);
    assert_eq!(result.stats.line_count, 2);
}

#[test]
fn analysis_steps_share_a_correlation_id_in_order() {
    let f = fixture();
    f.upload(&f.red(), "d1", REPORT);
    f.server.initiate_analysis(&f.blue(), "d1").unwrap();
    let done = f
        .server
        .audit()
        .query(&EventFilter::op(Operation::InitiateAnalysis).with_outcome(Outcome::Success));
    let cid = done[0].correlation_id().unwrap().to_owned();
    let steps: Vec<Operation> = f
        .server
        .audit()
        .query(&EventFilter {
            correlation_id: Some(cid),
            ..EventFilter::default()
        })
        .into_iter()
        .map(|e| e.op)
        .collect();
    assert_eq!(
        steps,
        [
            Operation::GetSecret,
            Operation::GetBlob,
            Operation::UnwrapKey,
            Operation::PutBlob,
            Operation::InitiateAnalysis
        ]
    );
}

#[test]
fn upload_is_red_team_only() {
    let f = fixture();
    assert!(matches!(f.server.begin_upload(&f.blue()), Err(ServerError::Unauthorized(_))));
    assert_eq!(f.count(Operation::Upload, Outcome::Denied), 1);
}

#[test]
fn single_kek_sessions_share_the_public_key() {
    let f = fixture();
    let a = f.server.begin_upload(&f.red()).unwrap();
    let b = f.server.begin_upload(&f.red()).unwrap();
    assert_ne!(a.session_id, b.session_id);
    assert_eq!(a.public_key_pem, b.public_key_pem);
    assert!(a.public_key_pem.starts_with("-----BEGIN PUBLIC KEY-----"));
}

#[test]
fn per_document_sessions_get_fresh_key_pairs() {
    let f = fixture_with(LockboxServer::builder().kek_mode(KekMode::PerDocument));
    let a = f.server.begin_upload(&f.red()).unwrap();
    let b = f.server.begin_upload(&f.red()).unwrap();
    assert_ne!((&a.kek_name, &a.public_key_pem), (&b.kek_name, &b.public_key_pem));
    let env = f.envelope(&a, "doc-a", b"T1003");
    assert_eq!(
        f.server.complete_upload(&f.red(), &b.session_id, &env),
        Err(ServerError::KekMismatch)
    );
    f.server.complete_upload(&f.red(), &a.session_id, &env).unwrap();
    let rec = f.server.initiate_analysis(&f.blue(), "doc-a").unwrap();
    assert_eq!(rec.status, AnalysisStatus::Complete);

    f.server.sweep(&f.token("svc", &[Role::ServiceBackend]), Some(T0.plus_days(8))).unwrap();
    let handle = f.server.key_vault().describe(&a.kek_name, a.kek_version).unwrap();
    assert!(!handle.enabled, "purged document's key pair is disabled");
}

#[test]
fn sessions_are_single_use_and_bound() {
    let f = fixture();
    let s = f.server.begin_upload(&f.red()).unwrap();
    let env = f.envelope(&s, "d1", b"x");
    let other = f.token("ralph", &[Role::RedTeam]);
    assert_eq!(f.server.complete_upload(&other, &s.session_id, &env), Err(ServerError::SessionNotFound));
    f.server.complete_upload(&f.red(), &s.session_id, &env).unwrap();
    let env2 = f.envelope(&s, "d2", b"y");
    assert_eq!(f.server.complete_upload(&f.red(), &s.session_id, &env2), Err(ServerError::SessionConsumed));
    assert_eq!(f.server.complete_upload(&f.red(), "nope", &env2), Err(ServerError::SessionNotFound));
}

#[test]
fn sessions_expire_after_ten_minutes() {
    let f = fixture();
    let s = f.server.begin_upload(&f.red()).unwrap();
    let env = f.envelope(&s, "d1", b"x");
    f.clock.advance_secs(SESSION_LIFETIME_SECS);
    let err = f.server.complete_upload(&f.red(), &s.session_id, &env).unwrap_err();
    assert_eq!(err, ServerError::SessionExpired);
    assert_eq!(err.code(), ServerError::SessionNotFound.code());
    let events = f.server.audit().query(&EventFilter::op(Operation::Upload).with_outcome(Outcome::Error));
    assert_eq!(events[0].detail_str("reason"), Some("upload session expired"));
}

#[test]
fn failed_completion_leaves_the_session_usable() {
    let f = fixture();
    let s = f.server.begin_upload(&f.red()).unwrap();
    assert!(matches!(
        f.server.complete_upload(&f.red(), &s.session_id, b"LBX1 garbage"),
        Err(ServerError::MalformedEnvelope(_))
    ));
    let env = f.envelope(&s, "d1", b"x");
    f.server.complete_upload(&f.red(), &s.session_id, &env).unwrap();
}

#[test]
fn wrong_kek_version_is_a_mismatch() {
    let f = fixture();
    let mut s = f.server.begin_upload(&f.red()).unwrap();
    let sid = s.session_id.clone();
    s.kek_version += 1;
    let env = f.envelope(&s, "d1", b"x");
    assert_eq!(f.server.complete_upload(&f.red(), &sid, &env), Err(ServerError::KekMismatch));
}

#[test]
fn duplicate_document_ids_are_refused() {
    let f = fixture();
    f.upload(&f.red(), "dup", b"one");
    let s = f.server.begin_upload(&f.red()).unwrap();
    let env = f.envelope(&s, "dup", b"two");
    assert_eq!(
        f.server.complete_upload(&f.red(), &s.session_id, &env),
        Err(ServerError::DuplicateDocument("dup".into()))
    );
}

#[test]
fn red_team_cannot_analyze() {
    let f = fixture();
    f.upload(&f.red(), "d1", REPORT);
    assert!(matches!(f.server.initiate_analysis(&f.red(), "d1"), Err(ServerError::Unauthorized(_))));
    assert_eq!(f.server.audit().count(&EventFilter::op(Operation::UnwrapKey)), 0);
    assert_eq!(f.server.audit().count(&EventFilter::op(Operation::GetSecret)), 0);
}

#[test]
fn tampered_ciphertext_is_refused_before_unwrap() {
    let f = fixture();
    f.upload(&f.red(), "d1", REPORT);
    f.server.tamper_document("d1", |b| b[20] ^= 0x01).unwrap();
    assert_eq!(f.server.initiate_analysis(&f.blue(), "d1").map(|_| ()), Err(ServerError::IntegrityError));
    assert_eq!(f.server.audit().count(&EventFilter::op(Operation::UnwrapKey)), 0);
    assert!(f.server.store().list_blobs(Container::Results, &f.server.backend).unwrap().is_empty());
    assert!(f.server.live_counts().is_zero());
}

#[test]
fn tag_failure_after_unwrap_still_wipes() {
    let f = fixture();
    f.upload(&f.red(), "d1", REPORT);
    f.server.tamper_document_and_digest("d1", |b| b[20] ^= 0x01).unwrap();
    assert_eq!(f.server.initiate_analysis(&f.blue(), "d1").map(|_| ()), Err(ServerError::IntegrityError));
    assert_eq!(f.count(Operation::UnwrapKey, Outcome::Success), 1);
    assert!(f.server.store().list_blobs(Container::Results, &f.server.backend).unwrap().is_empty());
    assert!(f.server.live_counts().is_zero());
    let records = f.server.analyses_snapshot();
    assert_eq!(records[0].status, AnalysisStatus::Failed);
    assert_eq!(
        f.server.get_result(&f.blue(), &records[0].analysis_id).map(|_| ()),
        Err(ServerError::AnalysisFailed("analysis did not complete".into()))
    );
}

#[test]
fn unknown_document_is_not_found() {
    let f = fixture();
    assert_eq!(
        f.server.initiate_analysis(&f.blue(), "ghost").map(|_| ()),
        Err(ServerError::DocumentNotFound("ghost".into()))
    );
}

#[test]
fn results_are_initiator_only() {
    let f = fixture();
    f.upload(&f.red(), "d1", REPORT);
    let rec = f.server.initiate_analysis(&f.blue(), "d1").unwrap();
    let other = f.token("beth", &[Role::BlueTeam]);
    assert_eq!(f.server.get_result(&other, &rec.analysis_id).map(|_| ()), Err(ServerError::NotInitiator));
    f.server.get_result(&f.blue(), &rec.analysis_id).unwrap();
    assert_eq!(f.count(Operation::GetResult, Outcome::Denied), 1);
    assert_eq!(f.count(Operation::GetResult, Outcome::Success), 1);
    assert!(matches!(f.server.get_result(&f.red(), &rec.analysis_id), Err(ServerError::Unauthorized(_))));
}

#[test]
fn listing_respects_roles() {
    let f = fixture();
    assert!(f.server.list_documents(&f.blue()).unwrap().is_empty());
    f.upload(&f.red(), "mine", b"a");
    f.upload(&f.token("ralph", &[Role::RedTeam]), "theirs", b"b");
    let own: Vec<_> = f.server.list_documents(&f.red()).unwrap().into_iter().map(|d| d.document_id).collect();
    assert_eq!(own, ["mine"]);
    let all = f.server.list_documents(&f.blue()).unwrap();
    assert_eq!(all.len(), 2);
    assert_eq!(all[0].uploader, "rita");
    let json = serde_json::to_value(&all[0]).unwrap();
    assert!(json.get("payload").is_none() && json.get("payload_sha256").is_none());
    assert!(matches!(f.server.list_documents(&f.token("nobody", &[])), Err(ServerError::Unauthorized(_))));
}

#[test]
fn retention_flows_through_the_server() {
    let f = fixture();
    f.upload(&f.red(), "d1", REPORT);
    let rec = f.server.initiate_analysis(&f.blue(), "d1").unwrap();
    let admin = f.token("svc", &[Role::ServiceBackend]);
    assert!(f.server.sweep(&admin, Some(T0.plus_days(6))).unwrap().purged.is_empty());
    assert_eq!(f.server.sweep(&admin, Some(T0.plus_days(8))).unwrap().purged.len(), 1);
    assert!(f.server.list_documents(&f.blue()).unwrap().is_empty());
    assert!(!f.server.secret_vault().contains("d1"));
    assert_eq!(
        f.server.initiate_analysis(&f.blue(), "d1").map(|_| ()),
        Err(ServerError::DocumentNotFound("d1".into()))
    );
    f.server.get_result(&f.blue(), &rec.analysis_id).unwrap();
    f.clock.set(T0.plus_days(91));
    let later = f.token("svc", &[Role::ServiceBackend]);
    assert_eq!(f.server.sweep(&later, None).unwrap().purged.len(), 1);
    let blue = f.blue();
    assert_eq!(
        f.server.get_result(&blue, &rec.analysis_id).map(|_| ()),
        Err(ServerError::ResultNotFound(rec.analysis_id.clone()))
    );
    assert!(matches!(f.server.sweep(&blue, None), Err(ServerError::Unauthorized(_))));
}

#[test]
fn expired_tokens_are_refused() {
    let f = fixture();
    let t = f.red();
    f.clock.advance_secs(61 * MINUTE);
    assert_eq!(f.server.begin_upload(&t).map(|_| ()), Err(ServerError::TokenExpired));
    let mut forged = f.blue();
    forged.roles.insert(Role::Auditor);
    assert_eq!(f.server.query_audit(&forged, &EventFilter::default()).map(|_| ()), Err(ServerError::TokenInvalid));
}

#[test]
fn audit_query_is_auditor_only() {
    let f = fixture();
    let aud = f.token("ada", &[Role::Auditor]);
    let events = f.server.query_audit(&aud, &EventFilter::op(Operation::CreateKey)).unwrap();
    assert_eq!(events.len(), 1, "the application key pair");
    assert!(matches!(f.server.query_audit(&f.blue(), &EventFilter::default()), Err(ServerError::Unauthorized(_))));
}

#[test]
fn audit_outage_fails_closed_without_leaking() {
    let f = fixture();
    f.upload(&f.red(), "d1", REPORT);
    let blue = f.blue();
    f.server.audit().set_unavailable(true);
    assert!(matches!(
        f.server.initiate_analysis(&blue, "d1"),
        Err(ServerError::AuditUnavailable(_))
    ));
    assert!(f.server.live_counts().is_zero());
    f.server.audit().set_unavailable(false);
    assert_eq!(f.count(Operation::UnwrapKey, Outcome::Success), 0);
    f.server.initiate_analysis(&blue, "d1").unwrap();
}

struct Gated {
    entered: Mutex<mpsc::Sender<()>>,
    release: Mutex<mpsc::Receiver<()>>,
}

impl Analyzer for Gated {
    fn analyze(&self, input: &PlaintextBuffer, id: &str, at: Timestamp) -> Result<AnalysisResult, crate::analyzer::AnalyzerError> {
        self.entered.lock().unwrap().send(()).unwrap();
        self.release.lock().unwrap().recv().unwrap();
        TechniqueExtractor::default().analyze(input, id, at)
    }
}

#[test]
fn one_analysis_per_document_at_a_time() {
    let (entered_tx, entered_rx) = mpsc::channel();
    let (release_tx, release_rx) = mpsc::channel();
    let gated = Gated {
        entered: Mutex::new(entered_tx),
        release: Mutex::new(release_rx),
    };
    let f = fixture_with(LockboxServer::builder().analyzer(Arc::new(gated)));
    f.upload(&f.red(), "d1", REPORT);
    let blue = f.blue();
    std::thread::scope(|s| {
        let first = s.spawn(|| f.server.initiate_analysis(&blue, "d1"));
        entered_rx.recv().unwrap();
        assert_eq!(
            f.server.initiate_analysis(&blue, "d1").map(|_| ()),
            Err(ServerError::AnalysisInProgress("d1".into()))
        );
        release_tx.send(()).unwrap();
        first.join().unwrap().unwrap();
    });
    assert!(f.server.live_counts().is_zero());
}

#[test]
fn boundary_monitor_counts_checks() {
    let f = fixture();
    {
        let _g = f.server.enter();
        f.upload(&f.red(), "d1", REPORT);
    }
    {
        let _g = f.server.enter();
        f.server.initiate_analysis(&f.blue(), "d1").unwrap();
    }
    let r = f.server.boundary_report();
    assert_eq!(r, BoundaryReport { checks: 4, violations: 0 });
    let leaked = PlaintextBuffer::with_tracker(b"x".to_vec(), &f.server.context().tracker);
    drop(f.server.enter());
    assert_eq!(f.server.boundary_report().violations, 2);
    drop(leaked);
}

fn fixed_keys() -> MasterKeys {
    MasterKeys {
        vault: SealingKey::from_bytes([1; 32]),
        store: SealingKey::from_bytes([2; 32]),
        token: TokenKey::from_bytes([3; 32]),
    }
}

#[test]
fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let rec = {
        let f = fixture_with(LockboxServer::builder().data_root(dir.path()).master_keys(fixed_keys()));
        f.upload(&f.red(), "d1", REPORT);
        f.upload(&f.red(), "d2", b"T1110");
        f.server.initiate_analysis(&f.blue(), "d1").unwrap()
    };
    let f = fixture_with(LockboxServer::builder().data_root(dir.path()).master_keys(fixed_keys()));
    assert_eq!(f.server.list_documents(&f.blue()).unwrap().len(), 2);
    f.server.get_result(&f.blue(), &rec.analysis_id).unwrap();
    f.server.initiate_analysis(&f.blue(), "d2").unwrap();
    let aud = f.token("ada", &[Role::Auditor]);
    assert_eq!(f.server.query_audit(&aud, &EventFilter::op(Operation::CreateKey)).unwrap().len(), 1);
    let events = f.server.query_audit(&aud, &EventFilter::default()).unwrap();
    assert!(events.windows(2).all(|w| w[1].seq == w[0].seq + 1));
    assert!(dir.path().join("server/documents/d1.json").exists());
    assert!(events.iter().any(|e| e.details.contains_key(CORRELATION_KEY)));
}

#[test]
fn persistent_server_requires_keys() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        LockboxServer::builder().data_root(dir.path()).build(),
        Err(ServerError::Config(_))
    ));
}

#[test]
fn config_parses_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lockbox.json");
    fs::write(&path, r#"{"data_root": "data", "user_registry": "users.json", "kek_mode": "per-document"}"#).unwrap();
    let cfg = ServerConfig::load(&path).unwrap();
    assert_eq!(cfg.data_root, dir.path().join("data"));
    assert_eq!(cfg.kek_mode, KekMode::PerDocument);
    assert_eq!(cfg.retention, RetentionConfig::default());
    assert_eq!(cfg.listen, "127.0.0.1:7878");
    fs::write(&path, r#"{"data_root": "d", "user_registry": "u", "bogus": 1}"#).unwrap();
    assert!(ServerConfig::load(&path).is_err());
}

#[test]
fn error_codes_are_stable() {
    assert_eq!(ServerError::NotInitiator.http_status(), 403);
    assert_eq!(ServerError::IntegrityError.code(), "integrity_error");
    assert_eq!(ServerError::Internal("disk on fire".into()).public_message(), "internal error");
}
