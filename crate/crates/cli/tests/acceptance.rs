//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod support;

use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use base64::Engine;
use rand::{Rng, RngCore, SeedableRng};

use lockbox_cli::{Client, ClientError, HttpTransport, InProcess, Recording, Transport};
use lockbox_core::api::{ApiRequest, ApiResponse};
use lockbox_core::audit::{EventFilter, Operation, Outcome};
use lockbox_core::crypto::{
    bit_flip_sweep, decrypt_document, encrypt_document, wrap_data_key, DataKey, KekPublicKey, Nonce,
};
use lockbox_core::entropy::OsEntropy;
use lockbox_core::identity::{Action, Caller, Role, RoleSet};
use lockbox_core::instrument::LiveCounts;
use lockbox_core::leakscan::{self, find};
use lockbox_core::par::Mode;
use lockbox_core::server::{AnalysisStatus, LockboxServer, MasterKeys, BACKEND_PRINCIPAL, DEFAULT_KEK_NAME};
use lockbox_core::store::Container;
use lockbox_core::time::DAY;
use lockbox_core::vault::KeyFactory;
use support::{report, Harness, PASSWORD};

type Outcome_ = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

#[derive(Clone, Default)]
struct LogSink(Arc<Mutex<Vec<u8>>>);

impl Write for LogSink {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl LogSink {
    fn bytes(&self) -> Vec<u8> {
        self.0.lock().unwrap().clone()
    }
}

fn main() {
    let logs = LogSink::default();
    let sink = logs.clone();
    tracing_subscriber::fmt()
        .with_max_level(tracing::Level::TRACE)
        .with_ansi(false)
        .with_writer(move || sink.clone())
        .init();

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome_>)> = vec![
        ("crypto conformance", Box::new(crypto_conformance)),
        ("tamper rejection", Box::new(tamper_rejection)),
        ("cryptographic gate", Box::new(cryptographic_gate)),
        ("plaintext confinement", Box::new({
            let logs = logs.clone();
            move || plaintext_confinement(&logs)
        })),
        ("rbac matrix", Box::new(rbac_matrix)),
        ("retention", Box::new(retention)),
        ("initiator-only results", Box::new(initiator_only)),
        ("non-exportability", Box::new({
            let logs = logs.clone();
            move || non_exportability(&logs)
        })),
        ("end-to-end desk run", Box::new(end_to_end)),
    ];

    panic::set_hook(Box::new(|_| {}));
    let started = Instant::now();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({secs:.2}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail} ({secs:.2}s)", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn backend() -> Caller {
    Caller::new(BACKEND_PRINCIPAL, [Role::ServiceBackend])
}

fn disk_server(root: &Path, clock: Arc<lockbox_core::time::ManualClock>) -> Arc<LockboxServer> {
    Arc::new(
        LockboxServer::builder()
            .data_root(root)
            .master_keys(MasterKeys::generate(&OsEntropy).unwrap())
            .registry(support::registry())
            .clock(clock)
            .key_factory(KeyFactory::shared_fixture())
            .build()
            .unwrap(),
    )
}

fn analysis_id(client: &Client, doc: &str) -> Result<String, String> {
    let resp = client.analyze(doc).map_err(|e| format!("analyze {doc}: {e}"))?;
    ensure!(resp.status == AnalysisStatus::Complete, "analysis of {doc} did not complete");
    Ok(resp.analysis_id)
}

fn crypto_conformance() -> Outcome_ {
    #[derive(serde::Deserialize)]
    struct Kat {
        name: String,
        key: String,
        nonce: String,
        plaintext: String,
        ciphertext: String,
        tag: String,
    }
    let kats: Vec<Kat> = serde_json::from_str(include_str!("../../core/tests/data/aes256gcm_kat.json")).unwrap();
    ensure!(kats.len() >= 5, "only {} vectors", kats.len());
    for k in &kats {
        let key = DataKey::try_from_slice(&hex::decode(&k.key).unwrap(), &Default::default()).unwrap();
        let nonce = Nonce::try_from_slice(&hex::decode(&k.nonce).unwrap()).unwrap();
        let pt = hex::decode(&k.plaintext).unwrap();
        let sealed = encrypt_document(&pt, &key, nonce).unwrap();
        let expected = [hex::decode(&k.ciphertext).unwrap(), hex::decode(&k.tag).unwrap()].concat();
        ensure!(sealed.ciphertext_and_tag == expected, "vector {} differs", k.name);
        let opened = decrypt_document(&sealed, &key).unwrap();
        ensure!(opened.expose().unwrap() == pt.as_slice(), "vector {} does not decrypt", k.name);
    }

    let h = Harness::new();
    let vault = h.server.key_vault();
    let handle = vault.latest(DEFAULT_KEK_NAME).unwrap();
    let kek = KekPublicKey::from_pem(&vault.get_public_key(&handle, &backend()).unwrap()).unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(0x5eed);
    let originals: Vec<[u8; 32]> = (0..1000).map(|_| rng.gen()).collect();
    let wrapped: Vec<_> = originals
        .iter()
        .map(|k| wrap_data_key(&DataKey::from_bytes(*k), &kek, &handle.name, handle.version, &OsEntropy).unwrap())
        .collect();
    let unwrapped = vault.unwrap_batch(&handle, &wrapped, &backend(), Mode::Parallel);
    let exact = unwrapped
        .iter()
        .zip(&originals)
        .filter(|(u, o)| matches!(u, Ok(k) if k.expose_secret().unwrap() == *o))
        .count();
    ensure!(exact == 1000, "{exact}/1000 roundtrips bit-exact");
    Ok(format!("{}/{} vectors, {exact}/1000 wrap/unwrap roundtrips bit-exact", kats.len(), kats.len()))
}

fn tamper_rejection() -> Outcome_ {
    let tracker = lockbox_core::instrument::LiveTracker::new();
    let mut rng = rand::rngs::StdRng::seed_from_u64(2);
    let key = DataKey::with_tracker(rng.gen(), &tracker);
    let mut pt = [0u8; 36];
    rng.fill_bytes(&mut pt);
    let sealed = encrypt_document(&pt, &key, Nonce::from_bytes(rng.gen())).unwrap().to_bytes();
    ensure!(sealed.len() == 64, "payload is {} bytes", sealed.len());
    let sweep = bit_flip_sweep(&sealed, &key, Mode::Parallel);
    ensure!(sweep.trials == 512, "{} trials", sweep.trials);
    ensure!(
        sweep.all_rejected(),
        "{}/{} rejected, {} plaintext bytes released",
        sweep.rejected,
        sweep.trials,
        sweep.released_bytes
    );
    ensure!(tracker.live_plaintext_buffers() == 0, "plaintext buffer left alive");
    Ok(format!(
        "{}/{} flips AuthenticationFailed, {} plaintext bytes observable",
        sweep.rejected, sweep.trials, sweep.released_bytes
    ))
}

fn cryptographic_gate() -> Outcome_ {
    const N: usize = 50;
    let h = Harness::new();
    let wire = InProcess::new(h.server.clone());
    let login = |u: &str| {
        let mut c = Client::new(&wire);
        c.login(u, PASSWORD).unwrap();
        c
    };
    let reds = [login("rita"), login("rex")];
    let blues = [login("bob"), login("bea")];
    let others = [login("ada"), login("nobody")];
    let mut rng = rand::rngs::StdRng::seed_from_u64(50);
    let mut expected_complete = 0usize;
    let mut kinds = [0usize; 7];
    for i in 0..N {
        let doc = format!("wf-{i}");
        let red = &reds[rng.gen_range(0..2)];
        let blue = &blues[rng.gen_range(0..2)];
        red.upload(&report(rng.gen_range(1..4096), i as u64), &doc)
            .map_err(|e| format!("upload {doc}: {e}"))?;
        let kind = rng.gen_range(0..7);
        kinds[kind] += 1;
        let denied = |r: Result<_, ClientError>| matches!(r, Err(ClientError::Api { status: 403, .. }));
        let integrity = |r: Result<_, ClientError>| matches!(r, Err(ClientError::Api { status: 422, .. }));
        match kind {
            0 => {
                let id = analysis_id(blue, &doc)?;
                blue.result(&id).map_err(|e| e.to_string())?;
                expected_complete += 1;
            }
            1 => {
                ensure!(denied(red.analyze(&doc)), "red analyze of {doc} not denied");
                analysis_id(blue, &doc)?;
                expected_complete += 1;
            }
            2 => {
                let bit = rng.gen_range(0..64);
                h.server.tamper_document(&doc, |b| b[bit / 8] ^= 1 << (bit % 8)).unwrap();
                ensure!(integrity(blue.analyze(&doc)), "tampered {doc} was analyzed");
            }
            3 => {
                let who = &others[rng.gen_range(0..2)];
                ensure!(denied(who.analyze(&doc)), "non-blue analyze of {doc} not denied");
            }
            4 => {
                analysis_id(blue, &doc)?;
                analysis_id(&blues[rng.gen_range(0..2)], &doc)?;
                expected_complete += 2;
            }
            5 => {
                h.server
                    .store()
                    .tamper_payload(Container::Documents, &doc, |b| {
                        let i = b.len() / 2;
                        b[i] ^= 0x80;
                    })
                    .unwrap();
                ensure!(integrity(blue.analyze(&doc)), "disk-tampered {doc} was analyzed");
            }
            _ => {
                ensure!(
                    matches!(blue.analyze(&format!("{doc}-missing")), Err(ClientError::Api { status: 404, .. })),
                    "analyze of missing doc"
                );
            }
        }
    }
    ensure!(kinds.iter().all(|k| *k > 0), "scenario mix incomplete: {kinds:?}");
    let unwraps = h.server.audit().count(&EventFilter::op(Operation::UnwrapKey).with_outcome(Outcome::Success));
    let completed = h
        .server
        .analyses_snapshot()
        .iter()
        .filter(|a| a.status == AnalysisStatus::Complete)
        .count();
    ensure!(
        unwraps == completed && completed == expected_complete,
        "unwrapKey successes {unwraps}, completed analyses {completed}, expected {expected_complete}"
    );
    Ok(format!("N={N} workflows {kinds:?}: unwrapKey successes {unwraps} == completed analyses {completed}"))
}

/// Wraps a transport and samples the server's live counts after each exchange.
struct Probe<'a> {
    inner: &'a dyn Transport,
    server: &'a LockboxServer,
    samples: Mutex<Vec<LiveCounts>>,
}

impl Transport for Probe<'_> {
    fn send(&self, req: &ApiRequest) -> Result<ApiResponse, String> {
        let r = self.inner.send(req);
        self.samples.lock().unwrap().push(self.server.live_counts());
        r
    }
}

fn encodings(needle: &[u8]) -> Vec<Vec<u8>> {
    vec![
        needle.to_vec(),
        hex::encode(needle).into_bytes(),
        hex::encode_upper(needle).into_bytes(),
        base64::engine::general_purpose::STANDARD.encode(needle).into_bytes(),
    ]
}

fn plaintext_confinement(logs: &LogSink) -> Outcome_ {
    let root = tempfile::tempdir().unwrap();
    let clock = Arc::new(lockbox_core::time::ManualClock::new(support::T0));
    let server = disk_server(root.path(), clock);
    let wire = Recording::new(InProcess::new(server.clone()));
    let probe = Probe {
        inner: &wire,
        server: &server,
        samples: Mutex::new(Vec::new()),
    };
    let mut sentinel = [0u8; 64];
    rand::rngs::OsRng.fill_bytes(&mut sentinel);
    let mut doc = report(4096, 4);
    doc.extend_from_slice(b"\n\n");
    doc.extend_from_slice(&[b' '; 120]);
    doc.extend_from_slice(&sentinel);
    doc.extend_from_slice(&[b' '; 120]);
    doc.extend_from_slice(&report(4096, 5));
    let log_mark = logs.bytes().len();

    let mut red = Client::new(&probe);
    red.login("rita", PASSWORD).map_err(|e| e.to_string())?;
    red.upload(&doc, "sentinel-doc").map_err(|e| e.to_string())?;
    let mut blue = Client::new(&probe);
    blue.login("bob", PASSWORD).map_err(|e| e.to_string())?;
    let id = analysis_id(&blue, "sentinel-doc")?;
    let result = blue.result(&id).map_err(|e| e.to_string())?;
    ensure!(!result.findings.is_empty(), "analysis found nothing");
    blue.list().map_err(|e| e.to_string())?;

    let patterns = encodings(&sentinel);
    let pattern_refs: Vec<&[u8]> = patterns.iter().map(Vec::as_slice).collect();
    let files = leakscan::files_under(root.path()).unwrap();
    ensure!(files.iter().any(|f| f.ends_with("audit.log")), "audit log not under data root");
    let hits = leakscan::scan_for_patterns(&[root.path()], &pattern_refs, Mode::Parallel).unwrap();
    ensure!(hits.is_empty(), "sentinel on disk: {hits:?}");
    let server_logs = &logs.bytes()[log_mark..];
    ensure!(!server_logs.is_empty(), "no server log output captured");
    ensure!(pattern_refs.iter().all(|p| find(server_logs, p).is_none()), "sentinel in server logs");
    let sent = wire.sent_bytes();
    ensure!(
        sent.iter().all(|b| leakscan::shared_window(b, &doc, 16).is_none()),
        "plaintext window in a request"
    );

    // the scanner itself must see a planted copy
    let control = tempfile::tempdir().unwrap();
    std::fs::write(control.path().join("x"), [&b"pad"[..], &sentinel].concat()).unwrap();
    ensure!(
        leakscan::scan_for_patterns(&[control.path()], &pattern_refs, Mode::Parallel).unwrap().len() == 1,
        "control scan missed a planted sentinel"
    );

    let samples = probe.samples.lock().unwrap().clone();
    let dirty = samples.iter().filter(|c| !c.is_zero()).count();
    let boundary = server.boundary_report();
    ensure!(dirty == 0, "{dirty}/{} request boundaries with live secrets", samples.len());
    ensure!(boundary.checks > 0 && boundary.violations == 0, "boundary report {boundary:?}");
    Ok(format!(
        "0 sentinel hits in {} files + {} log bytes; {} requests, {} boundary checks, 0 live buffers",
        files.len(),
        server_logs.len(),
        samples.len(),
        boundary.checks
    ))
}

fn rbac_matrix() -> Outcome_ {
    use Action::*;
    let expected: [(Option<Role>, [bool; 6]); 5] = [
        (Some(Role::RedTeam), [true, true, false, false, false, false]),
        (Some(Role::BlueTeam), [false, false, true, true, true, false]),
        (Some(Role::ServiceBackend), [false; 6]),
        (Some(Role::Auditor), [false, false, false, false, false, true]),
        (None, [false; 6]),
    ];
    let columns = [Upload, ListOwnDocuments, ListDocuments, InitiateAnalysis, GetResult, QueryAudit];
    assert_eq!(columns, Action::USER_ACTIONS);
    let h = Harness::new();
    let authz = &h.server.context().authz;
    let denials_before = h.server.audit().count(&EventFilter::default().with_outcome(Outcome::Denied));
    let mut matched = 0;
    let mut denied = 0;
    let mut mismatches = Vec::new();
    for (role, row) in expected {
        let roles: RoleSet = role.into_iter().collect();
        for (action, want) in columns.iter().zip(row) {
            let got = authz.authorize("matrix-probe", &roles, *action, "matrix").allowed;
            denied += !got as usize;
            if got == want {
                matched += 1;
            } else {
                mismatches.push(format!("{role:?}/{action}"));
            }
        }
    }
    let audited = h.server.audit().count(&EventFilter::default().with_outcome(Outcome::Denied)) - denials_before;
    ensure!(matched == 30, "{matched}/30 cells match; wrong: {mismatches:?}");
    ensure!(audited == denied, "{denied} denials but {audited} audited");
    Ok(format!("{matched}/30 cells match, {audited} denials audited"))
}

fn retention() -> Outcome_ {
    let h = Harness::new();
    let wire = InProcess::new(h.server.clone());
    let mut red = Client::new(&wire);
    red.login("rita", PASSWORD).map_err(|e| e.to_string())?;
    red.upload(b"T1003 credential dumping", "ret-doc").map_err(|e| e.to_string())?;
    let mut blue = Client::new(&wire);
    blue.login("bob", PASSWORD).map_err(|e| e.to_string())?;
    let id = analysis_id(&blue, "ret-doc")?;
    let result_blob = h
        .server
        .analyses_snapshot()
        .into_iter()
        .find(|a| a.analysis_id == id)
        .and_then(|a| a.result_blob_id)
        .ok_or("no result blob")?;
    let store = h.server.store();
    let doc_alive = || store.contains(Container::Documents, "ret-doc");
    let result_alive = || store.contains(Container::Results, &result_blob);
    let at = |days: i64| {
        h.clock.set(support::T0.plus_secs(days * DAY));
        h.server.scheduled_sweep()
    };

    at(6);
    ensure!(doc_alive(), "document gone at day 6");
    at(7);
    ensure!(doc_alive(), "document gone at exactly 7 days");
    let day8 = at(8);
    ensure!(!doc_alive(), "document alive at day 8");
    ensure!(!h.server.secret_vault().contains("ret-doc"), "wrapped key survived the purge");
    ensure!(day8.purged.len() == 1, "day-8 sweep purged {:?}", day8.purged);
    ensure!(at(8).purged.is_empty(), "second day-8 sweep not idempotent");
    at(89);
    ensure!(result_alive(), "result gone at day 89");
    let day91 = at(91);
    ensure!(!result_alive(), "result alive at day 91");
    ensure!(day91.purged.len() == 1, "day-91 sweep purged {:?}", day91.purged);
    ensure!(at(91).purged.is_empty() && at(120).purged.is_empty(), "repeat sweeps purged again");
    Ok("document kept d6/d7, purged d8; result kept d89, purged d91; repeat sweeps empty".into())
}

fn initiator_only() -> Outcome_ {
    let h = Harness::new();
    let wire = InProcess::new(h.server.clone());
    let mut red = Client::new(&wire);
    red.login("rita", PASSWORD).map_err(|e| e.to_string())?;
    red.upload(b"Lateral movement T1021.001", "io-doc").map_err(|e| e.to_string())?;
    let (mut a, mut b) = (Client::new(&wire), Client::new(&wire));
    a.login("bob", PASSWORD).map_err(|e| e.to_string())?;
    b.login("bea", PASSWORD).map_err(|e| e.to_string())?;
    let id = analysis_id(&a, "io-doc")?;
    let fetched = a.result(&id).map_err(|e| e.to_string())?;
    ensure!(fetched.findings.len() == 1, "unexpected findings {:?}", fetched.findings);
    match b.result(&id) {
        Err(ClientError::Api { code, .. }) if code == "not_initiator" => {}
        other => return Err(format!("B got {other:?}")),
    }
    let audited = |who: &str, outcome| {
        h.server.audit().count(&EventFilter {
            principal: Some(who.into()),
            resource: Some(format!("analyses/{id}")),
            ..EventFilter::op(Operation::GetResult).with_outcome(outcome)
        })
    };
    ensure!(audited("bob", Outcome::Success) == 1, "A's fetch not audited");
    ensure!(audited("bea", Outcome::Denied) == 1, "B's attempt not audited");
    Ok("A fetched, B got not_initiator, both attempts audited".into())
}

fn non_exportability(logs: &LogSink) -> Outcome_ {
    let root = tempfile::tempdir().unwrap();
    let clock = Arc::new(lockbox_core::time::ManualClock::new(support::T0));
    let server = disk_server(root.path(), clock.clone());
    let wire = Recording::new(InProcess::new(server.clone()));
    let log_mark = logs.bytes().len();

    let client = |u: &str| {
        let mut c = Client::new(&wire);
        c.login(u, PASSWORD).unwrap();
        c
    };
    let (red, blue, ada) = (client("rita"), client("bob"), client("ada"));
    for i in 0..3 {
        red.upload(&report(2048, 80 + i), &format!("nx-{i}")).map_err(|e| e.to_string())?;
    }
    let id = analysis_id(&blue, "nx-0")?;
    blue.result(&id).map_err(|e| e.to_string())?;
    blue.list().map_err(|e| e.to_string())?;
    ada.audit(&EventFilter::default()).map_err(|e| e.to_string())?;
    clock.advance_days(8);
    client("ada").sweep(None).map_err(|e| e.to_string())?;

    let exponents = KeyFactory::fixture_private_exponents();
    let patterns: Vec<Vec<u8>> = exponents.iter().flat_map(|d| encodings(d)).collect();
    let refs: Vec<&[u8]> = patterns.iter().map(Vec::as_slice).collect();
    let files = leakscan::files_under(root.path()).unwrap();
    ensure!(
        files.iter().any(|f| f.to_string_lossy().contains("vault-a")),
        "no key vault files to scan"
    );
    let disk = leakscan::scan_for_patterns(&[root.path()], &refs, Mode::Parallel).unwrap();
    ensure!(disk.is_empty(), "private exponent on disk: {disk:?}");
    let responses = wire.received_bytes();
    let in_responses = responses.iter().filter(|r| refs.iter().any(|p| find(r, p).is_some())).count();
    ensure!(in_responses == 0, "{in_responses} responses carry a private exponent");
    let server_logs = &logs.bytes()[log_mark..];
    ensure!(refs.iter().all(|p| find(server_logs, p).is_none()), "private exponent in logs");
    Ok(format!(
        "0 matches for {} exponents x {} encodings in {} responses, {} files, {} log bytes",
        exponents.len(),
        patterns.len() / exponents.len(),
        responses.len(),
        files.len(),
        server_logs.len()
    ))
}

fn end_to_end() -> Outcome_ {
    let h = Harness::new();
    let http = lockbox_server::HttpServer::bind("127.0.0.1:0", h.server.clone())
        .unwrap()
        .spawn(2);
    let transport = HttpTransport::new(&http.url());
    let doc = report(100 * 1024, 9);

    let started = Instant::now();
    let mut red = Client::new(&transport);
    red.login("rita", PASSWORD).map_err(|e| e.to_string())?;
    red.upload(&doc, "desk-run").map_err(|e| e.to_string())?;
    let mut blue = Client::new(&transport);
    blue.login("bob", PASSWORD).map_err(|e| e.to_string())?;
    let id = analysis_id(&blue, "desk-run")?;
    let result = blue.result(&id).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();

    ensure!(result.stats.byte_count == doc.len(), "analyzed {} bytes", result.stats.byte_count);
    ensure!(!result.findings.is_empty(), "no findings");
    ensure!(elapsed.as_secs_f64() < 5.0, "took {:.3}s", elapsed.as_secs_f64());
    Ok(format!(
        "100 KiB over HTTP in {:.3}s, {} findings",
        elapsed.as_secs_f64(),
        result.findings.len()
    ))
}
