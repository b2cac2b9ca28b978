#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use lockbox_cli::cli::{run, Runtime};
use lockbox_cli::{InProcess, Recording, Transport};
use lockbox_core::entropy::OsEntropy;
use lockbox_core::identity::{Role, UserRecord, UserRegistry};
use lockbox_core::server::{LockboxServer, ServerBuilder};
use lockbox_core::time::{ManualClock, Timestamp};
use lockbox_core::vault::KeyFactory;

pub const T0: Timestamp = Timestamp(1_700_000_000);
pub const PASSWORD: &str = "correct horse";

pub const USERS: [(&str, &[Role]); 6] = [
    ("rita", &[Role::RedTeam]),
    ("rex", &[Role::RedTeam]),
    ("bob", &[Role::BlueTeam]),
    ("bea", &[Role::BlueTeam]),
    ("ada", &[Role::Auditor]),
    ("nobody", &[]),
];

pub fn registry() -> UserRegistry {
    UserRegistry::from_records(
        USERS
            .iter()
            .map(|(u, roles)| UserRecord::new(u, PASSWORD, roles.iter().copied(), &OsEntropy).unwrap())
            .collect(),
    )
    .unwrap()
}

pub struct Harness {
    pub server: Arc<LockboxServer>,
    pub clock: Arc<ManualClock>,
    pub wire: Arc<Recording<InProcess>>,
    pub home: tempfile::TempDir,
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Harness {
    pub fn new() -> Self {
        Self::with(LockboxServer::builder())
    }

    pub fn with(builder: ServerBuilder) -> Self {
        let clock = Arc::new(ManualClock::new(T0));
        let server = Arc::new(
            builder
                .registry(registry())
                .clock(clock.clone())
                .key_factory(KeyFactory::shared_fixture())
                .build()
                .unwrap(),
        );
        Self {
            wire: Arc::new(Recording::new(InProcess::new(server.clone()))),
            server,
            clock,
            home: tempfile::tempdir().unwrap(),
        }
    }

    /// Config directory holding `user`'s session file.
    pub fn dir(&self, user: &str) -> PathBuf {
        self.home.path().join(user)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.home.path().join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    /// Runs `lockbox <args>` with the session of `user`.
    pub fn lockbox(&self, user: &str, args: &[&str]) -> Output {
        let wire = self.wire.clone();
        let rt = Runtime {
            connect: Box::new(move |_url| Box::new(wire.clone()) as Box<dyn Transport>),
            password: Box::new(|_| Ok(PASSWORD.to_owned())),
            config_dir: self.dir(user),
        };
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let argv = std::iter::once("lockbox").chain(args.iter().copied());
        let code = run(argv, &rt, &mut out, &mut err);
        Output {
            code,
            stdout: String::from_utf8(out).unwrap(),
            stderr: String::from_utf8(err).unwrap(),
        }
    }

    pub fn login(&self, user: &str) {
        let o = self.lockbox(user, &["login", user]);
        assert_eq!(o.code, 0, "{}", o.stderr);
    }

    pub fn exchanges(&self) -> usize {
        self.wire.exchanges().len()
    }
}

pub fn file_mode(path: &Path) -> u32 {
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::metadata(path).unwrap().permissions().mode() & 0o777
    }
    #[cfg(not(unix))]
    {
        let _ = path;
        0o600
    }
}

/// Pseudo-report of `len` bytes with technique ids sprinkled through it.
pub fn report(len: usize, seed: u64) -> Vec<u8> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len + 64);
    while out.len() < len {
        match rng.gen_range(0..10) {
            0 => out.extend_from_slice(format!(" T{:04} ", rng.gen_range(1000..1700)).as_bytes()),
            1 => out.push(b'\n'),
            _ => {
                let word: String = (0..rng.gen_range(2..9)).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
                out.extend_from_slice(word.as_bytes());
                out.push(b' ');
            }
        }
    }
    out.truncate(len);
    out
}
