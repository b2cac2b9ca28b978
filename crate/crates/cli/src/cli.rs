//! Argument parsing and command execution.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lockbox_core::audit::{EventFilter, Operation, Outcome};
use lockbox_core::crypto::PlaintextBuffer;
use lockbox_core::time::Timestamp;

use crate::client::{exit, Client, ClientError};
use crate::session::{self, ClientConfig, Session, DEFAULT_SERVER};
use crate::transport::{HttpTransport, Transport};

pub const PASSWORD_ENV: &str = "LOCKBOX_PASSWORD";

#[derive(Debug, Parser)]
#[command(name = "lockbox", version, about = "Client for the lockbox document service")]
pub struct Cli {
    /// Server base URL
    #[arg(long, global = true, env = "LOCKBOX_SERVER")]
    pub server: Option<String>,
    /// Print machine-readable JSON on stdout
    #[arg(long, global = true)]
    pub json: bool,
    /// Client config file (JSON: server_url, session_file)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Log in and cache the session token
    Login { username: String },
    /// Forget the cached session
    Logout,
    /// Encrypt a file locally and upload the ciphertext
    Upload {
        file: PathBuf,
        /// Document id (default: random)
        #[arg(long)]
        id: Option<String>,
    },
    /// List documents visible to you
    List,
    /// Start analysis of a document
    Analyze { document_id: String },
    /// Show the result of an analysis you started
    Results { analysis_id: String },
    /// Query the audit log
    Audit(AuditArgs),
    /// Run the retention sweep
    Sweep {
        /// Evaluate retention as of this unix time
        #[arg(long)]
        now: Option<i64>,
    },
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub op: Option<Operation>,
    #[arg(long)]
    pub principal: Option<String>,
    #[arg(long)]
    pub resource: Option<String>,
    #[arg(long)]
    pub outcome: Option<Outcome>,
    /// Earliest timestamp (unix seconds, inclusive)
    #[arg(long)]
    pub from: Option<i64>,
    /// Latest timestamp (unix seconds, inclusive)
    #[arg(long)]
    pub to: Option<i64>,
    #[arg(long)]
    pub correlation_id: Option<String>,
}

impl AuditArgs {
    fn filter(&self) -> EventFilter {
        EventFilter {
            op: self.op,
            principal: self.principal.clone(),
            resource: self.resource.clone(),
            outcome: self.outcome,
            from: self.from.map(Timestamp),
            to: self.to.map(Timestamp),
            correlation_id: self.correlation_id.clone(),
        }
    }
}

type Connect<'a> = dyn Fn(&str) -> Box<dyn Transport> + 'a;
type Prompt<'a> = dyn Fn(&str) -> std::io::Result<String> + 'a;

/// Process-level effects a command may use, injectable for tests.
pub struct Runtime<'a> {
    pub connect: Box<Connect<'a>>,
    pub password: Box<Prompt<'a>>,
    pub config_dir: PathBuf,
}

impl Runtime<'static> {
    pub fn system() -> Self {
        Self {
            connect: Box::new(|url| Box::new(HttpTransport::new(url))),
            password: Box::new(|prompt| match std::env::var(PASSWORD_ENV) {
                Ok(p) => Ok(p),
                Err(_) => rpassword::prompt_password(prompt),
            }),
            config_dir: session::default_config_dir(),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, rt: &Runtime<'_>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{rendered}") } else { write!(out, "{rendered}") };
            return code;
        }
    };
    match execute(&cli, rt, out) {
        Ok(()) => exit::OK,
        Err(e) => {
            if cli.json {
                let _ = writeln!(out, "{}", serde_json::json!({"error": e.code(), "message": e.to_string()}));
            }
            let _ = writeln!(err, "lockbox: {e}");
            e.exit_code()
        }
    }
}

struct Paths {
    session_file: PathBuf,
    server: Option<String>,
}

fn resolve(cli: &Cli, rt: &Runtime<'_>) -> Result<Paths, ClientError> {
    let config = match &cli.config {
        Some(path) => ClientConfig::load(path)?,
        None => ClientConfig::default(),
    };
    Ok(Paths {
        session_file: config
            .session_file
            .unwrap_or_else(|| rt.config_dir.join("session.json")),
        server: cli.server.clone().or(config.server_url),
    })
}

fn require_session(path: &Path) -> Result<Session, ClientError> {
    session::load(path)?.ok_or(ClientError::NoSession)
}

fn execute(cli: &Cli, rt: &Runtime<'_>, out: &mut dyn Write) -> Result<(), ClientError> {
    let paths = resolve(cli, rt)?;
    match &cli.command {
        Command::Login { username } => {
            let url = paths.server.unwrap_or_else(|| DEFAULT_SERVER.to_owned());
            let password = (rt.password)(&format!("password for {username}: "))
                .map_err(|e| ClientError::Usage(format!("cannot read password: {e}")))?;
            let transport = (rt.connect)(&url);
            let mut client = Client::new(&*transport);
            let resp = client.login(username, &password)?;
            session::store(
                &paths.session_file,
                &Session {
                    server_url: url,
                    principal: resp.principal.clone(),
                    token: resp.token,
                    expires_at: resp.expires_at,
                },
            )?;
            let roles: Vec<String> = resp.roles.iter().map(|r| format!("{r:?}")).collect();
            emit(cli, out, &serde_json::json!({"principal": resp.principal, "roles": roles, "expires_at": resp.expires_at}), |o| {
                writeln!(o, "logged in as {} ({})", resp.principal, roles.join(", "))
            })
        }
        Command::Logout => {
            let removed = session::remove(&paths.session_file)?;
            emit(cli, out, &serde_json::json!({"logged_out": removed}), |o| {
                writeln!(o, "{}", if removed { "logged out" } else { "no session" })
            })
        }
        Command::Upload { file, id } => {
            let session = require_session(&paths.session_file)?;
            let bytes = std::fs::read(file).map_err(|source| ClientError::File {
                path: file.display().to_string(),
                source,
            })?;
            let document_id = id.clone().unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
            let transport = (rt.connect)(&paths.server.unwrap_or(session.server_url));
            let client = Client::new(&*transport).with_token(session.token);
            let mut plaintext = PlaintextBuffer::with_tracker(bytes, client.tracker());
            let uploaded = plaintext
                .expose()
                .map_err(|e| ClientError::Crypto(e.to_string()))
                .and_then(|p| client.upload(p, &document_id));
            plaintext.wipe();
            let document_id = uploaded?;
            emit(cli, out, &serde_json::json!({"document_id": document_id}), |o| writeln!(o, "{document_id}"))
        }
        Command::List => {
            let (transport, session) = connect(rt, &paths)?;
            let docs = Client::new(&*transport).with_token(session.token).list()?;
            emit(cli, out, &docs, |o| {
                let rows = docs
                    .iter()
                    .map(|d| {
                        vec![
                            d.document_id.clone(),
                            d.uploader.clone(),
                            d.created_at.to_string(),
                            d.size.to_string(),
                            format!("{}.v{}", d.kek_name, d.kek_version),
                        ]
                    })
                    .collect::<Vec<_>>();
                table(o, &["DOCUMENT", "UPLOADER", "CREATED", "BYTES", "KEK"], &rows)
            })
        }
        Command::Analyze { document_id } => {
            let (transport, session) = connect(rt, &paths)?;
            let resp = Client::new(&*transport).with_token(session.token).analyze(document_id)?;
            emit(cli, out, &resp, |o| {
                writeln!(o, "analysis {} of {}: {}", resp.analysis_id, resp.document_id, status_str(&resp.status))
            })
        }
        Command::Results { analysis_id } => {
            let (transport, session) = connect(rt, &paths)?;
            let result = Client::new(&*transport).with_token(session.token).result(analysis_id)?;
            emit(cli, out, &result, |o| {
                writeln!(
                    o,
                    "document {}: {} bytes, {} lines, {} distinct techniques",
                    result.document_id,
                    result.stats.byte_count,
                    result.stats.line_count,
                    result.stats.distinct_techniques
                )?;
                let rows = result
                    .findings
                    .iter()
                    .map(|f| vec![f.technique_id.clone(), f.evidence_offset.to_string(), printable(&f.evidence_snippet)])
                    .collect::<Vec<_>>();
                table(o, &["TECHNIQUE", "OFFSET", "EVIDENCE"], &rows)
            })
        }
        Command::Audit(args) => {
            let (transport, session) = connect(rt, &paths)?;
            let events = Client::new(&*transport).with_token(session.token).audit(&args.filter())?;
            emit(cli, out, &events, |o| {
                let rows = events
                    .iter()
                    .map(|e| {
                        vec![
                            e.seq.to_string(),
                            e.ts.to_string(),
                            e.principal.clone(),
                            e.op.as_str().to_owned(),
                            e.resource.clone(),
                            e.outcome.to_string(),
                            e.correlation_id().unwrap_or("-").to_owned(),
                        ]
                    })
                    .collect::<Vec<_>>();
                table(o, &["SEQ", "TS", "PRINCIPAL", "OP", "RESOURCE", "OUTCOME", "CORRELATION"], &rows)
            })
        }
        Command::Sweep { now } => {
            let (transport, session) = connect(rt, &paths)?;
            let report = Client::new(&*transport).with_token(session.token).sweep(now.map(Timestamp))?;
            emit(cli, out, &report, |o| {
                writeln!(o, "purged {} blob(s)", report.purged.len())?;
                for p in &report.purged {
                    writeln!(o, "  {}/{}", p.container, p.blob_id)?;
                }
                Ok(())
            })
        }
    }
}

fn connect(rt: &Runtime<'_>, paths: &Paths) -> Result<(Box<dyn Transport>, Session), ClientError> {
    let session = require_session(&paths.session_file)?;
    let url = paths.server.clone().unwrap_or_else(|| session.server_url.clone());
    Ok(((rt.connect)(&url), session))
}

fn status_str(s: &lockbox_core::server::AnalysisStatus) -> &'static str {
    match s {
        lockbox_core::server::AnalysisStatus::Complete => "complete",
        lockbox_core::server::AnalysisStatus::Failed => "failed",
    }
}

fn emit<T: Serialize>(
    cli: &Cli,
    out: &mut dyn Write,
    value: &T,
    human: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<(), ClientError> {
    let written = if cli.json {
        serde_json::to_writer_pretty(&mut *out, value)
            .map_err(std::io::Error::from)
            .and_then(|_| writeln!(out))
    } else {
        human(out)
    };
    written.map_err(|source| ClientError::File {
        path: "<stdout>".into(),
        source,
    })
}

fn printable(s: &str) -> String {
    s.chars().map(|c| if c.is_control() { ' ' } else { c }).collect()
}

fn table(out: &mut dyn Write, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |out: &mut dyn Write, cells: &mut dyn Iterator<Item = &str>| -> std::io::Result<()> {
        let parts: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        writeln!(out, "{}", parts.join("  ").trim_end())
    };
    line(out, &mut header.iter().copied())?;
    for row in rows {
        line(out, &mut row.iter().map(String::as_str))?;
    }
    Ok(())
}
