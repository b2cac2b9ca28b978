use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use lockbox_core::entropy::{EntropySource, OsEntropy};
use lockbox_core::identity::{Role, UserRecord};
use lockbox_core::server::{LockboxServer, MasterKeys, ServerBuilder, ServerConfig, TOKEN_KEY_ENV};
use lockbox_core::store::STORE_MASTER_KEY_ENV;
use lockbox_core::vault::VAULT_MASTER_KEY_ENV;
use lockbox_server::HttpServer;

#[derive(Parser)]
#[command(name = "lockboxd", version, about = "Lockbox document pipeline server")]
struct Cli {
    /// Log level: error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "info", env = "LOCKBOX_LOG")]
    log: tracing::Level,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API. Master keys come from the environment.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Add a user to a registry file, creating it if needed. The password is
    /// read from LOCKBOX_PASSWORD or prompted for.
    AddUser {
        #[arg(long)]
        registry: PathBuf,
        username: String,
        /// RedTeam, BlueTeam, ServiceBackend or Auditor; repeatable.
        #[arg(long = "role", required = true)]
        roles: Vec<Role>,
    },
    /// Print fresh master keys as shell exports.
    GenKeys,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(cli.log)
        .init();
    let result = match cli.command {
        Command::Serve { config, listen } => serve(&config, listen),
        Command::AddUser { registry, username, roles } => add_user(&registry, &username, roles),
        Command::GenKeys => gen_keys(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lockboxd: {e}");
            ExitCode::FAILURE
        }
    }
}

fn serve(config: &Path, listen: Option<String>) -> Result<(), String> {
    let cfg = ServerConfig::load(config).map_err(|e| e.to_string())?;
    let app = ServerBuilder::from_config(&cfg)
        .and_then(|b| Ok(b.master_keys(MasterKeys::from_env()?)))
        .and_then(|b| b.build())
        .map_err(|e| e.to_string())?;
    let app = Arc::new(app);
    let addr = listen.unwrap_or_else(|| cfg.listen.clone());
    let http = HttpServer::bind(&addr, app.clone()).map_err(|e| e.to_string())?;
    tracing::info!(url = %http.url(), kek_mode = ?app.kek_mode(), "listening");
    if let Some(secs) = cfg.sweep_interval_secs.filter(|s| *s > 0) {
        spawn_sweeper(app, Duration::from_secs(secs));
    }
    http.spawn(cfg.workers).join();
    Ok(())
}

fn spawn_sweeper(app: Arc<LockboxServer>, every: Duration) {
    std::thread::Builder::new()
        .name("lockbox-sweeper".into())
        .spawn(move || loop {
            std::thread::sleep(every);
            let report = app.scheduled_sweep();
            tracing::info!(purged = report.purged.len(), "scheduled retention sweep");
        })
        .expect("spawn sweeper");
}

fn read_password() -> Result<String, String> {
    if let Ok(p) = std::env::var("LOCKBOX_PASSWORD") {
        return Ok(p);
    }
    let first = rpassword::prompt_password("password: ").map_err(|e| e.to_string())?;
    let again = rpassword::prompt_password("again: ").map_err(|e| e.to_string())?;
    if first != again {
        return Err("passwords differ".into());
    }
    Ok(first)
}

fn add_user(registry: &Path, username: &str, roles: Vec<Role>) -> Result<(), String> {
    let mut records: Vec<UserRecord> = match std::fs::read_to_string(registry) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| format!("{}: {e}", registry.display()))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(format!("{}: {e}", registry.display())),
    };
    if records.iter().any(|r| r.username == username) {
        return Err(format!("user {username:?} already exists"));
    }
    let password = read_password()?;
    if password.is_empty() {
        return Err("empty password".into());
    }
    records.push(UserRecord::new(username, &password, roles, &OsEntropy).map_err(|e| e.to_string())?);
    let json = serde_json::to_string_pretty(&records).map_err(|e| e.to_string())?;
    std::fs::write(registry, json + "\n").map_err(|e| format!("{}: {e}", registry.display()))?;
    println!("added {username}");
    Ok(())
}

fn gen_keys() -> Result<(), String> {
    for name in [VAULT_MASTER_KEY_ENV, STORE_MASTER_KEY_ENV, TOKEN_KEY_ENV] {
        let mut key = [0u8; 32];
        OsEntropy.fill(&mut key).map_err(|e| e.to_string())?;
        let hex: String = key.iter().map(|b| format!("{b:02x}")).collect();
        println!("export {name}={hex}");
    }
    Ok(())
}
