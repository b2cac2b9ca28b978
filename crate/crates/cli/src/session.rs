//! Client configuration and the cached login session.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lockbox_core::time::Timestamp;

use crate::client::ClientError;

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:7878";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    #[serde(default)]
    pub server_url: Option<String>,
    #[serde(default)]
    pub session_file: Option<PathBuf>,
}

impl ClientConfig {
    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let text = fs::read_to_string(path).map_err(|source| file_error(path, source))?;
        serde_json::from_str(&text).map_err(|e| ClientError::Usage(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub server_url: String,
    pub principal: String,
    pub token: String,
    pub expires_at: Timestamp,
}

/// `$LOCKBOX_CONFIG_DIR`, else `$XDG_CONFIG_HOME/lockbox`, else `~/.config/lockbox`.
pub fn default_config_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("LOCKBOX_CONFIG_DIR") {
        return dir.into();
    }
    if let Some(dir) = std::env::var_os("XDG_CONFIG_HOME").filter(|d| !d.is_empty()) {
        return PathBuf::from(dir).join("lockbox");
    }
    let home = std::env::var_os("HOME").unwrap_or_else(|| ".".into());
    PathBuf::from(home).join(".config").join("lockbox")
}

pub fn load(path: &Path) -> Result<Option<Session>, ClientError> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| ClientError::Usage(format!("corrupt session file {}: {e}", path.display()))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(file_error(path, source)),
    }
}

/// Writes the session readable by the owner only.
pub fn store(path: &Path, session: &Session) -> Result<(), ClientError> {
    let write = || -> io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("json.tmp");
        let _ = fs::remove_file(&tmp);
        let mut opts = fs::OpenOptions::new();
        opts.write(true).create_new(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        let mut f = opts.open(&tmp)?;
        f.write_all(&serde_json::to_vec_pretty(session).expect("session serializes"))?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|source| file_error(path, source))
}

pub fn remove(path: &Path) -> Result<bool, ClientError> {
    match fs::remove_file(path) {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
        Err(source) => Err(file_error(path, source)),
    }
}

fn file_error(path: &Path, source: io::Error) -> ClientError {
    ClientError::File {
        path: path.display().to_string(),
        source,
    }
}
