//! Byte-level scans of persisted state for material that must never land
//! there: plaintext fragments, sentinels, private key components.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::par::{self, Mode};

/// A file containing a forbidden byte sequence, with the first match offset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hit {
    pub path: PathBuf,
    pub offset: usize,
}

/// Regular files under `root`, recursively, in sorted order.
pub fn files_under(root: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let ty = entry.file_type()?;
            if ty.is_dir() {
                stack.push(entry.path());
            } else if ty.is_file() {
                out.push(entry.path());
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    if needle.is_empty() {
        return Some(0);
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Offset in `haystack` of the first `w`-byte window that also occurs in
/// `source`.
pub fn shared_window(haystack: &[u8], source: &[u8], w: usize) -> Option<usize> {
    assert!(w > 0, "window must be non-empty");
    if haystack.len() < w || source.len() < w {
        return None;
    }
    let windows: HashSet<&[u8]> = source.windows(w).collect();
    haystack.windows(w).position(|win| windows.contains(win))
}

/// Files under each root containing any of `patterns` verbatim.
pub fn scan_for_patterns(roots: &[&Path], patterns: &[&[u8]], mode: Mode) -> io::Result<Vec<Hit>> {
    let files = collect(roots)?;
    let hits = par::map(mode, &files, |path| -> io::Result<Option<Hit>> {
        let bytes = fs::read(path)?;
        Ok(patterns
            .iter()
            .filter_map(|p| find(&bytes, p))
            .min()
            .map(|offset| Hit {
                path: path.clone(),
                offset,
            }))
    });
    hits.into_iter().filter_map(Result::transpose).collect()
}

/// Files under each root sharing any `w`-byte window with `source`.
pub fn scan_for_windows(roots: &[&Path], source: &[u8], w: usize, mode: Mode) -> io::Result<Vec<Hit>> {
    let files = collect(roots)?;
    let windows: HashSet<&[u8]> = if source.len() >= w { source.windows(w).collect() } else { HashSet::new() };
    let hits = par::map(mode, &files, |path| -> io::Result<Option<Hit>> {
        let bytes = fs::read(path)?;
        if bytes.len() < w {
            return Ok(None);
        }
        Ok(bytes
            .windows(w)
            .position(|win| windows.contains(win))
            .map(|offset| Hit {
                path: path.clone(),
                offset,
            }))
    });
    hits.into_iter().filter_map(Result::transpose).collect()
}

fn collect(roots: &[&Path]) -> io::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for root in roots {
        if root.is_file() {
            files.push(root.to_path_buf());
        } else if root.is_dir() {
            files.extend(files_under(root)?);
        }
    }
    Ok(files)
}
