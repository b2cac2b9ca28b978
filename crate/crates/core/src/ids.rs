//! Identifier validation.
//!
//! Document ids, key names and blob ids become file names under the data
//! root, so they are restricted to a conservative character set.

use thiserror::Error;

pub const MAX_ID_LEN: usize = 128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid identifier {0:?}: use 1-128 of [A-Za-z0-9._-], not starting with '.'")]
pub struct InvalidIdentifier(pub String);

pub fn validate(id: &str) -> Result<&str, InvalidIdentifier> {
    let ok = !id.is_empty()
        && id.len() <= MAX_ID_LEN
        && !id.starts_with('.')
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(id)
    } else {
        Err(InvalidIdentifier(id.chars().take(MAX_ID_LEN).collect()))
    }
}

/// A fresh random identifier (UUID v4, hyphenated).
pub fn fresh() -> String {
    uuid::Uuid::new_v4().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_plain_names() {
        for id in ["d1", "doc-kek", "a.b_c-9", &fresh()] {
            assert!(validate(id).is_ok(), "{id}");
        }
    }

    #[test]
    fn rejects_path_tricks() {
        for id in ["", ".", "..", ".hidden", "a/b", "a\\b", "é", "a b", &"x".repeat(129)] {
            assert!(validate(id).is_err(), "{id}");
        }
    }
}
