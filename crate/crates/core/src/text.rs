//! Text normalization and content digests.
//!
//! Every id in a dataset is derived from content, so normalization has to be
//! stable: Unicode NFC, whitespace runs collapsed to one space, trimmed.

use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

/// NFC, collapse internal whitespace, trim.
pub fn normalize_text(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Comparison key used for keyword disjointness and label matching.
pub fn fold_key(s: &str) -> String {
    normalize_text(s).to_lowercase()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest over a sequence of fields. Each field is length-prefixed so that
/// `("ab", "c")` and `("a", "bc")` never collide.
#[derive(Clone)]
pub struct FieldHasher {
    inner: Sha256,
}

impl FieldHasher {
    pub fn new(domain: &str) -> Self {
        let mut h = Self {
            inner: Sha256::new(),
        };
        h.push(domain);
        h
    }

    pub fn push(&mut self, field: &str) -> &mut Self {
        self.push_bytes(field.as_bytes())
    }

    pub fn push_bytes(&mut self, field: &[u8]) -> &mut Self {
        self.inner.update((field.len() as u64).to_le_bytes());
        self.inner.update(field);
        self
    }

    pub fn field(mut self, field: &str) -> Self {
        self.push(field);
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.inner.finalize())
    }
}
