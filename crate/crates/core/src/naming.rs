//! Signed mutable names.
//!
//! A name is the hash of its owner's public key. The record it resolves to
//! points at a root CID and is replaced by publishing a higher sequence
//! number. Layout (178 bytes, big-endian):
//!
//! ```text
//! name_key:32 ‖ value:34 ‖ sequence:u64 ‖ validity:u64 ‖ public_key:32 ‖ signature:64
//! ```
//!
//! The signature covers the first 82 bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::cid::{sha256, Cid};
use crate::codec::{Reader, Writer};
use crate::dht::{NodeId, RecordValidator};
use crate::identity::{verify_signature, NodeIdentity};

pub const NAME_RECORD_LEN: usize = 178;
const SIGNED_LEN: usize = 82;
pub const DEFAULT_VALIDITY_SECS: u64 = 48 * 3600;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NameError {
    #[error("no record for this name")]
    NotFound,
    #[error("record expired at {0}")]
    Expired(u64),
    #[error("signature or key does not match")]
    BadSignature,
    #[error("malformed record: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameRecord {
    pub name_key: NodeId,
    pub value: Cid,
    pub sequence: u64,
    /// Expiry, unix seconds.
    pub validity: u64,
    pub public_key: [u8; 32],
    pub signature: [u8; 64],
}

fn signed_bytes(name_key: &NodeId, value: &Cid, sequence: u64, validity: u64) -> Vec<u8> {
    let mut w = Writer::with_capacity(SIGNED_LEN);
    w.bytes(name_key.as_bytes());
    w.cid(value);
    w.u64(sequence);
    w.u64(validity);
    w.into_inner()
}

impl NameRecord {
    pub fn sign(owner: &NodeIdentity, value: Cid, sequence: u64, validity: u64) -> Self {
        let name_key = owner.node_id();
        let signature = owner.sign(&signed_bytes(&name_key, &value, sequence, validity));
        Self {
            name_key,
            value,
            sequence,
            validity,
            public_key: owner.public_key(),
            signature,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = signed_bytes(&self.name_key, &self.value, self.sequence, self.validity);
        out.extend_from_slice(&self.public_key);
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, NameError> {
        let malformed = |e: crate::codec::DecodeError| NameError::Malformed(e.to_string());
        let mut r = Reader::new(bytes);
        let record = Self {
            name_key: NodeId(r.array().map_err(malformed)?),
            value: r.cid().map_err(malformed)?,
            sequence: r.u64().map_err(malformed)?,
            validity: r.u64().map_err(malformed)?,
            public_key: r.array().map_err(malformed)?,
            signature: r.array().map_err(malformed)?,
        };
        r.finish().map_err(malformed)?;
        Ok(record)
    }

    /// Key binding and signature check; expiry is separate.
    pub fn verify_signature(&self) -> Result<(), NameError> {
        if sha256(&self.public_key) != self.name_key.0 {
            return Err(NameError::BadSignature);
        }
        let msg = signed_bytes(&self.name_key, &self.value, self.sequence, self.validity);
        if !verify_signature(&self.public_key, &msg, &self.signature) {
            return Err(NameError::BadSignature);
        }
        Ok(())
    }

    pub fn verify(&self, now_secs: u64) -> Result<(), NameError> {
        self.verify_signature()?;
        if now_secs >= self.validity {
            return Err(NameError::Expired(self.validity));
        }
        Ok(())
    }
}

/// Picks the best record among raw values returned by peers: the highest
/// sequence that verifies. Reports `Expired`/`BadSignature` only when no
/// value is usable.
pub fn select_best(
    name_key: &NodeId,
    values: impl IntoIterator<Item = impl AsRef<[u8]>>,
    now_secs: u64,
) -> Result<NameRecord, NameError> {
    let mut best: Option<NameRecord> = None;
    let mut failure = NameError::NotFound;
    for raw in values {
        let record = match NameRecord::decode(raw.as_ref()) {
            Ok(r) if r.name_key == *name_key => r,
            Ok(_) => {
                failure = NameError::BadSignature;
                continue;
            }
            Err(e) => {
                if failure == NameError::NotFound {
                    failure = e;
                }
                continue;
            }
        };
        match record.verify(now_secs) {
            Ok(()) => {
                if best.as_ref().is_none_or(|b| record.sequence > b.sequence) {
                    best = Some(record);
                }
            }
            Err(e @ NameError::Expired(_)) => failure = e,
            Err(e) => {
                if !matches!(failure, NameError::Expired(_)) {
                    failure = e;
                }
            }
        }
    }
    best.ok_or(failure)
}

/// DHT-side gate: nodes only store records that decode, are bound to the
/// key they are stored under, carry a valid signature, and are unexpired.
#[derive(Debug, Default, Clone, Copy)]
pub struct NameRecordValidator;

impl RecordValidator for NameRecordValidator {
    fn validate(&self, key: &NodeId, value: &[u8], now_ms: u64) -> Result<u64, String> {
        let record = NameRecord::decode(value).map_err(|e| e.to_string())?;
        if record.name_key != *key {
            return Err("record stored under a foreign key".into());
        }
        record.verify(now_ms / 1000).map_err(|e| e.to_string())?;
        Ok(record.sequence)
    }
}

/// Local per-name sequence counters and the highest sequence ever resolved
/// per key (so resolution never moves backwards). Persisted as
/// `hex(key) sequence` lines when a path is set.
#[derive(Debug, Default)]
pub struct NameState {
    published: BTreeMap<NodeId, u64>,
    resolved: BTreeMap<NodeId, NameRecord>,
    path: Option<PathBuf>,
}

impl NameState {
    pub fn load(path: &Path) -> io::Result<Self> {
        let mut state = Self {
            path: Some(path.to_path_buf()),
            ..Self::default()
        };
        match fs::read_to_string(path) {
            Ok(text) => {
                for line in text.lines() {
                    let mut parts = line.split_whitespace();
                    if let (Some(k), Some(s)) = (parts.next(), parts.next()) {
                        if let (Some(k), Ok(s)) = (NodeId::from_hex(k), s.parse()) {
                            state.published.insert(k, s);
                        }
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        Ok(state)
    }

    /// Sequence to use for the next publish of `key`.
    pub fn next_sequence(&self, key: &NodeId) -> u64 {
        self.published.get(key).map_or(0, |s| s + 1)
    }

    pub fn record_published(&mut self, key: NodeId, sequence: u64) -> io::Result<()> {
        self.published.insert(key, sequence);
        if let Some(path) = &self.path {
            let text: String = self
                .published
                .iter()
                .map(|(k, s)| format!("{} {}\n", k.to_hex(), s))
                .collect();
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, text)?;
        }
        Ok(())
    }

    /// Applies the monotonic rule: a fresh result older than what this node
    /// already returned is replaced by the remembered record, as long as
    /// that one is still valid.
    pub fn monotonic(&mut self, fresh: NameRecord, now_secs: u64) -> NameRecord {
        match self.resolved.get(&fresh.name_key) {
            Some(prev) if prev.sequence > fresh.sequence && prev.verify(now_secs).is_ok() => {
                prev.clone()
            }
            _ => {
                self.resolved.insert(fresh.name_key, fresh.clone());
                fresh
            }
        }
    }
}
