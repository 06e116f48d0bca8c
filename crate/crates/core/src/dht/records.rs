use std::collections::BTreeMap;

use bytes::Bytes;
use thiserror::Error;

use super::{Contact, NodeId};

/// Upper bound on signed record values.
pub const MAX_RECORD_LEN: usize = 4096;

/// A node announcing it can serve the content at `key`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderRecord {
    pub key: NodeId,
    pub provider: Contact,
    /// Milliseconds since the epoch (virtual in the simulator).
    pub expires_at: u64,
}

/// Provider records held on behalf of the network.
#[derive(Debug, Default)]
pub struct ProviderStore {
    records: BTreeMap<NodeId, BTreeMap<NodeId, ProviderRecord>>,
}

impl ProviderStore {
    pub fn add(&mut self, record: ProviderRecord) {
        self.records
            .entry(record.key)
            .or_default()
            .insert(record.provider.id, record);
    }

    /// Unexpired providers for `key`.
    pub fn get(&self, key: &NodeId, now: u64) -> Vec<ProviderRecord> {
        self.records
            .get(key)
            .map(|m| m.values().filter(|r| r.expires_at > now).cloned().collect())
            .unwrap_or_default()
    }

    pub fn purge_expired(&mut self, now: u64) {
        for m in self.records.values_mut() {
            m.retain(|_, r| r.expires_at > now);
        }
        self.records.retain(|_, m| !m.is_empty());
    }

    pub fn keys(&self) -> impl Iterator<Item = &NodeId> {
        self.records.keys()
    }

    pub fn holds(&self, key: &NodeId, provider: &NodeId) -> bool {
        self.records.get(key).is_some_and(|m| m.contains_key(provider))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("record value is {0} bytes, limit is {MAX_RECORD_LEN}")]
    ValueTooLarge(usize),
    #[error("record rejected: {0}")]
    Invalid(String),
    #[error("record sequence {offered} is not newer than stored {stored}")]
    Stale { offered: u64, stored: u64 },
}

/// Checks a record value before a node will store or return it. Returns the
/// record's sequence number.
pub trait RecordValidator {
    fn validate(&self, key: &NodeId, value: &[u8], now_ms: u64) -> Result<u64, String>;
}

#[derive(Debug, Clone)]
struct Stored {
    value: Bytes,
    sequence: u64,
}

/// Signed mutable records, highest sequence wins.
#[derive(Debug, Default)]
pub struct RecordStore {
    records: BTreeMap<NodeId, Stored>,
}

impl RecordStore {
    pub fn put(
        &mut self,
        key: NodeId,
        value: Bytes,
        validator: &dyn RecordValidator,
        now_ms: u64,
    ) -> Result<(), RecordError> {
        if value.len() > MAX_RECORD_LEN {
            return Err(RecordError::ValueTooLarge(value.len()));
        }
        let sequence = validator
            .validate(&key, &value, now_ms)
            .map_err(RecordError::Invalid)?;
        if let Some(existing) = self.records.get(&key) {
            if existing.sequence > sequence {
                return Err(RecordError::Stale {
                    offered: sequence,
                    stored: existing.sequence,
                });
            }
        }
        self.records.insert(key, Stored { value, sequence });
        Ok(())
    }

    pub fn get(&self, key: &NodeId) -> Option<(Bytes, u64)> {
        self.records
            .get(key)
            .map(|s| (s.value.clone(), s.sequence))
    }

    pub fn keys(&self) -> impl Iterator<Item = &NodeId> {
        self.records.keys()
    }
}
