//! Kademlia-style distributed hash table.
//!
//! Node ids and keys share one 256-bit keyspace with the XOR metric. A CID's
//! coordinate in that space is its raw 32-byte digest.

mod lookup;
mod records;
mod routing;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cid::{sha256, Cid};

pub use lookup::{iterative_lookup, LookupOutcome, QueryReply};
pub use records::{
    ProviderRecord, ProviderStore, RecordError, RecordStore, RecordValidator, MAX_RECORD_LEN,
};
pub use routing::{InsertOutcome, RoutingTable};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DhtError {
    #[error("routing table is empty")]
    NoPeers,
    #[error("record value is {0} bytes, limit is 4096")]
    ValueTooLarge(usize),
    #[error("no record found")]
    NotFound,
    #[error("all queried peers failed: {0}")]
    Transport(String),
}

/// A point in the 256-bit keyspace: a node id or a lookup key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub [u8; 32]);

impl NodeId {
    pub fn from_public_key(public_key: &[u8]) -> Self {
        Self(sha256(public_key))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn distance(&self, other: &NodeId) -> Distance {
        let mut d = [0u8; 32];
        for (i, byte) in d.iter_mut().enumerate() {
            *byte = self.0[i] ^ other.0[i];
        }
        Distance(d)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut id = [0u8; 32];
        hex::decode_to_slice(s, &mut id).ok()?;
        Some(Self(id))
    }
}

impl From<&Cid> for NodeId {
    fn from(cid: &Cid) -> Self {
        NodeId(*cid.digest())
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// XOR distance, ordered as a big-endian unsigned integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Distance(pub [u8; 32]);

impl Distance {
    pub const ZERO: Distance = Distance([0u8; 32]);

    /// Index of the highest set bit (255 = most significant), `None` for zero.
    pub fn highest_bit(&self) -> Option<usize> {
        let leading: usize = self
            .0
            .iter()
            .position(|&b| b != 0)
            .map(|i| i * 8 + self.0[i].leading_zeros() as usize)?;
        Some(255 - leading)
    }
}

/// A peer as seen by the routing layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Contact {
    pub id: NodeId,
    pub addr: String,
}

impl Contact {
    pub fn new(id: NodeId, addr: impl Into<String>) -> Self {
        Self {
            id,
            addr: addr.into(),
        }
    }
}

/// DHT tuning knobs. Durations are milliseconds of (possibly virtual) time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DhtConfig {
    pub k: usize,
    pub alpha: usize,
    pub record_ttl_ms: u64,
    /// `None` disables republishing.
    pub republish_ms: Option<u64>,
}

impl Default for DhtConfig {
    fn default() -> Self {
        Self {
            k: 20,
            alpha: 3,
            record_ttl_ms: 24 * 3600 * 1000,
            republish_ms: Some(12 * 3600 * 1000),
        }
    }
}

/// The `count` entries of `ids` closest to `target`, nearest first.
pub fn closest_by_distance<'a, I>(target: &NodeId, ids: I, count: usize) -> Vec<NodeId>
where
    I: IntoIterator<Item = &'a NodeId>,
{
    let mut v: Vec<NodeId> = ids.into_iter().copied().collect();
    v.sort_by_key(|id| id.distance(target));
    v.dedup();
    v.truncate(count);
    v
}
