//! Content identifiers.
//!
//! A [`Cid`] is a SHA-256 digest framed as a multihash (`0x12 0x20 ‖ digest`)
//! and rendered as base58btc text. Because the two-byte prefix is fixed, every
//! rendered identifier starts with `Qm`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Multihash code for SHA2-256.
pub const SHA2_256_CODE: u8 = 0x12;
/// Digest length in bytes.
pub const DIGEST_LEN: usize = 32;
/// Length of the binary (multihash framed) form.
pub const CID_BINARY_LEN: usize = 2 + DIGEST_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CidError {
    #[error("invalid base58 text: {0}")]
    InvalidBase58(String),
    #[error("decoded identifier has {0} bytes, expected 34")]
    WrongLength(usize),
    #[error("unsupported multihash prefix {0:#04x} {1:#04x}")]
    WrongCodec(u8, u8),
}

/// SHA-256 helper used across the crate.
pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// A content identifier. Ordering and equality are by digest bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cid {
    digest: [u8; DIGEST_LEN],
}

impl Cid {
    /// Identifier of `data`.
    pub fn of_bytes(data: &[u8]) -> Self {
        Self {
            digest: sha256(data),
        }
    }

    pub fn from_digest(digest: [u8; DIGEST_LEN]) -> Self {
        Self { digest }
    }

    pub fn digest(&self) -> &[u8; DIGEST_LEN] {
        &self.digest
    }

    /// The 34-byte multihash form used on the wire and in ledger encodings.
    pub fn to_binary(&self) -> [u8; CID_BINARY_LEN] {
        let mut out = [0u8; CID_BINARY_LEN];
        out[0] = SHA2_256_CODE;
        out[1] = DIGEST_LEN as u8;
        out[2..].copy_from_slice(&self.digest);
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self, CidError> {
        if bytes.len() != CID_BINARY_LEN {
            return Err(CidError::WrongLength(bytes.len()));
        }
        if bytes[0] != SHA2_256_CODE || bytes[1] != DIGEST_LEN as u8 {
            return Err(CidError::WrongCodec(bytes[0], bytes[1]));
        }
        let mut digest = [0u8; DIGEST_LEN];
        digest.copy_from_slice(&bytes[2..]);
        Ok(Self { digest })
    }

    pub fn to_text(&self) -> String {
        bs58::encode(self.to_binary()).into_string()
    }

    pub fn from_text(s: &str) -> Result<Self, CidError> {
        let bytes = bs58::decode(s)
            .into_vec()
            .map_err(|e| CidError::InvalidBase58(e.to_string()))?;
        Self::from_binary(&bytes)
    }

    /// Whether `bytes` hash to this identifier.
    pub fn matches(&self, bytes: &[u8]) -> bool {
        sha256(bytes) == self.digest
    }
}

impl fmt::Display for Cid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl fmt::Debug for Cid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Cid({})", self.to_text())
    }
}

impl FromStr for Cid {
    type Err = CidError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_text(s)
    }
}

impl Serialize for Cid {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_text())
    }
}

impl<'de> Deserialize<'de> for Cid {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Cid::from_text(&s).map_err(serde::de::Error::custom)
    }
}
