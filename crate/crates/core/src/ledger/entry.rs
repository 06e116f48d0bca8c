use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use super::LedgerError;
use crate::cid::{sha256, Cid};

pub const MAX_FILE_TYPE_LEN: usize = 64;
pub const MAX_AUTHOR_LEN: usize = 256;

/// One metadata row committed to the ledger.
///
/// Canonical encoding, big-endian:
///
/// ```text
/// file_cid:34 ‖ created_at:u64 ‖ accessed_at:u64 ‖ size_bytes:u64
/// ‖ type_len:u16 ‖ file_type ‖ author_len:u16 ‖ author
/// ‖ has_modified:u8 ‖ [modified_cid:34]
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataEntry {
    pub file_cid: Cid,
    pub created_at: u64,
    pub accessed_at: u64,
    pub size_bytes: u64,
    pub file_type: String,
    pub author: String,
    pub modified_cid: Option<Cid>,
}

impl MetadataEntry {
    pub fn validate(&self) -> Result<(), LedgerError> {
        if self.file_type.len() > MAX_FILE_TYPE_LEN {
            return Err(LedgerError::InvalidEntry(format!(
                "file type is {} bytes, limit {MAX_FILE_TYPE_LEN}",
                self.file_type.len()
            )));
        }
        if self.author.len() > MAX_AUTHOR_LEN {
            return Err(LedgerError::InvalidEntry(format!(
                "author is {} bytes, limit {MAX_AUTHOR_LEN}",
                self.author.len()
            )));
        }
        if self.modified_cid == Some(self.file_cid) {
            return Err(LedgerError::InvalidEntry(
                "modified CID equals file CID".into(),
            ));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&self.file_cid.to_binary());
        w.u64(self.created_at);
        w.u64(self.accessed_at);
        w.u64(self.size_bytes);
        w.short_str(&self.file_type);
        w.short_str(&self.author);
        match &self.modified_cid {
            Some(cid) => {
                w.u8(1);
                w.bytes(&cid.to_binary());
            }
            None => w.u8(0),
        }
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LedgerError> {
        let mut r = Reader::new(bytes);
        let entry = Self {
            file_cid: r.cid()?,
            created_at: r.u64()?,
            accessed_at: r.u64()?,
            size_bytes: r.u64()?,
            file_type: r.short_str()?,
            author: r.short_str()?,
            modified_cid: match r.u8()? {
                0 => None,
                1 => Some(r.cid()?),
                other => {
                    return Err(LedgerError::Malformed(format!(
                        "modified flag {other}"
                    )))
                }
            },
        };
        r.finish()?;
        entry.validate()?;
        Ok(entry)
    }

    /// SHA-256 of the canonical encoding.
    pub fn hash(&self) -> [u8; 32] {
        sha256(&self.encode())
    }

    /// Whether this row records a modification of `file_cid`.
    pub fn is_modification(&self) -> bool {
        self.modified_cid.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> MetadataEntry {
        MetadataEntry {
            file_cid: Cid::of_bytes(b"file"),
            created_at: 1_528_761_600,
            accessed_at: 1_528_980_300,
            size_bytes: 1024,
            file_type: "text/plain".into(),
            author: "alice".into(),
            modified_cid: Some(Cid::of_bytes(b"file v2")),
        }
    }

    /// Hand-assembled byte layout for `sample()`.
    fn sample_layout() -> Vec<u8> {
        let mut v = vec![0x12, 0x20];
        v.extend_from_slice(&sha256(b"file"));
        v.extend_from_slice(&[0, 0, 0, 0, 0x5b, 0x1f, 0x0d, 0x00]); // 1528761600
        v.extend_from_slice(&[0, 0, 0, 0, 0x5b, 0x22, 0x63, 0x4c]); // 1528980300
        v.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0x04, 0x00]);
        v.extend_from_slice(&[0, 10]);
        v.extend_from_slice(b"text/plain");
        v.extend_from_slice(&[0, 5]);
        v.extend_from_slice(b"alice");
        v.push(1);
        v.extend_from_slice(&[0x12, 0x20]);
        v.extend_from_slice(&sha256(b"file v2"));
        v
    }

    #[test]
    fn encoding_golden_vector() {
        let layout = sample_layout();
        assert_eq!(sample().encode(), layout);
        assert_eq!(sample().hash(), sha256(&layout));
        assert_eq!(
            hex::encode(sample().hash()),
            "d396b409fc42197de32a075ec03fc32cf44f3b0bf828b1a33aa489ed7c557d4a"
        );
    }

    #[test]
    fn round_trip() {
        let e = sample();
        assert_eq!(MetadataEntry::decode(&e.encode()).unwrap(), e);
        let plain = MetadataEntry {
            modified_cid: None,
            ..sample()
        };
        assert_eq!(MetadataEntry::decode(&plain.encode()).unwrap(), plain);
    }

    #[test]
    fn hash_is_deterministic_and_field_sensitive() {
        assert_eq!(sample().hash(), sample().hash());
        let mut e = sample();
        e.accessed_at += 1;
        assert_ne!(e.hash(), sample().hash());
    }

    #[test]
    fn rejects_invalid() {
        let mut e = sample();
        e.modified_cid = Some(e.file_cid);
        assert!(e.validate().is_err());
        let mut e = sample();
        e.file_type = "x".repeat(65);
        assert!(e.validate().is_err());
        let mut bytes = sample().encode();
        bytes.push(0);
        assert!(MetadataEntry::decode(&bytes).is_err());
    }
}
