use crate::cid::sha256;
use crate::clock::Clock;
use crate::codec::{Reader, Writer};

use super::{LedgerError, MetadataEntry};

/// Binary Merkle root: hash adjacent pairs, duplicating the last element of
/// any odd-length level (including a single-element list), until one hash
/// remains.
pub fn merkle_root(hashes: &[[u8; 32]]) -> Result<[u8; 32], LedgerError> {
    if hashes.is_empty() {
        return Err(LedgerError::EmptyList);
    }
    let mut level: Vec<[u8; 32]> = hashes.to_vec();
    loop {
        let next: Vec<[u8; 32]> = level
            .chunks(2)
            .map(|pair| {
                let right = pair.get(1).unwrap_or(&pair[0]);
                let mut buf = [0u8; 64];
                buf[..32].copy_from_slice(&pair[0]);
                buf[32..].copy_from_slice(right);
                sha256(&buf)
            })
            .collect();
        if next.len() == 1 {
            return Ok(next[0]);
        }
        level = next;
    }
}

/// Number of leading zero bits in `hash`.
pub fn leading_zero_bits(hash: &[u8; 32]) -> u32 {
    let mut bits = 0;
    for &b in hash {
        if b == 0 {
            bits += 8;
        } else {
            bits += b.leading_zeros();
            break;
        }
    }
    bits
}

pub const HEADER_LEN: usize = 80;

/// The hashed part of a block: `prev_hash ‖ merkle_root ‖ timestamp ‖ nonce`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHeader {
    pub prev_hash: [u8; 32],
    pub merkle_root: [u8; 32],
    pub timestamp: u64,
    pub nonce: u64,
}

impl BlockHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..32].copy_from_slice(&self.prev_hash);
        out[32..64].copy_from_slice(&self.merkle_root);
        out[64..72].copy_from_slice(&self.timestamp.to_be_bytes());
        out[72..].copy_from_slice(&self.nonce.to_be_bytes());
        out
    }

    pub fn hash(&self) -> [u8; 32] {
        sha256(&self.encode())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerBlock {
    pub header: BlockHeader,
    pub entries: Vec<MetadataEntry>,
}

impl LedgerBlock {
    pub fn hash(&self) -> [u8; 32] {
        self.header.hash()
    }

    pub fn computed_root(&self) -> Result<[u8; 32], LedgerError> {
        let hashes: Vec<[u8; 32]> = self.entries.iter().map(MetadataEntry::hash).collect();
        merkle_root(&hashes)
    }

    /// `header:80 ‖ count:u32 ‖ count × (len:u32 ‖ entry)`
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(HEADER_LEN + 4 + self.entries.len() * 128);
        w.bytes(&self.header.encode());
        w.u32(self.entries.len() as u32);
        for e in &self.entries {
            w.blob(&e.encode());
        }
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LedgerError> {
        let mut r = Reader::new(bytes);
        let header = BlockHeader {
            prev_hash: r.array()?,
            merkle_root: r.array()?,
            timestamp: r.u64()?,
            nonce: r.u64()?,
        };
        let count = r.count(4)?;
        let entries = (0..count)
            .map(|_| MetadataEntry::decode(r.blob()?))
            .collect::<Result<Vec<_>, _>>()?;
        r.finish()?;
        Ok(Self { header, entries })
    }
}

/// A mined block plus the number of hash attempts it took.
#[derive(Debug, Clone)]
pub struct Mined {
    pub block: LedgerBlock,
    pub attempts: u64,
}

/// Searches nonces upward from zero until the header hash has at least
/// `difficulty` leading zero bits.
pub fn mine_block(
    entries: Vec<MetadataEntry>,
    prev_hash: [u8; 32],
    difficulty: u32,
    clock: &dyn Clock,
) -> Result<Mined, LedgerError> {
    let hashes: Vec<[u8; 32]> = entries.iter().map(MetadataEntry::hash).collect();
    let merkle_root = merkle_root(&hashes)?;
    let mut header = BlockHeader {
        prev_hash,
        merkle_root,
        timestamp: clock.now_ms() / 1000,
        nonce: 0,
    };
    let mut attempts = 1;
    while leading_zero_bits(&header.hash()) < difficulty {
        header.nonce += 1;
        attempts += 1;
    }
    Ok(Mined {
        block: LedgerBlock { header, entries },
        attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cid::Cid;
    use crate::clock::ManualClock;

    fn h(tag: &[u8]) -> [u8; 32] {
        sha256(tag)
    }

    fn pair(a: &[u8; 32], b: &[u8; 32]) -> [u8; 32] {
        let mut v = a.to_vec();
        v.extend_from_slice(b);
        sha256(&v)
    }

    fn entry(i: u64) -> MetadataEntry {
        MetadataEntry {
            file_cid: Cid::of_bytes(&i.to_be_bytes()),
            created_at: 1000 + i,
            accessed_at: 2000 + i,
            size_bytes: i,
            file_type: "application/octet-stream".into(),
            author: "tester".into(),
            modified_cid: None,
        }
    }

    #[test]
    fn merkle_small_cases() {
        let (h1, h2, h3) = (h(b"1"), h(b"2"), h(b"3"));
        assert!(matches!(merkle_root(&[]), Err(LedgerError::EmptyList)));
        assert_eq!(merkle_root(&[h1]).unwrap(), pair(&h1, &h1));
        assert_eq!(merkle_root(&[h1, h2]).unwrap(), pair(&h1, &h2));
        assert_eq!(
            merkle_root(&[h1, h2, h3]).unwrap(),
            pair(&pair(&h1, &h2), &pair(&h3, &h3))
        );
        assert_eq!(
            hex::encode(merkle_root(&[h1, h2, h3]).unwrap()),
            "f981662b1dcd91b2569a56fce8c590b04bc062ee22d459e49bc507638c8099a2"
        );
    }

    #[test]
    fn merkle_is_order_sensitive() {
        let (h1, h2) = (h(b"1"), h(b"2"));
        assert_ne!(merkle_root(&[h1, h2]).unwrap(), merkle_root(&[h2, h1]).unwrap());
    }

    #[test]
    fn leading_zeros() {
        let mut x = [0xffu8; 32];
        assert_eq!(leading_zero_bits(&x), 0);
        x[0] = 0;
        x[1] = 0x10;
        assert_eq!(leading_zero_bits(&x), 11);
        assert_eq!(leading_zero_bits(&[0u8; 32]), 256);
    }

    #[test]
    fn difficulty_zero_takes_nonce_zero() {
        let clock = ManualClock::new(5_000);
        let mined = mine_block(vec![entry(1)], [0; 32], 0, &clock).unwrap();
        assert_eq!(mined.block.header.nonce, 0);
        assert_eq!(mined.attempts, 1);
        assert_eq!(mined.block.header.timestamp, 5);
    }

    #[test]
    fn mining_is_deterministic_and_meets_target() {
        let clock = ManualClock::new(1_700_000_000_000);
        let a = mine_block(vec![entry(1), entry(2)], [7; 32], 12, &clock).unwrap();
        let b = mine_block(vec![entry(1), entry(2)], [7; 32], 12, &clock).unwrap();
        assert_eq!(a.block, b.block);
        assert!(leading_zero_bits(&a.block.hash()) >= 12);
        assert_eq!(a.attempts, a.block.header.nonce + 1);
        assert_eq!(a.block.header.merkle_root, a.block.computed_root().unwrap());
    }

    #[test]
    fn block_encoding_round_trip() {
        let clock = ManualClock::new(0);
        let block = mine_block(vec![entry(1), entry(2), entry(3)], [1; 32], 4, &clock)
            .unwrap()
            .block;
        let bytes = block.encode();
        assert_eq!(&bytes[..HEADER_LEN], &block.header.encode());
        assert_eq!(LedgerBlock::decode(&bytes).unwrap(), block);
        assert!(LedgerBlock::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
