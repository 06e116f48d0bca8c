//! The metadata blockchain.
//!
//! Each block commits to its entries through a binary Merkle root over entry
//! hashes, links to its predecessor's header hash, and carries a
//! proof-of-work nonce. One writer per deployment mines; every node keeps and
//! validates a full copy.

mod block;
mod chain;
mod entry;
mod pool;

use std::io;

use chrono::DateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cid::Cid;
use crate::codec::DecodeError;

pub use block::{leading_zero_bits, merkle_root, mine_block, BlockHeader, LedgerBlock, Mined, HEADER_LEN};
pub use chain::{check_block, validate_blocks, Chain, ChainFile, EntryLocation, Violation, ViolationKind};
pub use entry::{MetadataEntry, MAX_AUTHOR_LEN, MAX_FILE_TYPE_LEN};
pub use pool::{LedgerWriter, Submitted, DEFAULT_DIFFICULTY, DEFAULT_MAX_ENTRIES};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("Merkle root of an empty list")]
    EmptyList,
    #[error("an entry for the same file and access time is already pending")]
    DuplicatePending,
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
    #[error("malformed ledger data: {0}")]
    Malformed(String),
    #[error("chain invalid: {0}")]
    Invalid(Violation),
    #[error("ledger I/O failure: {0}")]
    Io(#[from] io::Error),
}

impl From<DecodeError> for LedgerError {
    fn from(e: DecodeError) -> Self {
        LedgerError::Malformed(e.to_string())
    }
}

/// The most recent record for `cid` by access time (ties: later height).
pub fn latest_by_access(records: &[(u64, MetadataEntry)]) -> Option<&(u64, MetadataEntry)> {
    records
        .iter()
        .max_by_key(|(h, e)| (e.accessed_at, *h))
}

/// One line of `ledger export`. Dates are rendered DD/MM/YY and times as
/// 12-hour clock, both in UTC.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRow {
    pub height: u64,
    pub created: String,
    pub cid: Cid,
    pub accessed_date: String,
    pub accessed_time: String,
    pub modified_cid: Option<Cid>,
    pub size_bytes: u64,
    pub file_type: String,
    pub author: String,
}

impl ExportRow {
    pub fn new(height: u64, e: &MetadataEntry) -> Self {
        Self {
            height,
            created: format_date(e.created_at),
            cid: e.file_cid,
            accessed_date: format_date(e.accessed_at),
            accessed_time: format_time(e.accessed_at),
            modified_cid: e.modified_cid,
            size_bytes: e.size_bytes,
            file_type: e.file_type.clone(),
            author: e.author.clone(),
        }
    }
}

pub fn export_rows(chain: &Chain) -> Vec<ExportRow> {
    chain.entries().map(|(h, e)| ExportRow::new(h, e)).collect()
}

fn format_date(secs: u64) -> String {
    DateTime::from_timestamp(secs as i64, 0)
        .map(|t| t.format("%d/%m/%y").to_string())
        .unwrap_or_default()
}

fn format_time(secs: u64) -> String {
    DateTime::from_timestamp(secs as i64, 0)
        .map(|t| t.format("%-I:%M %p").to_string())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use proptest::prelude::*;

    fn entry(i: u64) -> MetadataEntry {
        MetadataEntry {
            file_cid: Cid::of_bytes(&i.to_be_bytes()),
            created_at: 1_528_761_600 + i,
            accessed_at: 1_528_980_300 + i,
            size_bytes: 100 + i,
            file_type: "text/plain".into(),
            author: "author".into(),
            modified_cid: None,
        }
    }

    fn build_chain(blocks: usize, per_block: usize, difficulty: u32) -> Chain {
        let clock = ManualClock::new(1_600_000_000_000);
        let mut w = LedgerWriter::new(Chain::new(), per_block, difficulty);
        let mut i = 0;
        for _ in 0..blocks {
            for _ in 0..per_block {
                w.submit(entry(i), &clock).unwrap();
                i += 1;
            }
            clock.advance(1000);
        }
        w.chain().clone()
    }

    #[test]
    fn fresh_chain_validates() {
        let chain = build_chain(5, 2, 8);
        assert_eq!(chain.len(), 5);
        assert_eq!(chain.validate(8), Ok(()));
        assert_eq!(Chain::new().validate(8), Ok(()));
    }

    #[test]
    fn entry_tamper_breaks_root() {
        let mut chain = build_chain(5, 2, 8);
        chain.tamper(|b| b[3].entries[0].size_bytes += 1);
        assert_eq!(
            chain.validate(8),
            Err(Violation { height: 3, kind: ViolationKind::BadRoot })
        );
    }

    #[test]
    fn repaired_root_still_detected() {
        let difficulty = 8;
        let mut chain = build_chain(5, 2, difficulty);
        // Repair 1: recompute the root only. Header hash changes, so either
        // its PoW fails or the next block's link does.
        chain.tamper(|b| {
            b[3].entries[1].author = "mallory".into();
            b[3].header.merkle_root = b[3].computed_root().unwrap();
        });
        let v = chain.validate(difficulty).unwrap_err();
        assert!(
            v == Violation { height: 3, kind: ViolationKind::BadPow }
                || v == Violation { height: 4, kind: ViolationKind::BadLink },
            "{v:?}"
        );
        // Repair 2: also re-mine block 3. Block 4's link must break.
        chain.tamper(|b| {
            let mut header = b[3].header;
            header.nonce = 0;
            while leading_zero_bits(&header.hash()) < difficulty {
                header.nonce += 1;
            }
            b[3].header = header;
        });
        assert_eq!(
            chain.validate(difficulty),
            Err(Violation { height: 4, kind: ViolationKind::BadLink })
        );
    }

    #[test]
    fn genesis_pow_and_timestamp_violations() {
        let chain = build_chain(3, 1, 8);
        let mut c = chain.clone();
        c.tamper(|b| b[0].header.prev_hash = [1; 32]);
        assert_eq!(c.validate(8).unwrap_err().kind, ViolationKind::BadGenesis);

        assert_eq!(
            chain.validate(200).unwrap_err(),
            Violation { height: 0, kind: ViolationKind::BadPow }
        );

        // A backdated block, honestly re-mined and re-linked.
        let clock = ManualClock::new(1_000);
        let blocks = chain.blocks().to_vec();
        let prev = blocks[1].hash();
        let mined = mine_block(blocks[2].entries.clone(), prev, 8, &clock).unwrap();
        let mut c = Chain::from_blocks(blocks[..2].to_vec());
        assert_eq!(
            c.append(mined.block, 8),
            Err(Violation { height: 2, kind: ViolationKind::BadTimestamp })
        );
    }

    #[test]
    fn pool_batches_and_flushes() {
        let clock = ManualClock::new(0);
        let mut w = LedgerWriter::new(Chain::new(), 4, 4);
        for i in 0..3 {
            assert_eq!(w.submit(entry(i), &clock).unwrap(), Submitted::Pending { slot: i as usize });
        }
        assert!(matches!(w.submit(entry(0), &clock), Err(LedgerError::DuplicatePending)));
        assert_eq!(w.submit(entry(3), &clock).unwrap(), Submitted::Committed { height: 0 });
        let block = &w.chain().blocks()[0];
        assert_eq!(block.entries, (0..4).map(entry).collect::<Vec<_>>());

        w.submit(entry(9), &clock).unwrap();
        assert_eq!(w.flush(&clock).unwrap(), Some(1));
        assert_eq!(w.flush(&clock).unwrap(), None);
        assert_eq!(w.chain().lookup(&entry(9).file_cid).len(), 1);
    }

    #[test]
    fn repeated_access_and_modification_lookup() {
        let clock = ManualClock::new(0);
        let mut w = LedgerWriter::new(Chain::new(), 8, 4);
        let first = entry(1);
        let mut again = entry(1);
        again.accessed_at += 3600;
        let mut modified = entry(1);
        modified.accessed_at += 7200;
        modified.modified_cid = Some(Cid::of_bytes(b"v2"));
        w.submit(first.clone(), &clock).unwrap();
        w.flush(&clock).unwrap();
        w.submit(again.clone(), &clock).unwrap();
        w.submit(modified.clone(), &clock).unwrap();
        w.flush(&clock).unwrap();

        let found = w.chain().lookup(&first.file_cid);
        assert_eq!(found, vec![(0, first), (1, again), (1, modified.clone())]);
        assert_eq!(latest_by_access(&found).unwrap().1, modified);

        let by_new = w.chain().lookup(&Cid::of_bytes(b"v2"));
        assert_eq!(by_new.len(), 1);
        assert!(by_new[0].1.is_modification());
        assert!(w.chain().lookup(&Cid::of_bytes(b"absent")).is_empty());
    }

    #[test]
    fn chain_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let file = ChainFile::new(dir.path().join("chain.bin"));
        assert!(file.load().unwrap().is_empty());
        let chain = build_chain(3, 2, 4);
        for b in chain.blocks() {
            file.append(b).unwrap();
        }
        assert_eq!(file.load().unwrap(), chain.blocks());
        file.rewrite(&chain.blocks()[..1]).unwrap();
        assert_eq!(file.load().unwrap().len(), 1);
    }

    #[test]
    fn export_formats_dates() {
        let e = MetadataEntry {
            created_at: 1_528_761_600, // 12/06/18 00:00 UTC
            accessed_at: 1_528_980_300, // 14/06/18 12:45 UTC
            ..entry(0)
        };
        let row = ExportRow::new(0, &e);
        assert_eq!(row.created, "12/06/18");
        assert_eq!(row.accessed_date, "14/06/18");
        assert_eq!(row.accessed_time, "12:45 PM");
        let json = serde_json::to_value(&row).unwrap();
        for key in ["created", "cid", "accessed_date", "accessed_time", "modified_cid"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    /// Mean hash attempts at difficulty `d` sit in [2^(d-1), 2^(d+1)].
    #[test]
    fn pow_attempt_statistics() {
        for d in [8u32, 12] {
            let clock = ManualClock::new(1_700_000_000_000);
            let runs = 50;
            let total: u64 = (0..runs)
                .map(|i| mine_block(vec![entry(i)], [0; 32], d, &clock).unwrap().attempts)
                .sum();
            let mean = total as f64 / runs as f64;
            let target = 2f64.powi(d as i32);
            assert!(mean >= target / 2.0 && mean <= target * 2.0, "d={d} mean={mean}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn index_matches_linear_scan(blocks in 1usize..100, per_block in 1usize..4, seed in any::<u64>()) {
            let clock = ManualClock::new(0);
            let mut w = LedgerWriter::new(Chain::new(), per_block, 0);
            let pool: Vec<Cid> = (0..20u64).map(|i| Cid::of_bytes(&(i ^ seed).to_be_bytes())).collect();
            for n in 0..(blocks * per_block) as u64 {
                let mut e = entry(n);
                e.file_cid = pool[(n.wrapping_mul(7) ^ seed) as usize % 20];
                if n.is_multiple_of(3) {
                    let m = pool[(n.wrapping_mul(13) ^ seed.rotate_left(5)) as usize % 20];
                    if m != e.file_cid { e.modified_cid = Some(m); }
                }
                w.submit(e, &clock).unwrap();
            }
            w.flush(&clock).unwrap();
            for cid in &pool {
                let scan: Vec<(u64, MetadataEntry)> = w.chain().blocks().iter().enumerate()
                    .flat_map(|(h, b)| b.entries.iter().map(move |e| (h as u64, e.clone())))
                    .filter(|(_, e)| e.file_cid == *cid || e.modified_cid == Some(*cid))
                    .collect();
                prop_assert_eq!(w.chain().lookup(cid), scan);
            }
        }

        #[test]
        fn permuting_entries_changes_root(a in any::<[u8; 32]>(), b in any::<[u8; 32]>(), c in any::<[u8; 32]>()) {
            prop_assume!(a != b);
            prop_assert_ne!(merkle_root(&[a, b, c]).unwrap(), merkle_root(&[b, a, c]).unwrap());
        }
    }
}
