use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::block::{leading_zero_bits, LedgerBlock};
use super::{LedgerError, MetadataEntry};
use crate::cid::Cid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    BadGenesis,
    BadLink,
    BadRoot,
    BadPow,
    BadTimestamp,
}

/// The first rule a chain breaks, and where.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub height: u64,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at height {}", self.kind, self.height)
    }
}

/// Checks `block` as the successor of `prev` (or as genesis when `prev` is
/// `None`).
pub fn check_block(
    block: &LedgerBlock,
    height: u64,
    prev: Option<&LedgerBlock>,
    difficulty: u32,
) -> Result<(), Violation> {
    let fail = |kind| Err(Violation { height, kind });
    match prev {
        None if block.header.prev_hash != [0u8; 32] => return fail(ViolationKind::BadGenesis),
        Some(p) if block.header.prev_hash != p.hash() => return fail(ViolationKind::BadLink),
        _ => {}
    }
    match block.computed_root() {
        Ok(root) if root == block.header.merkle_root => {}
        _ => return fail(ViolationKind::BadRoot),
    }
    if leading_zero_bits(&block.hash()) < difficulty {
        return fail(ViolationKind::BadPow);
    }
    if prev.is_some_and(|p| block.header.timestamp < p.header.timestamp) {
        return fail(ViolationKind::BadTimestamp);
    }
    Ok(())
}

/// Validates a whole sequence of blocks from genesis.
pub fn validate_blocks(blocks: &[LedgerBlock], difficulty: u32) -> Result<(), Violation> {
    let mut prev = None;
    for (height, block) in blocks.iter().enumerate() {
        check_block(block, height as u64, prev, difficulty)?;
        prev = Some(block);
    }
    Ok(())
}

/// Where a CID shows up in the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct EntryLocation {
    pub height: u64,
    pub index: usize,
}

/// The replicated ledger with a CID index over `file_cid` and
/// `modified_cid`.
#[derive(Debug, Clone, Default)]
pub struct Chain {
    blocks: Vec<LedgerBlock>,
    index: BTreeMap<Cid, Vec<EntryLocation>>,
}

impl Chain {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a chain without validating it; use [`Chain::validate`].
    pub fn from_blocks(blocks: Vec<LedgerBlock>) -> Self {
        let mut chain = Self::new();
        for block in blocks {
            chain.push_unchecked(block);
        }
        chain
    }

    pub fn blocks(&self) -> &[LedgerBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip_hash(&self) -> [u8; 32] {
        self.blocks.last().map(LedgerBlock::hash).unwrap_or([0u8; 32])
    }

    pub fn tip_timestamp(&self) -> u64 {
        self.blocks.last().map(|b| b.header.timestamp).unwrap_or(0)
    }

    pub fn validate(&self, difficulty: u32) -> Result<(), Violation> {
        validate_blocks(&self.blocks, difficulty)
    }

    fn push_unchecked(&mut self, block: LedgerBlock) -> u64 {
        let height = self.blocks.len() as u64;
        for (index, e) in block.entries.iter().enumerate() {
            let loc = EntryLocation { height, index };
            self.index.entry(e.file_cid).or_default().push(loc);
            if let Some(m) = e.modified_cid {
                self.index.entry(m).or_default().push(loc);
            }
        }
        self.blocks.push(block);
        height
    }

    /// Appends `block` if it is a valid successor of the tip.
    pub fn append(&mut self, block: LedgerBlock, difficulty: u32) -> Result<u64, Violation> {
        check_block(&block, self.blocks.len() as u64, self.blocks.last(), difficulty)?;
        Ok(self.push_unchecked(block))
    }

    pub fn entry_at(&self, loc: EntryLocation) -> Option<&MetadataEntry> {
        self.blocks.get(loc.height as usize)?.entries.get(loc.index)
    }

    /// Every entry whose `file_cid` or `modified_cid` is `cid`, ascending by
    /// height (then position in block).
    pub fn lookup(&self, cid: &Cid) -> Vec<(u64, MetadataEntry)> {
        let Some(locs) = self.index.get(cid) else {
            return Vec::new();
        };
        let mut locs = locs.clone();
        locs.sort();
        locs.dedup();
        locs.into_iter()
            .filter_map(|loc| self.entry_at(loc).map(|e| (loc.height, e.clone())))
            .collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, &MetadataEntry)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(h, b)| b.entries.iter().map(move |e| (h as u64, e)))
    }

    /// Mutable access for fault-injection in tests and tooling. The index is
    /// rebuilt from the (possibly corrupted) blocks afterwards.
    pub fn tamper<F: FnOnce(&mut Vec<LedgerBlock>)>(&mut self, f: F) {
        let mut blocks = std::mem::take(&mut self.blocks);
        f(&mut blocks);
        *self = Self::from_blocks(blocks);
    }
}

/// Append-only on-disk chain: a sequence of `len:u32 ‖ encoded block`.
#[derive(Debug, Clone)]
pub struct ChainFile {
    path: PathBuf,
}

impl ChainFile {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Reads every block. A missing file is an empty chain.
    pub fn load(&self) -> Result<Vec<LedgerBlock>, LedgerError> {
        let mut raw = Vec::new();
        match File::open(&self.path) {
            Ok(mut f) => {
                f.read_to_end(&mut raw)?;
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        }
        let mut blocks = Vec::new();
        let mut r = crate::codec::Reader::new(&raw);
        while r.remaining() > 0 {
            blocks.push(LedgerBlock::decode(r.blob()?)?);
        }
        Ok(blocks)
    }

    pub fn append(&self, block: &LedgerBlock) -> Result<(), LedgerError> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        let bytes = block.encode();
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(&(bytes.len() as u32).to_be_bytes())?;
        f.write_all(&bytes)?;
        f.sync_data()?;
        Ok(())
    }

    /// Replaces the whole file (used when syncing a chain from a peer).
    pub fn rewrite(&self, blocks: &[LedgerBlock]) -> Result<(), LedgerError> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = self.path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            for block in blocks {
                let bytes = block.encode();
                f.write_all(&(bytes.len() as u32).to_be_bytes())?;
                f.write_all(&bytes)?;
            }
            f.sync_data()?;
        }
        fs::rename(tmp, &self.path)?;
        Ok(())
    }
}
