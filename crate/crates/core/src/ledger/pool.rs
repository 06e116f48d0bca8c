use super::block::mine_block;
use super::chain::{Chain, ChainFile};
use super::{LedgerError, MetadataEntry};
use crate::clock::Clock;

pub const DEFAULT_MAX_ENTRIES: usize = 64;
pub const DEFAULT_DIFFICULTY: u32 = 12;

/// Result of offering an entry to the pending pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Submitted {
    /// Waiting for the next flush. `slot` is the entry's position.
    Pending { slot: usize },
    /// The pool filled up and was mined into the block at `height`.
    Committed { height: u64 },
}

/// The single writer of a chain: pending pool plus miner.
#[derive(Debug)]
pub struct LedgerWriter {
    chain: Chain,
    pending: Vec<MetadataEntry>,
    max_entries: usize,
    difficulty: u32,
    file: Option<ChainFile>,
    attempts: Vec<u64>,
}

impl LedgerWriter {
    pub fn new(chain: Chain, max_entries: usize, difficulty: u32) -> Self {
        Self {
            chain,
            pending: Vec::new(),
            max_entries: max_entries.max(1),
            difficulty,
            file: None,
            attempts: Vec::new(),
        }
    }

    /// Persists every newly mined block to `file`.
    pub fn with_file(mut self, file: ChainFile) -> Self {
        self.file = Some(file);
        self
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn file(&self) -> Option<&ChainFile> {
        self.file.as_ref()
    }

    pub fn difficulty(&self) -> u32 {
        self.difficulty
    }

    pub fn pending(&self) -> &[MetadataEntry] {
        &self.pending
    }

    /// Hash attempts spent on each block mined so far.
    pub fn mining_attempts(&self) -> &[u64] {
        &self.attempts
    }

    pub fn submit(
        &mut self,
        entry: MetadataEntry,
        clock: &dyn Clock,
    ) -> Result<Submitted, LedgerError> {
        entry.validate()?;
        if self
            .pending
            .iter()
            .any(|p| p.file_cid == entry.file_cid && p.accessed_at == entry.accessed_at)
        {
            return Err(LedgerError::DuplicatePending);
        }
        self.pending.push(entry);
        if self.pending.len() >= self.max_entries {
            let height = self.flush(clock)?.expect("pool is non-empty");
            return Ok(Submitted::Committed { height });
        }
        Ok(Submitted::Pending {
            slot: self.pending.len() - 1,
        })
    }

    /// Mines everything pending into one block. `None` if nothing was pending.
    pub fn flush(&mut self, clock: &dyn Clock) -> Result<Option<u64>, LedgerError> {
        if self.pending.is_empty() {
            return Ok(None);
        }
        let entries = std::mem::take(&mut self.pending);
        // Block timestamps never go backwards even if the clock does.
        let floor = FloorClock {
            inner: clock,
            floor_ms: self.chain.tip_timestamp() * 1000,
        };
        let mined = mine_block(entries, self.chain.tip_hash(), self.difficulty, &floor)?;
        if let Some(file) = &self.file {
            file.append(&mined.block)?;
        }
        self.attempts.push(mined.attempts);
        let height = self
            .chain
            .append(mined.block, self.difficulty)
            .expect("freshly mined block extends the tip");
        Ok(Some(height))
    }
}

struct FloorClock<'a> {
    inner: &'a dyn Clock,
    floor_ms: u64,
}

impl Clock for FloorClock<'_> {
    fn now_ms(&self) -> u64 {
        self.inner.now_ms().max(self.floor_ms)
    }
}
