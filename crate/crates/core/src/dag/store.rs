//! Block storage keyed by content identifier.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use bytes::Bytes;
use thiserror::Error;

use crate::cid::Cid;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("block store I/O failure: {0}")]
    Io(#[from] io::Error),
    #[error("block store is full")]
    Full,
    #[error("bytes do not hash to {0}")]
    Mismatch(Cid),
}

/// A content-addressed block store. Keys are always the CID of the stored
/// bytes, so a store can never hold a block under the wrong name.
pub trait BlockStore: Send + Sync {
    /// Stores `bytes` under their CID. Storing the same bytes twice is a no-op.
    fn put(&self, bytes: Bytes) -> Result<Cid, StoreError>;

    fn get(&self, cid: &Cid) -> Result<Option<Bytes>, StoreError>;

    fn has(&self, cid: &Cid) -> bool;

    /// All stored CIDs in ascending order.
    fn cids(&self) -> Vec<Cid>;

    fn len(&self) -> usize {
        self.cids().len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `bytes` only if they hash to `expected`.
    fn put_verified(&self, expected: &Cid, bytes: Bytes) -> Result<(), StoreError> {
        if !expected.matches(&bytes) {
            return Err(StoreError::Mismatch(*expected));
        }
        self.put(bytes).map(|_| ())
    }
}

/// In-memory store, used by the simulator and by tests.
#[derive(Debug, Default)]
pub struct MemStore {
    blocks: RwLock<BTreeMap<Cid, Bytes>>,
    capacity: Option<usize>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// A store that refuses new blocks once it holds `max_blocks`.
    pub fn with_capacity_limit(max_blocks: usize) -> Self {
        Self {
            blocks: RwLock::default(),
            capacity: Some(max_blocks),
        }
    }

    /// Total bytes held.
    pub fn total_bytes(&self) -> usize {
        self.blocks.read().unwrap().values().map(Bytes::len).sum()
    }
}

impl BlockStore for MemStore {
    fn put(&self, bytes: Bytes) -> Result<Cid, StoreError> {
        let cid = Cid::of_bytes(&bytes);
        let mut blocks = self.blocks.write().unwrap();
        if blocks.contains_key(&cid) {
            return Ok(cid);
        }
        if self.capacity.is_some_and(|cap| blocks.len() >= cap) {
            return Err(StoreError::Full);
        }
        blocks.insert(cid, bytes);
        Ok(cid)
    }

    fn get(&self, cid: &Cid) -> Result<Option<Bytes>, StoreError> {
        Ok(self.blocks.read().unwrap().get(cid).cloned())
    }

    fn has(&self, cid: &Cid) -> bool {
        self.blocks.read().unwrap().contains_key(cid)
    }

    fn cids(&self) -> Vec<Cid> {
        self.blocks.read().unwrap().keys().copied().collect()
    }

    fn len(&self) -> usize {
        self.blocks.read().unwrap().len()
    }
}

/// One file per block under `root/<first two hex digits>/<hex digest>`.
/// Writes go to a temporary file that is renamed into place.
#[derive(Debug)]
pub struct FsStore {
    root: PathBuf,
    tmp_counter: AtomicU64,
}

impl FsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, cid: &Cid) -> PathBuf {
        let hex = hex::encode(cid.digest());
        self.root.join(&hex[..2]).join(hex)
    }
}

impl BlockStore for FsStore {
    fn put(&self, bytes: Bytes) -> Result<Cid, StoreError> {
        let cid = Cid::of_bytes(&bytes);
        let path = self.path_for(&cid);
        if path.exists() {
            return Ok(cid);
        }
        let dir = path.parent().expect("block path has a parent");
        fs::create_dir_all(dir)?;
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(".tmp-{}-{n}", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_data()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(cid)
    }

    fn get(&self, cid: &Cid) -> Result<Option<Bytes>, StoreError> {
        match fs::read(self.path_for(cid)) {
            Ok(data) => Ok(Some(Bytes::from(data))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn has(&self, cid: &Cid) -> bool {
        self.path_for(cid).exists()
    }

    fn cids(&self) -> Vec<Cid> {
        let mut out = Vec::new();
        let Ok(fanout) = fs::read_dir(&self.root) else {
            return out;
        };
        for dir in fanout.flatten() {
            let Ok(entries) = fs::read_dir(dir.path()) else {
                continue;
            };
            for entry in entries.flatten() {
                let name = entry.file_name();
                let Some(name) = name.to_str() else { continue };
                let mut digest = [0u8; 32];
                if hex::decode_to_slice(name, &mut digest).is_ok() {
                    out.push(Cid::from_digest(digest));
                }
            }
        }
        out.sort();
        out
    }
}
