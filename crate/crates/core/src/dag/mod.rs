//! File chunking into a Merkle DAG of content-addressed blocks.
//!
//! Node encoding (big-endian throughout):
//!
//! ```text
//! Leaf:     0x00 ‖ len:u32 ‖ data
//! Interior: 0x01 ‖ count:u32 ‖ count × (cid:34 bytes ‖ subtree_size:u64)
//! ```

mod store;

use std::io::{self, Read, Write};

use bytes::Bytes;
use thiserror::Error;

use crate::cid::{Cid, CID_BINARY_LEN};

pub use store::{BlockStore, FsStore, MemStore, StoreError};

pub const DEFAULT_CHUNK_SIZE: usize = 256 * 1024;
pub const DEFAULT_MAX_LINKS: usize = 174;

const LEAF_TAG: u8 = 0x00;
const INTERIOR_TAG: u8 = 0x01;
const LINK_LEN: usize = CID_BINARY_LEN + 8;

#[derive(Debug, Error)]
pub enum DagError {
    #[error("interior node has {0} links (allowed 1..={1})")]
    TooManyLinks(usize, usize),
    #[error("leaf holds {0} bytes, chunk size is {1}")]
    OversizedLeaf(usize, usize),
    #[error("block {0} is missing")]
    MissingBlock(Cid),
    #[error("malformed node: {0}")]
    MalformedNode(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("read failed: {0}")]
    Io(#[from] io::Error),
}

/// Chunking parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DagLimits {
    pub chunk_size: usize,
    pub max_links: usize,
}

impl Default for DagLimits {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            max_links: DEFAULT_MAX_LINKS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub cid: Cid,
    /// Total leaf bytes beneath `cid`.
    pub subtree_size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DagNode {
    Leaf(Bytes),
    Interior(Vec<Link>),
}

impl DagNode {
    /// Total leaf bytes represented by this node.
    pub fn size(&self) -> u64 {
        match self {
            DagNode::Leaf(data) => data.len() as u64,
            DagNode::Interior(links) => links.iter().map(|l| l.subtree_size).sum(),
        }
    }

    pub fn links(&self) -> &[Link] {
        match self {
            DagNode::Leaf(_) => &[],
            DagNode::Interior(links) => links,
        }
    }

    pub fn encode(&self, limits: &DagLimits) -> Result<Vec<u8>, DagError> {
        match self {
            DagNode::Leaf(data) => {
                if data.len() > limits.chunk_size {
                    return Err(DagError::OversizedLeaf(data.len(), limits.chunk_size));
                }
                let mut out = Vec::with_capacity(5 + data.len());
                out.push(LEAF_TAG);
                out.extend_from_slice(&(data.len() as u32).to_be_bytes());
                out.extend_from_slice(data);
                Ok(out)
            }
            DagNode::Interior(links) => {
                if links.is_empty() || links.len() > limits.max_links {
                    return Err(DagError::TooManyLinks(links.len(), limits.max_links));
                }
                let mut out = Vec::with_capacity(5 + links.len() * LINK_LEN);
                out.push(INTERIOR_TAG);
                out.extend_from_slice(&(links.len() as u32).to_be_bytes());
                for link in links {
                    out.extend_from_slice(&link.cid.to_binary());
                    out.extend_from_slice(&link.subtree_size.to_be_bytes());
                }
                Ok(out)
            }
        }
    }

    /// Parses a node. Structural rules only; size limits are the encoder's.
    pub fn decode(bytes: &Bytes) -> Result<Self, DagError> {
        let malformed = |why: &str| DagError::MalformedNode(why.to_string());
        if bytes.len() < 5 {
            return Err(malformed("shorter than header"));
        }
        let count = u32::from_be_bytes(bytes[1..5].try_into().unwrap()) as usize;
        match bytes[0] {
            LEAF_TAG => {
                if bytes.len() != 5 + count {
                    return Err(malformed("leaf length does not match payload"));
                }
                Ok(DagNode::Leaf(bytes.slice(5..)))
            }
            INTERIOR_TAG => {
                if count == 0 {
                    return Err(malformed("interior node without links"));
                }
                if bytes.len() != 5 + count * LINK_LEN {
                    return Err(malformed("interior length does not match link count"));
                }
                let links = bytes[5..]
                    .chunks_exact(LINK_LEN)
                    .map(|raw| {
                        let cid = Cid::from_binary(&raw[..CID_BINARY_LEN])
                            .map_err(|e| DagError::MalformedNode(e.to_string()))?;
                        let subtree_size =
                            u64::from_be_bytes(raw[CID_BINARY_LEN..].try_into().unwrap());
                        Ok(Link { cid, subtree_size })
                    })
                    .collect::<Result<Vec<_>, DagError>>()?;
                Ok(DagNode::Interior(links))
            }
            tag => Err(DagError::MalformedNode(format!("unknown tag {tag:#04x}"))),
        }
    }
}

/// True iff `bytes` hash to `cid`.
pub fn verify_block(cid: &Cid, bytes: &[u8]) -> bool {
    cid.matches(bytes)
}

/// Result of adding a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Added {
    pub root: Cid,
    pub total_size: u64,
}

/// Chunks `reader` into leaves, builds interior levels until one root
/// remains, and stores every block.
pub fn add_file<R: Read>(
    mut reader: R,
    store: &dyn BlockStore,
    limits: &DagLimits,
) -> Result<Added, DagError> {
    let mut level: Vec<Link> = Vec::new();
    let mut buf = vec![0u8; limits.chunk_size];
    loop {
        let filled = read_full(&mut reader, &mut buf)?;
        if filled == 0 && !level.is_empty() {
            break;
        }
        let leaf = DagNode::Leaf(Bytes::copy_from_slice(&buf[..filled]));
        let cid = store.put(Bytes::from(leaf.encode(limits)?))?;
        level.push(Link {
            cid,
            subtree_size: filled as u64,
        });
        if filled < limits.chunk_size {
            break;
        }
    }

    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(limits.max_links));
        for group in level.chunks(limits.max_links) {
            let node = DagNode::Interior(group.to_vec());
            let subtree_size = node.size();
            let cid = store.put(Bytes::from(node.encode(limits)?))?;
            next.push(Link { cid, subtree_size });
        }
        level = next;
    }

    let top = level[0];
    Ok(Added {
        root: top.cid,
        total_size: top.subtree_size,
    })
}

/// Convenience wrapper over [`add_file`] for in-memory data.
pub fn add_bytes(
    data: &[u8],
    store: &dyn BlockStore,
    limits: &DagLimits,
) -> Result<Added, DagError> {
    add_file(data, store, limits)
}

/// Computes the root CID `data` would get, without keeping any blocks.
pub fn root_of(data: &[u8], limits: &DagLimits) -> Result<Cid, DagError> {
    add_bytes(data, &MemStore::new(), limits).map(|a| a.root)
}

fn read_full<R: Read>(reader: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Loads and decodes one node, checking it against its key.
pub fn load_node(cid: &Cid, store: &dyn BlockStore) -> Result<DagNode, DagError> {
    let bytes = store.get(cid)?.ok_or(DagError::MissingBlock(*cid))?;
    if !verify_block(cid, &bytes) {
        return Err(DagError::MalformedNode(format!("stored bytes do not hash to {cid}")));
    }
    DagNode::decode(&bytes)
}

/// Writes the file rooted at `root` to `out`: depth-first, left to right.
pub fn cat_file_to<W: Write>(
    root: &Cid,
    store: &dyn BlockStore,
    out: &mut W,
) -> Result<u64, DagError> {
    let mut stack = vec![*root];
    let mut written = 0u64;
    while let Some(cid) = stack.pop() {
        match load_node(&cid, store)? {
            DagNode::Leaf(data) => {
                out.write_all(&data)?;
                written += data.len() as u64;
            }
            DagNode::Interior(links) => stack.extend(links.iter().rev().map(|l| l.cid)),
        }
    }
    Ok(written)
}

pub fn cat_file(root: &Cid, store: &dyn BlockStore) -> Result<Vec<u8>, DagError> {
    let mut out = Vec::new();
    cat_file_to(root, store, &mut out)?;
    Ok(out)
}

/// Every CID reachable from `root`, root first, breadth-first. Fails if a
/// block is missing.
pub fn collect_cids(root: &Cid, store: &dyn BlockStore) -> Result<Vec<Cid>, DagError> {
    let mut out = vec![*root];
    let mut i = 0;
    while i < out.len() {
        let node = load_node(&out[i], store)?;
        out.extend(node.links().iter().map(|l| l.cid));
        i += 1;
    }
    Ok(out)
}
