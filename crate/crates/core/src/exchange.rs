//! Wantlist-based block exchange.
//!
//! A fetch walks the DAG breadth-first. Missing blocks go on the wantlist
//! and are handed to providers round-robin, at most `inflight_cap` per peer
//! per round, one WANT message per peer per round. Nothing is stored or
//! expanded until it hashes to the CID that was asked for.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use bytes::Bytes;
use futures::future::join_all;
use serde::Serialize;
use thiserror::Error;

use crate::cid::Cid;
use crate::dag::{verify_block, BlockStore, DagNode, StoreError};
use crate::dht::{Contact, NodeId};
use crate::runtime::{LocalBoxFuture, NetError};
use crate::wire::WantReply;

#[derive(Debug, Error)]
pub enum ExchangeError {
    #[error("block {0} could not be retrieved from any provider")]
    Unretrievable(Cid),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExchangeConfig {
    pub inflight_cap: usize,
    pub want_timeout_ms: u64,
    /// Timeouts tolerated per (block, peer) before moving to the next peer.
    pub retries: u32,
}

impl Default for ExchangeConfig {
    fn default() -> Self {
        Self {
            inflight_cap: 16,
            want_timeout_ms: 10_000,
            retries: 2,
        }
    }
}

/// Per-peer accounting. Counters only grow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PeerLedger {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Blocks from this peer that did not hash to the CID asked for.
    pub invalid_blocks: u64,
}

pub type PeerLedgers = RefCell<BTreeMap<NodeId, PeerLedger>>;

/// Outstanding wants with their priority. Lower number = more urgent;
/// breadth-first depth is used as priority.
#[derive(Debug, Default, Clone)]
pub struct Wantlist {
    entries: BTreeMap<Cid, u8>,
    order: VecDeque<Cid>,
}

impl Wantlist {
    /// Adds `cid` unless already wanted.
    pub fn want(&mut self, cid: Cid, priority: u8) -> bool {
        if self.entries.contains_key(&cid) {
            return false;
        }
        self.entries.insert(cid, priority);
        self.order.push_back(cid);
        true
    }

    pub fn remove(&mut self, cid: &Cid) -> bool {
        if self.entries.remove(cid).is_some() {
            self.order.retain(|c| c != cid);
            true
        } else {
            false
        }
    }

    pub fn contains(&self, cid: &Cid) -> bool {
        self.entries.contains_key(cid)
    }

    pub fn priority(&self, cid: &Cid) -> Option<u8> {
        self.entries.get(cid).copied()
    }

    /// Wanted CIDs in the order they were added.
    pub fn iter(&self) -> impl Iterator<Item = &Cid> {
        self.order.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Sends WANT messages on behalf of the exchange.
pub trait WantTransport {
    fn want(&self, peer: &Contact, cids: Vec<Cid>) -> LocalBoxFuture<Result<Vec<WantReply>, NetError>>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FetchStats {
    pub rounds: u32,
    pub blocks_fetched: usize,
    pub bytes_fetched: u64,
    /// Blocks received per provider index.
    pub blocks_by_provider: Vec<usize>,
    /// (peer, cid) pairs where the peer sent bytes that failed verification.
    pub invalid: Vec<(NodeId, Cid)>,
    pub timeouts: usize,
}

#[derive(Debug, Default)]
struct WantState {
    /// Providers that no longer count for this block.
    exhausted: BTreeSet<usize>,
    timeouts: BTreeMap<usize, u32>,
}

fn expand(
    data: &Bytes,
    depth: u8,
    store: &dyn BlockStore,
    wantlist: &mut Wantlist,
    local: &mut VecDeque<(Cid, u8)>,
) {
    if let Ok(DagNode::Interior(links)) = DagNode::decode(data) {
        for link in links {
            if store.has(&link.cid) {
                local.push_back((link.cid, depth.saturating_add(1)));
            } else {
                wantlist.want(link.cid, depth.saturating_add(1));
            }
        }
    }
}

/// Walks blocks already held locally; anything missing becomes a want.
fn drain_local(
    local: &mut VecDeque<(Cid, u8)>,
    seen: &mut BTreeSet<Cid>,
    store: &dyn BlockStore,
    wantlist: &mut Wantlist,
) -> Result<(), StoreError> {
    while let Some((cid, depth)) = local.pop_front() {
        if !seen.insert(cid) {
            continue;
        }
        match store.get(&cid)? {
            Some(data) if verify_block(&cid, &data) => expand(&data, depth, store, wantlist, local),
            _ => {
                wantlist.want(cid, depth);
            }
        }
    }
    Ok(())
}

/// Fetches every block of the DAG under `root` that is not already in
/// `store`.
pub async fn fetch_dag(
    root: Cid,
    providers: &[Contact],
    store: &dyn BlockStore,
    transport: &dyn WantTransport,
    config: &ExchangeConfig,
    ledgers: &PeerLedgers,
) -> Result<FetchStats, ExchangeError> {
    let mut stats = FetchStats {
        blocks_by_provider: vec![0; providers.len()],
        ..FetchStats::default()
    };
    let mut wantlist = Wantlist::default();
    let mut states: BTreeMap<Cid, WantState> = BTreeMap::new();

    let mut local = VecDeque::from([(root, 0u8)]);
    let mut seen = BTreeSet::new();
    drain_local(&mut local, &mut seen, store, &mut wantlist)?;

    let mut live: Vec<bool> = vec![true; providers.len()];
    let mut cursor = 0usize;

    while !wantlist.is_empty() {
        // Assign wants to providers round-robin.
        let mut batches: BTreeMap<usize, Vec<Cid>> = BTreeMap::new();
        for cid in wantlist.iter() {
            let state = states.entry(*cid).or_default();
            let candidates: Vec<usize> = (0..providers.len())
                .map(|i| (cursor + i) % providers.len())
                .filter(|p| live[*p] && !state.exhausted.contains(p))
                .collect();
            if candidates.is_empty() {
                return Err(ExchangeError::Unretrievable(*cid));
            }
            let Some(&chosen) = candidates
                .iter()
                .find(|p| batches.get(p).map_or(0, Vec::len) < config.inflight_cap)
            else {
                continue;
            };
            batches.entry(chosen).or_default().push(*cid);
            cursor = (chosen + 1) % providers.len();
        }
        stats.rounds += 1;

        let sent: Vec<(usize, Vec<Cid>)> = batches.into_iter().collect();
        let replies = join_all(
            sent.iter()
                .map(|(p, cids)| transport.want(&providers[*p], cids.clone())),
        )
        .await;

        for ((p, cids), reply) in sent.into_iter().zip(replies) {
            let peer = &providers[p];
            let items = match reply {
                Ok(items) => items,
                Err(_) => {
                    stats.timeouts += 1;
                    for cid in &cids {
                        let state = states.entry(*cid).or_default();
                        let n = state.timeouts.entry(p).or_insert(0);
                        *n += 1;
                        if *n > config.retries {
                            state.exhausted.insert(p);
                        }
                    }
                    continue;
                }
            };
            let mut answered = BTreeSet::new();
            for item in items {
                let cid = *item.cid();
                if !cids.contains(&cid) || !answered.insert(cid) {
                    continue;
                }
                match item {
                    WantReply::Block { data, .. } => {
                        ledgers.borrow_mut().entry(peer.id).or_default().bytes_received +=
                            data.len() as u64;
                        if !wantlist.contains(&cid) {
                            continue;
                        }
                        if !verify_block(&cid, &data) {
                            ledgers.borrow_mut().entry(peer.id).or_default().invalid_blocks += 1;
                            stats.invalid.push((peer.id, cid));
                            live[p] = false;
                            continue;
                        }
                        store.put_verified(&cid, data.clone())?;
                        let depth = wantlist.priority(&cid).unwrap_or(0);
                        wantlist.remove(&cid);
                        states.remove(&cid);
                        stats.blocks_fetched += 1;
                        stats.bytes_fetched += data.len() as u64;
                        stats.blocks_by_provider[p] += 1;
                        seen.insert(cid);
                        let mut children = VecDeque::new();
                        expand(&data, depth, store, &mut wantlist, &mut children);
                        drain_local(&mut children, &mut seen, store, &mut wantlist)?;
                    }
                    WantReply::DontHave { .. } => {
                        states.entry(cid).or_default().exhausted.insert(p);
                    }
                }
            }
            // Anything the peer ignored counts as a DONT_HAVE.
            for cid in cids {
                if !answered.contains(&cid) && wantlist.contains(&cid) {
                    states.entry(cid).or_default().exhausted.insert(p);
                }
            }
        }
    }
    Ok(stats)
}

/// Answers a WANT: held blocks are returned, the rest get DONT_HAVE.
/// `corrupt` flips a byte in every served block (fault injection).
pub fn serve_wants(
    requester: &NodeId,
    cids: &[Cid],
    store: &dyn BlockStore,
    ledgers: &PeerLedgers,
    corrupt: bool,
) -> Vec<WantReply> {
    let mut sent = 0u64;
    let replies = cids
        .iter()
        .map(|cid| match store.get(cid) {
            Ok(Some(data)) => {
                let data = if corrupt {
                    let mut v = data.to_vec();
                    if let Some(b) = v.last_mut() {
                        *b ^= 0xFF;
                    } else {
                        v.push(0xFF);
                    }
                    Bytes::from(v)
                } else {
                    data
                };
                sent += data.len() as u64;
                WantReply::Block { cid: *cid, data }
            }
            _ => WantReply::DontHave { cid: *cid },
        })
        .collect();
    if sent > 0 {
        ledgers.borrow_mut().entry(*requester).or_default().bytes_sent += sent;
    }
    replies
}
