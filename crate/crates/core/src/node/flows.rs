//! End-to-end operations: add with metadata, get with verification,
//! modifications, ledger replication, and naming.

use std::collections::BTreeSet;

use bytes::Bytes;
use futures::channel::oneshot;
use serde::{Deserialize, Serialize};

use super::report::{LedgerMatch, VerifyReport, VerifyStatus};
use super::{sniff, LedgerState, Node, NodeError, LEDGER_PAGE};
use crate::cid::Cid;
use crate::clock::Clock;
use crate::dag::{add_bytes, cat_file, load_node, DagError, DagNode};
use crate::dht::{DhtError, NodeId};
use crate::exchange::{fetch_dag, WantTransport};
use crate::ledger::{check_block, latest_by_access, MetadataEntry, Submitted};
use crate::naming::{select_best, NameRecord};
use crate::runtime::{LocalBoxFuture, NetError};
use crate::wire::{Request, Response, WantReply};

const REGISTRAR_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddOutcome {
    pub root: Cid,
    pub size_bytes: u64,
    pub height: u64,
}

impl WantTransport for Node {
    fn want(&self, peer: &crate::dht::Contact, cids: Vec<Cid>) -> LocalBoxFuture<Result<Vec<WantReply>, NetError>> {
        let node = self.rc();
        let peer = peer.clone();
        Box::pin(async move {
            let timeout = node.config.exchange.want_timeout_ms;
            match node.rpc(&peer, Request::Want { cids }, timeout).await? {
                Response::Blocks { items } => Ok(items),
                other => Err(NetError::Protocol(format!("unexpected {} reply to WANT", other.name()))),
            }
        })
    }
}

impl Node {
    // ---- ledger ----

    /// Appends an entry to the ledger and waits for the block holding it.
    pub async fn append_entry(&self, entry: MetadataEntry) -> Result<u64, NodeError> {
        if matches!(&*self.ledger.borrow(), LedgerState::Writer(_)) {
            return self.append_local(entry).await;
        }
        let registrar = self.config.registrar.clone().ok_or(NodeError::NoRegistrar)?;
        // Resubmitting is safe: the registrar answers a repeat of an entry it
        // already holds with that entry's height.
        let height = match self
            .registrar_call(&registrar, Request::SubmitEntry { entry }, self.config.submit_timeout_ms)
            .await
        {
            Ok(Response::Submitted { height }) => height,
            Ok(Response::Error { message, .. }) => return Err(NodeError::Registrar(message)),
            Ok(other) => return Err(NodeError::Registrar(format!("unexpected {}", other.name()))),
            Err(e) => return Err(NodeError::RegistrarUnreachable(e)),
        };
        self.sync_best_effort().await?;
        Ok(height)
    }

    /// An idempotent registrar request, retried when no answer arrives.
    async fn registrar_call(&self, registrar: &str, request: Request, timeout_ms: u64) -> Result<Response, NetError> {
        let mut attempt = 1;
        loop {
            match self.rpc_addr(registrar, request.clone(), timeout_ms).await {
                Err(_) if attempt < REGISTRAR_ATTEMPTS => attempt += 1,
                result => return result,
            }
        }
    }

    /// Registrar path: pool the entry and wait for it to be mined.
    pub(super) async fn append_local(&self, entry: MetadataEntry) -> Result<u64, NodeError> {
        let clock: &dyn Clock = &*self.rt;
        let submitted = match &mut *self.ledger.borrow_mut() {
            LedgerState::Writer(w) => {
                let committed = w.chain().lookup(&entry.file_cid).into_iter().find(|(_, e)| *e == entry);
                if let Some((height, _)) = committed {
                    return Ok(height);
                } else if w.pending().contains(&entry) {
                    Submitted::Pending { slot: 0 }
                } else {
                    w.submit(entry, clock)?
                }
            }
            LedgerState::Replica { .. } => return Err(NodeError::NoRegistrar),
        };
        match submitted {
            Submitted::Committed { height } => {
                self.finish_waiters(Ok(height));
                Ok(height)
            }
            Submitted::Pending { .. } => {
                let (tx, rx) = oneshot::channel();
                self.commit_waiters.borrow_mut().push(tx);
                self.schedule_flush();
                match rx.await {
                    Ok(Ok(height)) => Ok(height),
                    Ok(Err(message)) => Err(NodeError::Registrar(message)),
                    Err(_) => Err(NodeError::Registrar("pending pool dropped".into())),
                }
            }
        }
    }

    fn finish_waiters(&self, result: Result<u64, String>) {
        for tx in self.commit_waiters.borrow_mut().drain(..) {
            let _ = tx.send(result.clone());
        }
    }

    fn schedule_flush(&self) {
        if self.flush_scheduled.replace(true) {
            return;
        }
        let node = self.rc();
        self.rt.spawn(Box::pin(async move {
            node.rt.sleep(node.config.flush_interval_ms).await;
            node.flush_now();
        }));
    }

    /// Mines whatever is pending right away.
    pub fn flush_now(&self) {
        self.flush_scheduled.set(false);
        let clock: &dyn Clock = &*self.rt;
        let result = match &mut *self.ledger.borrow_mut() {
            LedgerState::Writer(w) => w.flush(clock),
            LedgerState::Replica { .. } => return,
        };
        match result {
            Ok(Some(height)) => self.finish_waiters(Ok(height)),
            Ok(None) => {}
            Err(e) => self.finish_waiters(Err(e.to_string())),
        }
    }

    /// Pulls new blocks from the registrar, checking each before it is
    /// applied. Returns how many were added.
    pub async fn sync_ledger(&self) -> Result<usize, NodeError> {
        if matches!(&*self.ledger.borrow(), LedgerState::Writer(_)) {
            return Ok(0);
        }
        let registrar = self.config.registrar.clone().ok_or(NodeError::NoRegistrar)?;
        let mut added = 0;
        loop {
            let from_height = self.chain_len() as u64;
            let blocks = match self
                .registrar_call(&registrar, Request::GetBlocks { from_height }, self.config.rpc_timeout_ms)
                .await
            {
                Ok(Response::LedgerBlocks { blocks }) => blocks,
                Ok(other) => {
                    return Err(NodeError::Registrar(format!("unexpected {}", other.name())))
                }
                Err(e) => return Err(NodeError::RegistrarUnreachable(e)),
            };
            if blocks.is_empty() {
                return Ok(added);
            }
            let mut ledger = self.ledger.borrow_mut();
            let LedgerState::Replica { chain, file } = &mut *ledger else {
                return Ok(added);
            };
            // A concurrent sync may already have applied some of these.
            let skip = chain.len().saturating_sub(from_height as usize);
            for block in blocks.into_iter().skip(skip) {
                let height = chain.len() as u64;
                check_block(&block, height, chain.blocks().last(), self.config.difficulty)
                    .map_err(NodeError::LedgerValidationFailed)?;
                if let Some(f) = file {
                    f.append(&block)?;
                }
                chain
                    .append(block, self.config.difficulty)
                    .map_err(NodeError::LedgerValidationFailed)?;
                added += 1;
            }
        }
    }

    /// Syncs if possible; an unreachable registrar leaves the local replica
    /// in use, an invalid chain is an error.
    async fn sync_best_effort(&self) -> Result<(), NodeError> {
        match self.sync_ledger().await {
            Ok(_) | Err(NodeError::NoRegistrar) | Err(NodeError::RegistrarUnreachable(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    pub(super) fn serve_ledger_blocks(&self, from_height: u64) -> Vec<crate::ledger::LedgerBlock> {
        let ledger = self.ledger.borrow();
        let blocks = ledger.chain().blocks();
        let from = (from_height as usize).min(blocks.len());
        blocks[from..(from + LEDGER_PAGE).min(blocks.len())].to_vec()
    }

    // ---- files ----

    pub(super) fn new_entry(&self, file_cid: Cid, size_bytes: u64, file_type: String, modified_cid: Option<Cid>) -> MetadataEntry {
        let now = self.rt.now_secs();
        MetadataEntry {
            file_cid,
            created_at: now,
            accessed_at: now,
            size_bytes,
            file_type,
            author: self.identity.fingerprint(),
            modified_cid,
        }
    }

    /// Chunks and stores `data`, announces the root, and records its
    /// metadata on the ledger. `name` only feeds type detection.
    pub async fn add_with_metadata(&self, data: &[u8], name: Option<&str>) -> Result<AddOutcome, NodeError> {
        let added = add_bytes(data, &*self.store, &self.config.limits)?;
        self.provide(&added.root).await?;
        let entry = self.new_entry(added.root, added.total_size, sniff(name, data), None);
        let height = self.append_entry(entry).await?;
        Ok(AddOutcome {
            root: added.root,
            size_bytes: added.total_size,
            height,
        })
    }

    /// Stores `data` as a new version of `old_root` and records the link.
    pub async fn record_modification(&self, old_root: &Cid, data: &[u8], name: Option<&str>) -> Result<AddOutcome, NodeError> {
        self.sync_best_effort().await?;
        if !self.store.has(old_root) && self.ledger.borrow().chain().lookup(old_root).is_empty() {
            return Err(NodeError::UnknownRoot(*old_root));
        }
        let added = add_bytes(data, &*self.store, &self.config.limits)?;
        if added.root == *old_root {
            return Err(NodeError::SameContent(added.root));
        }
        self.provide(&added.root).await?;
        let entry = self.new_entry(*old_root, added.total_size, sniff(name, data), Some(added.root));
        let height = self.append_entry(entry).await?;
        Ok(AddOutcome {
            root: added.root,
            size_bytes: added.total_size,
            height,
        })
    }

    /// Follows modification records forward from `root`: the root itself,
    /// then each successor (latest modification first by access time).
    pub async fn version_history(&self, root: &Cid) -> Result<Vec<Cid>, NodeError> {
        self.sync_best_effort().await?;
        let ledger = self.ledger.borrow();
        let chain = ledger.chain();
        let mut versions = vec![*root];
        let mut seen = BTreeSet::from([*root]);
        let mut current = *root;
        loop {
            let mods: Vec<(u64, MetadataEntry)> = chain
                .lookup(&current)
                .into_iter()
                .filter(|(_, e)| e.file_cid == current && e.modified_cid.is_some())
                .collect();
            let Some((_, latest)) = latest_by_access(&mods) else {
                break;
            };
            let next = latest.modified_cid.expect("filtered on modification records");
            if !seen.insert(next) {
                break;
            }
            versions.push(next);
            current = next;
        }
        Ok(versions)
    }

    /// Whether every block of the DAG under `root` is held locally.
    pub fn has_dag(&self, root: &Cid) -> bool {
        crate::dag::collect_cids(root, &*self.store).is_ok()
    }

    /// Makes the full DAG under `root` local, fetching from providers.
    pub async fn fetch(&self, root: &Cid) -> Result<(), NodeError> {
        if self.has_dag(root) {
            return Ok(());
        }
        let providers: Vec<_> = match self.find_providers(root).await {
            Ok(p) => p,
            Err(NodeError::Dht(DhtError::NoPeers)) => Vec::new(),
            Err(e) => return Err(e),
        }
        .into_iter()
        .filter(|r| r.provider.id != self.id())
        .map(|r| r.provider)
        .collect();
        if providers.is_empty() {
            return Err(NodeError::Unretrievable(*root));
        }
        let stats = fetch_dag(*root, &providers, &*self.store, self, &self.config.exchange, &self.peer_ledgers).await;
        match stats {
            Ok(stats) => {
                self.metrics.borrow_mut().invalid_blocks.extend(stats.invalid);
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Fetches `root` if needed and checks it against the ledger. The bytes
    /// are returned whatever the verdict.
    pub async fn get_with_verify(&self, root: &Cid) -> Result<(Vec<u8>, VerifyReport), NodeError> {
        self.fetch(root).await?;
        let data = cat_file(root, &*self.store)?;
        let report = self.verify_local(root).await?;
        Ok((data, report))
    }

    /// Like [`Node::get_with_verify`] without returning the payload; blocks
    /// already held are not fetched again.
    pub async fn verify(&self, root: &Cid) -> Result<VerifyReport, NodeError> {
        self.fetch(root).await?;
        self.verify_local(root).await
    }

    /// Re-hashes every block under `root` and returns the file size.
    fn recompute(&self, root: &Cid) -> Result<u64, DagError> {
        let mut queue = vec![*root];
        let mut size = 0u64;
        while let Some(cid) = queue.pop() {
            match load_node(&cid, &*self.store)? {
                DagNode::Leaf(data) => size += data.len() as u64,
                DagNode::Interior(links) => queue.extend(links.iter().rev().map(|l| l.cid)),
            }
        }
        Ok(size)
    }

    async fn verify_local(&self, root: &Cid) -> Result<VerifyReport, NodeError> {
        let recomputed = self.recompute(root);
        self.sync_best_effort().await?;
        let matches: Vec<LedgerMatch> = self
            .ledger
            .borrow()
            .chain()
            .lookup(root)
            .into_iter()
            .map(|(height, entry)| LedgerMatch {
                height,
                modification: entry.is_modification(),
                entry,
            })
            .collect();
        let report = |status, size_bytes, detail: String| VerifyReport {
            cid: *root,
            status,
            size_bytes,
            ledger_entries: matches.clone(),
            detail,
        };
        let size = match recomputed {
            Ok(size) => size,
            Err(e) => return Ok(report(VerifyStatus::Tampered, 0, format!("content does not hash to {root}: {e}"))),
        };
        if matches.is_empty() {
            return Ok(report(VerifyStatus::UnknownToLedger, size, "no ledger entry mentions this CID".into()));
        }
        // Entries that state this CID's size: plain additions of it, and
        // modifications that produced it.
        let recorded: Vec<&LedgerMatch> = matches
            .iter()
            .filter(|m| {
                (m.entry.file_cid == *root && m.entry.modified_cid.is_none())
                    || m.entry.modified_cid == Some(*root)
            })
            .collect();
        if recorded.is_empty() {
            return Ok(report(
                VerifyStatus::UnknownToLedger,
                size,
                "ledger only records this CID as the predecessor of a modification".into(),
            ));
        }
        if let Some(bad) = recorded.iter().find(|m| m.entry.size_bytes != size) {
            return Ok(report(
                VerifyStatus::Tampered,
                size,
                format!(
                    "ledger entry at height {} records {} bytes, retrieved {}",
                    bad.height, bad.entry.size_bytes, size
                ),
            ));
        }
        Ok(report(
            VerifyStatus::Verified,
            size,
            format!("CID and size match {} ledger entr{}", recorded.len(), if recorded.len() == 1 { "y" } else { "ies" }),
        ))
    }

    // ---- naming ----

    /// Publishes `value` under this node's name key with the next sequence.
    pub async fn publish(&self, value: Cid) -> Result<NameRecord, NodeError> {
        let key = self.id();
        let sequence = self.names.borrow().next_sequence(&key);
        let validity = self.rt.now_secs() + self.config.name_validity_secs;
        let record = NameRecord::sign(&self.identity, value, sequence, validity);
        self.store_record(key, Bytes::from(record.encode())).await?;
        self.names.borrow_mut().record_published(key, sequence)?;
        *self.published.borrow_mut() = Some(record.clone());
        Ok(record)
    }

    /// Re-signs the current record with a fresh validity, same sequence.
    pub(super) async fn republish_name(&self, current: &NameRecord) -> Result<(), NodeError> {
        let validity = self.rt.now_secs() + self.config.name_validity_secs;
        let record = NameRecord::sign(&self.identity, current.value, current.sequence, validity);
        self.store_record(record.name_key, Bytes::from(record.encode())).await?;
        *self.published.borrow_mut() = Some(record);
        Ok(())
    }

    /// Resolves a name key to the newest valid record.
    pub async fn resolve(&self, key: NodeId) -> Result<NameRecord, NodeError> {
        let values = match self.get_record_values(key).await {
            Ok(v) => v,
            Err(NodeError::Dht(DhtError::NoPeers)) => Vec::new(),
            Err(e) => return Err(e),
        };
        let now = self.rt.now_secs();
        let best = select_best(&key, values, now)?;
        Ok(self.names.borrow_mut().monotonic(best, now))
    }
}
