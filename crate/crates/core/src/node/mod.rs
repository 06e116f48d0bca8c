//! A full peer: routing, provider and name records, block exchange, and the
//! ledger, wired together over a [`Runtime`].
//!
//! All state lives in `RefCell`s owned by the node and is only touched from
//! the runtime's single thread. No borrow is held across an `.await`.

mod filetype;
mod flows;
mod handler;
mod report;

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;
use std::rc::{Rc, Weak};

use bytes::Bytes;
use futures::channel::oneshot;
use futures::future::join_all;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cid::Cid;
use crate::dag::{BlockStore, DagError, DagLimits, FsStore, MemStore, StoreError};
use crate::dht::{
    iterative_lookup, Contact, DhtConfig, DhtError, InsertOutcome, LookupOutcome, NodeId,
    ProviderRecord, ProviderStore, QueryReply, RecordStore, RoutingTable, MAX_RECORD_LEN,
};
use crate::exchange::{ExchangeConfig, ExchangeError, PeerLedger, PeerLedgers};
use crate::identity::NodeIdentity;
use crate::ledger::{Chain, ChainFile, LedgerError, LedgerWriter, Violation};
use crate::naming::{NameError, NameRecord, NameRecordValidator, NameState, DEFAULT_VALIDITY_SECS};
use crate::runtime::{NetError, Runtime};
use crate::wire::{Envelope, Request, Response};

pub use filetype::{sniff, DEFAULT_TYPE};
pub use flows::AddOutcome;
pub use report::{LedgerMatch, VerifyReport, VerifyStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Mines the ledger.
    Registrar,
    /// Submits entries to the registrar and replicates its chain.
    Peer,
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub dht: DhtConfig,
    pub limits: DagLimits,
    pub exchange: ExchangeConfig,
    pub difficulty: u32,
    pub max_entries: usize,
    pub flush_interval_ms: u64,
    pub rpc_timeout_ms: u64,
    /// Covers the registrar's flush delay plus mining.
    pub submit_timeout_ms: u64,
    pub name_validity_secs: u64,
    pub role: Role,
    /// Peer address of the registrar. Ignored when `role` is `Registrar`.
    pub registrar: Option<String>,
}

impl NodeConfig {
    /// Defaults for daemons on a real network.
    pub fn real() -> Self {
        Self {
            dht: DhtConfig::default(),
            limits: DagLimits::default(),
            exchange: ExchangeConfig::default(),
            difficulty: crate::ledger::DEFAULT_DIFFICULTY,
            max_entries: crate::ledger::DEFAULT_MAX_ENTRIES,
            flush_interval_ms: 5_000,
            rpc_timeout_ms: 5_000,
            submit_timeout_ms: 60_000,
            name_validity_secs: DEFAULT_VALIDITY_SECS,
            role: Role::Peer,
            registrar: None,
        }
    }

    /// Defaults for nodes inside the simulator.
    pub fn simulated() -> Self {
        Self {
            exchange: ExchangeConfig {
                want_timeout_ms: 5_000,
                ..ExchangeConfig::default()
            },
            flush_interval_ms: 1_000,
            rpc_timeout_ms: 2_000,
            submit_timeout_ms: 30_000,
            ..Self::real()
        }
    }
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Dht(#[from] DhtError),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Name(#[from] NameError),
    #[error("block {0} could not be retrieved from any provider")]
    Unretrievable(Cid),
    #[error("no registrar configured")]
    NoRegistrar,
    #[error("registrar refused: {0}")]
    Registrar(String),
    #[error("registrar unreachable: {0}")]
    RegistrarUnreachable(NetError),
    #[error("received ledger is invalid: {0}")]
    LedgerValidationFailed(Violation),
    #[error("new content has the same root {0}")]
    SameContent(Cid),
    #[error("{0} is neither stored locally nor on the ledger")]
    UnknownRoot(Cid),
    #[error("record rejected: {0}")]
    RecordRejected(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<ExchangeError> for NodeError {
    fn from(e: ExchangeError) -> Self {
        match e {
            ExchangeError::Unretrievable(cid) => NodeError::Unretrievable(cid),
            ExchangeError::Store(s) => NodeError::Store(s),
        }
    }
}

/// Where a node keeps blocks, its chain, and name sequence numbers.
pub struct NodeStorage {
    pub blocks: Box<dyn BlockStore>,
    pub chain_file: Option<ChainFile>,
    pub names: NameState,
}

impl NodeStorage {
    pub fn memory() -> Self {
        Self {
            blocks: Box::new(MemStore::new()),
            chain_file: None,
            names: NameState::default(),
        }
    }

    /// `dir/blocks/`, `dir/chain.bin`, `dir/names`.
    pub fn open(dir: &Path) -> Result<Self, NodeError> {
        Ok(Self {
            blocks: Box::new(FsStore::open(dir.join("blocks"))?),
            chain_file: Some(ChainFile::new(dir.join("chain.bin"))),
            names: NameState::load(&dir.join("names"))?,
        })
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct NodeMetrics {
    /// Rounds used by every iterative lookup this node ran.
    pub lookup_rounds: Vec<u32>,
    pub rpcs_sent: u64,
    pub rpcs_failed: u64,
    pub requests_served: u64,
    /// Blocks that failed verification, by sending peer.
    pub invalid_blocks: Vec<(NodeId, Cid)>,
}

enum LedgerState {
    Writer(LedgerWriter),
    Replica { chain: Chain, file: Option<ChainFile> },
}

impl LedgerState {
    fn chain(&self) -> &Chain {
        match self {
            LedgerState::Writer(w) => w.chain(),
            LedgerState::Replica { chain, .. } => chain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LookupKind {
    Node,
    Providers,
    Value,
}

/// Blocks per LEDGER_BLOCKS reply.
const LEDGER_PAGE: usize = 64;

pub struct Node {
    rt: Rc<dyn Runtime>,
    identity: NodeIdentity,
    contact: Contact,
    config: NodeConfig,
    store: Box<dyn BlockStore>,
    routing: RefCell<RoutingTable>,
    providers: RefCell<ProviderStore>,
    records: RefCell<RecordStore>,
    provided: RefCell<BTreeSet<Cid>>,
    ledger: RefCell<LedgerState>,
    commit_waiters: RefCell<Vec<oneshot::Sender<Result<u64, String>>>>,
    flush_scheduled: Cell<bool>,
    peer_ledgers: PeerLedgers,
    names: RefCell<NameState>,
    published: RefCell<Option<NameRecord>>,
    metrics: RefCell<NodeMetrics>,
    byzantine: Cell<bool>,
    probing: RefCell<BTreeSet<NodeId>>,
    rng: RefCell<ChaCha20Rng>,
    me: Weak<Node>,
}

impl Node {
    /// Builds a node. A persisted chain is validated before use.
    pub fn new(
        rt: Rc<dyn Runtime>,
        identity: NodeIdentity,
        addr: String,
        config: NodeConfig,
        storage: NodeStorage,
        rng_seed: [u8; 32],
    ) -> Result<Rc<Node>, NodeError> {
        let blocks = match &storage.chain_file {
            Some(f) => f.load()?,
            None => Vec::new(),
        };
        let chain = Chain::from_blocks(blocks);
        chain
            .validate(config.difficulty)
            .map_err(NodeError::LedgerValidationFailed)?;
        let ledger = match config.role {
            Role::Registrar => {
                let mut w = LedgerWriter::new(chain, config.max_entries, config.difficulty);
                if let Some(f) = storage.chain_file {
                    w = w.with_file(f);
                }
                LedgerState::Writer(w)
            }
            Role::Peer => LedgerState::Replica {
                chain,
                file: storage.chain_file,
            },
        };
        let id = identity.node_id();
        Ok(Rc::new_cyclic(|me| Node {
            rt,
            contact: Contact::new(id, addr),
            identity,
            routing: RefCell::new(RoutingTable::new(id, config.dht.k)),
            config,
            store: storage.blocks,
            providers: RefCell::default(),
            records: RefCell::default(),
            provided: RefCell::default(),
            ledger: RefCell::new(ledger),
            commit_waiters: RefCell::default(),
            flush_scheduled: Cell::new(false),
            peer_ledgers: PeerLedgers::default(),
            names: RefCell::new(storage.names),
            published: RefCell::default(),
            metrics: RefCell::default(),
            byzantine: Cell::new(false),
            probing: RefCell::default(),
            rng: RefCell::new(ChaCha20Rng::from_seed(rng_seed)),
            me: me.clone(),
        }))
    }

    fn rc(&self) -> Rc<Node> {
        self.me.upgrade().expect("node is alive while its methods run")
    }

    pub fn id(&self) -> NodeId {
        self.contact.id
    }

    pub fn contact(&self) -> &Contact {
        &self.contact
    }

    pub fn identity(&self) -> &NodeIdentity {
        &self.identity
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn store(&self) -> &dyn BlockStore {
        &*self.store
    }

    pub fn runtime(&self) -> &Rc<dyn Runtime> {
        &self.rt
    }

    pub fn now_ms(&self) -> u64 {
        self.rt.now_ms()
    }

    pub fn chain(&self) -> Chain {
        self.ledger.borrow().chain().clone()
    }

    pub fn chain_len(&self) -> usize {
        self.ledger.borrow().chain().len()
    }

    pub fn chain_file(&self) -> Option<ChainFile> {
        match &*self.ledger.borrow() {
            LedgerState::Writer(w) => w.file().cloned(),
            LedgerState::Replica { file, .. } => file.clone(),
        }
    }

    /// Hash attempts per mined block (registrar only).
    pub fn mining_attempts(&self) -> Vec<u64> {
        match &*self.ledger.borrow() {
            LedgerState::Writer(w) => w.mining_attempts().to_vec(),
            LedgerState::Replica { .. } => Vec::new(),
        }
    }

    pub fn metrics(&self) -> NodeMetrics {
        self.metrics.borrow().clone()
    }

    pub fn peer_ledgers(&self) -> BTreeMap<NodeId, PeerLedger> {
        self.peer_ledgers.borrow().clone()
    }

    pub fn routing_contacts(&self) -> Vec<Contact> {
        self.routing.borrow().contacts().cloned().collect()
    }

    pub fn routing_contains(&self, id: &NodeId) -> bool {
        self.routing.borrow().contains(id)
    }

    pub fn holds_provider_record(&self, key: &Cid) -> bool {
        self.providers
            .borrow()
            .holds(&NodeId::from(key), &self.id())
            || !self
                .providers
                .borrow()
                .get(&NodeId::from(key), self.now_ms())
                .is_empty()
    }

    pub fn provider_records(&self, key: &Cid) -> Vec<ProviderRecord> {
        self.providers
            .borrow()
            .get(&NodeId::from(key), self.now_ms())
    }

    /// Makes this node flip a byte in every block it serves.
    pub fn set_byzantine(&self, on: bool) {
        self.byzantine.set(on);
    }

    pub fn is_byzantine(&self) -> bool {
        self.byzantine.get()
    }

    // ---- transport ----

    async fn rpc_addr(&self, addr: &str, request: Request, timeout_ms: u64) -> Result<Response, NetError> {
        let payload = Envelope {
            sender: self.contact.clone(),
            request,
        }
        .encode();
        self.metrics.borrow_mut().rpcs_sent += 1;
        let result = self
            .rt
            .call(addr, payload, timeout_ms)
            .await
            .and_then(|raw| Response::decode(&raw).map_err(|e| NetError::Protocol(e.to_string())));
        if result.is_err() {
            self.metrics.borrow_mut().rpcs_failed += 1;
        }
        result
    }

    /// Calls a known peer; a reply refreshes it in the routing table.
    async fn rpc(&self, peer: &Contact, request: Request, timeout_ms: u64) -> Result<Response, NetError> {
        let result = self.rpc_addr(&peer.addr, request, timeout_ms).await;
        if result.is_ok() {
            self.observe(peer.clone());
        }
        result
    }

    /// Records that `contact` is alive. A full bucket triggers a liveness
    /// probe of its least-recently-seen entry, which is evicted only if it
    /// fails a ping and one retry.
    fn observe(&self, contact: Contact) {
        if contact.id == self.id() {
            return;
        }
        let outcome = self.routing.borrow_mut().insert(contact.clone(), self.now_ms());
        if let InsertOutcome::BucketFull { oldest } = outcome {
            if !self.probing.borrow_mut().insert(oldest.id) {
                return;
            }
            let node = self.rc();
            self.rt.spawn(Box::pin(async move {
                let mut alive = false;
                for _ in 0..2 {
                    if let Ok(Response::Pong { .. }) = node
                        .rpc_addr(&oldest.addr, Request::Ping, node.config.rpc_timeout_ms)
                        .await
                    {
                        alive = true;
                        break;
                    }
                }
                let now = node.now_ms();
                let mut routing = node.routing.borrow_mut();
                if alive {
                    routing.insert(oldest.clone(), now);
                } else {
                    routing.evict_and_insert(&oldest.id, contact, now);
                }
                drop(routing);
                node.probing.borrow_mut().remove(&oldest.id);
            }));
        }
    }

    /// Adds a peer known only by address.
    pub async fn ping_addr(&self, addr: &str) -> Result<NodeId, NodeError> {
        match self.rpc_addr(addr, Request::Ping, self.config.rpc_timeout_ms).await {
            Ok(Response::Pong { node_id }) => {
                self.observe(Contact::new(node_id, addr));
                Ok(node_id)
            }
            Ok(other) => Err(NodeError::Dht(DhtError::Transport(format!(
                "unexpected {} reply to PING",
                other.name()
            )))),
            Err(e) => Err(NodeError::Dht(DhtError::Transport(e.to_string()))),
        }
    }

    /// Adds a peer whose id is already known (simulator bootstrap).
    pub fn add_contact(&self, contact: Contact) {
        self.observe(contact);
    }

    // ---- DHT ----

    async fn query(&self, peer: Contact, target: NodeId, kind: LookupKind) -> Result<QueryReply, ()> {
        let request = match kind {
            LookupKind::Node => Request::FindNode { target },
            LookupKind::Providers => Request::FindProviders { key: target },
            LookupKind::Value => Request::Get { key: target },
        };
        match self.rpc(&peer, request, self.config.rpc_timeout_ms).await {
            Ok(Response::Nodes { closer }) => Ok(QueryReply {
                closer,
                ..QueryReply::default()
            }),
            Ok(Response::Providers { providers, closer }) => Ok(QueryReply {
                closer,
                providers,
                value: None,
            }),
            Ok(Response::Value { value, closer }) => Ok(QueryReply {
                closer,
                providers: Vec::new(),
                value,
            }),
            _ => Err(()),
        }
    }

    async fn lookup(&self, target: NodeId, kind: LookupKind) -> Result<LookupOutcome, DhtError> {
        let k = self.config.dht.k;
        let seeds = self.routing.borrow().find_closest(&target, k);
        if seeds.is_empty() {
            return Err(DhtError::NoPeers);
        }
        let outcome = iterative_lookup(target, self.id(), seeds, k, self.config.dht.alpha, |peer| {
            self.query(peer, target, kind)
        })
        .await;
        self.metrics.borrow_mut().lookup_rounds.push(outcome.rounds);
        Ok(outcome)
    }

    /// Iterative FIND_NODE toward `target`.
    pub async fn iterative_find_node(&self, target: NodeId) -> Result<LookupOutcome, DhtError> {
        self.lookup(target, LookupKind::Node).await
    }

    /// The k nodes closest to `target` network-wide, this node included.
    async fn closest_including_self(&self, target: NodeId) -> Result<Vec<Contact>, DhtError> {
        let mut list = match self.lookup(target, LookupKind::Node).await {
            Ok(outcome) => outcome.closest,
            Err(DhtError::NoPeers) => Vec::new(),
            Err(e) => return Err(e),
        };
        list.push(self.contact.clone());
        list.sort_by_key(|c| (c.id.distance(&target), c.id));
        list.dedup_by_key(|c| c.id);
        list.truncate(self.config.dht.k);
        Ok(list)
    }

    /// Announces this node as a provider of `cid` on the k closest nodes.
    /// Returns how many accepted.
    pub async fn provide(&self, cid: &Cid) -> Result<usize, NodeError> {
        self.provided.borrow_mut().insert(*cid);
        let key = NodeId::from(cid);
        let ttl_ms = self.config.dht.record_ttl_ms;
        let targets = self.closest_including_self(key).await?;
        let acks = join_all(targets.iter().map(|peer| async move {
            if peer.id == self.id() {
                self.providers.borrow_mut().add(ProviderRecord {
                    key,
                    provider: self.contact.clone(),
                    expires_at: self.now_ms() + ttl_ms,
                });
                true
            } else {
                matches!(
                    self.rpc(peer, Request::AddProvider { key, ttl_ms }, self.config.rpc_timeout_ms)
                        .await,
                    Ok(Response::Ack)
                )
            }
        }))
        .await;
        Ok(acks.into_iter().filter(|ok| *ok).count())
    }

    /// Unexpired provider records for `cid`, one per provider.
    pub async fn find_providers(&self, cid: &Cid) -> Result<Vec<ProviderRecord>, NodeError> {
        let key = NodeId::from(cid);
        let mut found: BTreeMap<NodeId, ProviderRecord> = self
            .providers
            .borrow()
            .get(&key, self.now_ms())
            .into_iter()
            .map(|r| (r.provider.id, r))
            .collect();
        match self.lookup(key, LookupKind::Providers).await {
            Ok(outcome) => {
                for r in outcome.providers {
                    if r.key == key {
                        found.entry(r.provider.id).or_insert(r);
                    }
                }
            }
            Err(DhtError::NoPeers) if !found.is_empty() => {}
            Err(e) => return Err(e.into()),
        }
        let now = self.now_ms();
        Ok(found.into_values().filter(|r| r.expires_at > now).collect())
    }

    /// Stores a signed record on the k closest nodes. Returns how many
    /// accepted it.
    pub async fn store_record(&self, key: NodeId, value: Bytes) -> Result<usize, NodeError> {
        if value.len() > MAX_RECORD_LEN {
            return Err(DhtError::ValueTooLarge(value.len()).into());
        }
        let targets = self.closest_including_self(key).await?;
        let acks = join_all(targets.iter().map(|peer| {
            let value = value.clone();
            async move {
                if peer.id == self.id() {
                    self.records
                        .borrow_mut()
                        .put(key, value, &NameRecordValidator, self.now_ms())
                        .map_err(|e| e.to_string())
                } else {
                    match self
                        .rpc(peer, Request::Store { key, value }, self.config.rpc_timeout_ms)
                        .await
                    {
                        Ok(Response::Ack) => Ok(()),
                        Ok(Response::Error { message, .. }) => Err(message),
                        Ok(other) => Err(format!("unexpected {}", other.name())),
                        Err(e) => Err(e.to_string()),
                    }
                }
            }
        }))
        .await;
        let stored = acks.iter().filter(|r| r.is_ok()).count();
        if stored == 0 {
            let reason = acks
                .into_iter()
                .find_map(Result::err)
                .unwrap_or_else(|| "no node accepted the record".into());
            return Err(NodeError::RecordRejected(reason));
        }
        Ok(stored)
    }

    /// Every value for `key` held locally or returned during a lookup.
    pub async fn get_record_values(&self, key: NodeId) -> Result<Vec<Bytes>, NodeError> {
        let mut values: Vec<Bytes> = self.records.borrow().get(&key).map(|(v, _)| v).into_iter().collect();
        match self.lookup(key, LookupKind::Value).await {
            Ok(outcome) => values.extend(outcome.values.into_iter().map(|(_, v)| v)),
            Err(DhtError::NoPeers) if !values.is_empty() => {}
            Err(e) => return Err(e.into()),
        }
        Ok(values)
    }

    /// The valid value with the highest sequence number.
    pub async fn get_record(&self, key: NodeId) -> Result<Bytes, NodeError> {
        use crate::dht::RecordValidator;
        let now = self.now_ms();
        self.get_record_values(key)
            .await?
            .into_iter()
            .filter_map(|v| NameRecordValidator.validate(&key, &v, now).ok().map(|s| (s, v)))
            .max_by_key(|(s, _)| *s)
            .map(|(_, v)| v)
            .ok_or(NodeError::Dht(DhtError::NotFound))
    }

    // ---- membership ----

    /// Joins through peers known only by address.
    pub async fn bootstrap(&self, addrs: &[String]) -> Result<(), NodeError> {
        let mut reached = 0;
        for addr in addrs {
            if self.ping_addr(addr).await.is_ok() {
                reached += 1;
            }
        }
        if reached == 0 && !addrs.is_empty() {
            return Err(DhtError::NoPeers.into());
        }
        self.join().await
    }

    /// Looks up our own id, refreshes buckets beyond the nearest neighbour,
    /// then pulls the ledger.
    pub async fn join(&self) -> Result<(), NodeError> {
        match self.iterative_find_node(self.id()).await {
            Ok(_) => {}
            Err(DhtError::NoPeers) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
        let nearest = self.routing.borrow().occupied_buckets().first().copied();
        if let Some(nearest) = nearest {
            for bucket in nearest + 1..256 {
                let target = self.random_id_in_bucket(bucket);
                let _ = self.iterative_find_node(target).await;
            }
        }
        match self.sync_ledger().await {
            Ok(_) | Err(NodeError::NoRegistrar) | Err(NodeError::RegistrarUnreachable(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    fn random_id_in_bucket(&self, bucket: usize) -> NodeId {
        let mut d = [0u8; 32];
        self.rng.borrow_mut().fill_bytes(&mut d);
        let byte = 31 - bucket / 8;
        let bit = bucket % 8;
        for b in d.iter_mut().take(byte) {
            *b = 0;
        }
        d[byte] = (d[byte] & ((1u8 << bit) - 1)) | (1u8 << bit);
        let mut id = self.id().0;
        for (a, b) in id.iter_mut().zip(d) {
            *a ^= b;
        }
        NodeId(id)
    }

    /// Starts background republishing of provider and name records.
    pub fn start_maintenance(&self) {
        if let Some(interval) = self.config.dht.republish_ms {
            let node = self.rc();
            self.rt.spawn(Box::pin(async move {
                loop {
                    node.rt.sleep(interval).await;
                    node.providers.borrow_mut().purge_expired(node.now_ms());
                    let cids: Vec<Cid> = node.provided.borrow().iter().copied().collect();
                    for cid in cids {
                        let _ = node.provide(&cid).await;
                    }
                }
            }));
        }
        let node = self.rc();
        let half_life_ms = self.config.name_validity_secs * 1000 / 2;
        self.rt.spawn(Box::pin(async move {
            loop {
                node.rt.sleep(half_life_ms.max(1)).await;
                let current = node.published.borrow().clone();
                if let Some(record) = current {
                    let _ = node.republish_name(&record).await;
                }
            }
        }));
    }
}
