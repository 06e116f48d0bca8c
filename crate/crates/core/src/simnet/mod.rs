//! Deterministic discrete-event network simulator.
//!
//! Every node is a real [`Node`] running on a shared virtual-time executor.
//! Messages are the same wire bytes the TCP transport carries; delivery
//! takes a uniformly drawn latency and may be silently dropped. One seeded
//! PRNG drives all network randomness, so equal configurations produce
//! identical runs.

mod executor;
mod report;
mod scenario;

use std::cell::RefCell;
use std::future::Future;
use std::rc::{Rc, Weak};

use futures::channel::oneshot;
use futures::future::{select, Either};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cid::{sha256, Cid};
use crate::clock::Clock;
use crate::dag::DagLimits;
use crate::dht::{closest_by_distance, DhtConfig, NodeId};
use crate::identity::NodeIdentity;
use crate::node::{Node, NodeConfig, NodeStorage, Role};
use crate::runtime::{LocalBoxFuture, NetError, RequestHandler, Runtime};

pub use executor::Executor;
pub use report::{LookupRecord, OpRecord, PeerCounters, TraceReport};
pub use scenario::{run_scenario, Action, Scenario, ScriptError, ScriptStep};

/// Virtual time at which every simulation starts (unix ms).
pub const EPOCH_MS: u64 = 1_700_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChurnAction {
    Join,
    Leave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChurnEvent {
    /// Offset from the end of the initial join phase.
    pub at_ms: u64,
    pub node: usize,
    pub action: ChurnAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub node_count: u32,
    /// Inclusive uniform latency range per message.
    pub latency_ms: (u64, u64),
    pub drop_probability: f64,
    pub churn: Vec<ChurnEvent>,
    /// Upper bound on virtual time for scripted runs.
    pub duration_ms: u64,
    pub k: usize,
    pub alpha: usize,
    pub difficulty: u32,
    pub chunk_size: usize,
    pub max_links: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        let dht = DhtConfig::default();
        let limits = DagLimits::default();
        Self {
            seed: 0,
            node_count: 16,
            latency_ms: (10, 50),
            drop_probability: 0.0,
            churn: Vec::new(),
            duration_ms: 3_600_000,
            k: dht.k,
            alpha: dht.alpha,
            difficulty: crate::ledger::DEFAULT_DIFFICULTY,
            chunk_size: limits.chunk_size,
            max_links: limits.max_links,
        }
    }
}

impl SimConfig {
    pub fn node_config(&self, index: usize) -> NodeConfig {
        let mut config = NodeConfig::simulated();
        config.dht.k = self.k;
        config.dht.alpha = self.alpha;
        config.difficulty = self.difficulty;
        config.limits = DagLimits {
            chunk_size: self.chunk_size,
            max_links: self.max_links,
        };
        if index == 0 {
            config.role = Role::Registrar;
        } else {
            config.registrar = Some(sim_addr(0));
        }
        config
    }

    /// Identity seed for node `index`: H(seed ‖ index).
    pub fn node_seed(&self, index: usize) -> [u8; 32] {
        let mut buf = self.seed.to_be_bytes().to_vec();
        buf.extend_from_slice(&(index as u64).to_be_bytes());
        sha256(&buf)
    }
}

pub fn sim_addr(index: usize) -> String {
    format!("sim:{index}")
}

fn parse_addr(addr: &str) -> Option<usize> {
    addr.strip_prefix("sim:")?.parse().ok()
}

/// Message and per-node traffic counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NetStats {
    pub delivered: u64,
    pub dropped: u64,
    pub messages_sent: Vec<u64>,
    pub messages_received: Vec<u64>,
}

struct Net {
    exec: Executor,
    latency: (u64, u64),
    drop_probability: f64,
    rng: RefCell<ChaCha20Rng>,
    nodes: RefCell<Vec<Rc<Node>>>,
    alive: RefCell<Vec<bool>>,
    group: RefCell<Vec<u32>>,
    stats: RefCell<NetStats>,
    trace: RefCell<(Sha256, u64)>,
}

impl Net {
    fn record(&self, line: String) {
        let mut t = self.trace.borrow_mut();
        t.0.update(line.as_bytes());
        t.0.update(b"\n");
        t.1 += 1;
    }

    fn reachable(&self, from: usize, to: usize) -> bool {
        let alive = self.alive.borrow();
        let group = self.group.borrow();
        alive[from] && alive[to] && group[from] == group[to]
    }

    /// Draws a latency and a drop decision, in that order.
    fn draw(&self) -> (u64, bool) {
        let mut rng = self.rng.borrow_mut();
        let latency = rng.gen_range(self.latency.0..=self.latency.1);
        let dropped = self.drop_probability > 0.0 && rng.gen_bool(self.drop_probability.min(1.0));
        (latency, dropped)
    }

    fn send_request(self: &Rc<Self>, from: usize, to: usize, payload: Vec<u8>, reply: oneshot::Sender<Vec<u8>>) {
        let (latency, dropped) = self.draw();
        let now = self.exec.now();
        self.stats.borrow_mut().messages_sent[from] += 1;
        self.record(format!(
            "{now} req {from}->{to} tag={:02x} len={} lat={latency} drop={dropped}",
            payload.first().copied().unwrap_or(0),
            payload.len()
        ));
        let net = self.clone();
        self.exec.schedule(now + latency, move || {
            if dropped || !net.reachable(from, to) {
                net.stats.borrow_mut().dropped += 1;
                return;
            }
            {
                let mut stats = net.stats.borrow_mut();
                stats.delivered += 1;
                stats.messages_received[to] += 1;
            }
            let node = net.nodes.borrow()[to].clone();
            let net2 = net.clone();
            net.exec.spawn(Box::pin(async move {
                let response = node.handle(payload).await;
                net2.send_response(to, from, response, reply);
            }));
        });
    }

    fn send_response(self: &Rc<Self>, from: usize, to: usize, payload: Vec<u8>, reply: oneshot::Sender<Vec<u8>>) {
        let (latency, dropped) = self.draw();
        let now = self.exec.now();
        self.stats.borrow_mut().messages_sent[from] += 1;
        self.record(format!(
            "{now} resp {from}->{to} tag={:02x} len={} lat={latency} drop={dropped}",
            payload.first().copied().unwrap_or(0),
            payload.len()
        ));
        let net = self.clone();
        self.exec.schedule(now + latency, move || {
            if dropped || !net.reachable(from, to) {
                net.stats.borrow_mut().dropped += 1;
                return;
            }
            let mut stats = net.stats.borrow_mut();
            stats.delivered += 1;
            stats.messages_received[to] += 1;
            let _ = reply.send(payload);
        });
    }
}

/// A node's view of the simulator.
struct SimRuntime {
    net: Weak<Net>,
    index: usize,
}

impl SimRuntime {
    fn net(&self) -> Rc<Net> {
        self.net.upgrade().expect("simulation outlives its nodes' work")
    }
}

impl Clock for SimRuntime {
    fn now_ms(&self) -> u64 {
        self.net().exec.now()
    }
}

impl Runtime for SimRuntime {
    fn sleep(&self, ms: u64) -> LocalBoxFuture<()> {
        self.net().exec.sleep(ms)
    }

    fn spawn(&self, task: LocalBoxFuture<()>) {
        self.net().exec.spawn(task);
    }

    fn call(&self, addr: &str, payload: Vec<u8>, timeout_ms: u64) -> LocalBoxFuture<Result<Vec<u8>, NetError>> {
        let net = self.net();
        let Some(to) = parse_addr(addr).filter(|&i| i < net.nodes.borrow().len()) else {
            let addr = addr.to_string();
            return Box::pin(async move { Err(NetError::Unreachable(addr)) });
        };
        let (tx, rx) = oneshot::channel();
        net.send_request(self.index, to, payload, tx);
        let timeout = net.exec.sleep(timeout_ms);
        Box::pin(async move {
            match select(rx, timeout).await {
                Either::Left((Ok(response), _)) => Ok(response),
                // Lost in transit: the caller only notices by timing out.
                Either::Left((Err(_), timeout)) => {
                    timeout.await;
                    Err(NetError::Timeout)
                }
                Either::Right(_) => Err(NetError::Timeout),
            }
        })
    }
}

/// A running simulated network.
pub struct Simulation {
    net: Rc<Net>,
    config: SimConfig,
}

impl Simulation {
    /// Creates the nodes. Node 0 is the registrar; nobody has joined yet.
    pub fn new(config: SimConfig) -> Self {
        let n = config.node_count as usize;
        let net = Rc::new(Net {
            exec: Executor::new(EPOCH_MS),
            latency: (config.latency_ms.0, config.latency_ms.1.max(config.latency_ms.0)),
            drop_probability: config.drop_probability,
            rng: RefCell::new(ChaCha20Rng::seed_from_u64(config.seed)),
            nodes: RefCell::default(),
            alive: RefCell::new(vec![true; n]),
            group: RefCell::new(vec![0; n]),
            stats: RefCell::new(NetStats {
                messages_sent: vec![0; n],
                messages_received: vec![0; n],
                ..NetStats::default()
            }),
            trace: RefCell::new((Sha256::new(), 0)),
        });
        for index in 0..n {
            let seed = config.node_seed(index);
            let rt: Rc<dyn Runtime> = Rc::new(SimRuntime {
                net: Rc::downgrade(&net),
                index,
            });
            let node = Node::new(
                rt,
                NodeIdentity::from_seed(seed),
                sim_addr(index),
                config.node_config(index),
                NodeStorage::memory(),
                sha256(&[&seed[..], b"rng"].concat()),
            )
            .expect("in-memory node has no persisted chain to reject");
            net.nodes.borrow_mut().push(node);
        }
        Self { net, config }
    }

    /// Builds the network and joins every node in index order through
    /// node 0, then schedules the churn events.
    pub fn start(config: SimConfig) -> Self {
        let sim = Self::new(config);
        let nodes = sim.nodes();
        sim.run(async move {
            let bootstrap = nodes[0].contact().clone();
            for node in nodes.iter() {
                node.start_maintenance();
            }
            for node in nodes.iter().skip(1) {
                node.add_contact(bootstrap.clone());
                let _ = node.join().await;
            }
        });
        let start = sim.now_ms();
        for event in sim.config.churn.clone() {
            let net = sim.net.clone();
            sim.net.exec.schedule(start + event.at_ms, move || {
                net.record(format!("{} churn {} {:?}", net.exec.now(), event.node, event.action));
                let Some(node) = net.nodes.borrow().get(event.node).cloned() else { return };
                match event.action {
                    ChurnAction::Leave => net.alive.borrow_mut()[event.node] = false,
                    ChurnAction::Join => {
                        net.alive.borrow_mut()[event.node] = true;
                        net.exec.spawn(Box::pin(async move {
                            let _ = node.join().await;
                        }));
                    }
                }
            });
        }
        sim
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.net.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, index: usize) -> Rc<Node> {
        self.net.nodes.borrow()[index].clone()
    }

    pub fn nodes(&self) -> Vec<Rc<Node>> {
        self.net.nodes.borrow().clone()
    }

    pub fn now_ms(&self) -> u64 {
        self.net.exec.now()
    }

    /// Runs `fut` to completion, processing network events as needed.
    ///
    /// Panics if the system goes idle with `fut` still pending.
    pub fn run<T: 'static>(&self, fut: impl Future<Output = T> + 'static) -> T {
        self.net
            .exec
            .run_until(fut, None)
            .expect("simulation went idle before the future completed")
    }

    /// Like [`Simulation::run`] but gives up at virtual time `deadline_ms`.
    pub fn run_until<T: 'static>(&self, fut: impl Future<Output = T> + 'static, deadline_ms: u64) -> Option<T> {
        self.net.exec.run_until(fut, Some(deadline_ms))
    }

    /// Lets virtual time pass, processing whatever happens meanwhile.
    pub fn advance(&self, ms: u64) {
        let sleep = self.net.exec.sleep(ms);
        self.run(sleep);
    }

    pub fn set_alive(&self, index: usize, alive: bool) {
        self.net.record(format!("{} alive {index} {alive}", self.now_ms()));
        self.net.alive.borrow_mut()[index] = alive;
    }

    pub fn is_alive(&self, index: usize) -> bool {
        self.net.alive.borrow()[index]
    }

    pub fn set_byzantine(&self, index: usize, on: bool) {
        self.net.record(format!("{} byzantine {index} {on}", self.now_ms()));
        self.node(index).set_byzantine(on);
    }

    /// Splits the network; nodes not listed form one extra group.
    pub fn partition(&self, groups: &[Vec<usize>]) {
        self.net.record(format!("{} partition {groups:?}", self.now_ms()));
        let mut g = self.net.group.borrow_mut();
        g.iter_mut().for_each(|x| *x = u32::MAX);
        for (i, members) in groups.iter().enumerate() {
            for &m in members {
                if m < g.len() {
                    g[m] = i as u32;
                }
            }
        }
    }

    pub fn heal(&self) {
        self.net.record(format!("{} heal", self.now_ms()));
        self.net.group.borrow_mut().iter_mut().for_each(|x| *x = 0);
    }

    pub fn stats(&self) -> NetStats {
        self.net.stats.borrow().clone()
    }

    /// Hash over every network event so far, and the event count.
    pub fn trace_digest(&self) -> (String, u64) {
        let t = self.net.trace.borrow();
        (hex::encode(t.0.clone().finalize()), t.1)
    }

    /// Omniscient views for tests. Nodes never see these.
    pub fn oracle(&self) -> Oracle<'_> {
        Oracle { sim: self }
    }
}

impl Drop for Simulation {
    fn drop(&mut self) {
        self.net.exec.clear();
        self.net.nodes.borrow_mut().clear();
    }
}

pub struct Oracle<'a> {
    sim: &'a Simulation,
}

impl Oracle<'_> {
    /// Indices and ids of live nodes.
    pub fn membership(&self) -> Vec<(usize, NodeId)> {
        let alive = self.sim.net.alive.borrow();
        self.sim
            .net
            .nodes
            .borrow()
            .iter()
            .enumerate()
            .filter(|(i, _)| alive[*i])
            .map(|(i, n)| (i, n.id()))
            .collect()
    }

    /// The true `k` live nodes closest to `target`, nearest first.
    pub fn k_closest(&self, target: &NodeId, k: usize) -> Vec<NodeId> {
        let ids: Vec<NodeId> = self.membership().into_iter().map(|(_, id)| id).collect();
        closest_by_distance(target, &ids, k)
    }

    /// Like [`Oracle::k_closest`] but leaves `exclude` out.
    pub fn k_closest_excluding(&self, target: &NodeId, k: usize, exclude: &NodeId) -> Vec<NodeId> {
        let ids: Vec<NodeId> = self
            .membership()
            .into_iter()
            .map(|(_, id)| id)
            .filter(|id| id != exclude)
            .collect();
        closest_by_distance(target, &ids, k)
    }

    /// Nodes whose block store holds `cid`.
    pub fn block_holders(&self, cid: &Cid) -> Vec<usize> {
        self.sim
            .net
            .nodes
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.store().has(cid))
            .map(|(i, _)| i)
            .collect()
    }

    /// Nodes holding an unexpired provider record for `cid`.
    pub fn provider_record_holders(&self, cid: &Cid) -> Vec<usize> {
        self.sim
            .net
            .nodes
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, n)| !n.provider_records(cid).is_empty())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn index_of(&self, id: &NodeId) -> Option<usize> {
        self.sim.net.nodes.borrow().iter().position(|n| n.id() == *id)
    }
}
