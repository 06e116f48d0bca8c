//! Scripted runs: a TOML scenario file maps to a [`SimConfig`] plus a list
//! of timed actions.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::report::{LookupRecord, OpRecord, PeerCounters, TraceReport};
use super::{ChurnEvent, SimConfig, Simulation};
use crate::cid::{sha256, Cid};
use crate::dht::NodeId;
use crate::node::NodeError;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScriptError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("step {step}: {reason}")]
    Invalid { step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Action {
    /// Adds `size` pseudo-random bytes on `node`, remembered as `label`.
    Add { node: usize, size: usize, label: String },
    /// Fetches and verifies `label` on `node`.
    Get { node: usize, label: String },
    /// Flips one byte of `label` and records the result as a modification.
    Modify { node: usize, label: String, new_label: String },
    /// Points `node`'s name at `label`.
    Publish { node: usize, label: String },
    /// Resolves the name owned by `owner`.
    Resolve { node: usize, owner: usize },
    /// Runs `count` lookups toward random keys from random live nodes (or
    /// from `node`).
    Lookup {
        #[serde(default)]
        node: Option<usize>,
        count: usize,
    },
    Partition { groups: Vec<Vec<usize>> },
    Heal,
    CorruptPeer { node: usize },
    Leave { node: usize },
    Join { node: usize },
    Wait { ms: u64 },
}

impl Action {
    fn name(&self) -> &'static str {
        match self {
            Action::Add { .. } => "add",
            Action::Get { .. } => "get",
            Action::Modify { .. } => "modify",
            Action::Publish { .. } => "publish",
            Action::Resolve { .. } => "resolve",
            Action::Lookup { .. } => "lookup",
            Action::Partition { .. } => "partition",
            Action::Heal => "heal",
            Action::CorruptPeer { .. } => "corrupt_peer",
            Action::Leave { .. } => "leave",
            Action::Join { .. } => "join",
            Action::Wait { .. } => "wait",
        }
    }

    fn node(&self) -> Option<usize> {
        match self {
            Action::Add { node, .. }
            | Action::Get { node, .. }
            | Action::Modify { node, .. }
            | Action::Publish { node, .. }
            | Action::Resolve { node, .. }
            | Action::CorruptPeer { node }
            | Action::Leave { node }
            | Action::Join { node } => Some(*node),
            Action::Lookup { node, .. } => *node,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    /// Earliest start, as an offset from the end of the join phase.
    #[serde(default)]
    pub at_ms: Option<u64>,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    seed: u64,
    node_count: u32,
    #[serde(default)]
    latency_ms: Option<(u64, u64)>,
    #[serde(default)]
    drop_probability: f64,
    #[serde(default)]
    duration_ms: Option<u64>,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    alpha: Option<usize>,
    #[serde(default)]
    difficulty: Option<u32>,
    #[serde(default)]
    chunk_size: Option<usize>,
    #[serde(default)]
    max_links: Option<usize>,
    #[serde(default)]
    churn: Vec<ChurnEvent>,
    #[serde(default)]
    script: Vec<ScriptStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: SimConfig,
    pub script: Vec<ScriptStep>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScriptError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| ScriptError::Parse(e.to_string()))?;
        let d = SimConfig::default();
        let config = SimConfig {
            seed: file.seed,
            node_count: file.node_count,
            latency_ms: file.latency_ms.unwrap_or(d.latency_ms),
            drop_probability: file.drop_probability,
            churn: file.churn,
            duration_ms: file.duration_ms.unwrap_or(d.duration_ms),
            k: file.k.unwrap_or(d.k),
            alpha: file.alpha.unwrap_or(d.alpha),
            difficulty: file.difficulty.unwrap_or(d.difficulty),
            chunk_size: file.chunk_size.unwrap_or(d.chunk_size),
            max_links: file.max_links.unwrap_or(d.max_links),
        };
        Ok(Self {
            config,
            script: file.script,
        })
    }

    pub fn run(&self) -> Result<TraceReport, ScriptError> {
        run_scenario(self.config.clone(), &self.script)
    }
}

fn check(config: &SimConfig, script: &[ScriptStep]) -> Result<(), ScriptError> {
    let n = config.node_count as usize;
    if n == 0 {
        return Err(ScriptError::Parse("node_count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&config.drop_probability) {
        return Err(ScriptError::Parse("drop_probability must lie in [0, 1]".into()));
    }
    if config.latency_ms.0 > config.latency_ms.1 {
        return Err(ScriptError::Parse("latency_ms must be [min, max]".into()));
    }
    if let Some(e) = config.churn.iter().find(|e| e.node >= n) {
        return Err(ScriptError::Parse(format!("churn names node {} of {n}", e.node)));
    }
    let mut labels = std::collections::BTreeSet::new();
    for (step, s) in script.iter().enumerate() {
        let invalid = |reason: String| Err(ScriptError::Invalid { step, reason });
        if let Some(node) = s.action.node() {
            if node >= n {
                return invalid(format!("node {node} out of range (have {n})"));
            }
        }
        match &s.action {
            Action::Add { label, .. } => {
                labels.insert(label.clone());
            }
            Action::Get { label, .. } | Action::Publish { label, .. } if !labels.contains(label) => {
                return invalid(format!("unknown label {label:?}"));
            }
            Action::Modify { label, new_label, .. } => {
                if !labels.contains(label) {
                    return invalid(format!("unknown label {label:?}"));
                }
                labels.insert(new_label.clone());
            }
            Action::Resolve { owner, .. } if *owner >= n => {
                return invalid(format!("owner {owner} out of range (have {n})"));
            }
            Action::Partition { groups } if groups.iter().flatten().any(|&m| m >= n) => {
                return invalid("partition names a node out of range".into());
            }
            _ => {}
        }
    }
    Ok(())
}

fn describe(e: &NodeError) -> String {
    match e {
        NodeError::Unretrievable(cid) => format!("Unretrievable({cid})"),
        NodeError::Dht(crate::dht::DhtError::NoPeers) => "NoPeers".into(),
        other => other.to_string(),
    }
}

/// Builds the network, runs `script` in order, and reports.
fn missing(label: &str) -> String {
    format!("no file labelled {label:?} (its add or modify failed)")
}

fn failed(mut record: OpRecord, error: String) -> OpRecord {
    record.ok = false;
    record.error = Some(error);
    record
}

pub fn run_scenario(config: SimConfig, script: &[ScriptStep]) -> Result<TraceReport, ScriptError> {
    check(&config, script)?;
    let mut rng = ChaCha20Rng::from_seed(sha256(&[&config.seed.to_be_bytes()[..], b"script"].concat()));
    let sim = Simulation::start(config.clone());
    let start = sim.now_ms();
    let deadline = start + config.duration_ms;
    let mut files: BTreeMap<String, (Cid, Vec<u8>)> = BTreeMap::new();
    let mut ops = Vec::new();
    let mut lookups = Vec::new();

    for (index, step) in script.iter().enumerate() {
        if let Some(at) = step.at_ms {
            let target = start + at;
            if target > sim.now_ms() {
                let sleep = sim.node(0).runtime().sleep(target - sim.now_ms());
                let _ = sim.run_until(sleep, deadline);
            }
        }
        let at_ms = sim.now_ms() - start;
        let mut record = OpRecord {
            index,
            at_ms,
            op: step.action.name().into(),
            node: step.action.node(),
            ok: true,
            result: String::new(),
            error: None,
        };
        let outcome: Option<Result<String, String>> = match &step.action {
            Action::Add { node, size, label } => {
                let mut data = vec![0u8; *size];
                rng.fill_bytes(&mut data);
                let n = sim.node(*node);
                let bytes = data.clone();
                let out = sim.run_until(async move { n.add_with_metadata(&bytes, None).await }, deadline);
                out.map(|r| {
                    r.map(|added| {
                        files.insert(label.clone(), (added.root, data));
                        format!("{} height={}", added.root, added.height)
                    })
                    .map_err(|e| describe(&e))
                })
            }
            Action::Get { node, label } => match files.get(label).cloned() {
                None => Some(Err(missing(label))),
                Some((cid, original)) => {
                    let n = sim.node(*node);
                    let out = sim.run_until(async move { n.get_with_verify(&cid).await }, deadline);
                    out.map(|r| {
                        r.map(|(data, report)| format!("{:?} {} match={}", report.status, cid, data == original))
                            .map_err(|e| describe(&e))
                    })
                }
            },
            Action::Modify { node, label, new_label } => {
                let Some((old, mut data)) = files.get(label).cloned() else {
                    ops.push(failed(record, missing(label)));
                    continue;
                };
                if data.is_empty() {
                    data.push(0);
                } else {
                    let i = rng.gen_range(0..data.len());
                    data[i] ^= 0x01;
                }
                let n = sim.node(*node);
                let bytes = data.clone();
                let out = sim.run_until(async move { n.record_modification(&old, &bytes, None).await }, deadline);
                out.map(|r| {
                    r.map(|added| {
                        files.insert(new_label.clone(), (added.root, data));
                        format!("{} -> {} height={}", old, added.root, added.height)
                    })
                    .map_err(|e| describe(&e))
                })
            }
            Action::Publish { node, label } => {
                let Some(cid) = files.get(label).map(|f| f.0) else {
                    ops.push(failed(record, missing(label)));
                    continue;
                };
                let n = sim.node(*node);
                let out = sim.run_until(async move { n.publish(cid).await }, deadline);
                out.map(|r| r.map(|rec| format!("seq={} {}", rec.sequence, rec.value)).map_err(|e| describe(&e)))
            }
            Action::Resolve { node, owner } => {
                let key = sim.node(*owner).id();
                let n = sim.node(*node);
                let out = sim.run_until(async move { n.resolve(key).await }, deadline);
                out.map(|r| r.map(|rec| format!("seq={} {}", rec.sequence, rec.value)).map_err(|e| describe(&e)))
            }
            Action::Lookup { node, count } => {
                let mut rounds = Vec::new();
                let mut finished = true;
                for _ in 0..*count {
                    let members = sim.oracle().membership();
                    let origin = match node {
                        Some(i) => *i,
                        None => members[rng.gen_range(0..members.len())].0,
                    };
                    let mut target = [0u8; 32];
                    rng.fill_bytes(&mut target);
                    let target = NodeId(target);
                    let n = sim.node(origin);
                    let out = sim.run_until(async move { n.iterative_find_node(target).await }, deadline);
                    let Some(result) = out else {
                        finished = false;
                        break;
                    };
                    if let Ok(outcome) = result {
                        let k = config.k;
                        let truth = sim.oracle().k_closest_excluding(&target, k, &sim.node(origin).id());
                        let found: Vec<NodeId> = outcome.closest.iter().map(|c| c.id).collect();
                        rounds.push(outcome.rounds);
                        lookups.push(LookupRecord {
                            node: origin,
                            target: target.to_hex(),
                            rounds: outcome.rounds,
                            exact: found == truth,
                        });
                    }
                }
                finished.then(|| {
                    let total: u32 = rounds.iter().sum();
                    Ok(format!(
                        "{} lookups, mean rounds {:.3}",
                        rounds.len(),
                        f64::from(total) / rounds.len().max(1) as f64
                    ))
                })
            }
            Action::Partition { groups } => {
                sim.partition(groups);
                Some(Ok(format!("{groups:?}")))
            }
            Action::Heal => {
                sim.heal();
                Some(Ok("healed".into()))
            }
            Action::CorruptPeer { node } => {
                sim.set_byzantine(*node, true);
                Some(Ok("corrupting served blocks".into()))
            }
            Action::Leave { node } => {
                sim.set_alive(*node, false);
                Some(Ok("left".into()))
            }
            Action::Join { node } => {
                sim.set_alive(*node, true);
                let n = sim.node(*node);
                let out = sim.run_until(async move { n.join().await }, deadline);
                out.map(|r| r.map(|()| "joined".to_string()).map_err(|e| describe(&e)))
            }
            Action::Wait { ms } => {
                let sleep = sim.node(0).runtime().sleep(*ms);
                sim.run_until(sleep, deadline).map(|()| Ok(format!("waited {ms} ms")))
            }
        };
        let finished = outcome.is_some();
        match outcome {
            Some(Ok(result)) => record.result = result,
            Some(Err(e)) => {
                record.ok = false;
                record.error = Some(e);
            }
            None => {
                record.ok = false;
                record.error = Some("did not finish before the scenario duration".into());
            }
        }
        ops.push(record);
        if !finished {
            break;
        }
    }

    let stats = sim.stats();
    let peers = sim
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let ledgers = n.peer_ledgers();
            PeerCounters {
                node: i,
                bytes_sent: ledgers.values().map(|l| l.bytes_sent).sum(),
                bytes_received: ledgers.values().map(|l| l.bytes_received).sum(),
                messages_sent: stats.messages_sent[i],
                messages_received: stats.messages_received[i],
            }
        })
        .collect();
    let (trace_digest, trace_events) = sim.trace_digest();
    Ok(TraceReport {
        seed: config.seed,
        node_count: config.node_count,
        ops,
        lookups,
        peers,
        delivered: stats.delivered,
        dropped: stats.dropped,
        trace_events,
        trace_digest,
        end_ms: sim.now_ms() - start,
    })
}
