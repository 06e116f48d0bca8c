use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpRecord {
    pub index: usize,
    pub at_ms: u64,
    pub op: String,
    pub node: Option<usize>,
    pub ok: bool,
    /// Operation-specific result: a CID, a verify status, a resolved value.
    pub result: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupRecord {
    pub node: usize,
    pub target: String,
    pub rounds: u32,
    /// Result equals the true k closest nodes.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerCounters {
    pub node: usize,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
}

/// Everything a scenario run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub seed: u64,
    pub node_count: u32,
    pub ops: Vec<OpRecord>,
    pub lookups: Vec<LookupRecord>,
    pub peers: Vec<PeerCounters>,
    pub delivered: u64,
    pub dropped: u64,
    pub trace_events: u64,
    pub trace_digest: String,
    pub end_ms: u64,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line<'a> {
    Op(&'a OpRecord),
    Lookup(&'a LookupRecord),
    Peer(&'a PeerCounters),
    Summary {
        seed: u64,
        node_count: u32,
        delivered: u64,
        dropped: u64,
        mean_lookup_rounds: Option<f64>,
        trace_events: u64,
        trace_digest: &'a str,
        end_ms: u64,
    },
}

impl TraceReport {
    pub fn mean_lookup_rounds(&self) -> Option<f64> {
        if self.lookups.is_empty() {
            return None;
        }
        let total: u64 = self.lookups.iter().map(|l| u64::from(l.rounds)).sum();
        Some(total as f64 / self.lookups.len() as f64)
    }

    /// One JSON object per line: ops, lookups, peers, then a summary.
    pub fn to_jsonl(&self) -> String {
        let mut lines: Vec<Line> = Vec::new();
        lines.extend(self.ops.iter().map(Line::Op));
        lines.extend(self.lookups.iter().map(Line::Lookup));
        lines.extend(self.peers.iter().map(Line::Peer));
        lines.push(Line::Summary {
            seed: self.seed,
            node_count: self.node_count,
            delivered: self.delivered,
            dropped: self.dropped,
            mean_lookup_rounds: self.mean_lookup_rounds(),
            trace_events: self.trace_events,
            trace_digest: &self.trace_digest,
            end_ms: self.end_ms,
        });
        let mut out = String::new();
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("report lines serialize"));
            out.push('\n');
        }
        out
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed {}  nodes {}  end {} ms", self.seed, self.node_count, self.end_ms);
        let _ = writeln!(
            s,
            "messages delivered {}  dropped {}  trace {} events {}",
            self.delivered,
            self.dropped,
            self.trace_events,
            &self.trace_digest[..16.min(self.trace_digest.len())]
        );
        if let Some(mean) = self.mean_lookup_rounds() {
            let exact = self.lookups.iter().filter(|l| l.exact).count();
            let _ = writeln!(
                s,
                "lookups {}  mean rounds {:.2}  exact {}/{}",
                self.lookups.len(),
                mean,
                exact,
                self.lookups.len()
            );
        }
        let _ = writeln!(s, "\n{:>4} {:>10} {:>5} {:<12} result", "#", "at_ms", "node", "op");
        for op in &self.ops {
            let node = op.node.map_or("-".to_string(), |n| n.to_string());
            let result = match &op.error {
                Some(e) => format!("ERROR {e}"),
                None => op.result.clone(),
            };
            let _ = writeln!(s, "{:>4} {:>10} {:>5} {:<12} {}", op.index, op.at_ms, node, op.op, result);
        }
        let _ = writeln!(
            s,
            "\n{:>5} {:>12} {:>12} {:>8} {:>8}",
            "node", "bytes_sent", "bytes_recv", "msg_out", "msg_in"
        );
        for p in &self.peers {
            let _ = writeln!(
                s,
                "{:>5} {:>12} {:>12} {:>8} {:>8}",
                p.node, p.bytes_sent, p.bytes_received, p.messages_sent, p.messages_received
            );
        }
        s
    }
}
