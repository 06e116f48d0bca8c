//! Iterative Kademlia lookup.

use std::collections::BTreeMap;
use std::future::Future;

use bytes::Bytes;
use futures::future::join_all;

use super::{Contact, Distance, NodeId, ProviderRecord};

/// What one queried peer answered.
#[derive(Debug, Clone, Default)]
pub struct QueryReply {
    pub closer: Vec<Contact>,
    pub providers: Vec<ProviderRecord>,
    pub value: Option<Bytes>,
}

#[derive(Debug, Clone, Default)]
pub struct LookupOutcome {
    /// The k closest peers that answered, nearest first.
    pub closest: Vec<Contact>,
    /// Query rounds used.
    pub rounds: u32,
    pub queried: usize,
    pub failed: usize,
    /// Provider records gathered along the way (not yet deduplicated).
    pub providers: Vec<ProviderRecord>,
    /// Record values returned by peers, with the peer that sent each.
    pub values: Vec<(Contact, Bytes)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Pending,
    Answered,
    Failed,
}

/// Runs an iterative lookup toward `target`.
///
/// Each round queries the `alpha` closest unqueried peers among the current
/// k closest. When a round fails to turn up anyone closer than the best peer
/// known before it, the next round queries every remaining unqueried peer in
/// the k closest at once. The lookup ends when all of the k closest live
/// peers have answered.
pub async fn iterative_lookup<F, Fut>(
    target: NodeId,
    self_id: NodeId,
    seeds: Vec<Contact>,
    k: usize,
    alpha: usize,
    mut query: F,
) -> LookupOutcome
where
    F: FnMut(Contact) -> Fut,
    Fut: Future<Output = Result<QueryReply, ()>>,
{
    let mut shortlist: BTreeMap<Distance, (Contact, State)> = BTreeMap::new();
    for c in seeds {
        if c.id != self_id {
            shortlist
                .entry(c.id.distance(&target))
                .or_insert((c, State::Pending));
        }
    }

    let mut outcome = LookupOutcome::default();
    let best_live = |list: &BTreeMap<Distance, (Contact, State)>| {
        list.iter()
            .find(|(_, (_, s))| *s != State::Failed)
            .map(|(d, _)| *d)
    };
    let mut best = best_live(&shortlist);
    let mut improved = true;

    loop {
        let pending: Vec<Contact> = shortlist
            .values()
            .filter(|(_, s)| *s != State::Failed)
            .take(k)
            .filter(|(_, s)| *s == State::Pending)
            .map(|(c, _)| c.clone())
            .collect();
        if pending.is_empty() {
            break;
        }
        let batch: Vec<Contact> = if improved {
            pending.into_iter().take(alpha).collect()
        } else {
            pending
        };
        outcome.rounds += 1;

        let replies = join_all(batch.iter().cloned().map(&mut query)).await;
        for (peer, reply) in batch.into_iter().zip(replies) {
            let key = peer.id.distance(&target);
            match reply {
                Ok(reply) => {
                    outcome.queried += 1;
                    if let Some(entry) = shortlist.get_mut(&key) {
                        entry.1 = State::Answered;
                    }
                    for c in reply.closer {
                        if c.id != self_id {
                            shortlist
                                .entry(c.id.distance(&target))
                                .or_insert((c, State::Pending));
                        }
                    }
                    outcome.providers.extend(reply.providers);
                    if let Some(v) = reply.value {
                        outcome.values.push((peer, v));
                    }
                }
                Err(()) => {
                    outcome.failed += 1;
                    if let Some(entry) = shortlist.get_mut(&key) {
                        entry.1 = State::Failed;
                    }
                }
            }
        }

        let now_best = best_live(&shortlist);
        improved = match (now_best, best) {
            (Some(n), Some(b)) => n < b,
            (Some(_), None) => true,
            _ => false,
        };
        best = now_best;
    }

    outcome.closest = shortlist
        .into_values()
        .filter(|(_, s)| *s == State::Answered)
        .take(k)
        .map(|(c, _)| c)
        .collect();
    outcome
}
