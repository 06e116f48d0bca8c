use super::{Contact, Distance, NodeId};

#[derive(Debug, Clone)]
struct Entry {
    contact: Contact,
    last_seen: u64,
}

/// What happened when a contact was offered to the table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    /// Already known; moved to the most-recently-seen end.
    Refreshed,
    /// The bucket is full. The caller should probe `oldest` and call
    /// [`RoutingTable::evict_and_insert`] if it does not answer.
    BucketFull { oldest: Contact },
    IsSelf,
}

/// 256 k-buckets; bucket `i` holds contacts whose distance to the owner has
/// highest set bit `i`. Each bucket is ordered least-recently-seen first.
#[derive(Debug, Clone)]
pub struct RoutingTable {
    owner: NodeId,
    k: usize,
    buckets: Vec<Vec<Entry>>,
}

impl RoutingTable {
    pub fn new(owner: NodeId, k: usize) -> Self {
        Self {
            owner,
            k,
            buckets: vec![Vec::new(); 256],
        }
    }

    pub fn owner(&self) -> &NodeId {
        &self.owner
    }

    pub fn bucket_index(&self, id: &NodeId) -> Option<usize> {
        self.owner.distance(id).highest_bit()
    }

    pub fn insert(&mut self, contact: Contact, now: u64) -> InsertOutcome {
        let Some(index) = self.bucket_index(&contact.id) else {
            return InsertOutcome::IsSelf;
        };
        let bucket = &mut self.buckets[index];
        if let Some(pos) = bucket.iter().position(|e| e.contact.id == contact.id) {
            let mut entry = bucket.remove(pos);
            entry.contact.addr = contact.addr;
            entry.last_seen = now;
            bucket.push(entry);
            return InsertOutcome::Refreshed;
        }
        if bucket.len() < self.k {
            bucket.push(Entry {
                contact,
                last_seen: now,
            });
            return InsertOutcome::Inserted;
        }
        InsertOutcome::BucketFull {
            oldest: bucket[0].contact.clone(),
        }
    }

    /// Replaces `stale` (which failed its liveness probe) with `fresh`.
    /// Does nothing if `stale` is gone or `fresh` belongs to another bucket.
    pub fn evict_and_insert(&mut self, stale: &NodeId, fresh: Contact, now: u64) -> bool {
        let (Some(a), Some(b)) = (self.bucket_index(stale), self.bucket_index(&fresh.id)) else {
            return false;
        };
        if a != b {
            return false;
        }
        let bucket = &mut self.buckets[a];
        let Some(pos) = bucket.iter().position(|e| e.contact.id == *stale) else {
            return false;
        };
        bucket.remove(pos);
        if bucket.iter().any(|e| e.contact.id == fresh.id) {
            return true;
        }
        bucket.push(Entry {
            contact: fresh,
            last_seen: now,
        });
        true
    }

    pub fn remove(&mut self, id: &NodeId) -> bool {
        let Some(index) = self.bucket_index(id) else {
            return false;
        };
        let bucket = &mut self.buckets[index];
        let before = bucket.len();
        bucket.retain(|e| e.contact.id != *id);
        bucket.len() != before
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.bucket_index(id)
            .is_some_and(|i| self.buckets[i].iter().any(|e| e.contact.id == *id))
    }

    pub fn last_seen(&self, id: &NodeId) -> Option<u64> {
        let i = self.bucket_index(id)?;
        self.buckets[i]
            .iter()
            .find(|e| e.contact.id == *id)
            .map(|e| e.last_seen)
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bucket(&self, index: usize) -> impl Iterator<Item = &Contact> {
        self.buckets[index].iter().map(|e| &e.contact)
    }

    pub fn contacts(&self) -> impl Iterator<Item = &Contact> {
        self.buckets.iter().flatten().map(|e| &e.contact)
    }

    /// Indices of non-empty buckets.
    pub fn occupied_buckets(&self) -> Vec<usize> {
        (0..256).filter(|&i| !self.buckets[i].is_empty()).collect()
    }

    /// The `count` known contacts nearest to `target`, ascending by distance.
    pub fn find_closest(&self, target: &NodeId, count: usize) -> Vec<Contact> {
        let mut all: Vec<(Distance, &Contact)> = self
            .contacts()
            .map(|c| (c.id.distance(target), c))
            .collect();
        all.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        all.into_iter().take(count).map(|(_, c)| c.clone()).collect()
    }
}
