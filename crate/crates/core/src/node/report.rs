use serde::{Deserialize, Serialize};

use crate::cid::Cid;
use crate::ledger::MetadataEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerifyStatus {
    Verified,
    Tampered,
    UnknownToLedger,
}

/// A ledger entry that mentions the verified CID.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerMatch {
    pub height: u64,
    /// The CID appears as `modified_cid`, or as the predecessor of a
    /// modification.
    pub modification: bool,
    pub entry: MetadataEntry,
}

/// Outcome of checking retrieved content against the ledger.
///
/// `Verified` means at least one entry records this CID with a size, the
/// root recomputed from the fetched blocks equals the CID, and every
/// recorded size equals the retrieved size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub cid: Cid,
    pub status: VerifyStatus,
    pub size_bytes: u64,
    pub ledger_entries: Vec<LedgerMatch>,
    pub detail: String,
}

impl VerifyReport {
    pub fn is_verified(&self) -> bool {
        self.status == VerifyStatus::Verified
    }
}
