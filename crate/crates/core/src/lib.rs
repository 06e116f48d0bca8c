//! Content-addressed peer-to-peer file store whose file metadata is
//! committed to a proof-of-work ledger.

pub mod api;
pub mod cid;
pub mod clock;
pub mod codec;
pub mod daemon;
pub mod dag;
pub mod dht;
pub mod exchange;
pub mod ledger;
pub mod identity;
pub mod naming;
pub mod node;
pub mod runtime;
pub mod simnet;
pub mod wire;
