//! The executor/transport abstraction node code runs on.
//!
//! Node logic is single-threaded async code. It never touches sockets or the
//! wall clock directly; everything goes through a [`Runtime`], which is
//! satisfied both by the deterministic simulator and by the tokio-based
//! daemon.

use std::future::Future;
use std::pin::Pin;

use thiserror::Error;

use crate::clock::Clock;

pub type LocalBoxFuture<T> = Pin<Box<dyn Future<Output = T>>>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("request timed out")]
    Timeout,
    #[error("peer unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

pub trait Runtime: Clock {
    fn sleep(&self, ms: u64) -> LocalBoxFuture<()>;

    fn spawn(&self, task: LocalBoxFuture<()>);

    /// Sends one request payload to `addr` and waits up to `timeout_ms` for
    /// the response payload. Payloads are unframed; the runtime frames them.
    fn call(&self, addr: &str, payload: Vec<u8>, timeout_ms: u64) -> LocalBoxFuture<Result<Vec<u8>, NetError>>;
}

/// Something that answers peer requests: payload in, payload out.
pub trait RequestHandler {
    fn handle(&self, payload: Vec<u8>) -> LocalBoxFuture<Vec<u8>>;
}
