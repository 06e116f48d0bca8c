//! Running a node over real TCP.
//!
//! Everything runs on one thread inside a tokio `LocalSet`: the peer
//! listener, the client API listener, and the node's own background tasks.
//! Peer requests are length-prefixed frames; each outbound call opens its
//! own connection.

use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Duration;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;

use crate::api::{decode_data, encode_data, ApiRequest, ApiResponse, ErrorKind, DEFAULT_API_PORT, DEFAULT_PEER_PORT};
use crate::clock::{Clock, SystemClock};
use crate::dag::DagLimits;
use crate::dht::NodeId;
use crate::identity::{IdentityError, NodeIdentity};
use crate::ledger::{export_rows, validate_blocks, Violation};
use crate::node::{Node, NodeConfig, NodeError, NodeStorage, Role};
use crate::runtime::{LocalBoxFuture, NetError, RequestHandler, Runtime};
use crate::wire::MAX_FRAME_LEN;

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("address already in use: {0}")]
    AddrInUse(String),
    #[error("wrong passphrase for key file")]
    BadKeyPassphrase,
    #[error("key file: {0}")]
    KeyFile(IdentityError),
    #[error("stored or received ledger is invalid: {0}")]
    LedgerValidationFailed(Violation),
    #[error("bad config: {0}")]
    Config(String),
    #[error(transparent)]
    Node(NodeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<NodeError> for DaemonError {
    fn from(e: NodeError) -> Self {
        match e {
            NodeError::LedgerValidationFailed(v) => DaemonError::LedgerValidationFailed(v),
            other => DaemonError::Node(other),
        }
    }
}

fn default_listen() -> String {
    format!("127.0.0.1:{DEFAULT_PEER_PORT}")
}

fn default_api() -> String {
    format!("127.0.0.1:{DEFAULT_API_PORT}")
}

fn default_key_file() -> PathBuf {
    PathBuf::from("node.key")
}

fn default_difficulty() -> u32 {
    crate::ledger::DEFAULT_DIFFICULTY
}

fn default_chunk_size() -> usize {
    crate::dag::DEFAULT_CHUNK_SIZE
}

fn default_flush_interval() -> u64 {
    NodeConfig::real().flush_interval_ms
}

fn default_role() -> Role {
    Role::Peer
}

/// Daemon settings, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaemonConfig {
    #[serde(default = "default_listen")]
    pub listen_addr: String,
    #[serde(default = "default_api")]
    pub api_addr: String,
    #[serde(default)]
    pub bootstrap: Vec<String>,
    #[serde(default = "default_key_file")]
    pub key_file: PathBuf,
    /// Blocks, chain and name state live here; in memory when unset.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_difficulty")]
    pub difficulty: u32,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    #[serde(default = "default_role")]
    pub role: Role,
    /// How long the registrar batches entries before mining a block.
    #[serde(default = "default_flush_interval")]
    pub flush_interval_ms: u64,
    /// Peer address of the registrar; defaults to the first bootstrap peer.
    #[serde(default)]
    pub registrar: Option<String>,
}

impl Default for DaemonConfig {
    fn default() -> Self {
        Self {
            listen_addr: default_listen(),
            api_addr: default_api(),
            bootstrap: Vec::new(),
            key_file: default_key_file(),
            data_dir: None,
            difficulty: default_difficulty(),
            chunk_size: default_chunk_size(),
            role: default_role(),
            flush_interval_ms: default_flush_interval(),
            registrar: None,
        }
    }
}

impl DaemonConfig {
    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, DaemonError> {
        let text = std::fs::read_to_string(path)?;
        let mut config: DaemonConfig = toml::from_str(&text).map_err(|e| DaemonError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.key_file.is_relative() {
            config.key_file = base.join(&config.key_file);
        }
        if let Some(dir) = &config.data_dir {
            if dir.is_relative() {
                config.data_dir = Some(base.join(dir));
            }
        }
        Ok(config)
    }

    pub fn node_config(&self) -> NodeConfig {
        let mut config = NodeConfig::real();
        config.difficulty = self.difficulty;
        config.limits = DagLimits {
            chunk_size: self.chunk_size,
            ..DagLimits::default()
        };
        config.role = self.role;
        config.flush_interval_ms = self.flush_interval_ms;
        if self.role == Role::Peer {
            config.registrar = self.registrar.clone().or_else(|| self.bootstrap.first().cloned());
        }
        config
    }
}

pub fn load_identity(path: &Path, passphrase: &str) -> Result<NodeIdentity, DaemonError> {
    NodeIdentity::load(path, passphrase).map_err(|e| match e {
        IdentityError::BadPassphrase => DaemonError::BadKeyPassphrase,
        other => DaemonError::KeyFile(other),
    })
}

/// Wall clock, tokio timers, TCP calls.
#[derive(Debug, Default, Clone, Copy)]
pub struct TokioRuntime;

impl Clock for TokioRuntime {
    fn now_ms(&self) -> u64 {
        SystemClock.now_ms()
    }
}

async fn read_frame(stream: &mut (impl AsyncReadExt + Unpin)) -> io::Result<Vec<u8>> {
    let len = stream.read_u32().await? as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf).await?;
    Ok(buf)
}

async fn write_frame(stream: &mut (impl AsyncWriteExt + Unpin), payload: &[u8]) -> io::Result<()> {
    stream.write_all(&crate::wire::frame(payload)).await?;
    stream.flush().await
}

async fn exchange(addr: String, payload: Vec<u8>) -> Result<Vec<u8>, NetError> {
    let mut stream = TcpStream::connect(&addr)
        .await
        .map_err(|e| NetError::Unreachable(format!("{addr}: {e}")))?;
    write_frame(&mut stream, &payload)
        .await
        .map_err(|e| NetError::Unreachable(format!("{addr}: {e}")))?;
    read_frame(&mut stream)
        .await
        .map_err(|e| NetError::Protocol(format!("{addr}: {e}")))
}

impl Runtime for TokioRuntime {
    fn sleep(&self, ms: u64) -> LocalBoxFuture<()> {
        Box::pin(tokio::time::sleep(Duration::from_millis(ms)))
    }

    fn spawn(&self, task: LocalBoxFuture<()>) {
        tokio::task::spawn_local(task);
    }

    fn call(&self, addr: &str, payload: Vec<u8>, timeout_ms: u64) -> LocalBoxFuture<Result<Vec<u8>, NetError>> {
        let addr = addr.to_string();
        Box::pin(async move {
            tokio::time::timeout(Duration::from_millis(timeout_ms), exchange(addr, payload))
                .await
                .unwrap_or(Err(NetError::Timeout))
        })
    }
}

async fn bind(addr: &str) -> Result<TcpListener, DaemonError> {
    TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => DaemonError::AddrInUse(addr.to_string()),
        _ => DaemonError::Io(e),
    })
}

async fn serve_peer(node: Rc<Node>, mut stream: TcpStream) {
    while let Ok(request) = read_frame(&mut stream).await {
        let response = node.handle(request).await;
        if write_frame(&mut stream, &response).await.is_err() {
            break;
        }
    }
}

async fn serve_api(node: Rc<Node>, stream: TcpStream) {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        if line.trim().is_empty() {
            continue;
        }
        let mut out = handle_api_line(&node, &line).await;
        out.push('\n');
        if write.write_all(out.as_bytes()).await.is_err() {
            break;
        }
    }
}

/// Answers one API request line with one response line (no newline).
pub async fn handle_api_line(node: &Node, line: &str) -> String {
    let response = match serde_json::from_str::<ApiRequest>(line) {
        Ok(request) => handle_api(node, request).await,
        Err(e) => ApiResponse::error(ErrorKind::BadRequest, e.to_string()),
    };
    serde_json::to_string(&response).expect("responses serialize")
}

pub async fn handle_api(node: &Node, request: ApiRequest) -> ApiResponse {
    let fail = |e: NodeError| ApiResponse::from_node_error(&e);
    match request {
        ApiRequest::Add { data, name } => {
            let Ok(bytes) = decode_data(&data) else {
                return ApiResponse::error(ErrorKind::BadRequest, "data is not valid base64");
            };
            match node.add_with_metadata(&bytes, name.as_deref()).await {
                Ok(a) => ApiResponse::Added {
                    cid: a.root,
                    size_bytes: a.size_bytes,
                    height: a.height,
                },
                Err(e) => fail(e),
            }
        }
        ApiRequest::Get { cid } => match node.get_with_verify(&cid).await {
            Ok((data, report)) => ApiResponse::Got {
                data: encode_data(&data),
                report,
            },
            Err(e) => fail(e),
        },
        ApiRequest::Verify { cid } => match node.verify(&cid).await {
            Ok(report) => ApiResponse::Verified { report },
            Err(e) => fail(e),
        },
        ApiRequest::Publish { cid } => match node.publish(cid).await {
            Ok(r) => ApiResponse::Published {
                name_key: r.name_key.to_hex(),
                cid: r.value,
                sequence: r.sequence,
                validity: r.validity,
            },
            Err(e) => fail(e),
        },
        ApiRequest::Resolve { key } => {
            let Some(key) = NodeId::from_hex(&key) else {
                return ApiResponse::error(ErrorKind::BadRequest, "name key must be 64 hex digits");
            };
            match node.resolve(key).await {
                Ok(r) => ApiResponse::Resolved {
                    name_key: r.name_key.to_hex(),
                    cid: r.value,
                    sequence: r.sequence,
                },
                Err(e) => fail(e),
            }
        }
        ApiRequest::LedgerExport => {
            if let Err(e) = node.sync_ledger().await {
                if matches!(e, NodeError::LedgerValidationFailed(_)) {
                    return fail(e);
                }
            }
            ApiResponse::LedgerRows {
                rows: export_rows(&node.chain()),
            }
        }
        ApiRequest::LedgerValidate => ledger_validity(node),
        ApiRequest::Info => ApiResponse::Info {
            node_id: node.id().to_hex(),
            fingerprint: node.identity().fingerprint(),
            peer_addr: node.contact().addr.clone(),
            role: node.config().role,
            chain_len: node.chain_len() as u64,
            routing_contacts: node.routing_contacts().len(),
        },
    }
}

/// Validates the chain as persisted on disk (or in memory when the node
/// has no chain file), so edits made behind the daemon's back are caught.
fn ledger_validity(node: &Node) -> ApiResponse {
    let difficulty = node.config().difficulty;
    let blocks = match node.chain_file() {
        Some(file) => match file.load() {
            Ok(blocks) => blocks,
            Err(e) => {
                return ApiResponse::LedgerValidity {
                    valid: false,
                    blocks: 0,
                    violation: None,
                    detail: format!("chain file unreadable: {e}"),
                }
            }
        },
        None => node.chain().blocks().to_vec(),
    };
    let count = blocks.len() as u64;
    match validate_blocks(&blocks, difficulty) {
        Ok(()) => ApiResponse::LedgerValidity {
            valid: true,
            blocks: count,
            violation: None,
            detail: format!("{count} blocks valid at difficulty {difficulty}"),
        },
        Err(v) => ApiResponse::LedgerValidity {
            valid: false,
            blocks: count,
            violation: Some(v),
            detail: v.to_string(),
        },
    }
}

/// A node serving peers and local clients over TCP.
pub struct Daemon {
    node: Rc<Node>,
    peer_addr: SocketAddr,
    api_addr: SocketAddr,
    tasks: Vec<JoinHandle<()>>,
}

impl Daemon {
    /// Binds both listeners, joins the network through the bootstrap peers,
    /// and replicates the ledger. Must run inside a tokio `LocalSet`.
    pub async fn start(config: &DaemonConfig, identity: NodeIdentity) -> Result<Daemon, DaemonError> {
        let peer_listener = bind(&config.listen_addr).await?;
        let api_listener = bind(&config.api_addr).await?;
        let peer_addr = peer_listener.local_addr()?;
        let api_addr = api_listener.local_addr()?;
        let storage = match &config.data_dir {
            Some(dir) => NodeStorage::open(dir)?,
            None => NodeStorage::memory(),
        };
        let mut seed = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut seed);
        let node = Node::new(
            Rc::new(TokioRuntime),
            identity,
            peer_addr.to_string(),
            config.node_config(),
            storage,
            seed,
        )?;

        let mut tasks = Vec::new();
        let n = node.clone();
        tasks.push(tokio::task::spawn_local(async move {
            while let Ok((stream, _)) = peer_listener.accept().await {
                tokio::task::spawn_local(serve_peer(n.clone(), stream));
            }
        }));
        let n = node.clone();
        tasks.push(tokio::task::spawn_local(async move {
            while let Ok((stream, _)) = api_listener.accept().await {
                tokio::task::spawn_local(serve_api(n.clone(), stream));
            }
        }));
        node.start_maintenance();

        match node.bootstrap(&config.bootstrap).await {
            Ok(()) => {}
            Err(NodeError::LedgerValidationFailed(v)) => {
                for t in &tasks {
                    t.abort();
                }
                return Err(DaemonError::LedgerValidationFailed(v));
            }
            Err(e) => log::warn!("bootstrap incomplete: {e}"),
        }
        Ok(Daemon {
            node,
            peer_addr,
            api_addr,
            tasks,
        })
    }

    pub fn node(&self) -> &Rc<Node> {
        &self.node
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.peer_addr
    }

    pub fn api_addr(&self) -> SocketAddr {
        self.api_addr
    }

    /// Stops accepting connections.
    pub fn shutdown(self) {
        for t in self.tasks {
            t.abort();
        }
    }
}
