use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use cafs::api::{decode_data, encode_data, ApiRequest, ApiResponse, ErrorKind, DEFAULT_API_PORT};
use cafs::cid::Cid;
use cafs::daemon::{load_identity, Daemon, DaemonConfig, DaemonError};
use cafs::identity::NodeIdentity;
use cafs::ledger::{export_rows, validate_blocks, Chain, ChainFile, ExportRow, DEFAULT_DIFFICULTY};
use cafs::node::{VerifyReport, VerifyStatus};
use cafs::simnet::Scenario;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

mod client;
mod prompt;

use client::{Client, ClientError};

const EXIT_USAGE: u8 = 1;
const EXIT_UNREACHABLE: u8 = 2;
const EXIT_UNRETRIEVABLE: u8 = 3;
const EXIT_TAMPERED: u8 = 4;
const EXIT_UNKNOWN: u8 = 5;
const EXIT_LEDGER_INVALID: u8 = 6;

#[derive(Parser)]
#[command(name = "cafs", version, about = "Content-addressed file store with a metadata ledger")]
struct Cli {
    /// Daemon client API address.
    #[arg(long, global = true, env = "CAFS_API_ADDR", default_value_t = format!("127.0.0.1:{DEFAULT_API_PORT}"))]
    api_addr: String,

    #[arg(long, global = true, value_enum, default_value_t = Output::Human)]
    output: Output,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Output {
    Human,
    /// One JSON object per line.
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a node identity and write it, encrypted, to a key file.
    Init {
        #[arg(long, default_value = "node.key")]
        key_file: PathBuf,
        /// Replace an existing key file.
        #[arg(long)]
        force: bool,
    },
    /// Run a node in the foreground.
    Daemon {
        #[arg(long)]
        config: PathBuf,
    },
    /// Add a file and record its metadata in the ledger.
    Add { path: PathBuf },
    /// Fetch a file, verify it against the ledger and write it out.
    Get {
        cid: Cid,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
    },
    /// Check a CID against the ledger.
    Verify { cid: Cid },
    /// Publish or resolve a signed name.
    #[command(subcommand)]
    Name(NameCommand),
    /// Inspect the metadata ledger.
    #[command(subcommand)]
    Ledger(LedgerCommand),
    /// Drive the network simulator.
    #[command(subcommand)]
    Sim(SimCommand),
}

#[derive(Subcommand)]
enum NameCommand {
    /// Point this node's name at a CID.
    Publish { cid: Cid },
    /// Look up the CID a name key points at.
    Resolve { key: String },
}

#[derive(Subcommand)]
enum LedgerCommand {
    /// Check every block of the chain.
    Validate {
        /// Read a chain file directly instead of asking the daemon.
        #[arg(long)]
        chain_file: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_DIFFICULTY)]
        difficulty: u32,
    },
    /// Print every ledger entry as a JSON line.
    Export {
        #[arg(long)]
        chain_file: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SimCommand {
    /// Run a scenario file in the simulator.
    Run {
        scenario: PathBuf,
        /// Also write the line-delimited trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl Failure {
    fn new(code: u8, kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code,
            kind: kind.into(),
            message: message.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::new(EXIT_USAGE, "error", format!("{e:#}"))
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Unreachable(e) => Failure::new(EXIT_UNREACHABLE, "unreachable", format!("daemon unreachable: {e}")),
            ClientError::Protocol(m) => Failure::new(EXIT_UNREACHABLE, "protocol", format!("bad reply from daemon: {m}")),
        }
    }
}

impl From<DaemonError> for Failure {
    fn from(e: DaemonError) -> Self {
        let code = match e {
            DaemonError::LedgerValidationFailed(_) => EXIT_LEDGER_INVALID,
            _ => EXIT_USAGE,
        };
        Failure::new(code, "daemon", e.to_string())
    }
}

fn api_failure(kind: ErrorKind, message: String) -> Failure {
    let code = match kind {
        ErrorKind::Unretrievable => EXIT_UNRETRIEVABLE,
        ErrorKind::LedgerInvalid => EXIT_LEDGER_INVALID,
        _ => EXIT_USAGE,
    };
    let name = serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    Failure::new(code, name, message)
}

fn unexpected(r: ApiResponse) -> Failure {
    match r {
        ApiResponse::Error { kind, message } => api_failure(kind, message),
        other => Failure::new(EXIT_UNREACHABLE, "protocol", format!("unexpected reply {other:?}")),
    }
}

struct Ctx {
    output: Output,
    client: Client,
}

impl Ctx {
    fn json(&self) -> bool {
        self.output == Output::Json
    }

    fn emit(&self, value: serde_json::Value) {
        println!("{value}");
    }
}

fn status_code(status: VerifyStatus) -> u8 {
    match status {
        VerifyStatus::Verified => 0,
        VerifyStatus::Tampered => EXIT_TAMPERED,
        VerifyStatus::UnknownToLedger => EXIT_UNKNOWN,
    }
}

fn print_report(r: &VerifyReport) {
    println!("cid      {}", r.cid);
    println!("status   {:?}", r.status);
    println!("size     {} bytes", r.size_bytes);
    let heights: Vec<String> = r.ledger_entries.iter().map(|m| m.height.to_string()).collect();
    if heights.is_empty() {
        println!("ledger   no entries");
    } else {
        println!("ledger   {} entries at heights {}", heights.len(), heights.join(", "));
    }
    if !r.detail.is_empty() {
        println!("detail   {}", r.detail);
    }
}

fn passphrase(confirm: bool) -> anyhow::Result<String> {
    if let Ok(p) = std::env::var("CAFS_PASSPHRASE") {
        return Ok(p);
    }
    let p = prompt::hidden("passphrase: ").context("reading passphrase")?;
    if confirm && prompt::hidden("again: ").context("reading passphrase")? != p {
        anyhow::bail!("passphrases differ");
    }
    Ok(p)
}

fn init(ctx: &Ctx, key_file: &Path, force: bool) -> Result<u8, Failure> {
    if key_file.exists() && !force {
        return Err(anyhow::anyhow!("{} exists; pass --force to replace it", key_file.display()).into());
    }
    let pass = passphrase(true)?;
    let identity = NodeIdentity::generate(&mut rand::rngs::OsRng);
    identity
        .save(key_file, &pass, &mut rand::rngs::OsRng)
        .with_context(|| format!("writing {}", key_file.display()))?;
    if ctx.json() {
        ctx.emit(json!({
            "node_id": identity.node_id().to_hex(),
            "fingerprint": identity.fingerprint(),
            "key_file": key_file,
        }));
    } else {
        println!("node {}", identity.node_id().to_hex());
        println!("fingerprint {}", identity.fingerprint());
    }
    Ok(0)
}

fn daemon(ctx: &Ctx, config_path: &Path) -> Result<u8, Failure> {
    let config = DaemonConfig::load(config_path)?;
    let identity = load_identity(&config.key_file, &passphrase(false)?)?;
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    tokio::task::LocalSet::new().block_on(&rt, async {
        let d = Daemon::start(&config, identity).await?;
        if ctx.json() {
            ctx.emit(json!({
                "peer": d.peer_addr().to_string(),
                "api": d.api_addr().to_string(),
                "node": d.node().id().to_hex(),
            }));
        } else {
            println!("peer={} api={} node={}", d.peer_addr(), d.api_addr(), d.node().id().to_hex());
        }
        let _ = std::io::stdout().flush();
        tokio::signal::ctrl_c().await.context("waiting for interrupt")?;
        d.shutdown();
        Ok(0)
    })
}

fn add(ctx: &Ctx, path: &Path) -> Result<u8, Failure> {
    let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned());
    match ctx.client.call(&ApiRequest::Add {
        data: encode_data(&data),
        name,
    })? {
        ApiResponse::Added { cid, size_bytes, height } => {
            if ctx.json() {
                ctx.emit(json!({ "cid": cid, "size_bytes": size_bytes, "height": height }));
            } else {
                println!("{cid} height={height} size={size_bytes}");
            }
            Ok(0)
        }
        other => Err(unexpected(other)),
    }
}

fn get(ctx: &Ctx, cid: Cid, out: &Path) -> Result<u8, Failure> {
    match ctx.client.call(&ApiRequest::Get { cid })? {
        ApiResponse::Got { data, report } => {
            let bytes = decode_data(&data).map_err(|e| Failure::new(EXIT_UNREACHABLE, "protocol", e.to_string()))?;
            fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            if ctx.json() {
                ctx.emit(json!({ "path": out, "report": report }));
            } else {
                print_report(&report);
                println!("wrote    {} bytes to {}", bytes.len(), out.display());
            }
            Ok(status_code(report.status))
        }
        other => Err(unexpected(other)),
    }
}

fn verify(ctx: &Ctx, cid: Cid) -> Result<u8, Failure> {
    match ctx.client.call(&ApiRequest::Verify { cid })? {
        ApiResponse::Verified { report } => {
            if ctx.json() {
                ctx.emit(json!(report));
            } else {
                print_report(&report);
            }
            Ok(status_code(report.status))
        }
        other => Err(unexpected(other)),
    }
}

fn name(ctx: &Ctx, cmd: &NameCommand) -> Result<u8, Failure> {
    let request = match cmd {
        NameCommand::Publish { cid } => ApiRequest::Publish { cid: *cid },
        NameCommand::Resolve { key } => ApiRequest::Resolve { key: key.clone() },
    };
    match ctx.client.call(&request)? {
        ApiResponse::Published {
            name_key,
            cid,
            sequence,
            validity,
        } => {
            if ctx.json() {
                ctx.emit(json!({ "name_key": name_key, "cid": cid, "sequence": sequence, "validity": validity }));
            } else {
                println!("{name_key} -> {cid} (sequence {sequence})");
            }
            Ok(0)
        }
        ApiResponse::Resolved { name_key, cid, sequence } => {
            if ctx.json() {
                ctx.emit(json!({ "name_key": name_key, "cid": cid, "sequence": sequence }));
            } else {
                println!("{cid}");
            }
            Ok(0)
        }
        other => Err(unexpected(other)),
    }
}

fn load_chain(path: &Path) -> Result<Vec<cafs::ledger::LedgerBlock>, Failure> {
    if !path.exists() {
        return Err(anyhow::anyhow!("{} does not exist", path.display()).into());
    }
    ChainFile::new(path)
        .load()
        .map_err(|e| Failure::new(EXIT_LEDGER_INVALID, "ledger_invalid", format!("{}: {e}", path.display())))
}

fn report_validity(ctx: &Ctx, valid: bool, blocks: u64, violation: Option<cafs::ledger::Violation>, detail: &str) -> u8 {
    if ctx.json() {
        ctx.emit(json!({ "valid": valid, "blocks": blocks, "violation": violation, "detail": detail }));
    } else if valid {
        println!("valid: {blocks} blocks");
    } else {
        println!("invalid: {detail}");
    }
    if valid {
        0
    } else {
        EXIT_LEDGER_INVALID
    }
}

fn print_rows(rows: &[ExportRow]) {
    for row in rows {
        println!("{}", serde_json::to_string(row).expect("rows serialize"));
    }
}

fn ledger(ctx: &Ctx, cmd: &LedgerCommand) -> Result<u8, Failure> {
    match cmd {
        LedgerCommand::Validate {
            chain_file: Some(path),
            difficulty,
        } => {
            let blocks = load_chain(path)?;
            let n = blocks.len() as u64;
            Ok(match validate_blocks(&blocks, *difficulty) {
                Ok(()) => report_validity(ctx, true, n, None, ""),
                Err(v) => report_validity(ctx, false, n, Some(v), &v.to_string()),
            })
        }
        LedgerCommand::Validate { chain_file: None, .. } => match ctx.client.call(&ApiRequest::LedgerValidate)? {
            ApiResponse::LedgerValidity {
                valid,
                blocks,
                violation,
                detail,
            } => Ok(report_validity(ctx, valid, blocks, violation, &detail)),
            other => Err(unexpected(other)),
        },
        LedgerCommand::Export { chain_file: Some(path) } => {
            let chain = Chain::from_blocks(load_chain(path)?);
            print_rows(&export_rows(&chain));
            Ok(0)
        }
        LedgerCommand::Export { chain_file: None } => match ctx.client.call(&ApiRequest::LedgerExport)? {
            ApiResponse::LedgerRows { rows } => {
                print_rows(&rows);
                Ok(0)
            }
            other => Err(unexpected(other)),
        },
    }
}

fn sim(ctx: &Ctx, cmd: &SimCommand) -> Result<u8, Failure> {
    let SimCommand::Run { scenario, trace } = cmd;
    let text = fs::read_to_string(scenario).with_context(|| format!("reading {}", scenario.display()))?;
    let scenario = Scenario::from_toml(&text).map_err(|e| Failure::new(EXIT_USAGE, "scenario", e.to_string()))?;
    let report = scenario
        .run()
        .map_err(|e| Failure::new(EXIT_USAGE, "scenario", e.to_string()))?;
    let lines = report.to_jsonl();
    if let Some(path) = trace {
        fs::write(path, &lines).with_context(|| format!("writing {}", path.display()))?;
    }
    if ctx.json() {
        print!("{lines}");
    } else {
        print!("{}", report.summary_table());
    }
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    let ctx = Ctx {
        output: cli.output,
        client: Client::new(cli.api_addr.clone()),
    };
    log::debug!("api address {}", ctx.client.addr());
    match &cli.command {
        Command::Init { key_file, force } => init(&ctx, key_file, *force),
        Command::Daemon { config } => daemon(&ctx, config),
        Command::Add { path } => add(&ctx, path),
        Command::Get { cid, out } => get(&ctx, *cid, out),
        Command::Verify { cid } => verify(&ctx, *cid),
        Command::Name(cmd) => name(&ctx, cmd),
        Command::Ledger(cmd) => ledger(&ctx, cmd),
        Command::Sim(cmd) => sim(&ctx, cmd),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            if cli.output == Output::Json {
                println!("{}", json!({ "result": "error", "kind": f.kind, "message": f.message }));
            } else {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}
