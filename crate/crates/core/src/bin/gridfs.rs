use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gridfs::cryptengine::{self, CipherParams, CryptError, CryptJob};
use gridfs::dfsm::{DfsClient, DfsError};
use gridfs::ftsm::{self, FtsmError, TransferOptions};
use gridfs::node::{self, NodeConfig, NodeError};
use gridfs::perms::{self, PermissionDoc, PermissionFlag, PermsError};
use gridfs::secchan::{Credentials, SecError};
use gridfs::taskexec::{self, TaskClient, TaskError, TaskSpec, TaskStatus};
use gridfs::wire::{SecurityMode, Status};

#[derive(Parser)]
#[command(name = "gridfs", version, about = "Desktop-grid node daemon and client")]
struct Cli {
    /// Config file; also read from GRIDFS_CONFIG.
    #[arg(long, global = true, env = "GRIDFS_CONFIG")]
    config: Option<PathBuf>,
    /// Account used for client verbs.
    #[arg(long, global = true, env = "GRIDFS_USER", default_value = "admin")]
    user: String,
    /// Hex pre-shared key. Defaults to the user's line in the local credential file.
    #[arg(long, global = true, env = "GRIDFS_PSK", hide_env_values = true)]
    psk: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = Security::Secure)]
    security: Security,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Security {
    None,
    Secure,
    Semi,
}

impl From<Security> for SecurityMode {
    fn from(s: Security) -> Self {
        match s {
            Security::None => SecurityMode::NonSecure,
            Security::Secure => SecurityMode::Secure,
            Security::Semi => SecurityMode::SemiSecure,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the daemon until SIGINT or SIGTERM.
    Serve,
    /// Copy a file to or from a node. Remote paths are written HOST:PORT:PATH.
    Cp(CpArgs),
    /// Memory-to-memory throughput test.
    Bench(BenchArgs),
    /// Single remote file-system operations.
    Fs {
        #[command(subcommand)]
        op: FsOp,
    },
    /// Run a process on a node with staged dependencies.
    Submit(SubmitArgs),
    /// Compute pi hex digits split across nodes.
    Pi(PiArgs),
    /// Distributed block encryption.
    Crypt {
        #[command(subcommand)]
        op: CryptOp,
    },
    /// Manage local accounts.
    Account {
        #[command(subcommand)]
        op: AccountOp,
    },
}

#[derive(Args)]
struct CpArgs {
    src: String,
    dst: String,
    #[arg(long, default_value_t = 4)]
    streams: u8,
    #[arg(long, default_value_t = 262144)]
    buffer: u32,
    #[arg(long)]
    offset: Option<u64>,
    #[arg(long)]
    length: Option<u64>,
    /// Start over instead of resuming a previous attempt.
    #[arg(long)]
    no_resume: bool,
    /// Stop after this many bytes, leaving the transfer resumable.
    #[arg(long, hide = true)]
    abort_after: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    node: String,
    /// Memory to memory (the only source this verb offers).
    #[arg(long)]
    mem: bool,
    #[arg(long, default_value_t = 4)]
    streams: u8,
    #[arg(long, default_value_t = 5.0)]
    seconds: f64,
    #[arg(long, default_value_t = 262144)]
    buffer: u32,
    /// Bytes pushed per round.
    #[arg(long, default_value_t = 64 << 20)]
    round: u64,
}

#[derive(Args)]
struct Target {
    node: String,
    path: String,
    #[arg(long, default_value_t = 0)]
    offset: u64,
    #[arg(long)]
    length: Option<u64>,
}

#[derive(Subcommand)]
enum FsOp {
    /// Print bytes to stdout.
    Read(Target),
    /// Write stdin at the offset.
    Write(Target),
    /// Take a range lock, print its id, and hold it until stdin closes.
    Lock(Target),
    Unlock {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        lock_id: u64,
    },
    /// Set the file length to --length.
    Truncate(Target),
    Stat(Target),
}

#[derive(Args)]
struct SubmitArgs {
    node: String,
    /// Command line; split on whitespace.
    #[arg(long)]
    cmd: String,
    #[arg(long = "dep")]
    deps: Vec<PathBuf>,
    #[arg(long = "out")]
    outs: Vec<String>,
    /// Declare network use.
    #[arg(long)]
    net: bool,
    #[arg(long, default_value_t = 300)]
    timeout: u64,
    /// Where produced outputs land.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PiArgs {
    #[arg(required = true)]
    nodes: Vec<String>,
    #[arg(long, default_value_t = 1024)]
    digits: u64,
}

#[derive(Args)]
struct CryptArgs {
    /// File name in the distributor's store.
    file: String,
    #[arg(long, value_delimiter = ',', required = true)]
    workers: Vec<String>,
    /// Node holding the file; defaults to this host's configured port.
    #[arg(long)]
    distributor: Option<String>,
    #[arg(long, default_value = "aes128")]
    cipher: String,
    #[arg(long)]
    key: String,
    #[arg(long)]
    iv: String,
    #[arg(long, default_value_t = cryptengine::DEFAULT_BLOCK_SIZE)]
    block_size: u64,
    #[arg(long)]
    collector: Option<String>,
    /// Decrypt only: local destination (default: the file's base name).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CryptOp {
    Encrypt(CryptArgs),
    Decrypt(CryptArgs),
}

#[derive(Subcommand)]
enum AccountOp {
    /// Create an account and print its key.
    Add {
        user: String,
        #[arg(long)]
        admin: bool,
        /// Hex key to use instead of a random one.
        #[arg(long = "key")]
        key: Option<String>,
    },
    Show {
        user: String,
    },
    SetPerm {
        user: String,
        flag: String,
        #[arg(action = clap::ArgAction::Set)]
        value: bool,
    },
}

/// Errors caused by the invocation rather than the operation.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("gridfs: {e:#}");
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&config.log_level)).init();
    match run(&cli, config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gridfs: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<NodeConfig> {
    match path {
        Some(p) => Ok(node::load_config(p)?),
        None => Ok(NodeConfig::default()),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let denied = e.chain().any(|c| {
        c.downcast_ref::<TaskError>().is_some_and(|e| e.status() == Status::PermissionDenied)
            || c.downcast_ref::<DfsError>().is_some_and(|e| e.status() == Status::PermissionDenied)
            || c.downcast_ref::<FtsmError>().is_some_and(|e| e.status() == Status::PermissionDenied)
            || c.downcast_ref::<CryptError>().is_some_and(|e| e.status() == Status::PermissionDenied)
            || c.downcast_ref::<SecError>().is_some_and(|e| e.remote_status() == Some(Status::PermissionDenied))
    });
    if denied {
        3
    } else if e.chain().any(|c| c.is::<UsageError>() || c.downcast_ref::<PermsError>().is_some_and(|e| !matches!(e, PermsError::Io(_)))) {
        2
    } else {
        1
    }
}

fn run(cli: &Cli, config: NodeConfig) -> anyhow::Result<()> {
    let security = SecurityMode::from(cli.security);
    match &cli.command {
        Command::Serve => {
            node::serve(config).map_err(|e| match e {
                NodeError::Config(_) => usage(e.to_string()),
                e => e.into(),
            })?;
            Ok(())
        }
        Command::Cp(args) => cp(&credentials(cli, &config)?, security, args),
        Command::Bench(args) => bench(&credentials(cli, &config)?, security, args),
        Command::Fs { op } => fs_op(&credentials(cli, &config)?, security, op),
        Command::Submit(args) => submit(&credentials(cli, &config)?, security, args),
        Command::Pi(args) => {
            let digits = taskexec::fan_out_pi(&args.nodes, &credentials(cli, &config)?, security, args.digits)?;
            println!("3.{digits}");
            Ok(())
        }
        Command::Crypt { op } => crypt(&credentials(cli, &config)?, security, &config, op),
        Command::Account { op } => account(&config, op),
    }
}

fn credentials(cli: &Cli, config: &NodeConfig) -> anyhow::Result<Credentials> {
    let psk = match &cli.psk {
        Some(hex_psk) => hex::decode(hex_psk.trim()).map_err(|_| usage("--psk is not hex"))?,
        None => {
            let text = std::fs::read_to_string(&config.credentials).unwrap_or_default();
            perms::parse_credentials(&text)
                .remove(&cli.user)
                .ok_or_else(|| usage(format!("no key for `{}`: pass --psk or GRIDFS_PSK", cli.user)))?
        }
    };
    Ok(Credentials {
        username: cli.user.clone(),
        psk,
    })
}

/// Splits `HOST:PORT:PATH`.
fn remote(spec: &str) -> Option<(String, String)> {
    let mut parts = spec.splitn(3, ':');
    let (host, port, path) = (parts.next()?, parts.next()?, parts.next()?);
    port.parse::<u16>().ok()?;
    (!host.is_empty() && !path.is_empty()).then(|| (format!("{host}:{port}"), path.to_string()))
}

fn cp(creds: &Credentials, security: SecurityMode, args: &CpArgs) -> anyhow::Result<()> {
    let region = match (args.offset, args.length) {
        (None, None) => None,
        (Some(o), Some(l)) => Some((o, l)),
        _ => return Err(usage("--offset and --length go together")),
    };
    let opts = TransferOptions {
        security,
        buffer_size: args.buffer,
        streams: args.streams,
        region,
        resume: !args.no_resume,
        abort_after: args.abort_after,
        ..TransferOptions::default()
    };
    let outcome = match (remote(&args.src), remote(&args.dst)) {
        (None, Some((addr, path))) => ftsm::push(&addr, creds, Path::new(&args.src), &path, &opts)?,
        (Some((addr, path)), None) => ftsm::pull(&addr, creds, &path, Path::new(&args.dst), &opts)?,
        _ => return Err(usage("exactly one of SRC and DST must be HOST:PORT:PATH")),
    };
    let report = outcome.report();
    println!(
        "{} bytes in {:.3} s ({:.1} Mbps) over {} streams{}",
        report.bytes,
        report.seconds,
        report.mbps,
        report.per_stream.len(),
        if outcome.resumed { ", resumed" } else { "" }
    );
    if let Some(md5) = outcome.md5 {
        println!("md5 {}", hex::encode(md5));
    }
    Ok(())
}

fn bench(creds: &Credentials, security: SecurityMode, args: &BenchArgs) -> anyhow::Result<()> {
    if !args.mem {
        return Err(usage("bench needs --mem; use cp for disk transfers"));
    }
    let opts = TransferOptions {
        security,
        buffer_size: args.buffer,
        streams: args.streams,
        ..TransferOptions::default()
    };
    let report = ftsm::bench_memory(&args.node, creds, &opts, args.seconds, args.round)?;
    println!("bytes {}", report.bytes);
    println!("seconds {:.3}", report.seconds);
    println!("mbps {:.1}", report.mbps);
    for (i, n) in report.per_stream.iter().enumerate() {
        println!("stream {i} {n}");
    }
    Ok(())
}

fn fs_op(creds: &Credentials, security: SecurityMode, op: &FsOp) -> anyhow::Result<()> {
    let target = match op {
        FsOp::Read(t) | FsOp::Write(t) | FsOp::Lock(t) | FsOp::Truncate(t) | FsOp::Stat(t) => t,
        FsOp::Unlock { target, .. } => target,
    };
    let mut dfs = DfsClient::connect(&target.node, creds.clone(), security, 262144)?;
    let path = target.path.as_str();
    match op {
        FsOp::Read(t) => {
            let data = match t.length {
                Some(len) => dfs.read_range(path, t.offset, len)?,
                None => {
                    let stat = dfs.stat(path)?;
                    if !stat.exists {
                        return Err(gridfs::dfsm::DfsError::NoSuchFile.into());
                    }
                    dfs.read_range(path, t.offset, stat.size.saturating_sub(t.offset))?
                }
            };
            io::stdout().write_all(&data)?;
        }
        FsOp::Write(t) => {
            let mut data = Vec::new();
            io::stdin().read_to_end(&mut data)?;
            if let Some(len) = t.length {
                data.truncate(len as usize);
            }
            dfs.write_at(path, t.offset, &data)?;
            dfs.flush(path)?;
            println!("wrote {} bytes", data.len());
        }
        FsOp::Lock(t) => {
            let id = dfs.lock(path, t.offset, t.length.unwrap_or(gridfs::dfsm::WHOLE_FILE))?;
            println!("lock {id}");
            io::stdout().flush()?;
            // Locks belong to the session, so hold the session open.
            io::stdin().read_to_end(&mut Vec::new())?;
        }
        FsOp::Unlock { lock_id, .. } => dfs.unlock(path, *lock_id)?,
        FsOp::Truncate(t) => {
            let len = t.length.ok_or_else(|| usage("truncate needs --length"))?;
            dfs.set_length(path, len)?;
        }
        FsOp::Stat(_) => {
            let st = dfs.stat(path)?;
            println!("exists {}", st.exists);
            println!("size {}", st.size);
        }
    }
    dfs.close()?;
    Ok(())
}

fn submit(creds: &Credentials, security: SecurityMode, args: &SubmitArgs) -> anyhow::Result<()> {
    let mut words = args.cmd.split_whitespace();
    let command = words.next().ok_or_else(|| usage("--cmd is empty"))?;
    let rest: Vec<&str> = words.collect();
    let mut spec = TaskSpec::process(command, &rest).with_timeout(Duration::from_secs(args.timeout));
    for dep in &args.deps {
        let name = dep
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| usage(format!("{} has no file name", dep.display())))?;
        spec = spec.with_dependency(name, dep);
    }
    for out in &args.outs {
        spec = spec.with_output(out);
    }
    if args.net {
        spec = spec.with_network();
    }
    std::fs::create_dir_all(&args.out_dir)?;
    let mut client = TaskClient::connect(&args.node, creds, security, 262144)?;
    let result = client.run(&[spec], Some(&args.out_dir))?.remove(0);
    io::stdout().write_all(&result.stdout)?;
    io::stderr().write_all(&result.stderr)?;
    for out in &result.outputs {
        eprintln!("output {}", args.out_dir.join(out).display());
    }
    match result.status {
        TaskStatus::Ok => Ok(()),
        TaskStatus::Denied => Err(TaskError::PermissionDenied(result.message).into()),
        status => Err(anyhow!(
            "task {status:?}{}{}",
            result.exit_code.map(|c| format!(", exit code {c}")).unwrap_or_default(),
            if result.message.is_empty() { String::new() } else { format!(": {}", result.message) }
        )),
    }
}

fn crypt(creds: &Credentials, security: SecurityMode, config: &NodeConfig, op: &CryptOp) -> anyhow::Result<()> {
    let (args, encrypt) = match op {
        CryptOp::Encrypt(a) => (a, true),
        CryptOp::Decrypt(a) => (a, false),
    };
    let key = hex::decode(&args.key).map_err(|_| usage("--key is not hex"))?;
    let iv = hex::decode(&args.iv).map_err(|_| usage("--iv is not hex"))?;
    let params = CipherParams::new(&args.cipher, &key, &iv).map_err(|e| usage(e.to_string()))?;
    let distributor = args
        .distributor
        .clone()
        .unwrap_or_else(|| format!("127.0.0.1:{}", config.port));
    let mut job = CryptJob::new(&distributor, &args.file, creds.clone(), params.clone(), args.workers.clone());
    job.block_size = args.block_size;
    job.collector = args.collector.clone();
    job.security = security;
    if encrypt {
        let map = cryptengine::distribute(&job)?;
        println!("{} blocks, manifest {}", map.blocks.len(), job.manifest_path());
        for (holder, n) in map.per_holder() {
            println!("{holder} {n}");
        }
    } else {
        let map = cryptengine::load_manifest(&distributor, &job.manifest_path(), creds, security)?;
        let dest = args.out.clone().unwrap_or_else(|| PathBuf::from(&map.name));
        let opts = TransferOptions {
            security,
            ..TransferOptions::default()
        };
        cryptengine::reassemble(&map, &params, creds, &opts, &dest).context("reassembly failed")?;
        println!("{} bytes to {}", map.file_size, dest.display());
    }
    Ok(())
}

fn account(config: &NodeConfig, op: &AccountOp) -> anyhow::Result<()> {
    std::fs::create_dir_all(&config.accounts)?;
    match op {
        AccountOp::Add { user, admin, key } => {
            let doc = if *admin {
                PermissionDoc::administrator()
            } else {
                PermissionDoc::deny_all()
            };
            let psk = key
                .as_deref()
                .map(|k| hex::decode(k).map_err(|_| usage("--key is not hex")))
                .transpose()?;
            let psk = perms::add_account(&config.accounts, &config.credentials, user, &doc, psk)?;
            println!("{user}:{}", hex::encode(psk));
        }
        AccountOp::Show { user } => {
            let doc = perms::read_account_doc(&config.accounts, user)?;
            println!("{user} {}", doc.account_type.as_str());
            for flag in PermissionFlag::ALL {
                println!("  {} {}", flag.element_name(), doc.allows(flag));
            }
        }
        AccountOp::SetPerm { user, flag, value } => {
            let flag = PermissionFlag::from_name(flag).ok_or_else(|| usage(format!("unknown flag `{flag}`")))?;
            perms::set_permission(&config.accounts, user, flag, *value)?;
            println!("{user} {} {value}", flag.element_name());
        }
    }
    Ok(())
}
