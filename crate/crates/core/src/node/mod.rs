//! The daemon: one listener serving every mode.
//!
//! Each accepted connection gets its own thread, which runs the handshake
//! and authentication and then hands the channel to the service for the
//! negotiated mode. Shared state lives in the services themselves.

mod config;

use std::collections::HashMap;
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};

pub use config::{load_config, parse_config, ConfigError, NodeConfig, DEFAULT_BUFFER_CAP, DEFAULT_PORT};

use crate::cryptengine::CryptService;
use crate::dfsm::{self, DfsService, LockTable};
use crate::ftsm::FtsmService;
use crate::perms::{load_accounts, AccountStore, AuditLog, Gate, PermsError};
use crate::secchan;
use crate::taskexec::{TaskConfig, TaskService};
use crate::wire::{error_fields, read_frame, write_frame, Frame, FrameType, Mode, ServerPolicy, Status, DEFAULT_MAX_PAYLOAD};

const ACCEPT_POLL: Duration = Duration::from_millis(20);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot bind {addr}: {source}")]
    BindFailed { addr: String, source: io::Error },
    #[error("cannot load accounts: {0}")]
    Accounts(#[from] PermsError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Test and diagnostics hooks.
#[derive(Clone, Debug, Default)]
pub struct NodeHooks {
    /// Records every permission check and guarded effect.
    pub audit: Option<Arc<AuditLog>>,
    /// Makes crypt sessions drop after this many completed tasks.
    pub crypt_crash_after: Option<usize>,
}

struct Services {
    policy: ServerPolicy,
    accounts: AccountStore,
    dfs: DfsService,
    ftsm: FtsmService,
    tasks: TaskService,
    crypt: CryptService,
}

#[derive(Default)]
struct Connections {
    next: AtomicU64,
    open: Mutex<HashMap<u64, TcpStream>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Connections {
    fn count(&self) -> usize {
        self.open.lock().unwrap().len()
    }
}

/// A running daemon.
pub struct Node {
    addr: SocketAddr,
    config: NodeConfig,
    services: Arc<Services>,
    connections: Arc<Connections>,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl Node {
    pub fn start(config: NodeConfig) -> Result<Node, NodeError> {
        Node::start_with(config, NodeHooks::default())
    }

    pub fn start_with(config: NodeConfig, hooks: NodeHooks) -> Result<Node, NodeError> {
        config.prepare_dirs()?;
        let accounts = load_accounts(&config.accounts, &config.credentials, &config.storage)?;
        if accounts.is_empty() {
            warn!("no accounts loaded; every connection will fail authentication");
        }
        let bind = config.bind_addr();
        let listener = TcpListener::bind(&bind).map_err(|source| NodeError::BindFailed { addr: bind.clone(), source })?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;

        let gate = Gate::new(hooks.audit.clone());
        let mut task_config = TaskConfig::new(&config.tasks);
        task_config.workers = config.task_workers;
        task_config.retention = config.retention;
        let mut crypt = CryptService::new(gate.clone());
        if let Some(n) = hooks.crypt_crash_after {
            crypt = crypt.crash_after(n);
        }
        let services = Arc::new(Services {
            policy: ServerPolicy {
                buffer_cap: config.buffer_cap,
                streams_cap: config.streams_cap,
                enabled_modes: config.modes,
                ..ServerPolicy::default()
            },
            accounts: AccountStore::new(accounts),
            dfs: DfsService::new(Arc::new(LockTable::default()), gate.clone()),
            ftsm: FtsmService::new(gate.clone()),
            tasks: TaskService::new(task_config, gate)?,
            crypt,
        });
        let connections = Arc::new(Connections::default());
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let (services, connections, stop) = (services.clone(), connections.clone(), stop.clone());
            let max_sessions = config.max_sessions;
            thread::Builder::new()
                .name("accept".into())
                .spawn(move || accept_loop(listener, services, connections, stop, max_sessions))?
        };
        info!("serving on {addr}");
        Ok(Node {
            addr,
            config,
            services,
            connections,
            stop,
            acceptor: Some(acceptor),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn storage(&self) -> &PathBuf {
        &self.config.storage
    }

    pub fn open_sessions(&self) -> usize {
        self.connections.count()
    }

    pub fn crypt(&self) -> &CryptService {
        &self.services.crypt
    }

    pub fn tasks(&self) -> &TaskService {
        &self.services.tasks
    }

    pub fn ftsm(&self) -> &FtsmService {
        &self.services.ftsm
    }

    /// Rereads the credential file and permission documents. Sessions
    /// already authenticated keep the snapshot they started with.
    pub fn reload_accounts(&self) -> Result<(), NodeError> {
        let set = load_accounts(&self.config.accounts, &self.config.credentials, &self.config.storage)?;
        self.services.accounts.replace(set);
        Ok(())
    }

    /// Stops accepting, closes the read side of every open connection so
    /// handlers finish the request in hand and return, and waits for them.
    /// Session locks are released as their handlers unwind; transfer state
    /// is already on disk.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(acceptor) = self.acceptor.take() {
            let _ = acceptor.join();
        }
        for stream in self.connections.open.lock().unwrap().values() {
            let _ = stream.shutdown(Shutdown::Read);
        }
        let threads = std::mem::take(&mut *self.connections.threads.lock().unwrap());
        for t in threads {
            let _ = t.join();
        }
        info!("node {} stopped", self.addr);
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop_and_join();
        }
    }
}

fn accept_loop(
    listener: TcpListener,
    services: Arc<Services>,
    connections: Arc<Connections>,
    stop: Arc<AtomicBool>,
    max_sessions: usize,
) {
    while !stop.load(Ordering::SeqCst) {
        let (stream, peer) = match listener.accept() {
            Ok(s) => s,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(ACCEPT_POLL);
                continue;
            }
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(ACCEPT_POLL);
                continue;
            }
        };
        if let Err(e) = stream.set_nonblocking(false).and_then(|_| stream.set_nodelay(true)) {
            debug!("dropping {peer}: {e}");
            continue;
        }
        let busy = connections.count() >= max_sessions;
        let id = connections.next.fetch_add(1, Ordering::SeqCst);
        if !busy {
            match stream.try_clone() {
                Ok(clone) => {
                    connections.open.lock().unwrap().insert(id, clone);
                }
                Err(e) => {
                    debug!("dropping {peer}: {e}");
                    continue;
                }
            }
        }
        let (services, conns) = (services.clone(), connections.clone());
        let spawned = thread::Builder::new().name(format!("conn-{id}")).spawn(move || {
            if busy {
                refuse_busy(stream);
            } else {
                serve_connection(stream, peer, &services);
                conns.open.lock().unwrap().remove(&id);
            }
        });
        match spawned {
            Ok(handle) => {
                let mut threads = connections.threads.lock().unwrap();
                threads.retain(|t| !t.is_finished());
                threads.push(handle);
            }
            Err(e) => {
                warn!("cannot spawn connection thread: {e}");
                connections.open.lock().unwrap().remove(&id);
            }
        }
    }
}

fn refuse_busy(mut stream: TcpStream) {
    // Read the HELLO first so closing does not reset the connection before
    // the client sees the refusal.
    let _ = stream.set_read_timeout(Some(Duration::from_secs(2)));
    let _ = read_frame(&mut stream, DEFAULT_MAX_PAYLOAD);
    let refusal = Frame::new(FrameType::ERROR, error_fields(Status::Busy, "session limit reached").encode());
    let _ = write_frame(&mut stream, &refusal, DEFAULT_MAX_PAYLOAD);
    let _ = stream.shutdown(Shutdown::Write);
}

fn serve_connection(stream: TcpStream, peer: SocketAddr, services: &Services) {
    let _ = stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT));
    let accounts = services.accounts.snapshot();
    let accepted = match secchan::accept(stream, &services.policy, &accounts) {
        Ok(a) => a,
        Err(e) => {
            debug!("{peer}: session refused: {e}");
            return;
        }
    };
    let _ = accepted.channel.get_ref().set_read_timeout(None);
    let secchan::Accepted {
        mut channel,
        params,
        hello,
        account,
    } = accepted;
    debug!("{peer}: {} session for {}", params.mode.name(), account.username);
    let outcome = match params.mode {
        Mode::Dfsm => dfsm::serve_session(&mut channel, &account, &params, &services.dfs).map_err(|e| e.to_string()),
        Mode::FtsmPush | Mode::FtsmPull => services
            .ftsm
            .handle(&mut channel, &account, &params, hello.attach)
            .map_err(|e| e.to_string()),
        Mode::Task => services.tasks.handle(&mut channel, &account, &params).map_err(|e| e.to_string()),
        Mode::Crypt => services.crypt.handle(&mut channel, &account, &params).map_err(|e| e.to_string()),
    };
    if let Err(e) = outcome {
        debug!("{peer}: {} session ended: {e}", params.mode.name());
    }
}

/// Runs a node until SIGINT or SIGTERM; SIGHUP reloads accounts.
pub fn serve(config: NodeConfig) -> Result<(), NodeError> {
    use signal_hook::consts::{SIGHUP, SIGINT, SIGTERM};
    let stop = Arc::new(AtomicBool::new(false));
    let reload = Arc::new(AtomicBool::new(false));
    for sig in [SIGINT, SIGTERM] {
        signal_hook::flag::register(sig, stop.clone())?;
    }
    signal_hook::flag::register(SIGHUP, reload.clone())?;
    let node = Node::start(config)?;
    println!("listening on {}", node.addr());
    while !stop.load(Ordering::SeqCst) {
        if reload.swap(false, Ordering::SeqCst) {
            match node.reload_accounts() {
                Ok(()) => info!("accounts reloaded"),
                Err(e) => warn!("account reload failed: {e}"),
            }
        }
        thread::sleep(Duration::from_millis(100));
    }
    info!("shutting down");
    node.shutdown();
    Ok(())
}
