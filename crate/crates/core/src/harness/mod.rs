//! Loopback cluster harness.
//!
//! [`plan`] assigns roles for one of the deployment shapes, [`Cluster::spawn`]
//! starts one `gridfs serve` child process per node on an ephemeral
//! loopback port, and [`run_scenario`] drives end-to-end runs against it and
//! returns [`Record`]s.

mod report;
mod scenario;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};

pub use report::{read_records, render_text, write_records, Record};
pub use scenario::{run_scenario, Scenario, ScenarioOptions};

use crate::perms::{self, PermissionDoc, ADMIN_USERNAME};
use crate::secchan::Credentials;

const SPAWN_TIMEOUT: Duration = Duration::from_secs(15);
const STOP_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("bad topology: {0}")]
    BadTopology(String),
    #[error("spawn failed: {0}")]
    SpawnFailed(String),
    #[error("scenario {scenario} failed: {assertion}")]
    ScenarioFailed {
        scenario: String,
        assertion: String,
        records: Vec<Record>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    MasterSlaves,
    Hierarchical,
    CompleteGraph,
}

impl Shape {
    pub fn parse(name: &str) -> Option<Shape> {
        match name {
            "ms" | "master-slaves" => Some(Shape::MasterSlaves),
            "hier" | "hierarchical" => Some(Shape::Hierarchical),
            "graph" | "complete" | "complete-graph" => Some(Shape::CompleteGraph),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Distributor,
    Worker,
    Collector,
    /// Complete graph: every node serves as distributor, worker and share.
    Peer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopologyPlan {
    pub shape: Shape,
    pub roles: Vec<Role>,
}

impl TopologyPlan {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.roles.len()).filter(|&i| self.roles[i] == role).collect()
    }

    pub fn distributor(&self) -> usize {
        self.roles.iter().position(|r| matches!(r, Role::Distributor | Role::Peer)).unwrap_or(0)
    }

    /// Worker indices. In a complete graph every node works; a lone master
    /// works for itself.
    pub fn workers(&self) -> Vec<usize> {
        match self.shape {
            Shape::CompleteGraph => self.indices(Role::Peer),
            _ if self.roles.len() == 1 => vec![0],
            _ => self.indices(Role::Worker),
        }
    }

    pub fn collector(&self) -> Option<usize> {
        self.roles.iter().position(|r| *r == Role::Collector)
    }
}

/// Role assignment for `nodes` nodes.
///
/// Master-slaves: node 0 distributes, the rest work. Hierarchical: node 0
/// distributes, the last node collects, the ones between work (needs at
/// least three). Complete graph: every node is a peer.
pub fn plan(shape: Shape, nodes: usize) -> Result<TopologyPlan, HarnessError> {
    if nodes == 0 {
        return Err(HarnessError::BadTopology("a cluster needs at least one node".into()));
    }
    let roles = match shape {
        Shape::MasterSlaves => std::iter::once(Role::Distributor)
            .chain(std::iter::repeat_n(Role::Worker, nodes - 1))
            .collect(),
        Shape::Hierarchical => {
            if nodes < 3 {
                return Err(HarnessError::BadTopology(
                    "hierarchical needs a distributor, a collector and at least one worker".into(),
                ));
            }
            std::iter::once(Role::Distributor)
                .chain(std::iter::repeat_n(Role::Worker, nodes - 2))
                .chain(std::iter::once(Role::Collector))
                .collect()
        }
        Shape::CompleteGraph => vec![Role::Peer; nodes],
    };
    Ok(TopologyPlan { shape, roles })
}

/// One child daemon.
pub struct ClusterNode {
    pub role: Role,
    pub addr: String,
    pub dir: PathBuf,
    child: Option<Child>,
}

impl ClusterNode {
    /// The node's storage root on disk.
    pub fn storage(&self) -> PathBuf {
        self.dir.join("storage")
    }

    pub fn is_running(&mut self) -> bool {
        matches!(self.child.as_mut().map(|c| c.try_wait()), Some(Ok(None)))
    }
}

/// Running daemons sharing one account set. Dropping the cluster stops the
/// daemons and deletes their scratch directories.
pub struct Cluster {
    pub plan: TopologyPlan,
    pub nodes: Vec<ClusterNode>,
    pub creds: Credentials,
    binary: PathBuf,
    scratch: tempfile::TempDir,
}

/// The `gridfs` executable next to the running one.
pub fn sibling_binary() -> PathBuf {
    let exe = std::env::current_exe().unwrap_or_default();
    let dir = exe.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = format!("gridfs{}", std::env::consts::EXE_SUFFIX);
    let here = dir.join(&name);
    if here.exists() {
        return here;
    }
    // Test executables live one level down, in deps/.
    dir.parent().map(|p| p.join(&name)).unwrap_or(here)
}

impl Cluster {
    pub fn spawn(plan: TopologyPlan, binary: &Path) -> Result<Cluster, HarnessError> {
        let scratch = tempfile::Builder::new().prefix("gridfs-cluster").tempdir()?;
        let accounts = scratch.path().join("accounts");
        let credentials = scratch.path().join("credentials");
        fs::create_dir_all(&accounts)?;
        let psk = perms::add_account(&accounts, &credentials, ADMIN_USERNAME, &PermissionDoc::administrator(), None)
            .map_err(|e| HarnessError::SpawnFailed(format!("cannot create account: {e}")))?;
        let mut cluster = Cluster {
            plan: plan.clone(),
            nodes: Vec::new(),
            creds: Credentials {
                username: ADMIN_USERNAME.into(),
                psk,
            },
            binary: binary.to_path_buf(),
            scratch,
        };
        for (i, role) in plan.roles.iter().enumerate() {
            let dir = cluster.scratch.path().join(format!("node{i}"));
            fs::create_dir_all(&dir)?;
            let (child, addr) = cluster.launch(&dir, 0)?;
            debug!("node {i} ({role:?}) at {addr}");
            cluster.nodes.push(ClusterNode {
                role: *role,
                addr,
                dir,
                child: Some(child),
            });
        }
        Ok(cluster)
    }

    pub fn scratch(&self) -> &Path {
        self.scratch.path()
    }

    /// Shared directory for account documents; add accounts here, then
    /// signal the nodes with [`Cluster::reload_accounts`].
    pub fn accounts_dir(&self) -> PathBuf {
        self.scratch.path().join("accounts")
    }

    pub fn credentials_file(&self) -> PathBuf {
        self.scratch.path().join("credentials")
    }

    pub fn addr(&self, index: usize) -> &str {
        &self.nodes[index].addr
    }

    pub fn distributor(&self) -> &str {
        self.addr(self.plan.distributor())
    }

    pub fn workers(&self) -> Vec<String> {
        self.plan.workers().into_iter().map(|i| self.nodes[i].addr.clone()).collect()
    }

    pub fn collector(&self) -> Option<String> {
        self.plan.collector().map(|i| self.nodes[i].addr.clone())
    }

    fn launch(&self, dir: &Path, port: u16) -> Result<(Child, String), HarnessError> {
        let config = dir.join("node.conf");
        fs::write(
            &config,
            format!(
                "listen = 127.0.0.1\nport = {port}\nstate_dir = .\naccounts = {}\ncredentials = {}\nlog_level = warn\n",
                self.accounts_dir().display(),
                self.credentials_file().display()
            ),
        )?;
        let log = fs::File::create(dir.join("node.log"))?;
        let mut child = Command::new(&self.binary)
            .arg("--config")
            .arg(&config)
            .arg("serve")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(log)
            .spawn()
            .map_err(|e| HarnessError::SpawnFailed(format!("{}: {e}", self.binary.display())))?;

        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut lines = BufReader::new(stdout).lines();
            let first = lines.next().and_then(Result::ok);
            let _ = tx.send(first);
            for _ in lines {}
        });
        let line = rx.recv_timeout(SPAWN_TIMEOUT).ok().flatten();
        match line.as_deref().and_then(|l| l.strip_prefix("listening on ")) {
            Some(addr) => Ok((child, addr.trim().to_string())),
            None => {
                let _ = child.kill();
                let _ = child.wait();
                let log = fs::read_to_string(dir.join("node.log")).unwrap_or_default();
                Err(HarnessError::SpawnFailed(format!(
                    "daemon in {} did not come up: {}",
                    dir.display(),
                    log.lines().last().unwrap_or("no output")
                )))
            }
        }
    }

    /// Kills node `index` without a clean shutdown.
    pub fn kill(&mut self, index: usize) {
        if let Some(mut child) = self.nodes[index].child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }

    /// Stops node `index` gracefully.
    pub fn stop(&mut self, index: usize) {
        if let Some(child) = self.nodes[index].child.take() {
            stop_child(child);
        }
    }

    /// Starts node `index` again on its old port with the same storage.
    pub fn restart(&mut self, index: usize) -> Result<(), HarnessError> {
        self.stop(index);
        let port: u16 = self.nodes[index]
            .addr
            .rsplit(':')
            .next()
            .and_then(|p| p.parse().ok())
            .unwrap_or(0);
        let dir = self.nodes[index].dir.clone();
        let deadline = Instant::now() + Duration::from_secs(5);
        let (child, addr) = loop {
            match self.launch(&dir, port) {
                Ok(up) => break up,
                Err(e) if Instant::now() < deadline => {
                    debug!("restart retry: {e}");
                    thread::sleep(Duration::from_millis(100));
                }
                Err(e) => return Err(e),
            }
        };
        self.nodes[index].child = Some(child);
        self.nodes[index].addr = addr;
        Ok(())
    }

    /// Sends SIGHUP so every node rereads the shared account files.
    pub fn reload_accounts(&self) {
        for node in &self.nodes {
            if let Some(child) = &node.child {
                signal(child, libc::SIGHUP);
            }
        }
        thread::sleep(Duration::from_millis(300));
    }

    pub fn teardown(mut self) {
        self.stop_all();
    }

    fn stop_all(&mut self) {
        let children: Vec<Child> = self.nodes.iter_mut().filter_map(|n| n.child.take()).collect();
        for child in &children {
            signal(child, libc::SIGTERM);
        }
        for child in children {
            wait_or_kill(child);
        }
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        self.stop_all();
    }
}

fn signal(child: &Child, sig: libc::c_int) {
    // SAFETY: plain kill(2) on a child we own and have not yet reaped.
    unsafe {
        libc::kill(child.id() as libc::pid_t, sig);
    }
}

fn stop_child(child: Child) {
    signal(&child, libc::SIGTERM);
    wait_or_kill(child);
}

fn wait_or_kill(mut child: Child) {
    let deadline = Instant::now() + STOP_GRACE;
    loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                if !status.success() {
                    warn!("daemon {} exited with {status}", child.id());
                }
                return;
            }
            Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(20)),
            _ => {
                let _ = child.kill();
                let _ = child.wait();
                return;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hierarchical_six_is_the_testbed() {
        let p = plan(Shape::Hierarchical, 6).unwrap();
        assert_eq!(p.distributor(), 0);
        assert_eq!(p.workers(), vec![1, 2, 3, 4]);
        assert_eq!(p.collector(), Some(5));
        assert!(plan(Shape::Hierarchical, 2).is_err());
    }

    #[test]
    fn master_slaves_four() {
        let p = plan(Shape::MasterSlaves, 4).unwrap();
        assert_eq!(p.roles[0], Role::Distributor);
        assert_eq!(p.workers(), vec![1, 2, 3]);
        assert_eq!(p.collector(), None);
    }

    #[test]
    fn degenerate_graph() {
        let p = plan(Shape::CompleteGraph, 1).unwrap();
        assert_eq!((p.distributor(), p.workers(), p.collector()), (0, vec![0], None));
        assert_eq!(plan(Shape::MasterSlaves, 1).unwrap().workers(), vec![0]);
        assert!(plan(Shape::CompleteGraph, 0).is_err());
    }
}
