#![allow(dead_code)]

pub mod proxy;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use md5::{Digest, Md5};
use rand::{RngCore, SeedableRng};

use gridfs::node::{Node, NodeConfig, NodeHooks};
use gridfs::perms::{self, AuditLog, PermissionDoc, ADMIN_USERNAME};
use gridfs::secchan::Credentials;

pub const SAMPLE_PERMISSIONS: &str = include_str!("../data/others.xml");

/// An in-process node on an ephemeral loopback port with its own state
/// directory and an admin account.
pub struct TestNode {
    pub node: Option<Node>,
    pub dir: tempfile::TempDir,
    pub admin: Credentials,
    pub audit: Arc<AuditLog>,
    config: NodeConfig,
}

impl TestNode {
    pub fn start() -> TestNode {
        TestNode::start_with(|_| {}, NodeHooks::default())
    }

    pub fn start_with(tweak: impl FnOnce(&mut NodeConfig), mut hooks: NodeHooks) -> TestNode {
        let dir = tempfile::tempdir().unwrap();
        let mut config = NodeConfig::rooted(dir.path());
        config.listen = "127.0.0.1".into();
        config.port = 0;
        tweak(&mut config);
        config.prepare_dirs().unwrap();
        let psk = perms::add_account(
            &config.accounts,
            &config.credentials,
            ADMIN_USERNAME,
            &PermissionDoc::administrator(),
            None,
        )
        .unwrap();
        let audit = hooks.audit.get_or_insert_with(|| Arc::new(AuditLog::default())).clone();
        let node = Node::start_with(config.clone(), hooks).unwrap();
        config.port = node.addr().port();
        TestNode {
            node: Some(node),
            dir,
            admin: Credentials {
                username: ADMIN_USERNAME.into(),
                psk,
            },
            audit,
            config,
        }
    }

    pub fn node(&self) -> &Node {
        self.node.as_ref().expect("node is running")
    }

    pub fn addr(&self) -> String {
        self.node().addr().to_string()
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn storage(&self) -> PathBuf {
        self.config.storage.clone()
    }

    /// Creates an account and makes the running node see it.
    pub fn add_user(&self, name: &str, doc: &PermissionDoc) -> Credentials {
        self.add_user_keyed(name, doc, None)
    }

    /// Like [`TestNode::add_user`] with a chosen key, so one identity can
    /// span several nodes.
    pub fn add_user_keyed(&self, name: &str, doc: &PermissionDoc, psk: Option<Vec<u8>>) -> Credentials {
        let psk = perms::add_account(&self.config.accounts, &self.config.credentials, name, doc, psk).unwrap();
        self.node().reload_accounts().unwrap();
        Credentials {
            username: name.into(),
            psk,
        }
    }

    /// Stops the node and starts it again on the same port and storage.
    pub fn restart(&mut self) {
        self.stop();
        let hooks = NodeHooks {
            audit: Some(self.audit.clone()),
            ..NodeHooks::default()
        };
        let deadline = std::time::Instant::now() + std::time::Duration::from_secs(5);
        loop {
            match Node::start_with(self.config.clone(), hooks.clone()) {
                Ok(node) => {
                    self.node = Some(node);
                    return;
                }
                Err(e) if std::time::Instant::now() < deadline => {
                    eprintln!("restart retry: {e}");
                    std::thread::sleep(std::time::Duration::from_millis(50));
                }
                Err(e) => panic!("restart failed: {e}"),
            }
        }
    }

    pub fn stop(&mut self) {
        if let Some(node) = self.node.take() {
            node.shutdown();
        }
    }
}

pub fn random_bytes(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut data = vec![0u8; len];
    rng.fill_bytes(&mut data);
    data
}

pub fn md5(bytes: &[u8]) -> [u8; 16] {
    Md5::digest(bytes).into()
}

pub fn md5_path(path: &Path) -> [u8; 16] {
    md5(&std::fs::read(path).unwrap())
}

/// A document for an `Others` account with the listed flags allowed.
pub fn others_with(flags: &[perms::PermissionFlag]) -> PermissionDoc {
    flags.iter().fold(PermissionDoc::deny_all(), |doc, f| doc.with(*f, true))
}
