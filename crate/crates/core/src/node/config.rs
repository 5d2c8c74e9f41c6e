use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::warn;

use crate::taskexec::DEFAULT_RETENTION;
use crate::wire::{Mode, ModeSet};

pub const DEFAULT_PORT: u16 = 2525;
pub const DEFAULT_BUFFER_CAP: u32 = 262_144;
pub const DEFAULT_STREAMS_CAP: u8 = 64;
pub const DEFAULT_MAX_SESSIONS: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("cannot read config: {0}")]
    Io(#[from] io::Error),
}

/// Daemon configuration.
///
/// The file is line-oriented `key = value`; `#` starts a comment. Relative
/// paths resolve against the file's directory. `storage`, `accounts`,
/// `credentials` and `tasks` default to subdirectories of `state_dir`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeConfig {
    pub listen: String,
    pub port: u16,
    pub state_dir: PathBuf,
    pub storage: PathBuf,
    pub accounts: PathBuf,
    pub credentials: PathBuf,
    pub tasks: PathBuf,
    pub buffer_cap: u32,
    pub streams_cap: u8,
    pub modes: ModeSet,
    pub max_sessions: usize,
    pub task_workers: usize,
    pub retention: Duration,
    pub log_level: String,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig::rooted(PathBuf::from("gridfs-state"))
    }
}

impl NodeConfig {
    /// Defaults with every path under `state_dir`.
    pub fn rooted(state_dir: impl Into<PathBuf>) -> Self {
        let state_dir = state_dir.into();
        NodeConfig {
            listen: "0.0.0.0".into(),
            port: DEFAULT_PORT,
            storage: state_dir.join("storage"),
            accounts: state_dir.join("accounts"),
            credentials: state_dir.join("credentials"),
            tasks: state_dir.join("tasks"),
            state_dir,
            buffer_cap: DEFAULT_BUFFER_CAP,
            streams_cap: DEFAULT_STREAMS_CAP,
            modes: ModeSet::all(),
            max_sessions: DEFAULT_MAX_SESSIONS,
            task_workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            retention: DEFAULT_RETENTION,
            log_level: "info".into(),
        }
    }

    pub fn bind_addr(&self) -> String {
        if self.listen.contains(':') && !self.listen.starts_with('[') {
            format!("[{}]:{}", self.listen, self.port)
        } else {
            format!("{}:{}", self.listen, self.port)
        }
    }

    /// Creates every configured directory.
    pub fn prepare_dirs(&self) -> io::Result<()> {
        for dir in [&self.state_dir, &self.storage, &self.accounts, &self.tasks] {
            fs::create_dir_all(dir)?;
        }
        if let Some(parent) = self.credentials.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(())
    }
}

/// Reads a config file. A missing file yields the defaults.
pub fn load_config(path: &Path) -> Result<NodeConfig, ConfigError> {
    match fs::read_to_string(path) {
        Ok(text) => parse_config(&text, path.parent().unwrap_or(Path::new(""))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(NodeConfig::default()),
        Err(e) => Err(e.into()),
    }
}

/// Parses config text; `base` anchors relative paths.
pub fn parse_config(text: &str, base: &Path) -> Result<NodeConfig, ConfigError> {
    let mut cfg = NodeConfig::default();
    let mut state_dir = None;
    let mut storage = None;
    let mut accounts = None;
    let mut credentials = None;
    let mut tasks = None;
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let bad = |reason: String| ConfigError::Malformed { line, reason };
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| bad("expected `key = value`".into()))?;
        let (key, value) = (key.trim(), value.trim());
        let num = |what: &str| bad(format!("{key}: `{value}` is not a valid {what}"));
        let path = || base.join(value);
        match key {
            "listen" => cfg.listen = value.to_string(),
            "port" => cfg.port = value.parse().map_err(|_| num("port"))?,
            "state_dir" => state_dir = Some(path()),
            "storage" => storage = Some(path()),
            "accounts" => accounts = Some(path()),
            "credentials" => credentials = Some(path()),
            "tasks" => tasks = Some(path()),
            "buffer_cap" => {
                cfg.buffer_cap = value.parse().map_err(|_| num("byte count"))?;
                if cfg.buffer_cap < crate::wire::MIN_BUFFER_SIZE {
                    return Err(bad(format!("buffer_cap below {}", crate::wire::MIN_BUFFER_SIZE)));
                }
            }
            "streams_cap" => {
                cfg.streams_cap = value.parse().map_err(|_| num("stream count"))?;
                if cfg.streams_cap == 0 {
                    return Err(bad("streams_cap must be at least 1".into()));
                }
            }
            "modes" => {
                let mut set = ModeSet::none();
                for name in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    match name {
                        "ftsm" => {
                            set.insert(Mode::FtsmPush);
                            set.insert(Mode::FtsmPull);
                        }
                        _ => set.insert(Mode::parse(name).ok_or_else(|| bad(format!("unknown mode `{name}`")))?),
                    }
                }
                cfg.modes = set;
            }
            "max_sessions" => {
                cfg.max_sessions = value.parse().map_err(|_| num("session count"))?;
                if cfg.max_sessions == 0 {
                    return Err(bad("max_sessions must be at least 1".into()));
                }
            }
            "task_workers" => {
                cfg.task_workers = value.parse().map_err(|_| num("worker count"))?;
                if cfg.task_workers == 0 {
                    return Err(bad("task_workers must be at least 1".into()));
                }
            }
            "retention" => cfg.retention = Duration::from_secs(value.parse().map_err(|_| num("second count"))?),
            "log_level" => match value {
                "off" | "error" | "warn" | "info" | "debug" | "trace" => cfg.log_level = value.to_string(),
                _ => return Err(bad(format!("unknown log level `{value}`"))),
            },
            _ => warn!("config line {line}: unknown key `{key}` ignored"),
        }
    }
    if let Some(dir) = state_dir {
        let defaults = NodeConfig::rooted(dir);
        cfg.state_dir = defaults.state_dir;
        cfg.storage = defaults.storage;
        cfg.accounts = defaults.accounts;
        cfg.credentials = defaults.credentials;
        cfg.tasks = defaults.tasks;
    }
    cfg.storage = storage.unwrap_or(cfg.storage);
    cfg.accounts = accounts.unwrap_or(cfg.accounts);
    cfg.credentials = credentials.unwrap_or(cfg.credentials);
    cfg.tasks = tasks.unwrap_or(cfg.tasks);
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("", Path::new("")).unwrap();
        assert_eq!(cfg, NodeConfig::default());
        assert_eq!(cfg.port, 2525);
        assert_eq!(cfg.buffer_cap, 262144);
        assert!(Mode::ALL.iter().all(|m| cfg.modes.contains(*m)));
    }

    #[test]
    fn missing_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(load_config(&dir.path().join("absent.conf")).unwrap(), NodeConfig::default());
    }

    #[test]
    fn malformed_value_reports_its_line() {
        let err = parse_config("port = 2600\n\nstreams_cap = abc\n", Path::new("")).unwrap_err();
        assert!(matches!(err, ConfigError::Malformed { line: 3, .. }), "{err}");
        let err = parse_config("just words\n", Path::new("")).unwrap_err();
        assert!(matches!(err, ConfigError::Malformed { line: 1, .. }));
    }

    #[test]
    fn overrides_and_paths() {
        let text = "# node a\nbuffer_cap = 65536\nstate_dir = st\ncredentials = /etc/grid/creds  # absolute\nmodes = dfsm, ftsm\nfrobnicate = 1\n";
        let cfg = parse_config(text, Path::new("/srv")).unwrap();
        assert_eq!(cfg.buffer_cap, 65536);
        assert_eq!(cfg.storage, PathBuf::from("/srv/st/storage"));
        assert_eq!(cfg.credentials, PathBuf::from("/etc/grid/creds"));
        assert!(cfg.modes.contains(Mode::Dfsm) && cfg.modes.contains(Mode::FtsmPull));
        assert!(!cfg.modes.contains(Mode::Task));
    }
}
