//! Remote task execution.
//!
//! A client submits a set of tasks in one authenticated session. The node
//! checks the Execution permission once for the set, receives the declared
//! dependency files into a private work directory, verifies their digests,
//! then runs the tasks concurrently. Results come back as an array in
//! submission order; declared output files are fetched afterwards.
//!
//! Tasks are declarative: either a built-in function from a fixed registry
//! or an external process.

pub mod builtins;
mod client;
pub mod pi;
mod server;

use std::path::PathBuf;
use std::time::Duration;

use crate::ftsm::FtsmError;
use crate::perms::ActionKind;
use crate::secchan::SecError;
use crate::wire::{decode_list, encode_list, FieldMap, Status, WireError};

pub use client::{fan_out_pi, SetHandle, TaskClient};
pub use server::{TaskConfig, TaskService};

pub type SetId = [u8; 16];

/// Default time a finished set stays collectable.
pub const DEFAULT_RETENTION: Duration = Duration::from_secs(600);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Builtin { function: String, params: FieldMap },
    Process {
        command: String,
        args: Vec<String>,
        capabilities: Vec<Capability>,
    },
}

/// Host access a process task declares up front. Each one is gated by the
/// matching permission flag before the task runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Capability {
    Network = 1,
    Unmanaged = 2,
    Registry = 3,
    Sql = 4,
}

impl Capability {
    pub fn from_u8(v: u8) -> Option<Capability> {
        [Capability::Network, Capability::Unmanaged, Capability::Registry, Capability::Sql]
            .into_iter()
            .find(|c| *c as u8 == v)
    }

    pub fn action(self) -> ActionKind {
        match self {
            Capability::Network => ActionKind::Socket,
            Capability::Unmanaged => ActionKind::Unmanaged,
            Capability::Registry => ActionKind::Registry,
            Capability::Sql => ActionKind::Sql,
        }
    }
}

/// A staged input: `name` in the work directory, read from `source` on the
/// submitting side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dependency {
    pub name: String,
    pub source: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub dependencies: Vec<Dependency>,
    pub outputs: Vec<String>,
    pub timeout: Duration,
}

impl TaskSpec {
    pub fn builtin(function: &str, params: FieldMap) -> Self {
        TaskSpec {
            kind: TaskKind::Builtin {
                function: function.to_string(),
                params,
            },
            dependencies: Vec::new(),
            outputs: Vec::new(),
            timeout: Duration::from_secs(60),
        }
    }

    pub fn process(command: &str, args: &[&str]) -> Self {
        TaskSpec {
            kind: TaskKind::Process {
                command: command.to_string(),
                args: args.iter().map(|a| a.to_string()).collect(),
                capabilities: Vec::new(),
            },
            dependencies: Vec::new(),
            outputs: Vec::new(),
            timeout: Duration::from_secs(60),
        }
    }

    pub fn with_dependency(mut self, name: &str, source: impl Into<PathBuf>) -> Self {
        self.dependencies.push(Dependency {
            name: name.to_string(),
            source: source.into(),
        });
        self
    }

    pub fn with_output(mut self, name: &str) -> Self {
        self.outputs.push(name.to_string());
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Declares a capability; ignored for built-ins, which never need one.
    pub fn with_capability(mut self, cap: Capability) -> Self {
        if let TaskKind::Process { capabilities, .. } = &mut self.kind {
            if !capabilities.contains(&cap) {
                capabilities.push(cap);
            }
        }
        self
    }

    pub fn with_network(self) -> Self {
        self.with_capability(Capability::Network)
    }

    pub fn capabilities(&self) -> &[Capability] {
        match &self.kind {
            TaskKind::Process { capabilities, .. } => capabilities,
            TaskKind::Builtin { .. } => &[],
        }
    }

    /// Short description used as the guarded resource.
    pub fn describe(&self) -> String {
        match &self.kind {
            TaskKind::Builtin { function, .. } => format!("builtin {function}"),
            TaskKind::Process { command, .. } => format!("process {command}"),
        }
    }

    /// Wire form; dependency sources stay on the client, only names travel.
    pub fn to_fields(&self) -> FieldMap {
        let mut map = FieldMap::new();
        match &self.kind {
            TaskKind::Builtin { function, params } => {
                map.insert(spec::KIND, [1]);
                map.insert(spec::NAME, function.as_bytes());
                map.insert(spec::PARAMS, params.encode());
            }
            TaskKind::Process {
                command,
                args,
                capabilities,
            } => {
                map.insert(spec::KIND, [2]);
                map.insert(spec::NAME, command.as_bytes());
                map.insert(spec::PARAMS, encode_list(args));
                map.insert(spec::CAPABILITIES, capabilities.iter().map(|c| *c as u8).collect::<Vec<_>>());
            }
        }
        let deps: Vec<&str> = self.dependencies.iter().map(|d| d.name.as_str()).collect();
        map.insert(spec::DEPENDENCIES, encode_list(&deps));
        map.insert(spec::OUTPUTS, encode_list(&self.outputs));
        map.insert(spec::TIMEOUT_MS, (self.timeout.as_millis() as u64).to_be_bytes());
        map
    }

    /// Parses the wire form. Dependency sources are unknown on this side and
    /// come back empty.
    pub fn from_fields(map: &FieldMap) -> Result<Self, WireError> {
        let name = map.require_str(spec::NAME)?.to_string();
        let kind = match map.require_u8(spec::KIND)? {
            1 => TaskKind::Builtin {
                function: name,
                params: FieldMap::decode(map.require(spec::PARAMS)?)?,
            },
            2 => TaskKind::Process {
                command: name,
                args: strings(map.require(spec::PARAMS)?)?,
                capabilities: map
                    .get(spec::CAPABILITIES)
                    .unwrap_or_default()
                    .iter()
                    .map(|&b| {
                        Capability::from_u8(b).ok_or(WireError::BadField {
                            tag: spec::CAPABILITIES,
                            reason: "unknown capability",
                        })
                    })
                    .collect::<Result<_, _>>()?,
            },
            _ => {
                return Err(WireError::BadField {
                    tag: spec::KIND,
                    reason: "unknown task kind",
                })
            }
        };
        Ok(TaskSpec {
            kind,
            dependencies: strings(map.get(spec::DEPENDENCIES).unwrap_or(&[0, 0, 0, 0]))?
                .into_iter()
                .map(|name| Dependency {
                    name,
                    source: PathBuf::new(),
                })
                .collect(),
            outputs: strings(map.get(spec::OUTPUTS).unwrap_or(&[0, 0, 0, 0]))?,
            timeout: Duration::from_millis(map.get_u64(spec::TIMEOUT_MS)?.unwrap_or(60_000)),
        })
    }
}

pub(crate) fn strings(bytes: &[u8]) -> Result<Vec<String>, WireError> {
    decode_list(bytes)?
        .into_iter()
        .map(|b| String::from_utf8(b).map_err(|_| WireError::MalformedFields("list item is not UTF-8")))
        .collect()
}

/// Tags inside one encoded task spec.
mod spec {
    pub const KIND: u8 = 1;
    pub const NAME: u8 = 2;
    pub const PARAMS: u8 = 3;
    pub const CAPABILITIES: u8 = 4;
    pub const DEPENDENCIES: u8 = 5;
    pub const OUTPUTS: u8 = 6;
    pub const TIMEOUT_MS: u8 = 7;
}

/// Tags inside one encoded result.
mod result {
    pub const INDEX: u8 = 1;
    pub const STATUS: u8 = 2;
    pub const EXIT_CODE: u8 = 3;
    pub const VALUE: u8 = 4;
    pub const STDOUT: u8 = 5;
    pub const STDERR: u8 = 6;
    pub const OUTPUTS: u8 = 7;
    pub const MESSAGE: u8 = 8;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum TaskStatus {
    Ok = 0,
    Failed = 1,
    Denied = 2,
    Timeout = 3,
}

impl TaskStatus {
    pub fn from_u8(v: u8) -> Option<TaskStatus> {
        [TaskStatus::Ok, TaskStatus::Failed, TaskStatus::Denied, TaskStatus::Timeout]
            .into_iter()
            .find(|s| *s as u8 == v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskResult {
    pub index: u32,
    pub status: TaskStatus,
    pub exit_code: Option<i32>,
    /// Built-in return value.
    pub value: FieldMap,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    /// Declared outputs that exist after an OK run.
    pub outputs: Vec<String>,
    pub message: String,
}

impl TaskResult {
    pub fn new(index: u32, status: TaskStatus) -> Self {
        TaskResult {
            index,
            status,
            exit_code: None,
            value: FieldMap::new(),
            stdout: Vec::new(),
            stderr: Vec::new(),
            outputs: Vec::new(),
            message: String::new(),
        }
    }

    pub fn failed(index: u32, status: TaskStatus, message: impl Into<String>) -> Self {
        TaskResult {
            message: message.into(),
            ..TaskResult::new(index, status)
        }
    }

    pub fn to_fields(&self) -> FieldMap {
        let mut map = FieldMap::new()
            .with_u32(result::INDEX, self.index)
            .with_u8(result::STATUS, self.status as u8)
            .with(result::VALUE, self.value.encode())
            .with(result::STDOUT, self.stdout.clone())
            .with(result::STDERR, self.stderr.clone())
            .with(result::OUTPUTS, encode_list(&self.outputs))
            .with_str(result::MESSAGE, &self.message);
        if let Some(code) = self.exit_code {
            map.insert(result::EXIT_CODE, code.to_be_bytes());
        }
        map
    }

    pub fn from_fields(map: &FieldMap) -> Result<Self, WireError> {
        Ok(TaskResult {
            index: map.require_u32(result::INDEX)?,
            status: TaskStatus::from_u8(map.require_u8(result::STATUS)?).ok_or(WireError::BadField {
                tag: result::STATUS,
                reason: "unknown task status",
            })?,
            exit_code: map.get_u32(result::EXIT_CODE)?.map(|c| c as i32),
            value: FieldMap::decode(map.get(result::VALUE).unwrap_or_default())?,
            stdout: map.get(result::STDOUT).unwrap_or_default().to_vec(),
            stderr: map.get(result::STDERR).unwrap_or_default().to_vec(),
            outputs: strings(map.get(result::OUTPUTS).unwrap_or(&[0, 0, 0, 0]))?,
            message: map.get_str(result::MESSAGE)?.unwrap_or("").to_string(),
        })
    }
}

/// Lifecycle of a set as reported by `TASK_STATUS`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum SetState {
    Staging = 1,
    Running = 2,
    Done = 3,
}

impl SetState {
    pub fn from_u8(v: u8) -> Option<SetState> {
        match v {
            1 => Some(SetState::Staging),
            2 => Some(SetState::Running),
            3 => Some(SetState::Done),
            _ => None,
        }
    }
}

/// Client requests carried in `TASK_STATUS` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum SetAction {
    Start = 1,
    Poll = 2,
    Abort = 3,
    Release = 4,
}

impl SetAction {
    pub fn from_u8(v: u8) -> Option<SetAction> {
        match v {
            1 => Some(SetAction::Start),
            2 => Some(SetAction::Poll),
            3 => Some(SetAction::Abort),
            4 => Some(SetAction::Release),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("staging failed: {0}")]
    StagingFailed(String),
    #[error("task set expired or unknown")]
    SetExpired,
    #[error("invalid task set: {0}")]
    Invalid(String),
    #[error("connection lost; the set stays collectable for the retention window")]
    ConnectionLost,
    #[error("remote error {status}: {message}")]
    Remote { status: Status, message: String },
    #[error(transparent)]
    Channel(SecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TaskError {
    /// The message without the variant prefix; what travels on the wire,
    /// since the receiver rebuilds the variant from the status.
    pub fn detail(&self) -> String {
        match self {
            TaskError::PermissionDenied(m) | TaskError::StagingFailed(m) | TaskError::Invalid(m) => m.clone(),
            TaskError::Remote { message, .. } => message.clone(),
            e => e.to_string(),
        }
    }

    pub fn status(&self) -> Status {
        match self {
            TaskError::PermissionDenied(_) => Status::PermissionDenied,
            TaskError::StagingFailed(_) => Status::StagingFailed,
            TaskError::SetExpired => Status::SetExpired,
            TaskError::Invalid(_) => Status::BadRequest,
            TaskError::Remote { status, .. } => *status,
            TaskError::Channel(e) => e.status(),
            TaskError::ConnectionLost | TaskError::Io(_) => Status::Internal,
        }
    }

    fn from_status(status: Status, message: String) -> TaskError {
        match status {
            Status::PermissionDenied => TaskError::PermissionDenied(message),
            Status::StagingFailed => TaskError::StagingFailed(message),
            Status::SetExpired => TaskError::SetExpired,
            status => TaskError::Remote { status, message },
        }
    }
}

impl From<SecError> for TaskError {
    fn from(e: SecError) -> Self {
        match e {
            SecError::Wire(WireError::Remote { code, message }) => TaskError::from_status(code, message),
            e if e.is_disconnect() => TaskError::ConnectionLost,
            e => TaskError::Channel(e),
        }
    }
}

impl From<WireError> for TaskError {
    fn from(e: WireError) -> Self {
        SecError::Wire(e).into()
    }
}

impl From<FtsmError> for TaskError {
    fn from(e: FtsmError) -> Self {
        match e {
            FtsmError::Channel(c) => c.into(),
            other => TaskError::StagingFailed(other.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_round_trip() {
        let spec = TaskSpec::process("sh", &["-c", "echo hi"])
            .with_network()
            .with_dependency("in.txt", "/tmp/whatever")
            .with_output("out.txt")
            .with_timeout(Duration::from_millis(1500));
        let back = TaskSpec::from_fields(&spec.to_fields()).unwrap();
        assert_eq!(back.kind, spec.kind);
        assert_eq!(back.outputs, spec.outputs);
        assert_eq!(back.timeout, spec.timeout);
        assert_eq!(back.dependencies[0].name, "in.txt");
        assert!(back.dependencies[0].source.as_os_str().is_empty());

        let b = TaskSpec::builtin("pi_hex_digits", FieldMap::new().with_u64(1, 1));
        assert_eq!(TaskSpec::from_fields(&b.to_fields()).unwrap(), b);
    }

    #[test]
    fn result_round_trip() {
        let mut r = TaskResult::new(2, TaskStatus::Failed);
        r.exit_code = Some(-3);
        r.stdout = b"x".to_vec();
        r.outputs = vec!["o".into()];
        assert_eq!(TaskResult::from_fields(&r.to_fields()).unwrap(), r);
    }
}
