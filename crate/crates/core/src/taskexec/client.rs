use std::collections::BTreeMap;
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::ftsm::{pull_inline, push_inline};
use crate::secchan::{self, ClientSession, Credentials};
use crate::wire::{encode_list, tags, FieldMap, FrameType, Mode, SecurityMode, SessionParams};

use super::server::encode_digests;
use super::{SetAction, SetId, SetState, TaskError, TaskResult, TaskSpec};

/// A submitted set. Cheap to copy; any connection of the same account can
/// poll or collect it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SetHandle {
    pub id: SetId,
    pub tasks: usize,
}

/// Client side of one task connection. Everything a submit needs (the set
/// itself, dependency staging, start) rides this one authenticated session.
pub struct TaskClient {
    session: ClientSession<TcpStream>,
}

impl TaskClient {
    pub fn connect(addr: &str, creds: &Credentials, security: SecurityMode, buffer_size: u32) -> Result<Self, TaskError> {
        let params = SessionParams::request(Mode::Task, security, buffer_size, 1);
        Ok(TaskClient {
            session: secchan::connect(addr, creds, params, None)?,
        })
    }

    pub fn params(&self) -> &SessionParams {
        &self.session.params
    }

    /// Stages every dependency, verifies digests on the node, and starts the
    /// set. Nothing runs unless all of that succeeds; on failure the node
    /// keeps no trace of the set.
    pub fn submit(&mut self, tasks: &[TaskSpec]) -> Result<SetHandle, TaskError> {
        let deps = unique_dependencies(tasks)?;
        for (name, source) in &deps {
            std::fs::File::open(source).map_err(|e| TaskError::StagingFailed(format!("{name}: {}: {e}", source.display())))?;
        }
        let encoded: Vec<Vec<u8>> = tasks.iter().map(|t| t.to_fields().encode()).collect();
        let channel = &mut self.session.channel;
        channel.send_fields(FrameType::TASK_SUBMIT, &FieldMap::new().with(tags::task::TASKS, encode_list(&encoded)))?;
        let reply = channel.expect(FrameType::TASK_STATUS)?;
        let handle = SetHandle {
            id: reply.require_array(tags::task::SET_ID)?,
            tasks: tasks.len(),
        };

        let mut digests = Vec::with_capacity(deps.len());
        for (name, source) in &deps {
            match push_inline(channel, source, handle.id, name) {
                Ok(md5) => digests.push((name.as_str(), md5)),
                Err(e) => {
                    let e = TaskError::from(e);
                    if !matches!(e, TaskError::ConnectionLost | TaskError::Channel(_)) {
                        let _ = self.action(&handle, SetAction::Abort, None);
                    }
                    return Err(match e {
                        TaskError::StagingFailed(m) => TaskError::StagingFailed(format!("{name}: {m}")),
                        TaskError::Remote { message, .. } => TaskError::StagingFailed(format!("{name}: {message}")),
                        other => other,
                    });
                }
            }
        }
        let digests = encode_digests(digests.into_iter());
        self.action(&handle, SetAction::Start, Some(digests))?;
        Ok(handle)
    }

    fn action(&mut self, handle: &SetHandle, action: SetAction, digests: Option<Vec<u8>>) -> Result<(SetState, usize), TaskError> {
        let mut req = FieldMap::new()
            .with(tags::task::SET_ID, handle.id)
            .with_u8(tags::task::ACTION, action as u8);
        if let Some(d) = digests {
            req.insert(tags::task::DIGESTS, d);
        }
        let channel = &mut self.session.channel;
        channel.send_fields(FrameType::TASK_STATUS, &req)?;
        let reply = channel.expect(FrameType::TASK_STATUS)?;
        let state = SetState::from_u8(reply.require_u8(tags::task::STATE)?)
            .ok_or_else(|| TaskError::Invalid("unknown set state".into()))?;
        Ok((state, reply.get_u32(tags::task::COUNT)?.unwrap_or(0) as usize))
    }

    /// Current state and number of finished tasks.
    pub fn poll(&mut self, handle: &SetHandle) -> Result<(SetState, usize), TaskError> {
        self.action(handle, SetAction::Poll, None)
    }

    /// Stops a running set; unfinished tasks end FAILED.
    pub fn abort(&mut self, handle: &SetHandle) -> Result<(), TaskError> {
        self.action(handle, SetAction::Abort, None).map(|_| ())
    }

    /// Waits for every task, returns the results in submission order and
    /// fetches declared outputs of OK tasks into `out_dir`. The node's work
    /// directory is removed afterwards; the results stay collectable until
    /// the retention window closes.
    pub fn collect(&mut self, handle: &SetHandle, out_dir: Option<&Path>) -> Result<Vec<TaskResult>, TaskError> {
        let results = self.fetch_results(handle)?;
        if let Some(dir) = out_dir {
            for name in results.iter().flat_map(|r| &r.outputs) {
                let dst = dir.join(name);
                if let Some(parent) = dst.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                pull_inline(&mut self.session.channel, handle.id, name, &dst)?;
            }
        }
        self.action(handle, SetAction::Release, None)?;
        Ok(results)
    }

    fn fetch_results(&mut self, handle: &SetHandle) -> Result<Vec<TaskResult>, TaskError> {
        let channel = &mut self.session.channel;
        channel.send_fields(FrameType::TASK_RESULT, &FieldMap::new().with(tags::task::SET_ID, handle.id))?;
        let mut results = Vec::new();
        let mut partial = Vec::new();
        loop {
            let frame = channel.expect(FrameType::TASK_RESULT)?;
            if let Some(piece) = frame.get(tags::task::RESULTS) {
                partial.extend_from_slice(piece);
                if frame.get_u8(tags::task::MORE)?.unwrap_or(0) == 0 {
                    results.push(TaskResult::from_fields(&FieldMap::decode(&partial)?)?);
                    partial.clear();
                }
                continue;
            }
            let count = frame.require_u32(tags::task::COUNT)? as usize;
            if count != results.len() || results.iter().enumerate().any(|(i, r)| r.index as usize != i) {
                return Err(TaskError::Invalid("result array out of order or short".into()));
            }
            return Ok(results);
        }
    }

    /// Submits and collects in one call.
    pub fn run(&mut self, tasks: &[TaskSpec], out_dir: Option<&Path>) -> Result<Vec<TaskResult>, TaskError> {
        let handle = self.submit(tasks)?;
        self.collect(&handle, out_dir)
    }

    /// Polls until the set is done or `limit` passes.
    pub fn wait(&mut self, handle: &SetHandle, limit: Duration) -> Result<SetState, TaskError> {
        let deadline = std::time::Instant::now() + limit;
        loop {
            let (state, _) = self.poll(handle)?;
            if state == SetState::Done || std::time::Instant::now() >= deadline {
                return Ok(state);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

/// Computes pi hex digits `[1, count]` split SPMD-style over `nodes`, one
/// `pi_hex_digits` task per node, all nodes working at once.
pub fn fan_out_pi(nodes: &[String], creds: &Credentials, security: SecurityMode, count: u64) -> Result<String, TaskError> {
    if nodes.is_empty() {
        return Err(TaskError::Invalid("no nodes given".into()));
    }
    let ranges = super::pi::split_spmd(count, nodes.len() as u64);
    let parts: Vec<Result<String, TaskError>> = std::thread::scope(|s| {
        let running: Vec<_> = ranges
            .iter()
            .zip(nodes)
            .map(|(&(start, n), node)| {
                s.spawn(move || {
                    let mut client = TaskClient::connect(node, creds, security, 65536)?;
                    let spec = TaskSpec::builtin("pi_hex_digits", super::builtins::pi_params(start, n));
                    let result = client.run(&[spec], None)?.remove(0);
                    if result.status != super::TaskStatus::Ok {
                        return Err(TaskError::Invalid(format!("{node}: {}", result.message)));
                    }
                    let digits = result.value.require_str(super::builtins::tags::DIGITS).map_err(TaskError::from)?;
                    Ok(digits.to_string())
                })
            })
            .collect();
        running
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(TaskError::Invalid("pi worker panicked".into()))))
            .collect()
    });
    parts.into_iter().collect()
}

/// One source per dependency name across the whole set.
fn unique_dependencies(tasks: &[TaskSpec]) -> Result<Vec<(String, PathBuf)>, TaskError> {
    let mut by_name: BTreeMap<&str, &Path> = BTreeMap::new();
    for dep in tasks.iter().flat_map(|t| &t.dependencies) {
        match by_name.insert(&dep.name, &dep.source) {
            Some(prev) if prev != dep.source => {
                return Err(TaskError::Invalid(format!(
                    "dependency {:?} names two sources ({} and {})",
                    dep.name,
                    prev.display(),
                    dep.source.display()
                )))
            }
            _ => {}
        }
    }
    Ok(by_name.into_iter().map(|(n, p)| (n.to_string(), p.to_path_buf())).collect())
}
