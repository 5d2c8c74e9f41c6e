use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::RngCore;

use crate::ftsm::{md5_file, serve_inline_pull, serve_inline_push, Direction, Offer};
use crate::perms::{sandbox_relative, Account, ActionKind, Decision, Gate, GuardedAction};
use crate::secchan::{SecError, SecureChannel};
use crate::wire::{decode_list, encode_list, tags, FieldMap, FrameType, SessionParams, Status, WireError};

use super::{builtins, SetAction, SetId, SetState, TaskError, TaskKind, TaskResult, TaskSpec, TaskStatus};

const POLL_INTERVAL: Duration = Duration::from_millis(5);

/// Room left in each result frame for framing and sealing overhead.
const RESULT_FRAME_SLACK: usize = 512;

#[derive(Clone, Debug)]
pub struct TaskConfig {
    /// Parent of the per-set work directories.
    pub root: PathBuf,
    /// Concurrent tasks per set.
    pub workers: usize,
    /// How long a finished set stays collectable.
    pub retention: Duration,
    /// Bytes kept from each of stdout and stderr.
    pub capture_cap: usize,
}

impl TaskConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        TaskConfig {
            root: root.into(),
            workers: thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            retention: super::DEFAULT_RETENTION,
            capture_cap: 1 << 20,
        }
    }
}

struct SetInner {
    state: SetState,
    results: Vec<Option<TaskResult>>,
    finished: Option<Instant>,
    /// MD5 of each dependency as received.
    staged: HashMap<String, [u8; 16]>,
    released: bool,
}

struct TaskSet {
    id: SetId,
    owner: String,
    tasks: Vec<TaskSpec>,
    dir: PathBuf,
    action: GuardedAction,
    inner: Mutex<SetInner>,
    changed: Condvar,
    abort: AtomicBool,
}

impl TaskSet {
    fn dependency_names(&self) -> impl Iterator<Item = &str> {
        let mut seen = std::collections::BTreeSet::new();
        self.tasks
            .iter()
            .flat_map(|t| t.dependencies.iter().map(|d| d.name.as_str()))
            .filter(move |n| seen.insert(*n))
    }

    fn store(&self, index: usize, result: TaskResult) {
        let mut inner = self.inner.lock().unwrap();
        debug_assert!(inner.results[index].is_none(), "result slot written twice");
        inner.results[index] = Some(result);
        self.changed.notify_all();
    }

    fn finish(&self) {
        let mut inner = self.inner.lock().unwrap();
        inner.state = SetState::Done;
        inner.finished = Some(Instant::now());
        self.changed.notify_all();
    }
}

/// The node side of task execution. One instance is shared by every task
/// connection; sets outlive the connection that submitted them.
pub struct TaskService {
    config: TaskConfig,
    gate: Gate,
    sets: Mutex<HashMap<SetId, Arc<TaskSet>>>,
}

impl TaskService {
    pub fn new(config: TaskConfig, gate: Gate) -> std::io::Result<Self> {
        std::fs::create_dir_all(&config.root)?;
        Ok(TaskService {
            config,
            gate,
            sets: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn set_count(&self) -> usize {
        self.sets.lock().unwrap().len()
    }

    pub fn work_dir(&self, id: &SetId) -> PathBuf {
        self.config.root.join(hex::encode(id))
    }

    /// Drops sets whose retention window has passed.
    pub fn sweep(&self) {
        let now = Instant::now();
        let expired: Vec<Arc<TaskSet>> = {
            let mut sets = self.sets.lock().unwrap();
            let ids: Vec<SetId> = sets
                .iter()
                .filter(|(_, s)| {
                    s.inner
                        .lock()
                        .unwrap()
                        .finished
                        .is_some_and(|t| now.duration_since(t) >= self.config.retention)
                })
                .map(|(id, _)| *id)
                .collect();
            ids.iter().filter_map(|id| sets.remove(id)).collect()
        };
        for set in expired {
            debug!("task set {} expired", hex::encode(set.id));
            remove_dir(&set.dir);
        }
    }

    fn lookup(&self, account: &Account, id: &SetId) -> Result<Arc<TaskSet>, TaskError> {
        self.sweep();
        let sets = self.sets.lock().unwrap();
        match sets.get(id) {
            // Other users' sets look exactly like missing ones.
            Some(set) if set.owner == account.username || account.is_administrator() => Ok(set.clone()),
            _ => Err(TaskError::SetExpired),
        }
    }

    fn discard(&self, id: &SetId) {
        if let Some(set) = self.sets.lock().unwrap().remove(id) {
            set.abort.store(true, Ordering::SeqCst);
            remove_dir(&set.dir);
        }
    }

    /// Serves one task connection until the client closes it.
    pub fn handle<S: Read + Write>(
        &self,
        channel: &mut SecureChannel<S>,
        account: &Account,
        params: &SessionParams,
    ) -> Result<(), TaskError> {
        // Sets still staging when this connection ends are discarded.
        struct Staging<'a> {
            service: &'a TaskService,
            ids: Vec<SetId>,
        }
        impl Drop for Staging<'_> {
            fn drop(&mut self) {
                for id in &self.ids {
                    let staging = self
                        .service
                        .sets
                        .lock()
                        .unwrap()
                        .get(id)
                        .is_some_and(|s| s.inner.lock().unwrap().state == SetState::Staging);
                    if staging {
                        info!("discarding task set {} left in staging", hex::encode(id));
                        self.service.discard(id);
                    }
                }
            }
        }
        let mut staging = Staging {
            service: self,
            ids: Vec::new(),
        };
        loop {
            let (frame_type, fields) = match channel.recv_fields() {
                Ok(f) => f,
                Err(SecError::Wire(WireError::Closed)) => return Ok(()),
                Err(e) => return Err(e.into()),
            };
            let outcome = match frame_type {
                FrameType::TASK_SUBMIT => self.submit(account, &fields).and_then(|set| {
                    staging.ids.push(set.id);
                    let reply = FieldMap::new()
                        .with(tags::task::SET_ID, set.id)
                        .with_u8(tags::task::STATE, SetState::Staging as u8);
                    Ok(channel.send_fields(FrameType::TASK_STATUS, &reply)?)
                }),
                FrameType::XFER_OFFER => self.transfer(channel, account, params, &fields),
                FrameType::TASK_STATUS => self.status(channel, account, &fields),
                FrameType::TASK_RESULT => self.collect(channel, account, &fields),
                other => Err(TaskError::Invalid(format!("unexpected {other} in task session"))),
            };
            match outcome {
                Ok(()) => {}
                Err(TaskError::ConnectionLost) => return Ok(()),
                Err(TaskError::Channel(e)) => return Err(TaskError::Channel(e)),
                Err(e) => {
                    debug!("task request refused: {e}");
                    channel.send_error(e.status(), &e.detail())?;
                }
            }
        }
    }

    fn submit(&self, account: &Account, fields: &FieldMap) -> Result<Arc<TaskSet>, TaskError> {
        let tasks = decode_list(fields.require(tags::task::TASKS)?)?
            .iter()
            .map(|b| FieldMap::decode(b).and_then(|m| TaskSpec::from_fields(&m)))
            .collect::<Result<Vec<_>, _>>()?;
        if tasks.is_empty() {
            return Err(TaskError::Invalid("empty task set".into()));
        }
        for task in &tasks {
            if let TaskKind::Builtin { function, .. } = &task.kind {
                if !builtins::is_builtin(function) {
                    return Err(TaskError::Invalid(format!("unknown built-in {function:?}")));
                }
            }
            for name in task.dependencies.iter().map(|d| &d.name).chain(&task.outputs) {
                if sandbox_relative(name).is_none() {
                    return Err(TaskError::Invalid(format!("{name:?} is not a work-directory name")));
                }
            }
        }

        let described: Vec<String> = tasks.iter().map(TaskSpec::describe).collect();
        let action = GuardedAction::new(ActionKind::Execution, described.join("; "));
        if let Decision::Deny(reason) = self.gate.check(account, &action) {
            return Err(TaskError::PermissionDenied(reason));
        }

        let mut id = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut id);
        let dir = self.work_dir(&id);
        self.gate.effect(account, &action);
        std::fs::create_dir_all(&dir)?;
        let n = tasks.len();
        let set = Arc::new(TaskSet {
            id,
            owner: account.username.clone(),
            tasks,
            dir,
            action,
            inner: Mutex::new(SetInner {
                state: SetState::Staging,
                results: vec![None; n],
                finished: None,
                staged: HashMap::new(),
                released: false,
            }),
            changed: Condvar::new(),
            abort: AtomicBool::new(false),
        });
        self.sets.lock().unwrap().insert(id, set.clone());
        info!("task set {} from {}: {n} tasks", hex::encode(id), account.username);
        Ok(set)
    }

    fn transfer<S: Read + Write>(
        &self,
        channel: &mut SecureChannel<S>,
        account: &Account,
        params: &SessionParams,
        fields: &FieldMap,
    ) -> Result<(), TaskError> {
        let offer = Offer::from_fields(fields)?;
        let id = offer
            .task_set
            .ok_or_else(|| TaskError::Invalid("task sessions only carry staging transfers".into()))?;
        let set = self.lookup(account, &id)?;
        let rel = sandbox_relative(&offer.path).ok_or_else(|| TaskError::Invalid("bad staging name".into()))?;
        let path = set.dir.join(rel);
        let chunk = params.buffer_size;
        match offer.direction {
            Direction::Push => {
                {
                    let inner = set.inner.lock().unwrap();
                    if inner.state != SetState::Staging {
                        return Err(TaskError::Invalid("set is no longer staging".into()));
                    }
                }
                if !set.dependency_names().any(|n| n == offer.path) {
                    return Err(TaskError::Invalid(format!("{:?} is not a declared dependency", offer.path)));
                }
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                match serve_inline_push(channel, &offer, &path, chunk) {
                    Ok(md5) => {
                        set.inner.lock().unwrap().staged.insert(offer.path.clone(), md5);
                        Ok(())
                    }
                    // The failure already went back in XFER_DONE.
                    Err(e) if e.is_resumable() || matches!(e, crate::ftsm::FtsmError::Channel(_)) => Err(e.into()),
                    Err(e) => {
                        debug!("staging {:?} failed: {e}", offer.path);
                        Ok(())
                    }
                }
            }
            Direction::Pull => {
                let produced = {
                    let inner = set.inner.lock().unwrap();
                    !inner.released
                        && inner
                            .results
                            .iter()
                            .flatten()
                            .any(|r| r.status == TaskStatus::Ok && r.outputs.contains(&offer.path))
                };
                if !produced {
                    return Err(TaskError::Remote {
                        status: Status::NoSuchFile,
                        message: format!("no output named {:?}", offer.path),
                    });
                }
                serve_inline_pull(channel, &path, chunk)?;
                Ok(())
            }
        }
    }

    fn status<S: Read + Write>(&self, channel: &mut SecureChannel<S>, account: &Account, fields: &FieldMap) -> Result<(), TaskError> {
        let id: SetId = fields.require_array(tags::task::SET_ID)?;
        let action = SetAction::from_u8(fields.require_u8(tags::task::ACTION)?)
            .ok_or_else(|| TaskError::Invalid("unknown set action".into()))?;
        let set = self.lookup(account, &id)?;
        match action {
            SetAction::Start => self.start(&set, account, fields)?,
            SetAction::Poll => {}
            SetAction::Abort => {
                let staging = set.inner.lock().unwrap().state == SetState::Staging;
                if staging {
                    self.discard(&id);
                } else {
                    set.abort.store(true, Ordering::SeqCst);
                }
            }
            SetAction::Release => {
                let mut inner = set.inner.lock().unwrap();
                if inner.state == SetState::Done && !inner.released {
                    inner.released = true;
                    remove_dir(&set.dir);
                }
            }
        }
        let (state, done) = {
            let inner = set.inner.lock().unwrap();
            (inner.state, inner.results.iter().flatten().count())
        };
        let reply = FieldMap::new()
            .with(tags::task::SET_ID, id)
            .with_u8(tags::task::STATE, state as u8)
            .with_u32(tags::task::COUNT, done as u32);
        Ok(channel.send_fields(FrameType::TASK_STATUS, &reply)?)
    }

    fn start(&self, set: &Arc<TaskSet>, account: &Account, fields: &FieldMap) -> Result<(), TaskError> {
        let mut claimed = BTreeMap::new();
        for item in decode_list(fields.get(tags::task::DIGESTS).unwrap_or(&[0, 0, 0, 0]))? {
            if item.len() < 16 {
                return Err(TaskError::Invalid("short digest entry".into()));
            }
            let name = String::from_utf8(item[16..].to_vec()).map_err(|_| TaskError::Invalid("digest name".into()))?;
            claimed.insert(name, <[u8; 16]>::try_from(&item[..16]).unwrap());
        }
        let verdict = {
            let mut inner = set.inner.lock().unwrap();
            if inner.state != SetState::Staging {
                return Err(TaskError::Invalid("set already started".into()));
            }
            let check = set.dependency_names().try_for_each(|name| {
                let staged = inner.staged.get(name);
                let on_disk = md5_file(&set.dir.join(name)).ok();
                match (claimed.get(name), staged, on_disk) {
                    (Some(c), Some(s), Some(d)) if c == s && *s == d => Ok(()),
                    (None, _, _) | (_, None, _) => Err(format!("dependency {name:?} was not staged")),
                    _ => Err(format!("dependency {name:?} differs from the client copy")),
                }
            });
            if check.is_ok() {
                inner.state = SetState::Running;
            }
            check
        };
        if let Err(reason) = verdict {
            self.discard(&set.id);
            return Err(TaskError::StagingFailed(reason));
        }

        self.gate.effect(account, &set.action);
        let set = set.clone();
        let account = account.clone();
        let gate = self.gate.clone();
        let workers = self.config.workers.max(1);
        let cap = self.config.capture_cap;
        thread::Builder::new()
            .name(format!("set-{}", hex::encode(&set.id[..4])))
            .spawn(move || run_set(&set, &account, &gate, workers, cap))?;
        Ok(())
    }

    fn collect<S: Read + Write>(&self, channel: &mut SecureChannel<S>, account: &Account, fields: &FieldMap) -> Result<(), TaskError> {
        let id: SetId = fields.require_array(tags::task::SET_ID)?;
        let set = self.lookup(account, &id)?;
        let results: Vec<TaskResult> = {
            let inner = set.inner.lock().unwrap();
            if inner.state == SetState::Staging {
                return Err(TaskError::Invalid("set has not started".into()));
            }
            let inner = set.changed.wait_while(inner, |i| i.state != SetState::Done).unwrap();
            inner.results.iter().map(|r| r.clone().expect("finished set has every result")).collect()
        };
        let piece = (channel.max_payload() as usize).saturating_sub(RESULT_FRAME_SLACK).max(1);
        for result in &results {
            let bytes = result.to_fields().encode();
            let mut pieces = bytes.chunks(piece).peekable();
            while let Some(p) = pieces.next() {
                let frame = FieldMap::new()
                    .with(tags::task::RESULTS, p)
                    .with_u8(tags::task::MORE, pieces.peek().is_some() as u8);
                channel.send_fields(FrameType::TASK_RESULT, &frame)?;
            }
        }
        let end = FieldMap::new()
            .with(tags::task::SET_ID, id)
            .with_u8(tags::task::STATE, SetState::Done as u8)
            .with_u32(tags::task::COUNT, results.len() as u32);
        Ok(channel.send_fields(FrameType::TASK_RESULT, &end)?)
    }
}

fn remove_dir(dir: &Path) {
    if let Err(e) = std::fs::remove_dir_all(dir) {
        if e.kind() != std::io::ErrorKind::NotFound {
            warn!("removing {}: {e}", dir.display());
        }
    }
}

fn run_set(set: &TaskSet, account: &Account, gate: &Gate, workers: usize, cap: usize) {
    let next = AtomicUsize::new(0);
    let n = set.tasks.len();
    thread::scope(|s| {
        for _ in 0..workers.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let result = run_task(set, i, account, gate, cap);
                set.store(i, result);
            });
        }
    });
    set.finish();
    info!("task set {} finished", hex::encode(set.id));
}

fn run_task(set: &TaskSet, index: usize, account: &Account, gate: &Gate, cap: usize) -> TaskResult {
    let i = index as u32;
    let task = &set.tasks[index];
    if set.abort.load(Ordering::SeqCst) {
        return TaskResult::failed(i, TaskStatus::Failed, "aborted");
    }
    for cap in task.capabilities() {
        let action = GuardedAction::new(cap.action(), task.describe());
        match gate.check(account, &action) {
            Decision::Allow => gate.effect(account, &action),
            Decision::Deny(reason) => return TaskResult::failed(i, TaskStatus::Denied, reason),
        }
    }
    let mut result = match &task.kind {
        TaskKind::Builtin { function, params } => run_builtin(i, function, params, &set.dir, task.timeout),
        TaskKind::Process { command, args, .. } => run_process(i, command, args, &set.dir, task.timeout, cap, &set.abort),
    };
    if result.status == TaskStatus::Ok {
        for name in &task.outputs {
            if set.dir.join(name).is_file() {
                result.outputs.push(name.clone());
            } else {
                result.status = TaskStatus::Failed;
                result.outputs.clear();
                result.message = format!("declared output {name:?} was not produced");
                break;
            }
        }
    }
    result
}

fn run_builtin(index: u32, function: &str, params: &FieldMap, dir: &Path, timeout: Duration) -> TaskResult {
    let (tx, rx) = mpsc::channel();
    let (function, params, dir) = (function.to_string(), params.clone(), dir.to_path_buf());
    // A built-in cannot be killed; on timeout its thread is left to finish.
    thread::spawn(move || {
        let _ = tx.send(builtins::call(&function, &params, &dir));
    });
    match rx.recv_timeout(timeout) {
        Ok(Ok(value)) => TaskResult {
            value,
            ..TaskResult::new(index, TaskStatus::Ok)
        },
        Ok(Err(message)) => TaskResult::failed(index, TaskStatus::Failed, message),
        Err(mpsc::RecvTimeoutError::Timeout) => TaskResult::failed(index, TaskStatus::Timeout, "timed out"),
        Err(mpsc::RecvTimeoutError::Disconnected) => TaskResult::failed(index, TaskStatus::Failed, "built-in panicked"),
    }
}

/// Reads a pipe to the end, keeping at most `cap` bytes.
fn capture(mut pipe: impl Read + Send + 'static, cap: usize) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match pipe.read(&mut buf) {
                Ok(0) | Err(_) => return kept,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
    })
}

fn kill_group(child: &mut Child) {
    // The child leads its own process group, so this also reaches anything
    // it spawned that still holds the output pipes.
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
    let _ = child.kill();
    let _ = child.wait();
}

fn run_process(
    index: u32,
    command: &str,
    args: &[String],
    dir: &Path,
    timeout: Duration,
    cap: usize,
    abort: &AtomicBool,
) -> TaskResult {
    let program = if command.contains('/') && Path::new(command).is_relative() {
        dir.join(command)
    } else {
        PathBuf::from(command)
    };
    let spawned = Command::new(&program)
        .args(args)
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn();
    let mut child = match spawned {
        Ok(c) => c,
        Err(e) => return TaskResult::failed(index, TaskStatus::Failed, format!("launch failed: {command}: {e}")),
    };
    let out = capture(child.stdout.take().expect("piped"), cap);
    let err = capture(child.stderr.take().expect("piped"), cap);
    let started = Instant::now();
    let (status, exit) = loop {
        match child.try_wait() {
            Ok(Some(exit)) => {
                // Reap stragglers that inherited the pipes.
                unsafe {
                    libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
                }
                let status = if exit.success() { TaskStatus::Ok } else { TaskStatus::Failed };
                break (status, Some(exit));
            }
            Ok(None) if abort.load(Ordering::SeqCst) => {
                kill_group(&mut child);
                break (TaskStatus::Failed, None);
            }
            Ok(None) if started.elapsed() >= timeout => {
                kill_group(&mut child);
                break (TaskStatus::Timeout, None);
            }
            Ok(None) => thread::sleep(POLL_INTERVAL),
            Err(e) => {
                kill_group(&mut child);
                return TaskResult::failed(index, TaskStatus::Failed, e.to_string());
            }
        }
    };
    let mut result = TaskResult::new(index, status);
    result.exit_code = exit.and_then(|e| e.code());
    result.stdout = out.join().unwrap_or_default();
    result.stderr = err.join().unwrap_or_default();
    result.message = match (status, result.exit_code) {
        (TaskStatus::Ok, _) => String::new(),
        (TaskStatus::Timeout, _) => format!("killed after {:?}", timeout),
        (_, Some(code)) => format!("exited with status {code}"),
        (_, None) if exit.is_none() => "aborted".into(),
        (_, None) => "terminated by a signal".into(),
    };
    result
}

/// Digest list for `TASK_STATUS` start requests.
pub(crate) fn encode_digests<'a>(items: impl Iterator<Item = (&'a str, [u8; 16])>) -> Vec<u8> {
    let entries: Vec<Vec<u8>> = items
        .map(|(name, md5)| {
            let mut e = md5.to_vec();
            e.extend_from_slice(name.as_bytes());
            e
        })
        .collect();
    encode_list(&entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_abort() -> AtomicBool {
        AtomicBool::new(false)
    }

    fn sh(script: &str, dir: &Path, timeout: Duration) -> TaskResult {
        run_process(0, "sh", &["-c".into(), script.into()], dir, timeout, 1 << 16, &no_abort())
    }

    #[test]
    fn process_outcomes() {
        let dir = tempfile::tempdir().unwrap();
        let ok = sh("echo hello", dir.path(), Duration::from_secs(10));
        assert_eq!((ok.status, ok.exit_code), (TaskStatus::Ok, Some(0)));
        assert_eq!(ok.stdout, b"hello\n");

        let three = sh("exit 3", dir.path(), Duration::from_secs(10));
        assert_eq!((three.status, three.exit_code), (TaskStatus::Failed, Some(3)));
    }

    #[test]
    fn timeout_kills_the_whole_group() {
        let dir = tempfile::tempdir().unwrap();
        let started = Instant::now();
        let r = sh("sleep 10; echo late", dir.path(), Duration::from_secs(1));
        assert_eq!(r.status, TaskStatus::Timeout);
        assert!(started.elapsed() < Duration::from_secs(3), "{:?}", started.elapsed());
        assert!(r.stdout.is_empty());
    }

    #[test]
    fn missing_executable_fails_to_launch() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_process(0, "./nope", &[], dir.path(), Duration::from_secs(1), 16, &no_abort());
        assert_eq!(r.status, TaskStatus::Failed);
        assert!(r.message.starts_with("launch failed"), "{}", r.message);
    }

    #[test]
    fn capture_is_capped_but_drained() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_process(
            0,
            "sh",
            &["-c".into(), "head -c 100000 /dev/zero".into()],
            dir.path(),
            Duration::from_secs(10),
            1000,
            &no_abort(),
        );
        assert_eq!(r.status, TaskStatus::Ok);
        assert_eq!(r.stdout.len(), 1000);
    }

    #[test]
    fn process_runs_in_work_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("in.txt"), b"abc").unwrap();
        let r = sh("cat in.txt > out.txt", dir.path(), Duration::from_secs(10));
        assert_eq!(r.status, TaskStatus::Ok);
        assert_eq!(std::fs::read(dir.path().join("out.txt")).unwrap(), b"abc");
    }

    #[test]
    fn builtin_timeout_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_builtin(1, "pi_hex_digits", &builtins::pi_params(1, 8), dir.path(), Duration::from_secs(5));
        assert_eq!(r.status, TaskStatus::Ok);
        let r = run_builtin(1, "md5_file", &FieldMap::new(), dir.path(), Duration::from_secs(5));
        assert_eq!(r.status, TaskStatus::Failed);
    }
}
