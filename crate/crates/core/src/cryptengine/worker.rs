use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use log::debug;

use crate::dfsm::{DfsClient, DfsError, SeekOrigin};
use crate::perms::{Account, ActionKind, Decision, Gate, GuardedAction};
use crate::secchan::{SecError, SecureChannel};
use crate::wire::{tags, FieldMap, FrameType, SessionParams, WireError};

use super::block::{decode_block_header, encode_block_header, BlockDecryptor, BlockEncryptor, HEADER_LEN};
use super::task::{CryptDirection, CryptTask, Location};
use super::CryptError;

const LOCK_ATTEMPTS: u32 = 50;
const LOCK_BACKOFF: Duration = Duration::from_millis(100);

/// What the worker reports for a finished task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub part_num: u64,
    /// Block file (encrypt) or plaintext destination (decrypt).
    pub file: String,
    /// Ciphertext bytes (encrypt) or plaintext bytes (decrypt).
    pub length: u64,
    /// Plaintext digest.
    pub md5: [u8; 16],
}

impl Completion {
    pub fn to_fields(&self) -> FieldMap {
        FieldMap::new()
            .with_u64(tags::crypt::PART_NUM, self.part_num)
            .with_str(tags::crypt::BLOCK_FILE, &self.file)
            .with_u64(tags::crypt::LENGTH, self.length)
            .with(tags::crypt::MD5, self.md5)
            .with_u16(tags::crypt::STATUS, 0)
    }

    pub fn from_fields(map: &FieldMap) -> Result<Self, WireError> {
        Ok(Completion {
            part_num: map.require_u64(tags::crypt::PART_NUM)?,
            file: map.require_str(tags::crypt::BLOCK_FILE)?.to_string(),
            length: map.require_u64(tags::crypt::LENGTH)?,
            md5: map.require_array(tags::crypt::MD5)?,
        })
    }
}

/// Tracks the bytes held in block buffers and their peak, per service.
#[derive(Debug, Default)]
pub struct BufferMeter {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl BufferMeter {
    fn hold(&self, bytes: usize) {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn release(&self, bytes: usize) {
        self.current.fetch_sub(bytes, Ordering::SeqCst);
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

/// Counts a buffer's capacity against the meter while it lives.
struct Metered<'a> {
    meter: &'a BufferMeter,
    buf: Vec<u8>,
    counted: usize,
}

impl<'a> Metered<'a> {
    fn new(meter: &'a BufferMeter, capacity: usize) -> Self {
        let buf = Vec::with_capacity(capacity);
        meter.hold(buf.capacity());
        Metered {
            meter,
            counted: buf.capacity(),
            buf,
        }
    }

    fn wrap(meter: &'a BufferMeter, buf: Vec<u8>) -> Self {
        meter.hold(buf.capacity());
        Metered {
            meter,
            counted: buf.capacity(),
            buf,
        }
    }

    fn recount(&mut self) {
        let cap = self.buf.capacity();
        if cap > self.counted {
            self.meter.hold(cap - self.counted);
            self.counted = cap;
        }
    }
}

impl Drop for Metered<'_> {
    fn drop(&mut self) {
        self.meter.release(self.counted);
    }
}

/// Worker side of the block cryptography protocol: one `CRYPT_TASK` frame
/// in, one completion frame out, sequentially per connection.
pub struct CryptService {
    gate: Gate,
    meter: BufferMeter,
    /// Test hook: drop the connection once this many tasks have completed.
    crash_after: Option<AtomicUsize>,
}

impl CryptService {
    pub fn new(gate: Gate) -> Self {
        CryptService {
            gate,
            meter: BufferMeter::default(),
            crash_after: None,
        }
    }

    /// Makes every session end abruptly after `tasks` more completions,
    /// the way a killed worker would.
    pub fn crash_after(mut self, tasks: usize) -> Self {
        self.crash_after = Some(AtomicUsize::new(tasks));
        self
    }

    pub fn meter(&self) -> &BufferMeter {
        &self.meter
    }

    pub fn handle<S: Read + Write>(
        &self,
        channel: &mut SecureChannel<S>,
        account: &Account,
        _params: &SessionParams,
    ) -> Result<(), CryptError> {
        let mut links = Links::default();
        loop {
            let fields = match channel.expect(FrameType::CRYPT_TASK) {
                Ok(f) => f,
                Err(SecError::Wire(WireError::Closed)) => return Ok(()),
                Err(e) => return Err(e.into()),
            };
            if let Some(budget) = &self.crash_after {
                if budget.load(Ordering::SeqCst) == 0 {
                    debug!("crypt worker simulating a crash");
                    return Ok(());
                }
            }
            let reply = CryptTask::from_fields(&fields.require_map(tags::crypt::TASK)?)
                .map_err(CryptError::from)
                .and_then(|task| self.run(account, &task, &mut links));
            match reply {
                Ok(done) => {
                    if let Some(budget) = &self.crash_after {
                        budget.fetch_sub(1, Ordering::SeqCst);
                    }
                    channel.send_fields(FrameType::CRYPT_TASK, &done.to_fields())?;
                }
                Err(e) => {
                    debug!("crypt task failed: {e}");
                    channel.send_error(e.status(), &e.detail())?;
                }
            }
        }
    }

    fn authorize(&self, account: &Account, action: &GuardedAction) -> Result<(), CryptError> {
        match self.gate.check(account, action) {
            Decision::Allow => Ok(()),
            Decision::Deny(reason) => Err(CryptError::PermissionDenied(reason)),
        }
    }

    fn run(&self, account: &Account, task: &CryptTask, links: &mut Links) -> Result<Completion, CryptError> {
        let exec = GuardedAction::new(ActionKind::Execution, format!("crypt part {}", task.part_num));
        self.authorize(account, &exec)?;
        let mut local_actions = Vec::new();
        for loc in [&task.source, &task.destination] {
            if let Location::Local(path) = loc {
                let action = GuardedAction::file_io(path.clone());
                self.authorize(account, &action)?;
                local_actions.push(action);
            }
        }
        self.gate.effect(account, &exec);
        for action in &local_actions {
            self.gate.effect(account, action);
        }
        let mut source = links.open(account, task, &task.source, Role::Source)?;
        let mut destination = match links.open(account, task, &task.destination, Role::Destination) {
            Ok(d) => d,
            Err(e) => {
                links.restore(source);
                return Err(e);
            }
        };
        let piece = (task.buffer_size as usize).max(4096);
        let result = match task.direction {
            CryptDirection::Encrypt => self.encrypt(task, &mut source, &mut destination, piece),
            CryptDirection::Decrypt => self.decrypt(task, &mut source, &mut destination, piece),
        };
        links.restore(source);
        links.restore(destination);
        result
    }

    fn encrypt(&self, task: &CryptTask, src: &mut Endpoint, dst: &mut Endpoint, piece: usize) -> Result<Completion, CryptError> {
        let lock = src.lock(task.offset, task.length)?;
        let result = (|| {
            src.seek(task.offset)?;
            dst.truncate(0)?;
            let mut enc = BlockEncryptor::new(&task.params, task.part_num);
            let mut out = Metered::new(&self.meter, piece + 32);
            let mut written = HEADER_LEN as u64;
            let mut remaining = task.length;
            while remaining > 0 {
                let plain = src.read_next(remaining.min(piece as u64), &self.meter)?;
                if plain.buf.is_empty() {
                    return Err(CryptError::SourceTruncated(task.part_num));
                }
                remaining -= plain.buf.len() as u64;
                out.buf.clear();
                enc.update(&plain.buf, &mut out.buf);
                out.recount();
                dst.write_at(written, &out.buf)?;
                written += out.buf.len() as u64;
            }
            out.buf.clear();
            let header = enc.finish(&mut out.buf);
            dst.write_at(written, &out.buf)?;
            dst.write_at(0, &encode_block_header(&header))?;
            dst.flush()?;
            Ok(Completion {
                part_num: task.part_num,
                file: task.destination.path().to_string(),
                length: header.length,
                md5: header.md5,
            })
        })();
        src.unlock(lock);
        result
    }

    fn decrypt(&self, task: &CryptTask, src: &mut Endpoint, dst: &mut Endpoint, piece: usize) -> Result<Completion, CryptError> {
        src.seek(0)?;
        let head = src.read_next(HEADER_LEN as u64, &self.meter)?;
        let header = decode_block_header(&head.buf)?;
        drop(head);
        if header.part_num != task.part_num {
            return Err(CryptError::IntegrityMismatch(Some(task.part_num)));
        }
        let mut dec = BlockDecryptor::new(&task.params, header);
        let mut out = Metered::new(&self.meter, piece + 32);
        let mut pos = task.offset;
        let mut remaining = header.length;
        while remaining > 0 {
            let ct = src.read_next(remaining.min(piece as u64), &self.meter)?;
            if ct.buf.is_empty() {
                return Err(CryptError::IntegrityMismatch(Some(task.part_num)));
            }
            remaining -= ct.buf.len() as u64;
            out.buf.clear();
            dec.update(&ct.buf, &mut out.buf);
            out.recount();
            dst.write_at(pos, &out.buf)?;
            pos += out.buf.len() as u64;
        }
        out.buf.clear();
        dec.finish(&mut out.buf)?;
        dst.write_at(pos, &out.buf)?;
        pos += out.buf.len() as u64;
        if pos - task.offset != task.length {
            return Err(CryptError::IntegrityMismatch(Some(task.part_num)));
        }
        dst.flush()?;
        Ok(Completion {
            part_num: task.part_num,
            file: task.destination.path().to_string(),
            length: task.length,
            md5: header.md5,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Role {
    Source,
    Destination,
}

/// File-system sessions this worker holds to other nodes, reused across
/// the tasks of one connection.
#[derive(Default)]
struct Links {
    clients: HashMap<LinkKey, DfsClient>,
}

impl Links {
    fn open(&mut self, account: &Account, task: &CryptTask, loc: &Location, role: Role) -> Result<Endpoint, CryptError> {
        match loc {
            Location::Local(path) => {
                let full = account
                    .resolve(path)
                    .ok_or_else(|| CryptError::PermissionDenied("sandbox escape".into()))?;
                let file = match role {
                    Role::Source => File::open(&full).map_err(|e| match e.kind() {
                        std::io::ErrorKind::NotFound => CryptError::MissingBlock(task.part_num),
                        _ => e.into(),
                    })?,
                    Role::Destination => {
                        if let Some(parent) = full.parent() {
                            std::fs::create_dir_all(parent)?;
                        }
                        OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&full)?
                    }
                };
                Ok(Endpoint::Local { file, pos: 0 })
            }
            Location::Remote { addr, path } => {
                let key = (role, addr.clone(), task.username.clone());
                let client = match self.clients.remove(&key) {
                    Some(c) => c,
                    None => DfsClient::connect(addr, task.credentials(), task.security, task.buffer_size)?,
                };
                Ok(Endpoint::Remote {
                    client: Box::new(client),
                    path: path.clone(),
                    key,
                })
            }
        }
    }

    /// Keeps a remote session for the next task.
    fn restore(&mut self, endpoint: Endpoint) {
        if let Endpoint::Remote { client, key, .. } = endpoint {
            self.clients.insert(key, *client);
        }
    }
}

type LinkKey = (Role, String, String);

enum Endpoint {
    Local { file: File, pos: u64 },
    Remote { client: Box<DfsClient>, path: String, key: LinkKey },
}

impl Endpoint {
    /// Locks the range on a remote source; local files need no lock.
    fn lock(&mut self, offset: u64, length: u64) -> Result<Option<u64>, CryptError> {
        let Endpoint::Remote { client, path, .. } = self else {
            return Ok(None);
        };
        if length == 0 {
            return Ok(None);
        }
        let mut attempt = 0;
        loop {
            match client.lock(path, offset, length) {
                Ok(id) => return Ok(Some(id)),
                // A previous holder's session may still be draining.
                Err(DfsError::LockConflict) if attempt < LOCK_ATTEMPTS => {
                    attempt += 1;
                    std::thread::sleep(LOCK_BACKOFF);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn unlock(&mut self, lock: Option<u64>) {
        if let (Endpoint::Remote { client, path, .. }, Some(id)) = (self, lock) {
            if let Err(e) = client.unlock(path, id) {
                debug!("unlock of {path} failed: {e}");
            }
        }
    }

    fn seek(&mut self, offset: u64) -> Result<(), CryptError> {
        match self {
            Endpoint::Local { pos, .. } => *pos = offset,
            Endpoint::Remote { client, path, .. } => {
                client.seek(path, SeekOrigin::Begin, offset as i64)?;
            }
        }
        Ok(())
    }

    /// Reads up to `len` bytes at the cursor and advances it.
    fn read_next<'m>(&mut self, len: u64, meter: &'m BufferMeter) -> Result<Metered<'m>, CryptError> {
        let data = match self {
            Endpoint::Local { file, pos } => {
                let mut buf = vec![0u8; len as usize];
                let mut got = 0;
                while got < buf.len() {
                    let n = file.read_at(&mut buf[got..], *pos + got as u64)?;
                    if n == 0 {
                        break;
                    }
                    got += n;
                }
                buf.truncate(got);
                *pos += got as u64;
                buf
            }
            Endpoint::Remote { client, path, .. } => client.read(path, len)?,
        };
        Ok(Metered::wrap(meter, data))
    }

    fn write_at(&mut self, offset: u64, data: &[u8]) -> Result<(), CryptError> {
        if data.is_empty() {
            return Ok(());
        }
        match self {
            Endpoint::Local { file, .. } => file.write_all_at(data, offset)?,
            Endpoint::Remote { client, path, .. } => client.write_at(path, offset, data)?,
        }
        Ok(())
    }

    fn truncate(&mut self, len: u64) -> Result<(), CryptError> {
        match self {
            Endpoint::Local { file, .. } => file.set_len(len)?,
            Endpoint::Remote { client, path, .. } => {
                // An empty write creates the file so the resize has a target.
                client.write_at(path, 0, &[])?;
                client.set_length(path, len)?;
            }
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<(), CryptError> {
        match self {
            Endpoint::Local { file, .. } => file.sync_data()?,
            Endpoint::Remote { client, path, .. } => client.flush(path)?,
        }
        Ok(())
    }
}
