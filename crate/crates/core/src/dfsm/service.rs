use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::PathBuf;
use std::sync::Arc;

use log::debug;

use crate::perms::{Account, Decision, Gate, GuardedAction};
use crate::secchan::{SecError, SecureChannel};
use crate::wire::{FrameType, SessionParams, Status, WireError};

use super::locks::{LockError, LockTable, SessionId};
use super::{DfsError, DfsOp, DfsRequest, DfsResponse, FileStat};

/// Server side of the file-system mode. Holds only the shared lock table.
pub struct DfsService {
    locks: Arc<LockTable>,
    gate: Gate,
}

fn map_io(err: io::Error) -> DfsError {
    match err.kind() {
        io::ErrorKind::NotFound => DfsError::NoSuchFile,
        io::ErrorKind::StorageFull => DfsError::StorageFull,
        io::ErrorKind::PermissionDenied => DfsError::PermissionDenied("filesystem".into()),
        _ => DfsError::Io(err),
    }
}

fn map_lock(err: LockError) -> DfsError {
    match err {
        LockError::Conflict => DfsError::LockConflict,
        LockError::NotOwner => DfsError::NotOwner,
        LockError::EmptyRange => DfsError::BadRequest("lock length must be positive".into()),
    }
}

impl DfsService {
    pub fn new(locks: Arc<LockTable>, gate: Gate) -> Self {
        DfsService { locks, gate }
    }

    pub fn locks(&self) -> &Arc<LockTable> {
        &self.locks
    }

    /// Runs one request. `max_read` bounds the bytes returned by a read so
    /// the response fits in one frame.
    pub fn handle(&self, account: &Account, session: SessionId, req: &DfsRequest, max_read: u64) -> DfsResponse {
        match self.dispatch(account, session, req, max_read) {
            Ok(resp) => resp,
            Err(err) => {
                debug!("dfs {:?} failed: {err}", req.op);
                DfsResponse::error(req.request_id, &err)
            }
        }
    }

    fn authorize(&self, account: &Account, path: &str) -> Result<(GuardedAction, PathBuf), DfsError> {
        let action = GuardedAction::file_io(path);
        if let Decision::Deny(reason) = self.gate.check(account, &action) {
            return Err(DfsError::PermissionDenied(reason));
        }
        let resolved = account
            .resolve(path)
            .ok_or_else(|| DfsError::PermissionDenied("path outside sandbox".into()))?;
        Ok((action, resolved))
    }

    fn dispatch(&self, account: &Account, session: SessionId, req: &DfsRequest, max_read: u64) -> Result<DfsResponse, DfsError> {
        let mut resp = DfsResponse::ok(req.request_id);
        if req.op == DfsOp::Close {
            self.locks.release_session(session);
            return Ok(resp);
        }
        let (action, path) = self.authorize(account, &req.path)?;
        match req.op {
            DfsOp::Read => {
                let file = File::open(&path).map_err(map_io)?;
                let size = file.metadata()?.len();
                let want = req.length.min(size.saturating_sub(req.offset));
                if self.locks.conflicts(&path, req.offset, want, session) {
                    return Err(DfsError::LockConflict);
                }
                let n = want.min(max_read) as usize;
                let mut buf = vec![0u8; n];
                file.read_exact_at(&mut buf, req.offset).map_err(map_io)?;
                resp.length = n as u64;
                resp.data = buf;
            }
            DfsOp::Write => {
                if self.locks.conflicts(&path, req.offset, req.data.len() as u64, session) {
                    return Err(DfsError::LockConflict);
                }
                req.offset
                    .checked_add(req.data.len() as u64)
                    .ok_or_else(|| DfsError::BadRequest("write past 2^64".into()))?;
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(map_io)?;
                }
                let file = OpenOptions::new().create(true).write(true).truncate(false).open(&path).map_err(map_io)?;
                file.write_all_at(&req.data, req.offset).map_err(map_io)?;
                resp.length = req.data.len() as u64;
            }
            DfsOp::Flush => {
                let file = OpenOptions::new().write(true).open(&path).map_err(map_io)?;
                file.sync_all().map_err(map_io)?;
            }
            DfsOp::Lock => {
                resp.lock_id = Some(self.locks.lock(&path, req.offset, req.length, session).map_err(map_lock)?);
            }
            DfsOp::Unlock => {
                let id = req.lock_id.ok_or_else(|| DfsError::BadRequest("unlock needs a lock id".into()))?;
                self.locks.unlock(id, session).map_err(map_lock)?;
            }
            DfsOp::SetLength => {
                let file = OpenOptions::new().write(true).open(&path).map_err(map_io)?;
                let old = file.metadata()?.len();
                let new = req.length;
                let (lo, hi) = (old.min(new), old.max(new));
                if hi > lo && self.locks.conflicts(&path, lo, hi - lo, session) {
                    return Err(DfsError::LockConflict);
                }
                file.set_len(new).map_err(map_io)?;
            }
            DfsOp::Stat | DfsOp::Seek => {
                resp.stat = Some(match fs::metadata(&path) {
                    Ok(meta) if meta.is_file() => FileStat {
                        size: meta.len(),
                        exists: true,
                    },
                    Ok(_) => return Err(DfsError::BadRequest("not a regular file".into())),
                    Err(e) if e.kind() == io::ErrorKind::NotFound => FileStat::default(),
                    Err(e) => return Err(map_io(e)),
                });
            }
            DfsOp::Close => unreachable!(),
        }
        if req.op.is_mutation() {
            self.gate.effect(account, &action);
        }
        Ok(resp)
    }
}

/// Serves `DFS_REQ` frames until the client disconnects, then releases the
/// session's locks.
pub fn serve_session<S: Read + Write>(
    channel: &mut SecureChannel<S>,
    account: &Account,
    params: &SessionParams,
    service: &DfsService,
) -> Result<(), SecError> {
    struct Release<'a>(&'a LockTable, SessionId);
    impl Drop for Release<'_> {
        fn drop(&mut self) {
            self.0.release_session(self.1);
        }
    }
    let _release = Release(service.locks(), params.session_id);
    let max_read = u64::from(params.buffer_size);
    let mut last_id: Option<u64> = None;
    loop {
        let (frame_type, fields) = match channel.recv_fields() {
            Ok(f) => f,
            Err(SecError::Wire(WireError::Closed)) => return Ok(()),
            Err(e) => return Err(e),
        };
        if frame_type != FrameType::DFS_REQ {
            channel.send_error(Status::BadRequest, "expected DFS_REQ")?;
            return Err(SecError::Protocol(format!("unexpected {frame_type} in file-system session")));
        }
        let resp = match DfsRequest::from_fields(&fields) {
            Ok(req) if last_id.is_some_and(|last| req.request_id <= last) => DfsResponse::error(
                req.request_id,
                &DfsError::BadRequest("request ids must increase".into()),
            ),
            Ok(req) => {
                last_id = Some(req.request_id);
                service.handle(account, params.session_id, &req, max_read)
            }
            Err(e) => DfsResponse::error(0, &DfsError::BadRequest(e.to_string())),
        };
        channel.send_fields(FrameType::DFS_RESP, &resp.to_fields())?;
    }
}
