//! Stateless remote file operations with advisory byte-range locks.
//!
//! Every request names its file and absolute offset; the server keeps no
//! cursor or open handle between requests. The only per-session server state
//! is the set of range locks, which disappears when the session ends. Seek is
//! client-side arithmetic over a fresh [`FileStat`].

mod client;
mod locks;
mod service;

use std::io;

use crate::secchan::SecError;
use crate::wire::{tags, FieldMap, Status, WireError};

pub use client::DfsClient;
pub use locks::{range_end, LockError, LockTable, RangeLock, SessionId, WHOLE_FILE};
pub use service::{serve_session, DfsService};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DfsOp {
    Read = 1,
    Write = 2,
    Flush = 3,
    Lock = 4,
    Unlock = 5,
    Seek = 6,
    Close = 7,
    SetLength = 8,
    Stat = 9,
}

impl DfsOp {
    pub fn from_u8(v: u8) -> Option<DfsOp> {
        use DfsOp::*;
        [Read, Write, Flush, Lock, Unlock, Seek, Close, SetLength, Stat]
            .into_iter()
            .find(|op| *op as u8 == v)
    }

    /// Operations that change file contents or lock state.
    pub fn is_mutation(self) -> bool {
        matches!(self, DfsOp::Write | DfsOp::SetLength | DfsOp::Flush | DfsOp::Lock | DfsOp::Unlock)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum SeekOrigin {
    Begin = 0,
    CurrentHint = 1,
    End = 2,
}

impl SeekOrigin {
    pub fn from_u8(v: u8) -> Option<SeekOrigin> {
        match v {
            0 => Some(SeekOrigin::Begin),
            1 => Some(SeekOrigin::CurrentHint),
            2 => Some(SeekOrigin::End),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DfsRequest {
    pub request_id: u64,
    pub op: DfsOp,
    pub path: String,
    pub offset: u64,
    pub length: u64,
    pub data: Vec<u8>,
    pub seek_origin: Option<SeekOrigin>,
    pub lock_id: Option<u64>,
}

impl DfsRequest {
    pub fn new(op: DfsOp, path: &str) -> Self {
        DfsRequest {
            request_id: 0,
            op,
            path: path.to_string(),
            offset: 0,
            length: 0,
            data: Vec::new(),
            seek_origin: None,
            lock_id: None,
        }
    }

    pub fn to_fields(&self) -> FieldMap {
        let mut map = FieldMap::new()
            .with_u8(tags::dfs::OP, self.op as u8)
            .with_u64(tags::dfs::REQUEST_ID, self.request_id)
            .with_str(tags::dfs::PATH, &self.path)
            .with_u64(tags::dfs::OFFSET, self.offset)
            .with_u64(tags::dfs::LENGTH, self.length);
        if self.op == DfsOp::Write {
            map.insert(tags::dfs::DATA, self.data.clone());
        }
        if let Some(origin) = self.seek_origin {
            map.insert(tags::dfs::SEEK_ORIGIN, [origin as u8]);
        }
        if let Some(id) = self.lock_id {
            map.insert(tags::dfs::LOCK_ID, id.to_be_bytes());
        }
        map
    }

    pub fn from_fields(map: &FieldMap) -> Result<Self, WireError> {
        let op = map.require_u8(tags::dfs::OP)?;
        let op = DfsOp::from_u8(op).ok_or(WireError::BadField {
            tag: tags::dfs::OP,
            reason: "unknown operation",
        })?;
        let seek_origin = match map.get_u8(tags::dfs::SEEK_ORIGIN)? {
            Some(v) => Some(SeekOrigin::from_u8(v).ok_or(WireError::BadField {
                tag: tags::dfs::SEEK_ORIGIN,
                reason: "unknown seek origin",
            })?),
            None => None,
        };
        Ok(DfsRequest {
            request_id: map.require_u64(tags::dfs::REQUEST_ID)?,
            op,
            path: map.get_str(tags::dfs::PATH)?.unwrap_or("").to_string(),
            offset: map.get_u64(tags::dfs::OFFSET)?.unwrap_or(0),
            length: map.get_u64(tags::dfs::LENGTH)?.unwrap_or(0),
            data: map.get(tags::dfs::DATA).map(<[u8]>::to_vec).unwrap_or_default(),
            seek_origin,
            lock_id: map.get_u64(tags::dfs::LOCK_ID)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DfsResponse {
    pub request_id: u64,
    pub status: Status,
    pub data: Vec<u8>,
    pub length: u64,
    pub lock_id: Option<u64>,
    pub stat: Option<FileStat>,
    pub message: String,
}

impl DfsResponse {
    pub fn ok(request_id: u64) -> Self {
        DfsResponse {
            request_id,
            status: Status::Ok,
            data: Vec::new(),
            length: 0,
            lock_id: None,
            stat: None,
            message: String::new(),
        }
    }

    pub fn error(request_id: u64, err: &DfsError) -> Self {
        DfsResponse {
            status: err.status(),
            message: err.to_string(),
            ..DfsResponse::ok(request_id)
        }
    }

    pub fn to_fields(&self) -> FieldMap {
        let mut map = FieldMap::new()
            .with_u64(tags::dfs::REQUEST_ID, self.request_id)
            .with_u16(tags::dfs::STATUS, self.status as u16)
            .with_u64(tags::dfs::LENGTH, self.length);
        if !self.data.is_empty() {
            map.insert(tags::dfs::DATA, self.data.clone());
        }
        if let Some(id) = self.lock_id {
            map.insert(tags::dfs::LOCK_ID, id.to_be_bytes());
        }
        if let Some(stat) = self.stat {
            map.insert(tags::dfs::SIZE, stat.size.to_be_bytes());
            map.insert(tags::dfs::EXISTS, [stat.exists as u8]);
        }
        if !self.message.is_empty() {
            map.insert(tags::dfs::MESSAGE, self.message.as_bytes());
        }
        map
    }

    pub fn from_fields(map: &FieldMap) -> Result<Self, WireError> {
        let stat = match map.get_u64(tags::dfs::SIZE)? {
            Some(size) => Some(FileStat {
                size,
                exists: map.get_u8(tags::dfs::EXISTS)?.unwrap_or(1) != 0,
            }),
            None => None,
        };
        Ok(DfsResponse {
            request_id: map.require_u64(tags::dfs::REQUEST_ID)?,
            status: Status::from_u16(map.require_u16(tags::dfs::STATUS)?),
            data: map.get(tags::dfs::DATA).map(<[u8]>::to_vec).unwrap_or_default(),
            length: map.get_u64(tags::dfs::LENGTH)?.unwrap_or(0),
            lock_id: map.get_u64(tags::dfs::LOCK_ID)?,
            stat,
            message: map.get_str(tags::dfs::MESSAGE)?.unwrap_or("").to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FileStat {
    pub size: u64,
    pub exists: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum DfsError {
    #[error("no such file")]
    NoSuchFile,
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("range is locked by another session")]
    LockConflict,
    #[error("storage full")]
    StorageFull,
    #[error("lock is owned by another session")]
    NotOwner,
    #[error("seek resolves to a negative offset")]
    NegativeOffset,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("connection lost while holding locks")]
    ConnectionLost,
    #[error("remote error {status}: {message}")]
    Remote { status: Status, message: String },
    #[error(transparent)]
    Channel(#[from] SecError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DfsError {
    pub fn status(&self) -> Status {
        match self {
            DfsError::NoSuchFile => Status::NoSuchFile,
            DfsError::PermissionDenied(_) => Status::PermissionDenied,
            DfsError::LockConflict => Status::LockConflict,
            DfsError::StorageFull => Status::StorageFull,
            DfsError::NotOwner => Status::NotOwner,
            DfsError::NegativeOffset | DfsError::BadRequest(_) => Status::BadRequest,
            DfsError::Remote { status, .. } => *status,
            DfsError::Channel(e) => e.remote_status().unwrap_or_else(|| e.status()),
            DfsError::ConnectionLost | DfsError::Io(_) => Status::Internal,
        }
    }

    fn from_response(resp: &DfsResponse) -> DfsError {
        match resp.status {
            Status::NoSuchFile => DfsError::NoSuchFile,
            Status::PermissionDenied => DfsError::PermissionDenied(resp.message.clone()),
            Status::LockConflict => DfsError::LockConflict,
            Status::StorageFull => DfsError::StorageFull,
            Status::NotOwner => DfsError::NotOwner,
            status => DfsError::Remote {
                status,
                message: resp.message.clone(),
            },
        }
    }
}

impl From<WireError> for DfsError {
    fn from(e: WireError) -> Self {
        DfsError::Channel(SecError::Wire(e))
    }
}

/// Turns a seek into the absolute offset for the next request.
///
/// `current` is the client-tracked position used by `CurrentHint`; `stat`
/// must be fresh for `End`.
pub fn resolve_seek(origin: SeekOrigin, delta: i64, current: u64, stat: &FileStat) -> Result<u64, DfsError> {
    let base = match origin {
        SeekOrigin::Begin => 0i128,
        SeekOrigin::CurrentHint => i128::from(current),
        SeekOrigin::End => i128::from(stat.size),
    };
    let target = base + i128::from(delta);
    if target < 0 {
        return Err(DfsError::NegativeOffset);
    }
    u64::try_from(target).map_err(|_| DfsError::BadRequest("seek beyond 2^64".into()))
}
