//! Bulk file transfer over parallel streams.
//!
//! A transfer moves a region of one file between a client and a node. The
//! region is cut into one contiguous span per stream, and every span is sent
//! as a sequence of chunks over its own TCP connection. The receiver records
//! each chunk it has written in a bitmap persisted next to the destination
//! (`<dst>.xferstate`), so an interrupted transfer resumes by resending only
//! the missing chunks. Completion is confirmed by an MD5 over the region.
//!
//! Push and pull share one engine: [`engine::send_chunks`] on the sending
//! side, [`engine::Receiver`] on the receiving side. A push runs the receiver
//! on the node; a pull runs it on the client.

mod chunk;
mod client;
pub mod engine;
mod plan;
mod server;
mod state;

use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use md5::{Digest, Md5};

use crate::secchan::SecError;
use crate::wire::{Status, WireError};

pub use chunk::{decode_chunk, encode_chunk_header, ChunkHeader, CHUNK_HEADER_LEN};
pub use client::{bench_memory, pull, pull_inline, push, push_inline, TransferOptions, TransferOutcome};
pub use plan::{mbps, plan_spans, plan_transfer, throughput_report, ChunkRef, Span, ThroughputReport, TransferPlan};
pub use server::{serve_inline_pull, serve_inline_push, FtsmService, Offer};
pub use state::{resume, state_path, TransferState};

pub type TransferId = [u8; 16];

/// MD5 of the empty input.
pub const EMPTY_MD5: [u8; 16] = [
    0xd4, 0x1d, 0x8c, 0xd9, 0x8f, 0x00, 0xb2, 0x04, 0xe9, 0x80, 0x09, 0x98, 0xec, 0xf8, 0x42, 0x7e,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Direction {
    Push = 1,
    Pull = 2,
}

impl Direction {
    pub fn from_u8(v: u8) -> Option<Direction> {
        match v {
            1 => Some(Direction::Push),
            2 => Some(Direction::Pull),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FtsmError {
    #[error("empty region")]
    EmptyRegion,
    #[error("region [{offset}, +{length}) lies outside a {file_size}-byte file")]
    RegionOutOfBounds { offset: u64, length: u64, file_size: u64 },
    #[error("transfer state corrupt: {0}")]
    StateCorrupt(String),
    #[error("region MD5 mismatch")]
    IntegrityMismatch,
    #[error("stream lost: {0}")]
    StreamLost(String),
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("no such file")]
    NoSuchFile,
    #[error("bad chunk: {0}")]
    BadChunk(String),
    #[error("transfer aborted by request")]
    Aborted,
    #[error("remote error {status}: {message}")]
    Remote { status: Status, message: String },
    #[error(transparent)]
    Channel(#[from] SecError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FtsmError {
    pub fn status(&self) -> Status {
        match self {
            FtsmError::EmptyRegion | FtsmError::RegionOutOfBounds { .. } | FtsmError::BadChunk(_) => Status::BadRequest,
            FtsmError::StateCorrupt(_) => Status::StateCorrupt,
            FtsmError::IntegrityMismatch => Status::IntegrityMismatch,
            FtsmError::PermissionDenied(_) => Status::PermissionDenied,
            FtsmError::NoSuchFile => Status::NoSuchFile,
            FtsmError::Remote { status, .. } => *status,
            FtsmError::Channel(e) => e.remote_status().unwrap_or_else(|| e.status()),
            FtsmError::Io(e) if e.kind() == io::ErrorKind::StorageFull => Status::StorageFull,
            FtsmError::Io(e) if e.kind() == io::ErrorKind::NotFound => Status::NoSuchFile,
            FtsmError::StreamLost(_) | FtsmError::Aborted | FtsmError::Io(_) => Status::Internal,
        }
    }

    /// Rebuilds a typed error from a status the peer reported.
    pub fn from_status(status: Status, message: String) -> FtsmError {
        match status {
            Status::IntegrityMismatch => FtsmError::IntegrityMismatch,
            Status::PermissionDenied => FtsmError::PermissionDenied(message),
            Status::NoSuchFile => FtsmError::NoSuchFile,
            Status::StateCorrupt => FtsmError::StateCorrupt(message),
            status => FtsmError::Remote { status, message },
        }
    }

    fn from_channel(err: SecError) -> FtsmError {
        match err {
            SecError::Wire(WireError::Remote { code, message }) => FtsmError::from_status(code, message),
            other => FtsmError::Channel(other),
        }
    }

    /// True when retrying with resume can make progress.
    pub fn is_resumable(&self) -> bool {
        match self {
            FtsmError::StreamLost(_) => true,
            FtsmError::Channel(e) => e.is_disconnect(),
            _ => false,
        }
    }
}

impl From<WireError> for FtsmError {
    fn from(e: WireError) -> Self {
        FtsmError::from_channel(SecError::Wire(e))
    }
}

/// MD5 of `length` bytes of `file` starting at `offset`, read in 1 MiB pieces.
pub fn md5_region(file: &File, offset: u64, length: u64) -> io::Result<[u8; 16]> {
    use std::os::unix::fs::FileExt;
    let mut hasher = Md5::new();
    let mut buf = vec![0u8; (1 << 20).min(length.max(1) as usize)];
    let mut done = 0u64;
    while done < length {
        let n = buf.len().min((length - done) as usize);
        file.read_exact_at(&mut buf[..n], offset + done)?;
        hasher.update(&buf[..n]);
        done += n as u64;
    }
    Ok(hasher.finalize().into())
}

pub fn md5_file(path: &Path) -> io::Result<[u8; 16]> {
    let mut file = File::open(path)?;
    let mut hasher = Md5::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().into())
}

pub fn new_transfer_id() -> TransferId {
    rand::random()
}
