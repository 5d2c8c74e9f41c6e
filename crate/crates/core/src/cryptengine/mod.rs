//! Distributed block cryptography.
//!
//! A file shared by the distributor's file-system service is sliced into
//! fixed-size blocks. Each block becomes one [`CryptTask`] sent round-robin
//! to worker nodes; a worker reads its range through the distributor's
//! file-system service, encrypts it, and writes a block file
//! (`<name>.blk<part>`: 32-byte [`BlockHeader`] then ciphertext) to its own
//! store or to a collector. The [`PlacementMap`] manifest records where
//! every block went. [`reassemble`] fetches the blocks back, verifies each
//! one, and rebuilds the file atomically.
//!
//! Every block of a file uses the same key and IV. That keeps a distributed
//! run byte-identical to a sequential one, at the cost of the usual CBC
//! IV-reuse leak: blocks that start with the same plaintext start with the
//! same ciphertext.

mod block;
mod cipher;
mod distribute;
mod task;
mod worker;

use crate::dfsm::DfsError;
use crate::ftsm::FtsmError;
use crate::secchan::SecError;
use crate::wire::{Status, WireError};

pub use block::{
    decode_block_header, decrypt_block, encode_block_header, encrypt_block, plan_blocks, BlockDecryptor, BlockDesc,
    BlockEncryptor, BlockHeader, BlockPlan, DEFAULT_BLOCK_SIZE, HEADER_LEN,
};
pub use cipher::{suite_by_id, suite_by_name, suites, BlockStream, CipherParams, CipherSuite};
pub use distribute::{distribute, encrypt_sequential, load_manifest, reassemble, CryptJob, Placement, PlacementMap, WorkerLink};
pub use task::{CryptDirection, CryptTask, Location};
pub use worker::{BufferMeter, Completion, CryptService};

#[derive(Debug, thiserror::Error)]
pub enum CryptError {
    #[error("block header shorter than 32 bytes")]
    TruncatedHeader,
    #[error("bad padding{}", part_suffix(.0))]
    BadPadding(Option<u64>),
    #[error("integrity mismatch{}", part_suffix(.0))]
    IntegrityMismatch(Option<u64>),
    #[error("block {0} is missing")]
    MissingBlock(u64),
    #[error("source ended inside block {0}")]
    SourceTruncated(u64),
    #[error("bad cipher parameters: {0}")]
    BadParams(String),
    #[error("no workers given")]
    NoWorkers,
    #[error("workers failed: {0}")]
    WorkerFailed(String),
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("manifest corrupt: {0}")]
    ManifestCorrupt(String),
    #[error("remote error {status}: {message}")]
    Remote { status: Status, message: String },
    #[error(transparent)]
    Dfs(DfsError),
    #[error(transparent)]
    Ftsm(FtsmError),
    #[error(transparent)]
    Channel(SecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn part_suffix(part: &Option<u64>) -> String {
    part.map(|p| format!(" in block {p}")).unwrap_or_default()
}

impl CryptError {
    /// The message the peer sees; it rebuilds the variant from the status.
    pub fn detail(&self) -> String {
        match self {
            CryptError::PermissionDenied(m) => m.clone(),
            CryptError::Remote { message, .. } => message.clone(),
            e => e.to_string(),
        }
    }

    pub fn status(&self) -> Status {
        match self {
            CryptError::BadPadding(_) | CryptError::IntegrityMismatch(_) => Status::IntegrityMismatch,
            CryptError::MissingBlock(_) => Status::NoSuchFile,
            CryptError::PermissionDenied(_) => Status::PermissionDenied,
            CryptError::Remote { status, .. } => *status,
            CryptError::Dfs(e) => e.status(),
            CryptError::Ftsm(e) => e.status(),
            CryptError::Channel(e) => e.remote_status().unwrap_or_else(|| e.status()),
            CryptError::Io(_) | CryptError::WorkerFailed(_) => Status::Internal,
            _ => Status::BadRequest,
        }
    }
}

impl From<SecError> for CryptError {
    fn from(e: SecError) -> Self {
        match e {
            SecError::Wire(WireError::Remote { code: Status::PermissionDenied, message }) => CryptError::PermissionDenied(message),
            SecError::Wire(WireError::Remote { code, message }) => CryptError::Remote { status: code, message },
            e => CryptError::Channel(e),
        }
    }
}

impl From<WireError> for CryptError {
    fn from(e: WireError) -> Self {
        SecError::Wire(e).into()
    }
}

impl From<DfsError> for CryptError {
    fn from(e: DfsError) -> Self {
        match e {
            DfsError::PermissionDenied(m) => CryptError::PermissionDenied(m),
            e => CryptError::Dfs(e),
        }
    }
}

impl From<FtsmError> for CryptError {
    fn from(e: FtsmError) -> Self {
        CryptError::Ftsm(e)
    }
}
