//! Binary framing, field maps, and the session handshake.
//!
//! Every message on every connection is a [`Frame`]:
//!
//! ```text
//! magic "DG01" (4) | frame_type (1) | flags (1) | payload_len (4, BE) | payload
//! ```
//!
//! Control payloads are [`FieldMap`]s. All integers are big-endian.

mod fields;
mod frame;
mod session;
pub mod tags;

use std::fmt;
use std::io;

pub use fields::{decode_list, encode_list, FieldMap};
pub use frame::{
    decode_frame, encode_frame, encode_header, read_frame, write_frame, Frame, FrameType,
    DEFAULT_MAX_PAYLOAD, FLAG_FIELDS_SEALED, FLAG_SEALED, HEADER_LEN, MAGIC,
};
pub use session::{
    client_handshake, negotiate, server_handshake, Hello, Mode, ModeSet, SecurityMode, ServerPolicy, SessionParams, Welcome,
    MIN_BUFFER_SIZE, PROTOCOL_VERSION,
};

/// Slack allowed above the negotiated buffer size for a frame payload: room
/// for the chunk record header and an AEAD tag.
pub const FRAME_SLACK: u32 = 1024;

/// Largest frame payload accepted on a session with the given buffer size.
pub fn max_payload_for(buffer_size: u32) -> u32 {
    buffer_size.saturating_add(FRAME_SLACK)
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("truncated frame: {needed} more bytes needed")]
    TruncatedFrame { needed: usize },
    #[error("payload of {len} bytes exceeds the {max}-byte maximum")]
    OversizedPayload { len: u64, max: u32 },
    #[error("malformed field map: {0}")]
    MalformedFields(&'static str),
    #[error("duplicate field tag {0}")]
    DuplicateTag(u8),
    #[error("missing field tag {0}")]
    MissingField(u8),
    #[error("bad value for field tag {tag}: {reason}")]
    BadField { tag: u8, reason: &'static str },
    #[error("protocol version mismatch: client {client}, server {server}")]
    VersionMismatch { client: u16, server: u16 },
    #[error("mode {0:?} is disabled on this node")]
    ModeRejected(Mode),
    #[error("requested buffer size {0} is below the {MIN_BUFFER_SIZE}-byte minimum")]
    BufferTooSmall(u32),
    #[error("expected {expected} frame, got {got}")]
    UnexpectedFrame { expected: FrameType, got: FrameType },
    #[error("peer closed the connection")]
    Closed,
    #[error("remote error {code:?}: {message}")]
    Remote { code: Status, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WireError {
    /// The status code this error is reported with when sent to a peer.
    pub fn status(&self) -> Status {
        match self {
            WireError::VersionMismatch { .. } => Status::VersionMismatch,
            WireError::ModeRejected(_) => Status::ModeRejected,
            WireError::Remote { code, .. } => *code,
            WireError::Io(_) | WireError::Closed => Status::Internal,
            _ => Status::BadRequest,
        }
    }
}

/// Status codes carried in `ERROR` frames and response status fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum Status {
    Ok = 0,
    NoSuchFile = 1,
    PermissionDenied = 2,
    LockConflict = 3,
    StorageFull = 4,
    NotOwner = 5,
    BadRequest = 6,
    VersionMismatch = 7,
    ModeRejected = 8,
    AuthFailed = 9,
    IntegrityMismatch = 10,
    StateCorrupt = 11,
    SetExpired = 12,
    StagingFailed = 13,
    Busy = 14,
    NoSuchTransfer = 15,
    Internal = 16,
}

impl Status {
    pub fn from_u16(code: u16) -> Status {
        use Status::*;
        match code {
            0 => Ok,
            1 => NoSuchFile,
            2 => PermissionDenied,
            3 => LockConflict,
            4 => StorageFull,
            5 => NotOwner,
            6 => BadRequest,
            7 => VersionMismatch,
            8 => ModeRejected,
            9 => AuthFailed,
            10 => IntegrityMismatch,
            11 => StateCorrupt,
            12 => SetExpired,
            13 => StagingFailed,
            14 => Busy,
            15 => NoSuchTransfer,
            _ => Internal,
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Builds the field map of an `ERROR` frame.
pub fn error_fields(code: Status, message: &str) -> FieldMap {
    FieldMap::new()
        .with_u16(tags::error::CODE, code as u16)
        .with_str(tags::error::MESSAGE, message)
}

/// Converts a decoded `ERROR` field map into a [`WireError::Remote`].
pub fn remote_error(fields: &FieldMap) -> WireError {
    let code = fields
        .get_u16(tags::error::CODE)
        .ok()
        .flatten()
        .map(Status::from_u16)
        .unwrap_or(Status::Internal);
    let message = fields
        .get_str(tags::error::MESSAGE)
        .ok()
        .flatten()
        .unwrap_or("")
        .to_string();
    WireError::Remote { code, message }
}
