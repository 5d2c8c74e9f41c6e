use crate::wire::{tags, FrameType, SecurityMode};

/// How a frame's payload crosses the transport.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sealing {
    Clear,
    Sealed,
    /// Payload is a field map; the fields listed by [`sensitive_tags`] travel
    /// inside one sealed sub-field, the rest in clear.
    SensitiveFields,
}

/// The per-mode sealing table.
///
/// * SECURE: every post-handshake frame is sealed.
/// * SEMISECURE: control frames sealed, `CHUNK` data in clear.
/// * NONSECURE: `AUTH` sealed; paths, credentials and free-text fields
///   sealed inside otherwise clear frames.
pub fn classify_frame(frame_type: FrameType, mode: SecurityMode) -> Sealing {
    match frame_type {
        FrameType::HELLO | FrameType::WELCOME | FrameType::AUTH_FAIL => Sealing::Clear,
        FrameType::AUTH | FrameType::AUTH_OK => Sealing::Sealed,
        FrameType::CHUNK => match mode {
            SecurityMode::Secure => Sealing::Sealed,
            SecurityMode::SemiSecure | SecurityMode::NonSecure => Sealing::Clear,
        },
        other => match mode {
            SecurityMode::Secure | SecurityMode::SemiSecure => Sealing::Sealed,
            SecurityMode::NonSecure if sensitive_tags(other).is_empty() => Sealing::Clear,
            SecurityMode::NonSecure => Sealing::SensitiveFields,
        },
    }
}

/// Field tags that never travel in clear.
pub fn sensitive_tags(frame_type: FrameType) -> &'static [u8] {
    match frame_type {
        FrameType::DFS_REQ => &[tags::dfs::PATH],
        FrameType::DFS_RESP => &[tags::dfs::MESSAGE],
        FrameType::XFER_OFFER | FrameType::XFER_RESUME => &[tags::xfer::PATH, tags::xfer::MESSAGE],
        FrameType::XFER_ACCEPT | FrameType::XFER_DONE => &[tags::xfer::MESSAGE],
        FrameType::TASK_SUBMIT => &[tags::task::TASKS, tags::task::DEPENDENCIES, tags::task::MESSAGE],
        FrameType::TASK_STATUS | FrameType::TASK_RESULT => &[
            tags::task::RESULTS,
            tags::task::MESSAGE,
            tags::task::OUTPUTS,
            tags::task::DEPENDENCIES,
            tags::task::DIGESTS,
            tags::crypt::BLOCK_FILE,
            tags::crypt::MESSAGE,
            tags::crypt::HOLDER,
        ],
        FrameType::CRYPT_TASK => &[tags::crypt::TASK, tags::crypt::BLOCK_FILE, tags::crypt::MESSAGE],
        FrameType::ERROR => &[tags::error::MESSAGE],
        _ => &[],
    }
}
