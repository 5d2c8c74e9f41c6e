use std::fmt;
use std::io::{self, Read, Write};

use super::WireError;

pub const MAGIC: [u8; 4] = *b"DG01";
pub const HEADER_LEN: usize = 10;

/// Default upper bound on a frame payload (256 KiB).
pub const DEFAULT_MAX_PAYLOAD: u32 = 262_144;

/// Payload is one AEAD-sealed blob.
pub const FLAG_SEALED: u8 = 0x01;
/// Payload is a field map whose sensitive fields travel in one sealed field.
pub const FLAG_FIELDS_SEALED: u8 = 0x02;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameType(pub u8);

impl FrameType {
    pub const HELLO: FrameType = FrameType(0x01);
    pub const WELCOME: FrameType = FrameType(0x02);
    pub const AUTH: FrameType = FrameType(0x03);
    pub const AUTH_OK: FrameType = FrameType(0x04);
    pub const AUTH_FAIL: FrameType = FrameType(0x05);
    pub const DFS_REQ: FrameType = FrameType(0x10);
    pub const DFS_RESP: FrameType = FrameType(0x11);
    pub const XFER_OFFER: FrameType = FrameType(0x20);
    pub const XFER_ACCEPT: FrameType = FrameType(0x21);
    pub const CHUNK: FrameType = FrameType(0x22);
    pub const XFER_DONE: FrameType = FrameType(0x23);
    pub const XFER_RESUME: FrameType = FrameType(0x24);
    pub const TASK_SUBMIT: FrameType = FrameType(0x30);
    pub const TASK_STATUS: FrameType = FrameType(0x31);
    pub const TASK_RESULT: FrameType = FrameType(0x32);
    pub const CRYPT_TASK: FrameType = FrameType(0x40);
    pub const ERROR: FrameType = FrameType(0x7F);

    pub fn name(self) -> Option<&'static str> {
        Some(match self {
            Self::HELLO => "HELLO",
            Self::WELCOME => "WELCOME",
            Self::AUTH => "AUTH",
            Self::AUTH_OK => "AUTH_OK",
            Self::AUTH_FAIL => "AUTH_FAIL",
            Self::DFS_REQ => "DFS_REQ",
            Self::DFS_RESP => "DFS_RESP",
            Self::XFER_OFFER => "XFER_OFFER",
            Self::XFER_ACCEPT => "XFER_ACCEPT",
            Self::CHUNK => "CHUNK",
            Self::XFER_DONE => "XFER_DONE",
            Self::XFER_RESUME => "XFER_RESUME",
            Self::TASK_SUBMIT => "TASK_SUBMIT",
            Self::TASK_STATUS => "TASK_STATUS",
            Self::TASK_RESULT => "TASK_RESULT",
            Self::CRYPT_TASK => "CRYPT_TASK",
            Self::ERROR => "ERROR",
            _ => return None,
        })
    }
}

impl fmt::Debug for FrameType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(name) => f.write_str(name),
            None => write!(f, "FrameType({:#04x})", self.0),
        }
    }
}

impl fmt::Display for FrameType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub flags: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, payload: Vec<u8>) -> Self {
        Frame {
            frame_type,
            flags: 0,
            payload,
        }
    }

    pub fn empty(frame_type: FrameType) -> Self {
        Frame::new(frame_type, Vec::new())
    }

    pub fn is_sealed(&self) -> bool {
        self.flags & FLAG_SEALED != 0
    }
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Frame")
            .field("frame_type", &self.frame_type)
            .field("flags", &format_args!("{:#04x}", self.flags))
            .field("payload_len", &self.payload.len())
            .finish()
    }
}

/// Builds the fixed 10-byte header for a payload of `payload_len` bytes.
pub fn encode_header(
    frame_type: FrameType,
    flags: u8,
    payload_len: usize,
    max_payload: u32,
) -> Result<[u8; HEADER_LEN], WireError> {
    let len = payload_len as u64;
    if len > u64::from(max_payload) || len > u64::from(u32::MAX) {
        return Err(WireError::OversizedPayload {
            len,
            max: max_payload,
        });
    }
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(&MAGIC);
    header[4] = frame_type.0;
    header[5] = flags;
    header[6..].copy_from_slice(&(len as u32).to_be_bytes());
    Ok(header)
}

pub fn encode_frame(frame: &Frame, max_payload: u32) -> Result<Vec<u8>, WireError> {
    let header = encode_header(frame.frame_type, frame.flags, frame.payload.len(), max_payload)?;
    let mut out = Vec::with_capacity(HEADER_LEN + frame.payload.len());
    out.extend_from_slice(&header);
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

/// Parses a header, returning `(type, flags, payload_len)`.
fn parse_header(header: &[u8; HEADER_LEN], max_payload: u32) -> Result<(FrameType, u8, u32), WireError> {
    if header[..4] != MAGIC {
        let mut got = [0u8; 4];
        got.copy_from_slice(&header[..4]);
        return Err(WireError::BadMagic(got));
    }
    let len = u32::from_be_bytes([header[6], header[7], header[8], header[9]]);
    if len > max_payload {
        return Err(WireError::OversizedPayload {
            len: u64::from(len),
            max: max_payload,
        });
    }
    Ok((FrameType(header[4]), header[5], len))
}

/// Decodes one frame from the front of `bytes` and returns it with the
/// unconsumed suffix. Total over arbitrary input.
pub fn decode_frame(bytes: &[u8], max_payload: u32) -> Result<(Frame, &[u8]), WireError> {
    let seen = bytes.len().min(MAGIC.len());
    if bytes[..seen] != MAGIC[..seen] {
        let mut got = [0u8; 4];
        got[..seen].copy_from_slice(&bytes[..seen]);
        return Err(WireError::BadMagic(got));
    }
    if bytes.len() < HEADER_LEN {
        return Err(WireError::TruncatedFrame {
            needed: HEADER_LEN - bytes.len(),
        });
    }
    let mut header = [0u8; HEADER_LEN];
    header.copy_from_slice(&bytes[..HEADER_LEN]);
    let (frame_type, flags, len) = parse_header(&header, max_payload)?;
    let body = &bytes[HEADER_LEN..];
    let len = len as usize;
    if body.len() < len {
        return Err(WireError::TruncatedFrame {
            needed: len - body.len(),
        });
    }
    let frame = Frame {
        frame_type,
        flags,
        payload: body[..len].to_vec(),
    };
    Ok((frame, &body[len..]))
}

/// Reads exactly one frame. A clean end of stream before any header byte is
/// reported as [`WireError::Closed`].
pub fn read_frame<R: Read + ?Sized>(reader: &mut R, max_payload: u32) -> Result<Frame, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Err(WireError::Closed),
            Ok(0) => {
                return Err(WireError::Io(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "stream ended inside a frame header",
                )))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(WireError::Io(e)),
        }
    }
    let (frame_type, flags, len) = parse_header(&header, max_payload)?;
    let mut payload = vec![0u8; len as usize];
    reader.read_exact(&mut payload)?;
    Ok(Frame {
        frame_type,
        flags,
        payload,
    })
}

pub fn write_frame<W: Write + ?Sized>(writer: &mut W, frame: &Frame, max_payload: u32) -> Result<(), WireError> {
    let bytes = encode_frame(frame, max_payload)?;
    writer.write_all(&bytes)?;
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hello_with_empty_payload() {
        let bytes = encode_frame(&Frame::empty(FrameType::HELLO), DEFAULT_MAX_PAYLOAD).unwrap();
        assert_eq!(bytes, [0x44, 0x47, 0x30, 0x31, 0x01, 0x00, 0x00, 0x00, 0x00, 0x00]);
    }

    #[test]
    fn chunk_with_three_bytes() {
        let frame = Frame::new(FrameType::CHUNK, vec![0xAA, 0xBB, 0xCC]);
        let bytes = encode_frame(&frame, DEFAULT_MAX_PAYLOAD).unwrap();
        assert_eq!(
            bytes,
            [0x44, 0x47, 0x30, 0x31, 0x22, 0x00, 0x00, 0x00, 0x00, 0x03, 0xAA, 0xBB, 0xCC]
        );
    }

    #[test]
    fn four_gib_payload_is_oversized() {
        let err = encode_header(FrameType::CHUNK, 0, 1usize << 32, u32::MAX).unwrap_err();
        assert!(matches!(err, WireError::OversizedPayload { len, .. } if len == 1 << 32));
        let err = encode_header(FrameType::CHUNK, 0, 300_000, DEFAULT_MAX_PAYLOAD).unwrap_err();
        assert!(matches!(err, WireError::OversizedPayload { .. }));
    }

    #[test]
    fn decode_round_trip_leaves_suffix() {
        let frame = Frame {
            frame_type: FrameType::DFS_REQ,
            flags: FLAG_SEALED,
            payload: b"payload".to_vec(),
        };
        let mut bytes = encode_frame(&frame, DEFAULT_MAX_PAYLOAD).unwrap();
        let (decoded, rest) = decode_frame(&bytes, DEFAULT_MAX_PAYLOAD).unwrap();
        assert_eq!(decoded, frame);
        assert!(rest.is_empty());
        bytes.extend_from_slice(b"next");
        let (_, rest) = decode_frame(&bytes, DEFAULT_MAX_PAYLOAD).unwrap();
        assert_eq!(rest, b"next");
    }

    #[test]
    fn zero_bytes_are_bad_magic() {
        let err = decode_frame(&[0u8; 16], DEFAULT_MAX_PAYLOAD).unwrap_err();
        assert!(matches!(err, WireError::BadMagic([0, 0, 0, 0])));
    }

    #[test]
    fn short_payload_is_truncated() {
        let mut bytes = encode_header(FrameType::CHUNK, 0, 5, DEFAULT_MAX_PAYLOAD)
            .unwrap()
            .to_vec();
        bytes.extend_from_slice(&[1, 2]);
        let err = decode_frame(&bytes, DEFAULT_MAX_PAYLOAD).unwrap_err();
        assert!(matches!(err, WireError::TruncatedFrame { needed: 3 }));
        let err = decode_frame(b"DG0", DEFAULT_MAX_PAYLOAD).unwrap_err();
        assert!(matches!(err, WireError::TruncatedFrame { needed: 7 }));
    }

    #[test]
    fn oversized_declared_length_rejected_before_allocation() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&[0x22, 0, 0xFF, 0xFF, 0xFF, 0xFF]);
        assert!(matches!(
            decode_frame(&bytes, DEFAULT_MAX_PAYLOAD),
            Err(WireError::OversizedPayload { .. })
        ));
        let mut cursor = io::Cursor::new(bytes);
        assert!(matches!(
            read_frame(&mut cursor, DEFAULT_MAX_PAYLOAD),
            Err(WireError::OversizedPayload { .. })
        ));
    }

    #[test]
    fn read_frame_reports_clean_close() {
        let mut empty = io::Cursor::new(Vec::<u8>::new());
        assert!(matches!(read_frame(&mut empty, DEFAULT_MAX_PAYLOAD), Err(WireError::Closed)));
    }
}
