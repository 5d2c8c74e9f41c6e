use std::io::{Read, Write};

use rand::RngCore;

use super::frame::{read_frame, write_frame, Frame, FrameType, DEFAULT_MAX_PAYLOAD};
use super::{error_fields, remote_error, tags, FieldMap, WireError};

pub const PROTOCOL_VERSION: u16 = 1;
pub const MIN_BUFFER_SIZE: u32 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Mode {
    FtsmPush = 1,
    FtsmPull = 2,
    Dfsm = 3,
    Task = 4,
    Crypt = 5,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::FtsmPush, Mode::FtsmPull, Mode::Dfsm, Mode::Task, Mode::Crypt];

    pub fn from_u8(v: u8) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| *m as u8 == v)
    }

    pub fn is_transfer(self) -> bool {
        matches!(self, Mode::FtsmPush | Mode::FtsmPull)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::FtsmPush => "ftsm_push",
            Mode::FtsmPull => "ftsm_pull",
            Mode::Dfsm => "dfsm",
            Mode::Task => "task",
            Mode::Crypt => "crypt",
        }
    }

    pub fn parse(name: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SecurityMode {
    NonSecure = 0,
    Secure = 1,
    SemiSecure = 2,
}

impl SecurityMode {
    pub const ALL: [SecurityMode; 3] = [SecurityMode::NonSecure, SecurityMode::Secure, SecurityMode::SemiSecure];

    pub fn from_u8(v: u8) -> Option<SecurityMode> {
        SecurityMode::ALL.into_iter().find(|m| *m as u8 == v)
    }
}

impl std::str::FromStr for SecurityMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "nonsecure" => Ok(SecurityMode::NonSecure),
            "secure" => Ok(SecurityMode::Secure),
            "semi" | "semisecure" => Ok(SecurityMode::SemiSecure),
            other => Err(format!("unknown security mode `{other}` (expected none, secure or semi)")),
        }
    }
}

/// Bit set of enabled [`Mode`]s.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModeSet(u8);

impl ModeSet {
    pub fn all() -> Self {
        Mode::ALL.into_iter().collect()
    }

    pub fn none() -> Self {
        ModeSet(0)
    }

    pub fn insert(&mut self, mode: Mode) {
        self.0 |= 1 << (mode as u8);
    }

    pub fn contains(&self, mode: Mode) -> bool {
        self.0 & (1 << (mode as u8)) != 0
    }
}

impl FromIterator<Mode> for ModeSet {
    fn from_iter<I: IntoIterator<Item = Mode>>(iter: I) -> Self {
        let mut set = ModeSet::none();
        for m in iter {
            set.insert(m);
        }
        set
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SessionParams {
    pub protocol_version: u16,
    pub mode: Mode,
    pub security_mode: SecurityMode,
    pub buffer_size: u32,
    pub stream_count: u8,
    pub session_id: [u8; 16],
}

impl SessionParams {
    pub fn request(mode: Mode, security_mode: SecurityMode, buffer_size: u32, stream_count: u8) -> Self {
        SessionParams {
            protocol_version: PROTOCOL_VERSION,
            mode,
            security_mode,
            buffer_size,
            stream_count,
            session_id: [0; 16],
        }
    }

    fn to_fields(self) -> FieldMap {
        FieldMap::new()
            .with_u16(tags::hello::VERSION, self.protocol_version)
            .with_u8(tags::hello::MODE, self.mode as u8)
            .with_u8(tags::hello::SECURITY, self.security_mode as u8)
            .with_u32(tags::hello::BUFFER_SIZE, self.buffer_size)
            .with_u8(tags::hello::STREAM_COUNT, self.stream_count)
            .with(tags::hello::SESSION_ID, self.session_id)
    }

    fn from_fields(map: &FieldMap) -> Result<Self, WireError> {
        let mode = map.require_u8(tags::hello::MODE)?;
        let security = map.require_u8(tags::hello::SECURITY)?;
        Ok(SessionParams {
            protocol_version: map.require_u16(tags::hello::VERSION)?,
            mode: Mode::from_u8(mode).ok_or(WireError::BadField {
                tag: tags::hello::MODE,
                reason: "unknown mode",
            })?,
            security_mode: SecurityMode::from_u8(security).ok_or(WireError::BadField {
                tag: tags::hello::SECURITY,
                reason: "unknown security mode",
            })?,
            buffer_size: map.require_u32(tags::hello::BUFFER_SIZE)?,
            stream_count: map.require_u8(tags::hello::STREAM_COUNT)?,
            session_id: map.get_array(tags::hello::SESSION_ID)?.unwrap_or([0; 16]),
        })
    }
}

/// What a server is willing to grant.
#[derive(Clone, Copy, Debug)]
pub struct ServerPolicy {
    pub protocol_version: u16,
    pub buffer_cap: u32,
    pub streams_cap: u8,
    pub enabled_modes: ModeSet,
}

impl Default for ServerPolicy {
    fn default() -> Self {
        ServerPolicy {
            protocol_version: PROTOCOL_VERSION,
            buffer_cap: DEFAULT_MAX_PAYLOAD,
            streams_cap: 64,
            enabled_modes: ModeSet::all(),
        }
    }
}

/// Computes the session parameters both peers will use. The session id is
/// left for the caller to assign.
pub fn negotiate(client: &SessionParams, policy: &ServerPolicy) -> Result<SessionParams, WireError> {
    if client.protocol_version != policy.protocol_version {
        return Err(WireError::VersionMismatch {
            client: client.protocol_version,
            server: policy.protocol_version,
        });
    }
    if !policy.enabled_modes.contains(client.mode) {
        return Err(WireError::ModeRejected(client.mode));
    }
    if client.buffer_size < MIN_BUFFER_SIZE {
        return Err(WireError::BufferTooSmall(client.buffer_size));
    }
    let stream_count = if client.mode.is_transfer() {
        client.stream_count.clamp(1, policy.streams_cap.max(1))
    } else {
        1
    };
    Ok(SessionParams {
        buffer_size: client.buffer_size.min(policy.buffer_cap).max(MIN_BUFFER_SIZE),
        stream_count,
        ..*client
    })
}

/// First frame a client sends.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hello {
    pub params: SessionParams,
    pub nonce: [u8; 16],
    /// Set on FTSM data connections: the transfer and stream this connection carries.
    pub attach: Option<([u8; 16], u8)>,
}

impl Hello {
    pub fn new(params: SessionParams) -> Self {
        let mut nonce = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut nonce);
        Hello {
            params,
            nonce,
            attach: None,
        }
    }

    pub fn to_fields(&self) -> FieldMap {
        let mut map = self.params.to_fields().with(tags::hello::NONCE, self.nonce);
        if let Some((transfer_id, stream_index)) = self.attach {
            map.insert(tags::hello::TRANSFER_ID, transfer_id);
            map.insert(tags::hello::STREAM_INDEX, [stream_index]);
        }
        map
    }

    pub fn from_fields(map: &FieldMap) -> Result<Self, WireError> {
        let attach = match map.get_array::<16>(tags::hello::TRANSFER_ID)? {
            Some(id) => Some((id, map.require_u8(tags::hello::STREAM_INDEX)?)),
            None => None,
        };
        Ok(Hello {
            params: SessionParams::from_fields(map)?,
            nonce: map.require_array(tags::hello::NONCE)?,
            attach,
        })
    }
}

/// First frame a server sends: the negotiated parameters and its nonce.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Welcome {
    pub params: SessionParams,
    pub nonce: [u8; 16],
}

impl Welcome {
    pub fn to_fields(&self) -> FieldMap {
        self.params.to_fields().with(tags::hello::NONCE, self.nonce)
    }

    pub fn from_fields(map: &FieldMap) -> Result<Self, WireError> {
        Ok(Welcome {
            params: SessionParams::from_fields(map)?,
            nonce: map.require_array(tags::hello::NONCE)?,
        })
    }
}

/// Client side of the HELLO/WELCOME exchange.
pub fn client_handshake<S: Read + Write>(stream: &mut S, hello: &Hello) -> Result<Welcome, WireError> {
    write_frame(stream, &Frame::new(FrameType::HELLO, hello.to_fields().encode()), DEFAULT_MAX_PAYLOAD)?;
    let frame = read_frame(stream, DEFAULT_MAX_PAYLOAD)?;
    let fields = FieldMap::decode(&frame.payload)?;
    match frame.frame_type {
        FrameType::WELCOME => Welcome::from_fields(&fields),
        FrameType::ERROR => Err(remote_error(&fields)),
        got => Err(WireError::UnexpectedFrame {
            expected: FrameType::WELCOME,
            got,
        }),
    }
}

/// Server side of the HELLO/WELCOME exchange. Rejections are reported to the
/// client with an `ERROR` frame before returning the error.
pub fn server_handshake<S: Read + Write>(stream: &mut S, policy: &ServerPolicy) -> Result<(Hello, Welcome), WireError> {
    let frame = read_frame(stream, DEFAULT_MAX_PAYLOAD)?;
    if frame.frame_type != FrameType::HELLO {
        let err = WireError::UnexpectedFrame {
            expected: FrameType::HELLO,
            got: frame.frame_type,
        };
        reject(stream, &err);
        return Err(err);
    }
    let hello = match FieldMap::decode(&frame.payload).and_then(|m| Hello::from_fields(&m)) {
        Ok(h) => h,
        Err(err) => {
            reject(stream, &err);
            return Err(err);
        }
    };
    let mut params = match negotiate(&hello.params, policy) {
        Ok(p) => p,
        Err(err) => {
            reject(stream, &err);
            return Err(err);
        }
    };
    let mut rng = rand::thread_rng();
    rng.fill_bytes(&mut params.session_id);
    let mut nonce = [0u8; 16];
    rng.fill_bytes(&mut nonce);
    let welcome = Welcome { params, nonce };
    write_frame(stream, &Frame::new(FrameType::WELCOME, welcome.to_fields().encode()), DEFAULT_MAX_PAYLOAD)?;
    Ok((hello, welcome))
}

fn reject<S: Write>(stream: &mut S, err: &WireError) {
    let fields = error_fields(err.status(), &err.to_string());
    let _ = write_frame(stream, &Frame::new(FrameType::ERROR, fields.encode()), DEFAULT_MAX_PAYLOAD);
}
