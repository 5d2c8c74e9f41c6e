use std::io::{Read, Write};

use crate::wire::{
    encode_header, error_fields, read_frame, remote_error, tags, FieldMap, Frame, FrameType, SecurityMode, Status,
    WireError, FLAG_FIELDS_SEALED, FLAG_SEALED,
};

use super::keys::ChannelKeys;
use super::policy::{classify_frame, sensitive_tags, Sealing};
use super::SecError;

/// An authenticated connection that applies the sealing policy of its
/// security mode to every frame it sends and checks it on every frame it
/// receives.
pub struct SecureChannel<S> {
    stream: S,
    keys: ChannelKeys,
    security: SecurityMode,
    max_payload: u32,
}

impl<S: Read + Write> SecureChannel<S> {
    pub fn new(stream: S, keys: ChannelKeys, security: SecurityMode, max_payload: u32) -> Self {
        SecureChannel {
            stream,
            keys,
            security,
            max_payload,
        }
    }

    pub fn security(&self) -> SecurityMode {
        self.security
    }

    pub fn max_payload(&self) -> u32 {
        self.max_payload
    }

    pub fn get_ref(&self) -> &S {
        &self.stream
    }

    pub fn get_mut(&mut self) -> &mut S {
        &mut self.stream
    }

    pub fn into_inner(self) -> S {
        self.stream
    }

    fn write(&mut self, frame_type: FrameType, flags: u8, payload: &[u8]) -> Result<(), SecError> {
        let header = encode_header(frame_type, flags, payload.len(), self.max_payload)?;
        let mut bytes = Vec::with_capacity(header.len() + payload.len());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(payload);
        self.stream.write_all(&bytes).map_err(WireError::from)?;
        self.stream.flush().map_err(WireError::from)?;
        Ok(())
    }

    /// Sends a raw payload. Frames whose class is [`Sealing::SensitiveFields`]
    /// must go through [`send_fields`](Self::send_fields).
    pub fn send(&mut self, frame_type: FrameType, payload: &[u8]) -> Result<(), SecError> {
        match classify_frame(frame_type, self.security) {
            Sealing::Clear => self.write(frame_type, 0, payload),
            Sealing::Sealed => {
                let sealed = self.keys.seal(payload)?;
                self.write(frame_type, FLAG_SEALED, &sealed)
            }
            Sealing::SensitiveFields => {
                let map = FieldMap::decode(payload)?;
                self.send_fields(frame_type, &map)
            }
        }
    }

    pub fn send_fields(&mut self, frame_type: FrameType, fields: &FieldMap) -> Result<(), SecError> {
        if classify_frame(frame_type, self.security) != Sealing::SensitiveFields {
            return self.send(frame_type, &fields.encode());
        }
        let sensitive = sensitive_tags(frame_type);
        let mut clear = FieldMap::new();
        let mut hidden = FieldMap::new();
        for (tag, value) in fields.iter() {
            if tag == tags::SEALED_FIELDS {
                return Err(SecError::Protocol("reserved field tag in outgoing frame".into()));
            }
            if sensitive.contains(&tag) {
                hidden.insert(tag, value);
            } else {
                clear.insert(tag, value);
            }
        }
        if hidden.is_empty() {
            return self.write(frame_type, 0, &clear.encode());
        }
        let sealed = self.keys.seal(&hidden.encode())?;
        clear.insert(tags::SEALED_FIELDS, sealed);
        self.write(frame_type, FLAG_FIELDS_SEALED, &clear.encode())
    }

    pub fn send_error(&mut self, code: Status, message: &str) -> Result<(), SecError> {
        self.send_fields(FrameType::ERROR, &error_fields(code, message))
    }

    /// Receives one frame and returns it with a plaintext payload.
    pub fn recv(&mut self) -> Result<Frame, SecError> {
        let frame = read_frame(&mut self.stream, self.max_payload)?;
        let frame_type = frame.frame_type;
        if matches!(frame_type, FrameType::HELLO | FrameType::AUTH | FrameType::WELCOME) {
            return Err(SecError::Protocol(format!("{frame_type} on an authenticated connection")));
        }
        let violation = SecError::PolicyViolation(frame_type);
        let payload = match classify_frame(frame_type, self.security) {
            Sealing::Clear if frame.flags == 0 => frame.payload,
            Sealing::Sealed if frame.flags == FLAG_SEALED => self.keys.open(&frame.payload)?,
            Sealing::SensitiveFields if frame.flags == 0 => {
                let map = FieldMap::decode(&frame.payload)?;
                let sensitive = sensitive_tags(frame_type);
                if map.iter().any(|(t, _)| sensitive.contains(&t) || t == tags::SEALED_FIELDS) {
                    return Err(violation);
                }
                frame.payload
            }
            Sealing::SensitiveFields if frame.flags == FLAG_FIELDS_SEALED => {
                let mut map = FieldMap::decode(&frame.payload)?;
                let sealed = map.remove(tags::SEALED_FIELDS).ok_or(violation)?;
                let hidden = FieldMap::decode(&self.keys.open(&sealed)?)?;
                let sensitive = sensitive_tags(frame_type);
                for (tag, value) in hidden.iter() {
                    if !sensitive.contains(&tag) || map.contains(tag) {
                        return Err(SecError::PolicyViolation(frame_type));
                    }
                    map.insert(tag, value);
                }
                if map.iter().any(|(t, _)| sensitive.contains(&t) && !hidden.contains(t)) {
                    return Err(SecError::PolicyViolation(frame_type));
                }
                map.encode()
            }
            _ => return Err(violation),
        };
        Ok(Frame {
            frame_type,
            flags: 0,
            payload,
        })
    }

    pub fn recv_fields(&mut self) -> Result<(FrameType, FieldMap), SecError> {
        let frame = self.recv()?;
        let map = FieldMap::decode(&frame.payload)?;
        Ok((frame.frame_type, map))
    }

    /// Receives a field-map frame of the given type. An `ERROR` frame becomes
    /// [`WireError::Remote`].
    pub fn expect(&mut self, expected: FrameType) -> Result<FieldMap, SecError> {
        let (got, map) = self.recv_fields()?;
        if got == expected {
            Ok(map)
        } else if got == FrameType::ERROR {
            Err(SecError::Wire(remote_error(&map)))
        } else {
            Err(SecError::Wire(WireError::UnexpectedFrame { expected, got }))
        }
    }
}
