use crate::secchan::Credentials;
use crate::wire::{FieldMap, SecurityMode, WireError};

use super::cipher::CipherParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum CryptDirection {
    Encrypt = 1,
    Decrypt = 2,
}

/// Where a worker reads or writes: its own store, or a path on another
/// node reached through that node's file-system service.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Location {
    Local(String),
    Remote { addr: String, path: String },
}

impl Location {
    pub fn path(&self) -> &str {
        match self {
            Location::Local(p) | Location::Remote { path: p, .. } => p,
        }
    }
}

/// One block's worth of work.
///
/// Encrypt: read `[offset, offset + length)` of `source`, write the headed
/// block file to `destination`. Decrypt: read the block file at `source`,
/// write its `length` plaintext bytes to `destination` at `offset`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CryptTask {
    pub params: CipherParams,
    pub direction: CryptDirection,
    pub source: Location,
    pub destination: Location,
    pub offset: u64,
    pub length: u64,
    pub part_num: u64,
    /// Used for `Remote` locations.
    pub username: String,
    pub psk: Vec<u8>,
    pub security: SecurityMode,
    pub buffer_size: u32,
}

mod tag {
    pub const CIPHER: u8 = 1;
    pub const KEY: u8 = 2;
    pub const IV: u8 = 3;
    pub const DIRECTION: u8 = 4;
    pub const SOURCE: u8 = 5;
    pub const DESTINATION: u8 = 6;
    pub const OFFSET: u8 = 7;
    pub const LENGTH: u8 = 8;
    pub const PART_NUM: u8 = 9;
    pub const USERNAME: u8 = 10;
    pub const PSK: u8 = 11;
    pub const SECURITY: u8 = 12;
    pub const BUFFER_SIZE: u8 = 13;

    pub const ADDR: u8 = 1;
    pub const PATH: u8 = 2;
}

fn location_fields(loc: &Location) -> FieldMap {
    match loc {
        Location::Local(path) => FieldMap::new().with_str(tag::PATH, path),
        Location::Remote { addr, path } => FieldMap::new().with_str(tag::ADDR, addr).with_str(tag::PATH, path),
    }
}

fn location_from(map: &FieldMap) -> Result<Location, WireError> {
    let path = map.require_str(tag::PATH)?.to_string();
    Ok(match map.get_str(tag::ADDR)? {
        Some(addr) => Location::Remote {
            addr: addr.to_string(),
            path,
        },
        None => Location::Local(path),
    })
}

impl CryptTask {
    pub fn credentials(&self) -> Credentials {
        Credentials {
            username: self.username.clone(),
            psk: self.psk.clone(),
        }
    }

    pub fn to_fields(&self) -> FieldMap {
        FieldMap::new()
            .with_u8(tag::CIPHER, self.params.cipher_id())
            .with(tag::KEY, self.params.key())
            .with(tag::IV, self.params.iv())
            .with_u8(tag::DIRECTION, self.direction as u8)
            .with_map(tag::SOURCE, &location_fields(&self.source))
            .with_map(tag::DESTINATION, &location_fields(&self.destination))
            .with_u64(tag::OFFSET, self.offset)
            .with_u64(tag::LENGTH, self.length)
            .with_u64(tag::PART_NUM, self.part_num)
            .with_str(tag::USERNAME, &self.username)
            .with(tag::PSK, self.psk.clone())
            .with_u8(tag::SECURITY, self.security as u8)
            .with_u32(tag::BUFFER_SIZE, self.buffer_size)
    }

    pub fn from_fields(map: &FieldMap) -> Result<Self, WireError> {
        let bad = |tag, reason| WireError::BadField { tag, reason };
        let params = CipherParams::with_id(map.require_u8(tag::CIPHER)?, map.require(tag::KEY)?, map.require(tag::IV)?)
            .map_err(|_| bad(tag::CIPHER, "cipher parameters do not fit the algorithm"))?;
        let direction = match map.require_u8(tag::DIRECTION)? {
            1 => CryptDirection::Encrypt,
            2 => CryptDirection::Decrypt,
            _ => return Err(bad(tag::DIRECTION, "unknown direction")),
        };
        Ok(CryptTask {
            params,
            direction,
            source: location_from(&map.require_map(tag::SOURCE)?)?,
            destination: location_from(&map.require_map(tag::DESTINATION)?)?,
            offset: map.require_u64(tag::OFFSET)?,
            length: map.require_u64(tag::LENGTH)?,
            part_num: map.require_u64(tag::PART_NUM)?,
            username: map.require_str(tag::USERNAME)?.to_string(),
            psk: map.require(tag::PSK)?.to_vec(),
            security: SecurityMode::from_u8(map.require_u8(tag::SECURITY)?).ok_or(bad(tag::SECURITY, "unknown security mode"))?,
            buffer_size: map.require_u32(tag::BUFFER_SIZE)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let t = CryptTask {
            params: CipherParams::new("tdes", &[1; 16], &[2; 8]).unwrap(),
            direction: CryptDirection::Decrypt,
            source: Location::Local("blocks/f.blk3".into()),
            destination: Location::Remote {
                addr: "127.0.0.1:2525".into(),
                path: "out/f".into(),
            },
            offset: 3 << 20,
            length: 1 << 20,
            part_num: 3,
            username: "alice".into(),
            psk: vec![9; 32],
            security: SecurityMode::SemiSecure,
            buffer_size: 65536,
        };
        assert_eq!(CryptTask::from_fields(&t.to_fields()).unwrap(), t);
    }
}
