use super::{FtsmError, TransferId};

/// transfer_id(16) | stream_index(1) | offset(8) | length(4)
pub const CHUNK_HEADER_LEN: usize = 29;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkHeader {
    pub transfer_id: TransferId,
    pub stream_index: u8,
    pub offset: u64,
    pub length: u32,
}

pub fn encode_chunk_header(h: &ChunkHeader, out: &mut [u8]) {
    out[..16].copy_from_slice(&h.transfer_id);
    out[16] = h.stream_index;
    out[17..25].copy_from_slice(&h.offset.to_be_bytes());
    out[25..29].copy_from_slice(&h.length.to_be_bytes());
}

/// Splits a `CHUNK` payload into header and data; the declared length must
/// match the data exactly.
pub fn decode_chunk(bytes: &[u8]) -> Result<(ChunkHeader, &[u8]), FtsmError> {
    if bytes.len() < CHUNK_HEADER_LEN {
        return Err(FtsmError::BadChunk(format!("{}-byte chunk record", bytes.len())));
    }
    let header = ChunkHeader {
        transfer_id: bytes[..16].try_into().unwrap(),
        stream_index: bytes[16],
        offset: u64::from_be_bytes(bytes[17..25].try_into().unwrap()),
        length: u32::from_be_bytes(bytes[25..29].try_into().unwrap()),
    };
    let data = &bytes[CHUNK_HEADER_LEN..];
    if data.len() != header.length as usize {
        return Err(FtsmError::BadChunk(format!(
            "declared {} bytes, carried {}",
            header.length,
            data.len()
        )));
    }
    Ok((header, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let h = ChunkHeader {
            transfer_id: [0xAB; 16],
            stream_index: 3,
            offset: 0x0102030405060708,
            length: 2,
        };
        let mut buf = vec![0u8; CHUNK_HEADER_LEN + 2];
        encode_chunk_header(&h, &mut buf);
        buf[29..].copy_from_slice(b"hi");
        assert_eq!(
            hex::encode(&buf[16..]),
            "03010203040506070800000002".to_string() + &hex::encode(b"hi")
        );
        let (back, data) = decode_chunk(&buf).unwrap();
        assert_eq!(back, h);
        assert_eq!(data, b"hi");
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut buf = vec![0u8; CHUNK_HEADER_LEN + 1];
        encode_chunk_header(
            &ChunkHeader {
                transfer_id: [0; 16],
                stream_index: 0,
                offset: 0,
                length: 2,
            },
            &mut buf,
        );
        assert!(decode_chunk(&buf).is_err());
        assert!(decode_chunk(&buf[..10]).is_err());
    }
}
