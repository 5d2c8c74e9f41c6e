use md5::{Digest, Md5};

use super::cipher::CipherParams;
use super::CryptError;

pub const HEADER_LEN: usize = 32;

/// Default slicing granularity, 20 MiB.
pub const DEFAULT_BLOCK_SIZE: u64 = 20 << 20;

/// Precedes the ciphertext in every block file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockHeader {
    pub part_num: u64,
    /// Ciphertext bytes that follow the header.
    pub length: u64,
    /// Digest of the block's plaintext.
    pub md5: [u8; 16],
}

pub fn encode_block_header(h: &BlockHeader) -> [u8; HEADER_LEN] {
    let mut out = [0u8; HEADER_LEN];
    out[..8].copy_from_slice(&h.part_num.to_be_bytes());
    out[8..16].copy_from_slice(&h.length.to_be_bytes());
    out[16..].copy_from_slice(&h.md5);
    out
}

pub fn decode_block_header(bytes: &[u8]) -> Result<BlockHeader, CryptError> {
    if bytes.len() < HEADER_LEN {
        return Err(CryptError::TruncatedHeader);
    }
    Ok(BlockHeader {
        part_num: u64::from_be_bytes(bytes[..8].try_into().unwrap()),
        length: u64::from_be_bytes(bytes[8..16].try_into().unwrap()),
        md5: bytes[16..32].try_into().unwrap(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDesc {
    pub part_num: u64,
    pub offset: u64,
    pub plain_length: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub file_size: u64,
    pub block_size: u64,
    pub blocks: Vec<BlockDesc>,
}

impl BlockPlan {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

pub fn plan_blocks(file_size: u64, block_size: u64) -> BlockPlan {
    assert!(block_size >= 1, "block size must be positive");
    let blocks = (0..file_size.div_ceil(block_size))
        .map(|part_num| {
            let offset = part_num * block_size;
            BlockDesc {
                part_num,
                offset,
                plain_length: block_size.min(file_size - offset),
            }
        })
        .collect();
    BlockPlan {
        file_size,
        block_size,
        blocks,
    }
}

/// Header and ciphertext of one block, built in memory.
pub fn encrypt_block(plaintext: &[u8], params: &CipherParams, part_num: u64) -> Vec<u8> {
    let suite = params.suite();
    let ct = suite.encrypt_padded(params.key(), params.iv(), plaintext);
    let header = BlockHeader {
        part_num,
        length: ct.len() as u64,
        md5: Md5::digest(plaintext).into(),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + ct.len());
    out.extend_from_slice(&encode_block_header(&header));
    out.extend_from_slice(&ct);
    out
}

/// Checks length, padding, and digest; returns the header and plaintext.
pub fn decrypt_block(block: &[u8], params: &CipherParams) -> Result<(BlockHeader, Vec<u8>), CryptError> {
    let header = decode_block_header(block)?;
    let part = Some(header.part_num);
    let body = &block[HEADER_LEN..];
    if body.len() as u64 != header.length {
        return Err(CryptError::IntegrityMismatch(part));
    }
    let plain = params
        .suite()
        .decrypt_padded(params.key(), params.iv(), body)
        .map_err(|_| CryptError::BadPadding(part))?;
    if <[u8; 16]>::from(Md5::digest(&plain)) != header.md5 {
        return Err(CryptError::IntegrityMismatch(part));
    }
    Ok((header, plain))
}

/// Streaming encryption of one block: feed plaintext, collect ciphertext,
/// get the header at the end.
pub struct BlockEncryptor {
    stream: Box<dyn super::cipher::BlockStream>,
    md5: Md5,
    part_num: u64,
    length: u64,
}

impl BlockEncryptor {
    pub fn new(params: &CipherParams, part_num: u64) -> Self {
        BlockEncryptor {
            stream: params.encryptor(),
            md5: Md5::new(),
            part_num,
            length: 0,
        }
    }

    pub fn update(&mut self, plain: &[u8], out: &mut Vec<u8>) {
        self.md5.update(plain);
        let before = out.len();
        self.stream.update(plain, out);
        self.length += (out.len() - before) as u64;
    }

    pub fn finish(mut self, out: &mut Vec<u8>) -> BlockHeader {
        let before = out.len();
        self.stream.finish(out).expect("encryption cannot fail");
        self.length += (out.len() - before) as u64;
        BlockHeader {
            part_num: self.part_num,
            length: self.length,
            md5: self.md5.finalize().into(),
        }
    }
}

/// Streaming decryption of one block's ciphertext against its header.
pub struct BlockDecryptor {
    stream: Box<dyn super::cipher::BlockStream>,
    md5: Md5,
    header: BlockHeader,
    seen: u64,
}

impl BlockDecryptor {
    pub fn new(params: &CipherParams, header: BlockHeader) -> Self {
        BlockDecryptor {
            stream: params.decryptor(),
            md5: Md5::new(),
            header,
            seen: 0,
        }
    }

    pub fn update(&mut self, cipher: &[u8], out: &mut Vec<u8>) {
        self.seen += cipher.len() as u64;
        let before = out.len();
        self.stream.update(cipher, out);
        self.md5.update(&out[before..]);
    }

    pub fn finish(mut self, out: &mut Vec<u8>) -> Result<(), CryptError> {
        let part = Some(self.header.part_num);
        if self.seen != self.header.length {
            return Err(CryptError::IntegrityMismatch(part));
        }
        let before = out.len();
        self.stream.finish(out).map_err(|_| CryptError::BadPadding(part))?;
        self.md5.update(&out[before..]);
        if <[u8; 16]>::from(self.md5.finalize()) != self.header.md5 {
            return Err(CryptError::IntegrityMismatch(part));
        }
        Ok(())
    }
}
