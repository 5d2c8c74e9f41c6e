use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::wire::FieldMap;

use super::plan::{ChunkRef, TransferPlan};
use super::{FtsmError, TransferId};

// Tags of the on-disk state record.
const T_ID: u8 = 1;
const T_FILE_SIZE: u8 = 2;
const T_REGION_OFFSET: u8 = 3;
const T_REGION_LENGTH: u8 = 4;
const T_CHUNK_SIZE: u8 = 5;
const T_STREAMS: u8 = 6;
const T_BITMAP: u8 = 7;
const T_NEXT: u8 = 8;

/// Receiver-side progress of one transfer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferState {
    pub file_size: u64,
    plan: TransferPlan,
    bitmap: Vec<u8>,
}

pub fn state_path(dst: &Path) -> PathBuf {
    let mut name = dst.as_os_str().to_owned();
    name.push(".xferstate");
    PathBuf::from(name)
}

impl TransferState {
    pub fn new(plan: TransferPlan, file_size: u64) -> Self {
        let bits = plan.chunk_count();
        TransferState {
            file_size,
            bitmap: vec![0; bits.div_ceil(8) as usize],
            plan,
        }
    }

    pub fn plan(&self) -> &TransferPlan {
        &self.plan
    }

    pub fn transfer_id(&self) -> TransferId {
        self.plan.transfer_id
    }

    /// Rebinds the state to a new transfer id, keeping progress.
    pub fn set_transfer_id(&mut self, id: TransferId) {
        self.plan.transfer_id = id;
    }

    pub fn bitmap(&self) -> &[u8] {
        &self.bitmap
    }

    /// Replaces the bitmap with one received from a peer.
    pub fn set_bitmap(&mut self, bitmap: &[u8]) -> Result<(), FtsmError> {
        if bitmap.len() != self.bitmap.len() {
            return Err(FtsmError::StateCorrupt(format!(
                "bitmap of {} bytes for {} chunks",
                bitmap.len(),
                self.plan.chunk_count()
            )));
        }
        self.bitmap.copy_from_slice(bitmap);
        if self.stray_bits() {
            return Err(FtsmError::StateCorrupt("bitmap marks chunks past the grid".into()));
        }
        Ok(())
    }

    fn stray_bits(&self) -> bool {
        let count = self.plan.chunk_count();
        (count..self.bitmap.len() as u64 * 8).any(|i| self.bitmap[(i / 8) as usize] & (1 << (i % 8)) != 0)
    }

    pub fn is_received(&self, ordinal: u64) -> bool {
        bit(&self.bitmap, ordinal)
    }

    pub fn mark(&mut self, ordinal: u64) {
        self.bitmap[(ordinal / 8) as usize] |= 1 << (ordinal % 8);
    }

    pub fn clear(&mut self) {
        self.bitmap.fill(0);
    }

    pub fn received_chunks(&self) -> u64 {
        self.bitmap.iter().map(|b| u64::from(b.count_ones())).sum()
    }

    pub fn received_bytes(&self) -> u64 {
        self.plan
            .chunks()
            .filter(|c| self.is_received(c.ordinal))
            .map(|c| u64::from(c.length))
            .sum()
    }

    pub fn is_complete(&self) -> bool {
        self.received_chunks() == self.plan.chunk_count()
    }

    pub fn missing(&self) -> Vec<ChunkRef> {
        self.plan.chunks().filter(|c| !self.is_received(c.ordinal)).collect()
    }

    /// Per stream, the offset of its first unwritten chunk (span end when done).
    pub fn next_unwritten(&self) -> Vec<(u8, u64)> {
        self.plan
            .spans()
            .iter()
            .map(|span| {
                let next = self
                    .plan
                    .stream_chunks(span.stream_index)
                    .find(|c| !self.is_received(c.ordinal))
                    .map_or(span.end(), |c| c.offset);
                (span.stream_index, next)
            })
            .collect()
    }

    /// Same file, region and grid.
    pub fn same_shape(&self, file_size: u64, plan: &TransferPlan) -> bool {
        self.file_size == file_size
            && self.plan.region_offset == plan.region_offset
            && self.plan.region_length == plan.region_length
            && self.plan.chunk_size == plan.chunk_size
            && self.plan.stream_count == plan.stream_count
    }

    /// Checks the record against the destination's current length.
    pub fn validate(&self, dst_len: u64) -> Result<(), FtsmError> {
        if self.plan.region_end() > self.file_size {
            return Err(FtsmError::StateCorrupt(format!(
                "region ends at {} in a {}-byte file",
                self.plan.region_end(),
                self.file_size
            )));
        }
        if self.stray_bits() {
            return Err(FtsmError::StateCorrupt("bitmap marks chunks past the grid".into()));
        }
        if let Some(c) = self
            .plan
            .chunks()
            .find(|c| self.is_received(c.ordinal) && c.offset + u64::from(c.length) > dst_len)
        {
            return Err(FtsmError::StateCorrupt(format!(
                "chunk at {} marked received but destination has {dst_len} bytes",
                c.offset
            )));
        }
        Ok(())
    }

    pub fn to_fields(&self) -> FieldMap {
        let next: Vec<u8> = self
            .next_unwritten()
            .into_iter()
            .flat_map(|(i, off)| std::iter::once(i).chain(off.to_be_bytes()))
            .collect();
        FieldMap::new()
            .with(T_ID, self.plan.transfer_id)
            .with_u64(T_FILE_SIZE, self.file_size)
            .with_u64(T_REGION_OFFSET, self.plan.region_offset)
            .with_u64(T_REGION_LENGTH, self.plan.region_length)
            .with_u32(T_CHUNK_SIZE, self.plan.chunk_size)
            .with_u8(T_STREAMS, self.plan.stream_count)
            .with(T_BITMAP, self.bitmap.clone())
            .with(T_NEXT, next)
    }

    pub fn from_fields(map: &FieldMap) -> Result<Self, FtsmError> {
        let corrupt = |e: crate::wire::WireError| FtsmError::StateCorrupt(e.to_string());
        let region_offset = map.require_u64(T_REGION_OFFSET).map_err(corrupt)?;
        let region_length = map.require_u64(T_REGION_LENGTH).map_err(corrupt)?;
        if region_offset.checked_add(region_length).is_none() {
            return Err(FtsmError::StateCorrupt("region overflows".into()));
        }
        let chunk_size = map.require_u32(T_CHUNK_SIZE).map_err(corrupt)?;
        let streams = map.require_u8(T_STREAMS).map_err(corrupt)?;
        if chunk_size == 0 || streams == 0 {
            return Err(FtsmError::StateCorrupt("zero chunk size or stream count".into()));
        }
        let plan = TransferPlan::new(
            map.require_array(T_ID).map_err(corrupt)?,
            region_offset,
            region_length,
            streams,
            chunk_size,
        );
        let mut state = TransferState::new(plan, map.require_u64(T_FILE_SIZE).map_err(corrupt)?);
        state.set_bitmap(map.require(T_BITMAP).map_err(corrupt)?)?;
        Ok(state)
    }

    /// Writes the record atomically (temp file, then rename).
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_fields().encode())?;
        fs::rename(&tmp, path)
    }

    pub fn load(path: &Path) -> Result<Option<Self>, FtsmError> {
        match fs::read(path) {
            Ok(bytes) => {
                let map = FieldMap::decode(&bytes).map_err(|e| FtsmError::StateCorrupt(e.to_string()))?;
                TransferState::from_fields(&map).map(Some)
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

fn bit(bitmap: &[u8], ordinal: u64) -> bool {
    bitmap
        .get((ordinal / 8) as usize)
        .is_some_and(|b| b & (1 << (ordinal % 8)) != 0)
}

/// The chunks still to send for a persisted state, given the destination's
/// current length. A complete state yields an empty list.
pub fn resume(state: &TransferState, dst_len: u64) -> Result<Vec<ChunkRef>, FtsmError> {
    state.validate(dst_len)?;
    Ok(state.missing())
}

/// Missing chunks of one stream according to a peer's bitmap.
pub(crate) fn missing_for_stream(plan: &TransferPlan, bitmap: &[u8], stream_index: u8) -> Vec<ChunkRef> {
    plan.stream_chunks(stream_index).filter(|c| !bit(bitmap, c.ordinal)).collect()
}
