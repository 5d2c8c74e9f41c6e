//! The sending loop and the receiving sink shared by push and pull.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use log::debug;

use crate::secchan::SecureChannel;
use crate::wire::FrameType;

use super::chunk::{decode_chunk, encode_chunk_header, ChunkHeader, CHUNK_HEADER_LEN};
use super::plan::{ChunkRef, TransferPlan};
use super::state::{state_path, TransferState};
use super::{md5_region, FtsmError, TransferId};

/// Where sent bytes come from.
#[derive(Clone)]
pub enum Source {
    File(Arc<File>),
    /// Generator for memory-to-memory runs: every byte is zero.
    Zeros,
}

impl Source {
    fn fill(&self, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
        match self {
            Source::File(f) => f.read_exact_at(buf, offset),
            Source::Zeros => Ok(()),
        }
    }
}

/// Byte budget shared by all streams of a transfer; once spent, senders stop
/// mid-transfer as if the process had been killed.
#[derive(Debug)]
pub struct AbortBudget(AtomicU64);

impl AbortBudget {
    pub fn new(bytes: u64) -> Self {
        AbortBudget(AtomicU64::new(bytes))
    }

    /// Spends `n` bytes; false once the budget cannot cover them.
    pub fn take(&self, n: u64) -> bool {
        self.0
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |left| left.checked_sub(n))
            .is_ok()
    }
}

/// Sends the given chunks as `CHUNK` frames. Returns the payload bytes sent.
pub fn send_chunks<S: Read + Write>(
    channel: &mut SecureChannel<S>,
    source: &Source,
    transfer_id: TransferId,
    chunks: &[ChunkRef],
    abort: Option<&AbortBudget>,
) -> Result<u64, FtsmError> {
    let largest = chunks.iter().map(|c| c.length as usize).max().unwrap_or(0);
    let mut buf = vec![0u8; CHUNK_HEADER_LEN + largest];
    let mut sent = 0u64;
    for c in chunks {
        if abort.is_some_and(|a| !a.take(u64::from(c.length))) {
            return Err(FtsmError::Aborted);
        }
        let record = &mut buf[..CHUNK_HEADER_LEN + c.length as usize];
        encode_chunk_header(
            &ChunkHeader {
                transfer_id,
                stream_index: c.stream_index,
                offset: c.offset,
                length: c.length,
            },
            record,
        );
        source.fill(&mut record[CHUNK_HEADER_LEN..], c.offset)?;
        channel.send(FrameType::CHUNK, record)?;
        sent += u64::from(c.length);
    }
    Ok(sent)
}

pub enum Sink {
    File(File),
    /// Memory-to-memory runs: bytes are counted and dropped.
    Discard,
}

/// Applies incoming chunks to the destination and keeps the bitmap current.
pub struct Receiver {
    sink: Sink,
    state: Mutex<TransferState>,
    state_file: Option<PathBuf>,
    per_stream: Vec<AtomicU64>,
}

impl Receiver {
    /// `state_file` of `None` disables persistence.
    pub fn new(sink: Sink, state: TransferState, state_file: Option<PathBuf>) -> Result<Self, FtsmError> {
        if let Some(path) = &state_file {
            state.save(path)?;
        }
        let streams = state.plan().stream_count as usize;
        Ok(Receiver {
            sink,
            state: Mutex::new(state),
            state_file,
            per_stream: (0..streams).map(|_| AtomicU64::new(0)).collect(),
        })
    }

    pub fn plan(&self) -> TransferPlan {
        self.state.lock().unwrap().plan().clone()
    }

    pub fn bitmap(&self) -> Vec<u8> {
        self.state.lock().unwrap().bitmap().to_vec()
    }

    pub fn is_complete(&self) -> bool {
        self.state.lock().unwrap().is_complete()
    }

    /// Bytes written per stream index since this receiver was created.
    pub fn per_stream(&self) -> Vec<u64> {
        self.per_stream.iter().map(|c| c.load(Ordering::SeqCst)).collect()
    }

    /// Validates one `CHUNK` payload against the grid, writes it at its
    /// offset and records it. `stream` pins the stream the chunk must claim.
    pub fn apply(&self, stream: Option<u8>, record: &[u8]) -> Result<u32, FtsmError> {
        let (header, data) = decode_chunk(record)?;
        let (expected_id, chunk) = {
            let state = self.state.lock().unwrap();
            (state.transfer_id(), state.plan().chunk_at(header.stream_index, header.offset))
        };
        if header.transfer_id != expected_id {
            return Err(FtsmError::BadChunk("foreign transfer id".into()));
        }
        if stream.is_some_and(|s| s != header.stream_index) {
            return Err(FtsmError::BadChunk(format!(
                "stream {} chunk on connection for stream {}",
                header.stream_index,
                stream.unwrap_or_default()
            )));
        }
        let chunk = chunk
            .filter(|c| c.length == header.length)
            .ok_or_else(|| FtsmError::BadChunk(format!("offset {} is off the chunk grid", header.offset)))?;
        if let Sink::File(file) = &self.sink {
            file.write_all_at(data, header.offset)?;
        }
        let mut state = self.state.lock().unwrap();
        state.mark(chunk.ordinal);
        if let Some(path) = &self.state_file {
            state.save(path)?;
        }
        drop(state);
        if let Some(counter) = self.per_stream.get(header.stream_index as usize) {
            counter.fetch_add(u64::from(header.length), Ordering::SeqCst);
        }
        Ok(header.length)
    }

    /// Checks completeness and the region digest. On success the state file
    /// is removed and, for whole-file transfers, the destination is cut to
    /// the source length. On a digest mismatch the state is kept but emptied
    /// so the next attempt resends everything.
    pub fn finish(&self, expected_md5: Option<[u8; 16]>) -> Result<Option<[u8; 16]>, FtsmError> {
        let mut state = self.state.lock().unwrap();
        if !state.is_complete() {
            return Err(FtsmError::StreamLost(format!(
                "{} of {} chunks received",
                state.received_chunks(),
                state.plan().chunk_count()
            )));
        }
        let file = match &self.sink {
            Sink::File(f) => f,
            Sink::Discard => return Ok(None),
        };
        let plan = state.plan().clone();
        let whole = plan.region_offset == 0 && plan.region_length == state.file_size;
        if whole {
            file.set_len(state.file_size)?;
        }
        let actual = md5_region(file, plan.region_offset, plan.region_length)?;
        if expected_md5.is_some_and(|m| m != actual) {
            debug!("region digest mismatch, clearing progress");
            state.clear();
            if let Some(path) = &self.state_file {
                state.save(path)?;
            }
            return Err(FtsmError::IntegrityMismatch);
        }
        file.sync_all()?;
        if let Some(path) = &self.state_file {
            match fs::remove_file(path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(Some(actual))
    }
}

/// Opens (creating if needed) a destination file and its receiver. With
/// `resume`, a matching persisted state is picked up; the returned flag says
/// whether that happened.
pub fn open_file_receiver(
    dst: &Path,
    plan: TransferPlan,
    file_size: u64,
    resume: bool,
) -> Result<(Receiver, bool), FtsmError> {
    if let Some(parent) = dst.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = File::options().create(true).read(true).write(true).truncate(false).open(dst)?;
    let dst_len = file.metadata()?.len();
    let state_file = state_path(dst);
    let mut state = TransferState::new(plan.clone(), file_size);
    let mut resumed = false;
    if resume {
        if let Some(mut old) = TransferState::load(&state_file)? {
            if old.same_shape(file_size, &plan) {
                old.validate(dst_len)?;
                old.set_transfer_id(plan.transfer_id);
                resumed = old.received_chunks() > 0;
                state = old;
            }
        }
    }
    Ok((Receiver::new(Sink::File(file), state, Some(state_file))?, resumed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::secchan::Role;
    use crate::wire::SecurityMode;
    use std::io::Cursor;

    type MemChannel = SecureChannel<Cursor<Vec<u8>>>;

    fn pair(buf: Vec<u8>) -> (MemChannel, MemChannel) {
        let c = crate::secchan::derive_keys(b"k", &[1; 16], &[2; 16], Role::Client);
        let s = crate::secchan::derive_keys(b"k", &[1; 16], &[2; 16], Role::Server);
        (
            SecureChannel::new(Cursor::new(Vec::new()), c, SecurityMode::Secure, 1 << 20),
            SecureChannel::new(Cursor::new(buf), s, SecurityMode::Secure, 1 << 20),
        )
    }

    fn interleaved_delivery(order_seed: u64) {
        use rand::{seq::SliceRandom, SeedableRng};
        let dir = tempfile::tempdir().unwrap();
        let src_path = dir.path().join("src");
        let data: Vec<u8> = (0..10_000u32).map(|i| (i * 7 % 251) as u8).collect();
        fs::write(&src_path, &data).unwrap();
        let plan = TransferPlan::new([9; 16], 0, data.len() as u64, 4, 512);
        let source = Source::File(Arc::new(File::open(&src_path).unwrap()));

        let mut chunks: Vec<ChunkRef> = plan.chunks().collect();
        chunks.shuffle(&mut rand::rngs::StdRng::seed_from_u64(order_seed));
        let (mut tx, _) = pair(Vec::new());
        send_chunks(&mut tx, &source, plan.transfer_id, &chunks, None).unwrap();
        let wire = tx.into_inner().into_inner();

        let dst_path = dir.path().join("dst");
        let state_file = super::super::state_path(&dst_path);
        let dst = File::options().create(true).truncate(false).read(true).write(true).open(&dst_path).unwrap();
        let rx_state = TransferState::new(plan.clone(), data.len() as u64);
        let receiver = Receiver::new(Sink::File(dst), rx_state, Some(state_file.clone())).unwrap();
        let (_, mut rx) = pair(wire);
        for _ in 0..plan.chunk_count() {
            let frame = rx.recv().unwrap();
            receiver.apply(None, &frame.payload).unwrap();
        }
        let md5 = md5_region(&File::open(&src_path).unwrap(), 0, data.len() as u64).unwrap();
        assert_eq!(receiver.finish(Some(md5)).unwrap(), Some(md5));
        assert_eq!(fs::read(&dst_path).unwrap(), data);
        assert!(!state_file.exists());
        assert_eq!(receiver.per_stream().iter().sum::<u64>(), data.len() as u64);
    }

    #[test]
    fn any_interleaving_reassembles() {
        for seed in 0..8 {
            interleaved_delivery(seed);
        }
    }

    #[test]
    fn abort_budget_stops_sender() {
        let plan = TransferPlan::new([1; 16], 0, 4096, 1, 1024);
        let chunks: Vec<ChunkRef> = plan.chunks().collect();
        let (mut tx, _) = pair(Vec::new());
        let budget = AbortBudget::new(2048);
        let err = send_chunks(&mut tx, &Source::Zeros, plan.transfer_id, &chunks, Some(&budget)).unwrap_err();
        assert!(matches!(err, FtsmError::Aborted));
    }

    #[test]
    fn off_grid_and_foreign_chunks_rejected() {
        let plan = TransferPlan::new([1; 16], 0, 100, 2, 10);
        let rx = Receiver::new(Sink::Discard, TransferState::new(plan, 100), None).unwrap();
        let mut rec = vec![0u8; CHUNK_HEADER_LEN + 10];
        let mut header = ChunkHeader {
            transfer_id: [1; 16],
            stream_index: 0,
            offset: 5,
            length: 10,
        };
        encode_chunk_header(&header, &mut rec);
        assert!(rx.apply(None, &rec).is_err());
        header.offset = 50;
        encode_chunk_header(&header, &mut rec);
        assert!(rx.apply(None, &rec).is_err(), "offset 50 belongs to stream 1");
        header.stream_index = 1;
        encode_chunk_header(&header, &mut rec);
        assert!(rx.apply(Some(0), &rec).is_err());
        assert_eq!(rx.apply(Some(1), &rec).unwrap(), 10);
        header.transfer_id = [2; 16];
        encode_chunk_header(&header, &mut rec);
        assert!(rx.apply(None, &rec).is_err());
    }

    #[test]
    fn incomplete_finish_is_stream_lost() {
        let plan = TransferPlan::new([1; 16], 0, 100, 1, 10);
        let rx = Receiver::new(Sink::Discard, TransferState::new(plan, 100), None).unwrap();
        assert!(matches!(rx.finish(None), Err(FtsmError::StreamLost(_))));
    }
}
