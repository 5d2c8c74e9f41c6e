use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::warn;

use crate::retry::RetryPolicy;
use crate::secchan::{connect, ClientSession, Credentials, SecureChannel};
use crate::wire::{tags, FieldMap, FrameType, Mode, SecurityMode, SessionParams, DEFAULT_MAX_PAYLOAD};

use super::engine::{open_file_receiver, send_chunks, AbortBudget, Source};
use super::plan::{resolve_region, throughput_report, ThroughputReport, TransferPlan};
use super::server::{Accept, DoneReply, Offer};
use super::state::missing_for_stream;
use super::{md5_region, Direction, FtsmError, TransferId};

#[derive(Clone, Debug)]
pub struct TransferOptions {
    pub security: SecurityMode,
    pub buffer_size: u32,
    pub streams: u8,
    /// `(offset, length)`; `None` transfers the whole file.
    pub region: Option<(u64, u64)>,
    pub resume: bool,
    pub retry: RetryPolicy,
    /// Stop after this many payload bytes, leaving the transfer resumable.
    /// Used to exercise interruption.
    pub abort_after: Option<u64>,
}

impl Default for TransferOptions {
    fn default() -> Self {
        TransferOptions {
            security: SecurityMode::Secure,
            buffer_size: DEFAULT_MAX_PAYLOAD,
            streams: 1,
            region: None,
            resume: true,
            retry: RetryPolicy::default(),
            abort_after: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub transfer_id: TransferId,
    pub region_offset: u64,
    pub region_length: u64,
    /// Payload bytes moved by the attempt that completed, per stream index.
    pub per_stream: Vec<u64>,
    pub elapsed: Duration,
    pub md5: Option<[u8; 16]>,
    pub resumed: bool,
    pub attempts: u32,
}

impl TransferOutcome {
    pub fn bytes(&self) -> u64 {
        self.per_stream.iter().sum()
    }

    pub fn report(&self) -> ThroughputReport {
        throughput_report(&self.per_stream, self.elapsed)
    }
}

fn open_control(addr: &str, creds: &Credentials, mode: Mode, opts: &TransferOptions) -> Result<ClientSession<std::net::TcpStream>, FtsmError> {
    let params = SessionParams::request(mode, opts.security, opts.buffer_size, opts.streams.max(1));
    connect(addr, creds, params, None).map_err(FtsmError::from_channel)
}

fn open_data(
    addr: &str,
    creds: &Credentials,
    mode: Mode,
    opts: &TransferOptions,
    accept: &Accept,
    index: u8,
) -> Result<ClientSession<std::net::TcpStream>, FtsmError> {
    let params = SessionParams::request(mode, opts.security, accept.chunk_size, accept.stream_count);
    connect(addr, creds, params, Some((accept.transfer_id, index))).map_err(FtsmError::from_channel)
}

/// Maps a failure inside a stream worker: network trouble is resumable.
fn stream_failure(e: FtsmError) -> FtsmError {
    match e {
        FtsmError::Channel(ref c) if c.is_disconnect() => FtsmError::StreamLost(e.to_string()),
        FtsmError::Io(_) => FtsmError::StreamLost(e.to_string()),
        other => other,
    }
}

fn join_streams(results: Vec<(u8, Result<u64, FtsmError>)>, streams: u8) -> Result<Vec<u64>, FtsmError> {
    let mut per_stream = vec![0u64; streams as usize];
    let mut first_err = None;
    for (index, result) in results {
        match result {
            Ok(n) => per_stream[index as usize] = n,
            // An abort wins over the follow-on errors it causes.
            Err(FtsmError::Aborted) => first_err = Some(FtsmError::Aborted),
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(stream_failure(e));
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(per_stream),
    }
}

struct Attempt {
    accept: Accept,
    per_stream: Vec<u64>,
    md5: Option<[u8; 16]>,
}

fn retry_loop(
    opts: &TransferOptions,
    mut attempt_fn: impl FnMut(bool) -> Result<Attempt, FtsmError>,
) -> Result<(Attempt, u32), FtsmError> {
    let mut resume = opts.resume;
    let mut attempt = 0;
    loop {
        match attempt_fn(resume) {
            Ok(done) => return Ok((done, attempt + 1)),
            Err(e) if e.is_resumable() && attempt < opts.retry.retries => {
                warn!("transfer attempt {} failed ({e}); resuming", attempt + 1);
                opts.retry.sleep(attempt);
                attempt += 1;
                resume = true;
            }
            Err(e) => return Err(e),
        }
    }
}

fn outcome(done: Attempt, attempts: u32, started: Instant) -> TransferOutcome {
    TransferOutcome {
        transfer_id: done.accept.transfer_id,
        region_offset: done.accept.region_offset,
        region_length: done.accept.region_length,
        per_stream: done.per_stream,
        elapsed: started.elapsed(),
        md5: done.md5,
        resumed: done.accept.resumed,
        attempts,
    }
}

/// Sends `src` (or a region of it) to `dst` on the node.
pub fn push(addr: &str, creds: &Credentials, src: &Path, dst: &str, opts: &TransferOptions) -> Result<TransferOutcome, FtsmError> {
    let file = Arc::new(File::open(src)?);
    let file_size = file.metadata()?.len();
    let (offset, length) = resolve_region(file_size, opts.region)?;
    let started = Instant::now();
    let (done, attempts) = retry_loop(opts, |resume| {
        let offer = Offer {
            direction: Direction::Push,
            path: dst.to_string(),
            file_size,
            region: opts.region,
            resume,
            memory: false,
            task_set: None,
        };
        push_attempt(addr, creds, &offer, &Source::File(file.clone()), Some((offset, length)), opts)
    })?;
    Ok(outcome(done, attempts, started))
}

/// Sends `length` generated bytes that the node discards: a memory-to-memory
/// run over the full protocol path.
pub fn push_memory(addr: &str, creds: &Credentials, length: u64, opts: &TransferOptions) -> Result<TransferOutcome, FtsmError> {
    let started = Instant::now();
    let offer = Offer {
        direction: Direction::Push,
        path: String::new(),
        file_size: length,
        region: None,
        resume: false,
        memory: true,
        task_set: None,
    };
    let done = push_attempt(addr, creds, &offer, &Source::Zeros, None, opts)?;
    Ok(outcome(done, 1, started))
}

fn push_attempt(
    addr: &str,
    creds: &Credentials,
    offer: &Offer,
    source: &Source,
    digest_region: Option<(u64, u64)>,
    opts: &TransferOptions,
) -> Result<Attempt, FtsmError> {
    let mut control = open_control(addr, creds, Mode::FtsmPush, opts)?;
    control.channel.send_fields(FrameType::XFER_OFFER, &offer.to_fields())?;
    let accept = Accept::from_fields(&control.channel.expect(FrameType::XFER_ACCEPT).map_err(FtsmError::from_channel)?)?;
    let plan = accept.plan();
    let abort = opts.abort_after.map(AbortBudget::new);

    let (digest, results) = thread::scope(|s| {
        let digest = match (source, digest_region) {
            (Source::File(f), Some((offset, length))) => Some(s.spawn(move || md5_region(f, offset, length))),
            _ => None,
        };
        let workers: Vec<_> = plan
            .spans()
            .iter()
            .map(|span| {
                let index = span.stream_index;
                let chunks = missing_for_stream(&plan, &accept.bitmap, index);
                let (accept, abort) = (&accept, abort.as_ref());
                let handle = s.spawn(move || -> Result<u64, FtsmError> {
                    if chunks.is_empty() {
                        return Ok(0);
                    }
                    let mut data = open_data(addr, creds, Mode::FtsmPush, opts, accept, index)?;
                    let n = send_chunks(&mut data.channel, source, accept.transfer_id, &chunks, abort)?;
                    data.channel.send_fields(FrameType::XFER_DONE, &FieldMap::new())?;
                    let reply = DoneReply::from_fields(
                        &data.channel.expect(FrameType::XFER_DONE).map_err(FtsmError::from_channel)?,
                    )?;
                    if reply.per_stream.first().copied() != Some(n) {
                        return Err(FtsmError::StreamLost(format!("stream {index}: receiver confirmed fewer bytes")));
                    }
                    Ok(n)
                });
                (index, handle)
            })
            .collect();
        let results: Vec<_> = workers
            .into_iter()
            .map(|(i, h)| (i, h.join().unwrap_or_else(|_| Err(FtsmError::StreamLost("stream worker panicked".into())))))
            .collect();
        (digest.map(|h| h.join().expect("digest thread")), results)
    });
    let per_stream = join_streams(results, accept.stream_count)?;
    let md5 = digest.transpose()?;

    let mut done = FieldMap::new();
    if let Some(md5) = md5 {
        done.insert(tags::xfer::MD5, md5);
    }
    control.channel.send_fields(FrameType::XFER_DONE, &done)?;
    let reply = DoneReply::from_fields(&control.channel.expect(FrameType::XFER_DONE).map_err(FtsmError::from_channel)?)?;
    if reply.per_stream.iter().sum::<u64>() != per_stream.iter().sum::<u64>() {
        return Err(FtsmError::StreamLost("receiver byte count differs from bytes sent".into()));
    }
    Ok(Attempt {
        accept,
        per_stream,
        md5: reply.md5.or(md5),
    })
}

/// Fetches `src` (or a region of it) from the node into the local `dst`.
pub fn pull(addr: &str, creds: &Credentials, src: &str, dst: &Path, opts: &TransferOptions) -> Result<TransferOutcome, FtsmError> {
    let started = Instant::now();
    let (done, attempts) = retry_loop(opts, |resume| pull_attempt(addr, creds, src, dst, resume, opts))?;
    Ok(outcome(done, attempts, started))
}

fn pull_attempt(
    addr: &str,
    creds: &Credentials,
    src: &str,
    dst: &Path,
    resume: bool,
    opts: &TransferOptions,
) -> Result<Attempt, FtsmError> {
    let mut control = open_control(addr, creds, Mode::FtsmPull, opts)?;
    let offer = Offer {
        direction: Direction::Pull,
        path: src.to_string(),
        file_size: 0,
        region: opts.region,
        resume,
        memory: false,
        task_set: None,
    };
    control.channel.send_fields(FrameType::XFER_OFFER, &offer.to_fields())?;
    let mut accept = Accept::from_fields(&control.channel.expect(FrameType::XFER_ACCEPT).map_err(FtsmError::from_channel)?)?;
    let plan = accept.plan();
    let (receiver, resumed) = open_file_receiver(dst, plan.clone(), accept.file_size, resume)?;
    accept.resumed = resumed;
    let bitmap = receiver.bitmap();
    let abort = opts.abort_after.map(AbortBudget::new);

    let results = thread::scope(|s| {
        let workers: Vec<_> = plan
            .spans()
            .iter()
            .map(|span| {
                let index = span.stream_index;
                let pending = !missing_for_stream(&plan, &bitmap, index).is_empty();
                let (accept, bitmap, receiver, abort) = (&accept, &bitmap, &receiver, abort.as_ref());
                let handle = s.spawn(move || -> Result<u64, FtsmError> {
                    if !pending {
                        return Ok(0);
                    }
                    let mut data = open_data(addr, creds, Mode::FtsmPull, opts, accept, index)?;
                    data.channel
                        .send_fields(FrameType::XFER_RESUME, &FieldMap::new().with(tags::xfer::BITMAP, bitmap.clone()))?;
                    let mut got = 0u64;
                    loop {
                        let frame = data.channel.recv()?;
                        match frame.frame_type {
                            FrameType::CHUNK => {
                                let len = frame.payload.len().saturating_sub(super::CHUNK_HEADER_LEN) as u64;
                                if abort.is_some_and(|a| !a.take(len)) {
                                    return Err(FtsmError::Aborted);
                                }
                                got += u64::from(receiver.apply(Some(index), &frame.payload)?);
                            }
                            FrameType::XFER_DONE => {
                                let reply = DoneReply::from_fields(&FieldMap::decode(&frame.payload)?)?;
                                if reply.per_stream.first().copied() != Some(got) {
                                    return Err(FtsmError::StreamLost(format!("stream {index}: byte count mismatch")));
                                }
                                return Ok(got);
                            }
                            FrameType::ERROR => {
                                let map = FieldMap::decode(&frame.payload)?;
                                return Err(crate::wire::remote_error(&map).into());
                            }
                            other => {
                                return Err(FtsmError::BadChunk(format!("unexpected {other} on data connection")));
                            }
                        }
                    }
                });
                (index, handle)
            })
            .collect();
        workers
            .into_iter()
            .map(|(i, h)| (i, h.join().unwrap_or_else(|_| Err(FtsmError::StreamLost("stream worker panicked".into())))))
            .collect::<Vec<_>>()
    });
    let per_stream = join_streams(results, accept.stream_count)?;

    control.channel.send_fields(FrameType::XFER_DONE, &FieldMap::new())?;
    let reply = DoneReply::from_fields(&control.channel.expect(FrameType::XFER_DONE).map_err(FtsmError::from_channel)?)?;
    let md5 = receiver.finish(reply.md5)?;
    Ok(Attempt { accept, per_stream, md5 })
}

/// Repeats memory-to-memory pushes of `round_bytes` until `seconds` have
/// elapsed (at least one round) and reports the aggregate.
pub fn bench_memory(
    addr: &str,
    creds: &Credentials,
    opts: &TransferOptions,
    seconds: f64,
    round_bytes: u64,
) -> Result<ThroughputReport, FtsmError> {
    let started = Instant::now();
    let mut per_stream = vec![0u64; opts.streams.max(1) as usize];
    loop {
        let run = push_memory(addr, creds, round_bytes, opts)?;
        if run.per_stream.len() > per_stream.len() {
            per_stream.resize(run.per_stream.len(), 0);
        }
        for (total, n) in per_stream.iter_mut().zip(&run.per_stream) {
            *total += n;
        }
        if started.elapsed().as_secs_f64() >= seconds {
            break;
        }
    }
    Ok(throughput_report(&per_stream, started.elapsed()))
}

/// Pushes a whole local file over an already authenticated connection; the
/// chunks ride that connection. `task_set` and `name` identify the staging
/// slot on the node. Returns the MD5 the node verified.
pub fn push_inline<S: Read + Write>(
    channel: &mut SecureChannel<S>,
    src: &Path,
    task_set: [u8; 16],
    name: &str,
) -> Result<[u8; 16], FtsmError> {
    let file = Arc::new(File::open(src)?);
    let size = file.metadata()?.len();
    let offer = Offer {
        direction: Direction::Push,
        path: name.to_string(),
        file_size: size,
        region: None,
        resume: false,
        memory: false,
        task_set: Some(task_set),
    };
    channel.send_fields(FrameType::XFER_OFFER, &offer.to_fields())?;
    let accept = Accept::from_fields(&channel.expect(FrameType::XFER_ACCEPT).map_err(FtsmError::from_channel)?)?;
    let plan = accept.plan();
    if accept.stream_count != 1 || accept.region_length != size {
        return Err(FtsmError::BadChunk("inline accept with unexpected grid".into()));
    }
    let chunks: Vec<_> = plan.chunks().collect();
    send_chunks(channel, &Source::File(file.clone()), accept.transfer_id, &chunks, None)?;
    let md5 = md5_region(&file, 0, size)?;
    channel.send_fields(FrameType::XFER_DONE, &FieldMap::new().with(tags::xfer::MD5, md5))?;
    DoneReply::from_fields(&channel.expect(FrameType::XFER_DONE).map_err(FtsmError::from_channel)?)?;
    Ok(md5)
}

/// Fetches a whole file from the node over an already authenticated
/// connection into the local `dst`. Returns the verified MD5.
pub fn pull_inline<S: Read + Write>(
    channel: &mut SecureChannel<S>,
    task_set: [u8; 16],
    name: &str,
    dst: &Path,
) -> Result<[u8; 16], FtsmError> {
    let offer = Offer {
        direction: Direction::Pull,
        path: name.to_string(),
        file_size: 0,
        region: None,
        resume: false,
        memory: false,
        task_set: Some(task_set),
    };
    channel.send_fields(FrameType::XFER_OFFER, &offer.to_fields())?;
    let accept = Accept::from_fields(&channel.expect(FrameType::XFER_ACCEPT).map_err(FtsmError::from_channel)?)?;
    let plan: TransferPlan = accept.plan();
    let (receiver, _) = open_file_receiver(dst, plan, accept.file_size, false)?;
    loop {
        let frame = channel.recv().map_err(FtsmError::from_channel)?;
        match frame.frame_type {
            FrameType::CHUNK => {
                receiver.apply(Some(0), &frame.payload)?;
            }
            FrameType::XFER_DONE => {
                let reply = DoneReply::from_fields(&FieldMap::decode(&frame.payload)?)?;
                return receiver.finish(reply.md5).map(|m| m.unwrap_or(super::EMPTY_MD5));
            }
            FrameType::ERROR => {
                let map = FieldMap::decode(&frame.payload)?;
                return Err(crate::wire::remote_error(&map).into());
            }
            other => return Err(FtsmError::BadChunk(format!("unexpected {other} during inline transfer"))),
        }
    }
}
