use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info};

use crate::perms::{Account, Decision, Gate, GuardedAction};
use crate::secchan::{SecError, SecureChannel};
use crate::wire::{tags, FieldMap, FrameType, Mode, SessionParams, Status, WireError};

use super::engine::{open_file_receiver, send_chunks, Receiver, Sink, Source};
use super::plan::{resolve_region, TransferPlan};
use super::state::{missing_for_stream, TransferState};
use super::{md5_region, new_transfer_id, Direction, FtsmError, TransferId};

/// How long a new offer waits for an old transfer on the same destination
/// to drain before answering `Busy`.
const DESTINATION_WAIT: Duration = Duration::from_secs(5);

/// A transfer request as it travels in `XFER_OFFER`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Offer {
    pub direction: Direction,
    pub path: String,
    /// Push: size of the source file. Pull in memory mode: bytes wanted.
    pub file_size: u64,
    pub region: Option<(u64, u64)>,
    pub resume: bool,
    pub memory: bool,
    pub task_set: Option<[u8; 16]>,
}

impl Offer {
    pub fn to_fields(&self) -> FieldMap {
        let mut map = FieldMap::new()
            .with_u8(tags::xfer::DIRECTION, self.direction as u8)
            .with_str(tags::xfer::PATH, &self.path)
            .with_u64(tags::xfer::FILE_SIZE, self.file_size)
            .with_u8(tags::xfer::RESUME, self.resume as u8)
            .with_u8(tags::xfer::MEMORY, self.memory as u8);
        if let Some((offset, length)) = self.region {
            map.insert(tags::xfer::REGION_OFFSET, offset.to_be_bytes());
            map.insert(tags::xfer::REGION_LENGTH, length.to_be_bytes());
        }
        if let Some(set) = self.task_set {
            map.insert(tags::xfer::TASK_SET, set);
        }
        map
    }

    pub fn from_fields(map: &FieldMap) -> Result<Self, WireError> {
        let direction = Direction::from_u8(map.require_u8(tags::xfer::DIRECTION)?).ok_or(WireError::BadField {
            tag: tags::xfer::DIRECTION,
            reason: "unknown direction",
        })?;
        let region = match (map.get_u64(tags::xfer::REGION_OFFSET)?, map.get_u64(tags::xfer::REGION_LENGTH)?) {
            (Some(o), Some(l)) => Some((o, l)),
            (None, None) => None,
            _ => {
                return Err(WireError::BadField {
                    tag: tags::xfer::REGION_LENGTH,
                    reason: "region needs both offset and length",
                })
            }
        };
        Ok(Offer {
            direction,
            path: map.get_str(tags::xfer::PATH)?.unwrap_or("").to_string(),
            file_size: map.get_u64(tags::xfer::FILE_SIZE)?.unwrap_or(0),
            region,
            resume: map.get_u8(tags::xfer::RESUME)?.unwrap_or(0) != 0,
            memory: map.get_u8(tags::xfer::MEMORY)?.unwrap_or(0) != 0,
            task_set: map.get_array(tags::xfer::TASK_SET)?,
        })
    }
}

/// The receiver's answer to an offer: the grid both sides will use.
#[derive(Clone, Debug)]
pub(crate) struct Accept {
    pub transfer_id: TransferId,
    pub file_size: u64,
    pub region_offset: u64,
    pub region_length: u64,
    pub chunk_size: u32,
    pub stream_count: u8,
    pub bitmap: Vec<u8>,
    pub resumed: bool,
}

impl Accept {
    fn new(plan: &TransferPlan, file_size: u64, bitmap: Vec<u8>, resumed: bool) -> Self {
        Accept {
            transfer_id: plan.transfer_id,
            file_size,
            region_offset: plan.region_offset,
            region_length: plan.region_length,
            chunk_size: plan.chunk_size,
            stream_count: plan.stream_count,
            bitmap,
            resumed,
        }
    }

    pub fn plan(&self) -> TransferPlan {
        TransferPlan::new(
            self.transfer_id,
            self.region_offset,
            self.region_length,
            self.stream_count,
            self.chunk_size,
        )
    }

    pub fn to_fields(&self) -> FieldMap {
        FieldMap::new()
            .with(tags::xfer::TRANSFER_ID, self.transfer_id)
            .with_u64(tags::xfer::FILE_SIZE, self.file_size)
            .with_u64(tags::xfer::REGION_OFFSET, self.region_offset)
            .with_u64(tags::xfer::REGION_LENGTH, self.region_length)
            .with_u32(tags::xfer::CHUNK_SIZE, self.chunk_size)
            .with_u8(tags::xfer::STREAM_COUNT, self.stream_count)
            .with(tags::xfer::BITMAP, self.bitmap.clone())
            .with_u8(tags::xfer::RESUME, self.resumed as u8)
    }

    pub fn from_fields(map: &FieldMap) -> Result<Self, FtsmError> {
        let accept = Accept {
            transfer_id: map.require_array(tags::xfer::TRANSFER_ID)?,
            file_size: map.require_u64(tags::xfer::FILE_SIZE)?,
            region_offset: map.require_u64(tags::xfer::REGION_OFFSET)?,
            region_length: map.require_u64(tags::xfer::REGION_LENGTH)?,
            chunk_size: map.require_u32(tags::xfer::CHUNK_SIZE)?,
            stream_count: map.require_u8(tags::xfer::STREAM_COUNT)?,
            bitmap: map.get(tags::xfer::BITMAP).unwrap_or_default().to_vec(),
            resumed: map.get_u8(tags::xfer::RESUME)?.unwrap_or(0) != 0,
        };
        if accept.chunk_size == 0 || accept.stream_count == 0 {
            return Err(FtsmError::BadChunk("accept with empty grid parameters".into()));
        }
        let plan = accept.plan();
        if !accept.bitmap.is_empty() {
            TransferState::new(plan, accept.file_size).set_bitmap(&accept.bitmap)?;
        }
        Ok(accept)
    }
}

/// `XFER_DONE` answer on a control or data connection.
#[derive(Clone, Debug, Default)]
pub(crate) struct DoneReply {
    pub md5: Option<[u8; 16]>,
    pub per_stream: Vec<u64>,
}

pub(crate) fn encode_counts(counts: &[u64]) -> Vec<u8> {
    counts.iter().flat_map(|c| c.to_be_bytes()).collect()
}

pub(crate) fn decode_counts(bytes: &[u8]) -> Vec<u64> {
    bytes.chunks_exact(8).map(|c| u64::from_be_bytes(c.try_into().unwrap())).collect()
}

impl DoneReply {
    fn ok_fields(&self) -> FieldMap {
        let mut map = FieldMap::new()
            .with_u16(tags::xfer::STATUS, Status::Ok as u16)
            .with(tags::xfer::BYTES, encode_counts(&self.per_stream));
        if let Some(md5) = self.md5 {
            map.insert(tags::xfer::MD5, md5);
        }
        map
    }

    fn error_fields(err: &FtsmError) -> FieldMap {
        FieldMap::new()
            .with_u16(tags::xfer::STATUS, err.status() as u16)
            .with_str(tags::xfer::MESSAGE, &err.to_string())
    }

    /// Parses a reply; a non-OK status becomes the matching error.
    pub fn from_fields(map: &FieldMap) -> Result<Self, FtsmError> {
        let status = Status::from_u16(map.get_u16(tags::xfer::STATUS)?.unwrap_or(0));
        if status != Status::Ok {
            let message = map.get_str(tags::xfer::MESSAGE)?.unwrap_or("").to_string();
            return Err(FtsmError::from_status(status, message));
        }
        Ok(DoneReply {
            md5: map.get_array(tags::xfer::MD5)?,
            per_stream: decode_counts(map.get(tags::xfer::BYTES).unwrap_or_default()),
        })
    }
}

enum Role {
    Receive(Arc<Receiver>),
    Send {
        source: Source,
        file_size: u64,
        sent: Vec<AtomicU64>,
    },
}

struct Active {
    owner: String,
    plan: TransferPlan,
    role: Role,
}

/// Node-side transfer service: control connections create transfers, data
/// connections attach to them by transfer id.
pub struct FtsmService {
    gate: Gate,
    active: Mutex<HashMap<TransferId, Arc<Active>>>,
    destinations: Mutex<HashMap<PathBuf, Weak<Receiver>>>,
}

struct Registration<'a> {
    service: &'a FtsmService,
    id: TransferId,
}

impl Drop for Registration<'_> {
    fn drop(&mut self) {
        self.service.active.lock().unwrap().remove(&self.id);
    }
}

fn channel_closed(e: &SecError) -> bool {
    e.is_disconnect()
}

impl FtsmService {
    pub fn new(gate: Gate) -> Self {
        FtsmService {
            gate,
            active: Mutex::new(HashMap::new()),
            destinations: Mutex::new(HashMap::new()),
        }
    }

    pub fn active_transfers(&self) -> usize {
        self.active.lock().unwrap().len()
    }

    /// Serves one connection in a transfer mode: a control connection when
    /// `attach` is empty, otherwise a data connection of that transfer.
    pub fn handle<S: Read + Write>(
        &self,
        channel: &mut SecureChannel<S>,
        account: &Account,
        params: &SessionParams,
        attach: Option<(TransferId, u8)>,
    ) -> Result<(), FtsmError> {
        match attach {
            None => self.control(channel, account, params),
            Some((id, index)) => self.data(channel, account, id, index),
        }
    }

    fn control<S: Read + Write>(
        &self,
        channel: &mut SecureChannel<S>,
        account: &Account,
        params: &SessionParams,
    ) -> Result<(), FtsmError> {
        loop {
            let fields = match channel.expect(FrameType::XFER_OFFER) {
                Ok(f) => f,
                Err(e) if channel_closed(&e) => return Ok(()),
                Err(e) => return Err(FtsmError::from_channel(e)),
            };
            let offer = match Offer::from_fields(&fields) {
                Ok(o) => o,
                Err(e) => {
                    channel.send_error(Status::BadRequest, &e.to_string())?;
                    continue;
                }
            };
            let (active, accept) = match self.start(account, params, &offer) {
                Ok(started) => started,
                Err(e) => {
                    debug!("offer for {:?} refused: {e}", offer.path);
                    channel.send_error(e.status(), &e.to_string())?;
                    continue;
                }
            };
            let id = accept.transfer_id;
            self.active.lock().unwrap().insert(id, active.clone());
            let _registration = Registration { service: self, id };
            channel.send_fields(FrameType::XFER_ACCEPT, &accept.to_fields())?;

            let done = match channel.expect(FrameType::XFER_DONE) {
                Ok(f) => f,
                Err(e) if channel_closed(&e) => {
                    info!("transfer {} abandoned by client; state kept", hex::encode(id));
                    return Ok(());
                }
                Err(e) => return Err(FtsmError::from_channel(e)),
            };
            let reply = match self.complete(&active, &done) {
                Ok(reply) => reply.ok_fields(),
                Err(e) => DoneReply::error_fields(&e),
            };
            channel.send_fields(FrameType::XFER_DONE, &reply)?;
        }
    }

    fn authorize(&self, account: &Account, offer: &Offer) -> Result<GuardedAction, FtsmError> {
        // A memory run touches no file but is still a transfer endpoint.
        let resource = if offer.memory { "." } else { offer.path.as_str() };
        let action = GuardedAction::file_io(resource);
        match self.gate.check(account, &action) {
            Decision::Allow => Ok(action),
            Decision::Deny(reason) => Err(FtsmError::PermissionDenied(reason)),
        }
    }

    fn start(&self, account: &Account, params: &SessionParams, offer: &Offer) -> Result<(Arc<Active>, Accept), FtsmError> {
        let expected = match params.mode {
            Mode::FtsmPush => Direction::Push,
            Mode::FtsmPull => Direction::Pull,
            other => return Err(FtsmError::Remote {
                status: Status::BadRequest,
                message: format!("transfer offer in {} session", other.name()),
            }),
        };
        if offer.direction != expected {
            return Err(FtsmError::Remote {
                status: Status::BadRequest,
                message: "offer direction differs from session mode".into(),
            });
        }
        if offer.task_set.is_some() {
            return Err(FtsmError::Remote {
                status: Status::BadRequest,
                message: "staging offers belong to task sessions".into(),
            });
        }
        let action = self.authorize(account, offer)?;
        let id = new_transfer_id();
        let started = match offer.direction {
            Direction::Push => self.start_receive(account, params, offer, id)?,
            Direction::Pull => self.start_send(account, params, offer, id)?,
        };
        self.gate.effect(account, &action);
        Ok(started)
    }

    fn start_receive(
        &self,
        account: &Account,
        params: &SessionParams,
        offer: &Offer,
        id: TransferId,
    ) -> Result<(Arc<Active>, Accept), FtsmError> {
        let (offset, length) = resolve_region(offer.file_size, offer.region)?;
        let plan = TransferPlan::new(id, offset, length, params.stream_count, params.buffer_size);
        let (receiver, resumed) = if offer.memory {
            let state = TransferState::new(plan.clone(), offer.file_size);
            (Receiver::new(Sink::Discard, state, None)?, false)
        } else {
            let dst = account
                .resolve(&offer.path)
                .ok_or_else(|| FtsmError::PermissionDenied("path outside sandbox".into()))?;
            self.wait_for_destination(&dst)?;
            open_file_receiver(&dst, plan.clone(), offer.file_size, offer.resume)?
        };
        let receiver = Arc::new(receiver);
        if !offer.memory {
            if let Some(dst) = account.resolve(&offer.path) {
                self.destinations.lock().unwrap().insert(dst, Arc::downgrade(&receiver));
            }
        }
        let accept = Accept::new(&plan, offer.file_size, receiver.bitmap(), resumed);
        let active = Active {
            owner: account.username.clone(),
            plan,
            role: Role::Receive(receiver),
        };
        Ok((Arc::new(active), accept))
    }

    /// A previous transfer to the same file may still have data connections
    /// draining after its client vanished; wait for them so two receivers
    /// never share a state file.
    fn wait_for_destination(&self, dst: &Path) -> Result<(), FtsmError> {
        let deadline = Instant::now() + DESTINATION_WAIT;
        loop {
            {
                let mut map = self.destinations.lock().unwrap();
                map.retain(|_, w| w.strong_count() > 0);
                if !map.contains_key(dst) {
                    return Ok(());
                }
            }
            if Instant::now() >= deadline {
                return Err(FtsmError::Remote {
                    status: Status::Busy,
                    message: "destination is in use by another transfer".into(),
                });
            }
            thread::sleep(Duration::from_millis(20));
        }
    }

    fn start_send(
        &self,
        account: &Account,
        params: &SessionParams,
        offer: &Offer,
        id: TransferId,
    ) -> Result<(Arc<Active>, Accept), FtsmError> {
        let (source, file_size) = if offer.memory {
            (Source::Zeros, offer.file_size)
        } else {
            let path = account
                .resolve(&offer.path)
                .ok_or_else(|| FtsmError::PermissionDenied("path outside sandbox".into()))?;
            let file = File::open(&path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => FtsmError::NoSuchFile,
                _ => e.into(),
            })?;
            let size = file.metadata()?.len();
            (Source::File(Arc::new(file)), size)
        };
        let (offset, length) = resolve_region(file_size, offer.region)?;
        let plan = TransferPlan::new(id, offset, length, params.stream_count, params.buffer_size);
        let accept = Accept::new(&plan, file_size, Vec::new(), false);
        let active = Active {
            owner: account.username.clone(),
            role: Role::Send {
                source,
                file_size,
                sent: (0..plan.stream_count).map(|_| AtomicU64::new(0)).collect(),
            },
            plan,
        };
        Ok((Arc::new(active), accept))
    }

    fn complete(&self, active: &Active, done: &FieldMap) -> Result<DoneReply, FtsmError> {
        match &active.role {
            Role::Receive(receiver) => {
                let expected = done.get_array::<16>(tags::xfer::MD5)?;
                let md5 = receiver.finish(expected)?;
                Ok(DoneReply {
                    md5,
                    per_stream: receiver.per_stream(),
                })
            }
            Role::Send { source, sent, file_size } => {
                let md5 = match source {
                    Source::File(f) => Some(md5_region(f, active.plan.region_offset, active.plan.region_length)?),
                    Source::Zeros => None,
                };
                debug_assert!(active.plan.region_end() <= *file_size);
                Ok(DoneReply {
                    md5,
                    per_stream: sent.iter().map(|c| c.load(Ordering::SeqCst)).collect(),
                })
            }
        }
    }

    fn data<S: Read + Write>(
        &self,
        channel: &mut SecureChannel<S>,
        account: &Account,
        id: TransferId,
        index: u8,
    ) -> Result<(), FtsmError> {
        let active = self
            .active
            .lock()
            .unwrap()
            .get(&id)
            .filter(|a| a.owner == account.username)
            .cloned();
        let active = match active {
            Some(a) if a.plan.span(index).is_some() => a,
            _ => {
                channel.send_error(Status::NoSuchTransfer, "no such transfer stream")?;
                return Ok(());
            }
        };
        match &active.role {
            Role::Receive(receiver) => loop {
                let frame = match channel.recv() {
                    Ok(f) => f,
                    Err(e) if channel_closed(&e) => return Ok(()),
                    Err(e) => return Err(FtsmError::from_channel(e)),
                };
                match frame.frame_type {
                    FrameType::CHUNK => {
                        if let Err(e) = receiver.apply(Some(index), &frame.payload) {
                            channel.send_error(e.status(), &e.to_string())?;
                            return Err(e);
                        }
                    }
                    FrameType::XFER_DONE => {
                        let count = receiver.per_stream().get(index as usize).copied().unwrap_or(0);
                        let reply = DoneReply {
                            md5: None,
                            per_stream: vec![count],
                        };
                        channel.send_fields(FrameType::XFER_DONE, &reply.ok_fields())?;
                        return Ok(());
                    }
                    other => {
                        channel.send_error(Status::BadRequest, "expected CHUNK or XFER_DONE")?;
                        return Err(FtsmError::Remote {
                            status: Status::BadRequest,
                            message: format!("unexpected {other} on data connection"),
                        });
                    }
                }
            },
            Role::Send { source, sent, .. } => {
                let request = channel.expect(FrameType::XFER_RESUME).map_err(FtsmError::from_channel)?;
                let bitmap = request.get(tags::xfer::BITMAP).unwrap_or_default();
                let chunks = missing_for_stream(&active.plan, bitmap, index);
                let n = send_chunks(channel, source, id, &chunks, None)?;
                sent[index as usize].fetch_add(n, Ordering::SeqCst);
                let reply = DoneReply {
                    md5: None,
                    per_stream: vec![n],
                };
                channel.send_fields(FrameType::XFER_DONE, &reply.ok_fields())?;
                Ok(())
            }
        }
    }
}

/// Receives a whole file pushed over an existing session's own connection
/// (no data connections, no extra authentication). The caller has parsed
/// the offer and authorized `dst`. Returns the verified MD5.
pub fn serve_inline_push<S: Read + Write>(
    channel: &mut SecureChannel<S>,
    offer: &Offer,
    dst: &Path,
    chunk_size: u32,
) -> Result<[u8; 16], FtsmError> {
    let plan = TransferPlan::new(new_transfer_id(), 0, offer.file_size, 1, chunk_size);
    let receiver = match open_file_receiver(dst, plan.clone(), offer.file_size, false) {
        Ok((receiver, _)) => receiver,
        Err(e) => {
            channel.send_error(e.status(), &e.to_string())?;
            return Err(e);
        }
    };
    channel.send_fields(
        FrameType::XFER_ACCEPT,
        &Accept::new(&plan, offer.file_size, receiver.bitmap(), false).to_fields(),
    )?;
    // A bad chunk is reported in the final reply; the rest of the stream is
    // drained so the connection stays usable.
    let mut failure = None;
    loop {
        let frame = channel.recv().map_err(FtsmError::from_channel)?;
        match frame.frame_type {
            FrameType::CHUNK => {
                if failure.is_none() {
                    failure = receiver.apply(Some(0), &frame.payload).err();
                }
            }
            FrameType::XFER_DONE => {
                let done = FieldMap::decode(&frame.payload)?;
                let result = match failure {
                    Some(e) => Err(e),
                    None => receiver.finish(done.get_array::<16>(tags::xfer::MD5)?),
                };
                let reply = match &result {
                    Ok(md5) => DoneReply {
                        md5: *md5,
                        per_stream: receiver.per_stream(),
                    }
                    .ok_fields(),
                    Err(e) => DoneReply::error_fields(e),
                };
                channel.send_fields(FrameType::XFER_DONE, &reply)?;
                return result.map(|m| m.unwrap_or(super::EMPTY_MD5));
            }
            other => {
                return Err(FtsmError::Remote {
                    status: Status::BadRequest,
                    message: format!("unexpected {other} during inline transfer"),
                })
            }
        }
    }
}

/// Sends a whole file over an existing session's connection in answer to an
/// inline pull offer the caller has already authorized.
pub fn serve_inline_pull<S: Read + Write>(
    channel: &mut SecureChannel<S>,
    src: &Path,
    chunk_size: u32,
) -> Result<[u8; 16], FtsmError> {
    let file = File::open(src).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => FtsmError::NoSuchFile,
        _ => e.into(),
    })?;
    let size = file.metadata()?.len();
    let plan = TransferPlan::new(new_transfer_id(), 0, size, 1, chunk_size);
    channel.send_fields(FrameType::XFER_ACCEPT, &Accept::new(&plan, size, Vec::new(), false).to_fields())?;
    let file = Arc::new(file);
    let chunks: Vec<_> = plan.chunks().collect();
    let n = send_chunks(channel, &Source::File(file.clone()), plan.transfer_id, &chunks, None)?;
    let md5 = md5_region(&file, 0, size)?;
    let reply = DoneReply {
        md5: Some(md5),
        per_stream: vec![n],
    };
    channel.send_fields(FrameType::XFER_DONE, &reply.ok_fields())?;
    Ok(md5)
}
