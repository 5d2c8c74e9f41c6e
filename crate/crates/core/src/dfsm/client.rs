use std::collections::{HashMap, HashSet};
use std::net::TcpStream;

use log::{debug, warn};

use crate::retry::RetryPolicy;
use crate::secchan::{connect, ClientSession, Credentials, SecError};
use crate::wire::{FrameType, Mode, SecurityMode, SessionParams};

use super::{resolve_seek, DfsError, DfsOp, DfsRequest, DfsResponse, FileStat, SeekOrigin, WHOLE_FILE};

/// Client for the file-system mode.
///
/// Requests carry absolute offsets, so a dropped connection is repaired by
/// reconnecting and resending. That is only safe while no locks are held:
/// locks die with the server session, so a disconnect with live locks is
/// reported as [`DfsError::ConnectionLost`] instead of retried.
pub struct DfsClient {
    addr: String,
    creds: Credentials,
    security: SecurityMode,
    buffer_size: u32,
    retry: RetryPolicy,
    session: Option<ClientSession<TcpStream>>,
    next_id: u64,
    held: HashSet<u64>,
    cursors: HashMap<String, u64>,
    reconnects: u32,
}

impl DfsClient {
    pub fn connect(addr: &str, creds: Credentials, security: SecurityMode, buffer_size: u32) -> Result<Self, DfsError> {
        let mut client = DfsClient {
            addr: addr.to_string(),
            creds,
            security,
            buffer_size,
            retry: RetryPolicy::default(),
            session: None,
            next_id: 0,
            held: HashSet::new(),
            cursors: HashMap::new(),
            reconnects: 0,
        };
        client.reconnect()?;
        client.reconnects = 0;
        Ok(client)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Negotiated parameters of the current connection.
    pub fn params(&self) -> Option<&SessionParams> {
        self.session.as_ref().map(|s| &s.params)
    }

    pub fn reconnects(&self) -> u32 {
        self.reconnects
    }

    pub fn held_locks(&self) -> usize {
        self.held.len()
    }

    fn reconnect(&mut self) -> Result<(), SecError> {
        self.session = None;
        let params = SessionParams::request(Mode::Dfsm, self.security, self.buffer_size, 1);
        let session = connect(self.addr.as_str(), &self.creds, params, None)?;
        self.buffer_size = session.params.buffer_size;
        self.session = Some(session);
        self.reconnects += 1;
        Ok(())
    }

    fn round_trip(&mut self, req: &DfsRequest) -> Result<DfsResponse, SecError> {
        let session = match self.session.as_mut() {
            Some(s) => s,
            None => return Err(SecError::Wire(crate::wire::WireError::Closed)),
        };
        session.channel.send_fields(FrameType::DFS_REQ, &req.to_fields())?;
        let fields = session.channel.expect(FrameType::DFS_RESP)?;
        let resp = DfsResponse::from_fields(&fields)?;
        if resp.request_id != req.request_id {
            return Err(SecError::Protocol(format!(
                "response id {} for request {}",
                resp.request_id, req.request_id
            )));
        }
        Ok(resp)
    }

    fn call(&mut self, mut req: DfsRequest) -> Result<DfsResponse, DfsError> {
        let mut attempt = 0;
        loop {
            self.next_id += 1;
            req.request_id = self.next_id;
            let err = match self.round_trip(&req) {
                Ok(resp) if resp.status == crate::wire::Status::Ok => return Ok(resp),
                Ok(resp) => return Err(DfsError::from_response(&resp)),
                Err(e) if e.is_disconnect() => e,
                Err(e) => return Err(e.into()),
            };
            self.session = None;
            if !self.held.is_empty() {
                warn!("connection lost with {} locks held", self.held.len());
                self.held.clear();
                return Err(DfsError::ConnectionLost);
            }
            loop {
                if attempt >= self.retry.retries {
                    return Err(err.into());
                }
                debug!("dfs reconnect attempt {} after {err}", attempt + 1);
                self.retry.sleep(attempt);
                attempt += 1;
                match self.reconnect() {
                    Ok(()) => break,
                    Err(e) if e.is_disconnect() => continue,
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }

    fn payload_budget(&self, path: &str) -> usize {
        (self.buffer_size as usize).saturating_sub(2 * path.len()).max(512)
    }

    pub fn stat(&mut self, path: &str) -> Result<FileStat, DfsError> {
        let resp = self.call(DfsRequest::new(DfsOp::Stat, path))?;
        resp.stat.ok_or_else(|| DfsError::BadRequest("stat reply without size".into()))
    }

    /// One read request: returns at most one buffer's worth.
    pub fn read_at(&mut self, path: &str, offset: u64, length: u64) -> Result<Vec<u8>, DfsError> {
        let mut req = DfsRequest::new(DfsOp::Read, path);
        req.offset = offset;
        req.length = length;
        Ok(self.call(req)?.data)
    }

    /// Reads `length` bytes or up to end of file, whichever comes first.
    pub fn read_range(&mut self, path: &str, offset: u64, length: u64) -> Result<Vec<u8>, DfsError> {
        let mut out = Vec::new();
        let mut pos = offset;
        while (out.len() as u64) < length {
            let want = (length - out.len() as u64).min(u64::from(self.buffer_size));
            let piece = self.read_at(path, pos, want)?;
            if piece.is_empty() {
                break;
            }
            pos += piece.len() as u64;
            out.extend_from_slice(&piece);
        }
        Ok(out)
    }

    pub fn read_to_end(&mut self, path: &str) -> Result<Vec<u8>, DfsError> {
        self.read_range(path, 0, WHOLE_FILE)
    }

    pub fn write_at(&mut self, path: &str, offset: u64, data: &[u8]) -> Result<(), DfsError> {
        let budget = self.payload_budget(path);
        let mut pos = offset;
        if data.is_empty() {
            // Still creates the file.
            let mut req = DfsRequest::new(DfsOp::Write, path);
            req.offset = offset;
            return self.call(req).map(drop);
        }
        for piece in data.chunks(budget) {
            let mut req = DfsRequest::new(DfsOp::Write, path);
            req.offset = pos;
            req.data = piece.to_vec();
            self.call(req)?;
            pos += piece.len() as u64;
        }
        Ok(())
    }

    pub fn flush(&mut self, path: &str) -> Result<(), DfsError> {
        self.call(DfsRequest::new(DfsOp::Flush, path)).map(drop)
    }

    pub fn set_length(&mut self, path: &str, length: u64) -> Result<(), DfsError> {
        let mut req = DfsRequest::new(DfsOp::SetLength, path);
        req.length = length;
        self.call(req).map(drop)
    }

    pub fn lock(&mut self, path: &str, offset: u64, length: u64) -> Result<u64, DfsError> {
        let mut req = DfsRequest::new(DfsOp::Lock, path);
        req.offset = offset;
        req.length = length;
        let id = self
            .call(req)?
            .lock_id
            .ok_or_else(|| DfsError::BadRequest("lock reply without id".into()))?;
        self.held.insert(id);
        Ok(id)
    }

    pub fn unlock(&mut self, path: &str, lock_id: u64) -> Result<(), DfsError> {
        let mut req = DfsRequest::new(DfsOp::Unlock, path);
        req.lock_id = Some(lock_id);
        self.call(req)?;
        self.held.remove(&lock_id);
        Ok(())
    }

    /// Moves this client's cursor for `path`. `End` asks the server for the
    /// current size; the result is an absolute offset for later requests.
    pub fn seek(&mut self, path: &str, origin: SeekOrigin, delta: i64) -> Result<u64, DfsError> {
        let current = self.position(path);
        let stat = match origin {
            SeekOrigin::End => {
                let mut req = DfsRequest::new(DfsOp::Seek, path);
                req.seek_origin = Some(origin);
                self.call(req)?.stat.unwrap_or_default()
            }
            _ => FileStat::default(),
        };
        let target = resolve_seek(origin, delta, current, &stat)?;
        self.cursors.insert(path.to_string(), target);
        Ok(target)
    }

    pub fn position(&self, path: &str) -> u64 {
        self.cursors.get(path).copied().unwrap_or(0)
    }

    /// Reads from the cursor and advances it.
    pub fn read(&mut self, path: &str, length: u64) -> Result<Vec<u8>, DfsError> {
        let pos = self.position(path);
        let data = self.read_range(path, pos, length)?;
        self.cursors.insert(path.to_string(), pos + data.len() as u64);
        Ok(data)
    }

    /// Writes at the cursor and advances it.
    pub fn write(&mut self, path: &str, data: &[u8]) -> Result<(), DfsError> {
        let pos = self.position(path);
        self.write_at(path, pos, data)?;
        self.cursors.insert(path.to_string(), pos + data.len() as u64);
        Ok(())
    }

    /// Ends the session. The server drops every lock this client holds.
    pub fn close(mut self) -> Result<(), DfsError> {
        if self.session.is_some() {
            let mut req = DfsRequest::new(DfsOp::Close, "");
            self.next_id += 1;
            req.request_id = self.next_id;
            self.round_trip(&req)?;
        }
        self.held.clear();
        Ok(())
    }
}
