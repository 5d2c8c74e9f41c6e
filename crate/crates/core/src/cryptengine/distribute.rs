use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Read;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::thread;

use log::{info, warn};

use crate::dfsm::DfsClient;
use crate::ftsm::{self, TransferOptions};
use crate::secchan::{self, Credentials};
use crate::wire::{decode_list, encode_list, tags, FieldMap, FrameType, Mode, SecurityMode, SessionParams};

use super::block::{decode_block_header, encrypt_block, plan_blocks, BlockDecryptor, BlockPlan, HEADER_LEN};
use super::cipher::CipherParams;
use super::task::{CryptDirection, CryptTask, Location};
use super::worker::Completion;
use super::CryptError;

/// Where one encrypted block lives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    pub part_num: u64,
    /// Node address holding the block file.
    pub holder: String,
    /// Block file path in the holder's store.
    pub block_file: String,
    /// Ciphertext length.
    pub length: u64,
    /// Plaintext digest.
    pub md5: [u8; 16],
}

/// The decryption manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacementMap {
    pub name: String,
    pub file_size: u64,
    pub block_size: u64,
    pub cipher: u8,
    pub blocks: Vec<Placement>,
}

mod tag {
    pub const NAME: u8 = 1;
    pub const FILE_SIZE: u8 = 2;
    pub const BLOCK_SIZE: u8 = 3;
    pub const CIPHER: u8 = 4;
    pub const BLOCKS: u8 = 5;

    pub const PART_NUM: u8 = 1;
    pub const HOLDER: u8 = 2;
    pub const BLOCK_FILE: u8 = 3;
    pub const LENGTH: u8 = 4;
    pub const MD5: u8 = 5;
}

impl PlacementMap {
    pub fn plan(&self) -> BlockPlan {
        plan_blocks(self.file_size, self.block_size)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blocks: Vec<Vec<u8>> = self
            .blocks
            .iter()
            .map(|b| {
                FieldMap::new()
                    .with_u64(tag::PART_NUM, b.part_num)
                    .with_str(tag::HOLDER, &b.holder)
                    .with_str(tag::BLOCK_FILE, &b.block_file)
                    .with_u64(tag::LENGTH, b.length)
                    .with(tag::MD5, b.md5)
                    .encode()
            })
            .collect();
        FieldMap::new()
            .with_str(tag::NAME, &self.name)
            .with_u64(tag::FILE_SIZE, self.file_size)
            .with_u64(tag::BLOCK_SIZE, self.block_size)
            .with_u8(tag::CIPHER, self.cipher)
            .with(tag::BLOCKS, encode_list(&blocks))
            .encode()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptError> {
        let corrupt = |e: crate::wire::WireError| CryptError::ManifestCorrupt(e.to_string());
        let map = FieldMap::decode(bytes).map_err(corrupt)?;
        let blocks = decode_list(map.require(tag::BLOCKS).map_err(corrupt)?)
            .map_err(corrupt)?
            .iter()
            .map(|b| {
                let m = FieldMap::decode(b)?;
                Ok(Placement {
                    part_num: m.require_u64(tag::PART_NUM)?,
                    holder: m.require_str(tag::HOLDER)?.to_string(),
                    block_file: m.require_str(tag::BLOCK_FILE)?.to_string(),
                    length: m.require_u64(tag::LENGTH)?,
                    md5: m.require_array(tag::MD5)?,
                })
            })
            .collect::<Result<Vec<_>, crate::wire::WireError>>()
            .map_err(corrupt)?;
        let block_size = map.require_u64(tag::BLOCK_SIZE).map_err(corrupt)?;
        if block_size == 0 {
            return Err(CryptError::ManifestCorrupt("zero block size".into()));
        }
        Ok(PlacementMap {
            name: map.require_str(tag::NAME).map_err(corrupt)?.to_string(),
            file_size: map.require_u64(tag::FILE_SIZE).map_err(corrupt)?,
            block_size,
            cipher: map.require_u8(tag::CIPHER).map_err(corrupt)?,
            blocks,
        })
    }

    /// Blocks per holder, for reporting.
    pub fn per_holder(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for b in &self.blocks {
            *out.entry(b.holder.as_str()).or_default() += 1;
        }
        out
    }

    /// Every planned part exactly once, or the first one that is not.
    fn check_complete(&self) -> Result<(), CryptError> {
        let plan = self.plan();
        let mut seen = vec![false; plan.len()];
        for b in &self.blocks {
            match seen.get_mut(b.part_num as usize) {
                Some(s) if !*s => *s = true,
                _ => return Err(CryptError::ManifestCorrupt(format!("part {} listed twice or out of range", b.part_num))),
            }
        }
        match seen.iter().position(|s| !s) {
            Some(missing) => Err(CryptError::MissingBlock(missing as u64)),
            None => Ok(()),
        }
    }
}

/// A file on the distributor node to encrypt across workers.
#[derive(Clone, Debug)]
pub struct CryptJob {
    /// Node whose file-system service shares the file.
    pub distributor: String,
    /// Path of the file in the distributor's store.
    pub file: String,
    pub creds: Credentials,
    pub params: CipherParams,
    pub block_size: u64,
    pub workers: Vec<String>,
    /// Node that gathers all blocks; when absent each worker keeps its own.
    pub collector: Option<String>,
    /// Directory for block files in the holder's store.
    pub block_dir: String,
    pub security: SecurityMode,
    pub buffer_size: u32,
}

impl CryptJob {
    pub fn new(distributor: &str, file: &str, creds: Credentials, params: CipherParams, workers: Vec<String>) -> Self {
        CryptJob {
            distributor: distributor.to_string(),
            file: file.to_string(),
            creds,
            params,
            block_size: super::DEFAULT_BLOCK_SIZE,
            workers,
            collector: None,
            block_dir: "blocks".into(),
            security: SecurityMode::Secure,
            buffer_size: 65536,
        }
    }

    fn basename(&self) -> &str {
        self.file.rsplit('/').next().unwrap_or(&self.file)
    }

    pub fn block_file(&self, part: u64) -> String {
        let name = format!("{}.blk{part}", self.basename());
        if self.block_dir.is_empty() {
            name
        } else {
            format!("{}/{name}", self.block_dir.trim_end_matches('/'))
        }
    }

    pub fn manifest_path(&self) -> String {
        format!("{}.manifest", self.file)
    }

    fn task(&self, part: u64, offset: u64, length: u64) -> CryptTask {
        let destination = match &self.collector {
            Some(addr) => Location::Remote {
                addr: addr.clone(),
                path: self.block_file(part),
            },
            None => Location::Local(self.block_file(part)),
        };
        CryptTask {
            params: self.params.clone(),
            direction: CryptDirection::Encrypt,
            source: Location::Remote {
                addr: self.distributor.clone(),
                path: self.file.clone(),
            },
            destination,
            offset,
            length,
            part_num: part,
            username: self.creds.username.clone(),
            psk: self.creds.psk.clone(),
            security: self.security,
            buffer_size: self.buffer_size,
        }
    }
}

/// One connection to a worker's crypt service.
pub struct WorkerLink {
    session: secchan::ClientSession<std::net::TcpStream>,
}

impl WorkerLink {
    pub fn connect(addr: &str, creds: &Credentials, security: SecurityMode, buffer_size: u32) -> Result<Self, CryptError> {
        let params = SessionParams::request(Mode::Crypt, security, buffer_size, 1);
        Ok(WorkerLink {
            session: secchan::connect(addr, creds, params, None)?,
        })
    }

    pub fn run(&mut self, task: &CryptTask) -> Result<Completion, CryptError> {
        let channel = &mut self.session.channel;
        channel.send_fields(FrameType::CRYPT_TASK, &FieldMap::new().with_map(tags::crypt::TASK, &task.to_fields()))?;
        Ok(Completion::from_fields(&channel.expect(FrameType::CRYPT_TASK)?)?)
    }
}

struct Board {
    /// Round-robin assignment per worker.
    queues: Vec<VecDeque<u64>>,
    /// Blocks from failed workers, open to anyone.
    orphans: VecDeque<u64>,
    in_flight: usize,
    placed: BTreeMap<u64, Placement>,
    failures: Vec<String>,
}

impl Board {
    fn take(&mut self, worker: usize) -> Option<u64> {
        self.queues[worker].pop_front().or_else(|| self.orphans.pop_front())
    }
}

/// Encrypts the job's file across its workers and writes the manifest
/// beside the source. Blocks of a worker that fails go to the others.
pub fn distribute(job: &CryptJob) -> Result<PlacementMap, CryptError> {
    if job.workers.is_empty() {
        return Err(CryptError::NoWorkers);
    }
    if job.block_size == 0 {
        return Err(CryptError::BadParams("block size must be positive".into()));
    }
    let mut dfs = DfsClient::connect(&job.distributor, job.creds.clone(), job.security, job.buffer_size)?;
    let stat = dfs.stat(&job.file)?;
    if !stat.exists {
        return Err(CryptError::Dfs(crate::dfsm::DfsError::NoSuchFile));
    }
    let plan = plan_blocks(stat.size, job.block_size);
    let w = job.workers.len();
    let mut queues = vec![VecDeque::new(); w];
    for b in &plan.blocks {
        queues[(b.part_num % w as u64) as usize].push_back(b.part_num);
    }
    let board = Mutex::new(Board {
        queues,
        orphans: VecDeque::new(),
        in_flight: 0,
        placed: BTreeMap::new(),
        failures: Vec::new(),
    });
    let changed = Condvar::new();

    thread::scope(|s| {
        for (index, addr) in job.workers.iter().enumerate() {
            let (board, changed, plan) = (&board, &changed, &plan);
            s.spawn(move || run_worker(job, index, addr, plan, board, changed));
        }
    });

    let board = board.into_inner().unwrap();
    if board.placed.len() != plan.len() {
        let missing = plan.len() - board.placed.len();
        return Err(CryptError::WorkerFailed(format!(
            "{missing} blocks unplaced; {}",
            board.failures.join("; ")
        )));
    }
    let map = PlacementMap {
        name: job.basename().to_string(),
        file_size: stat.size,
        block_size: job.block_size,
        cipher: job.params.cipher_id(),
        blocks: board.placed.into_values().collect(),
    };
    let bytes = map.to_bytes();
    let manifest = job.manifest_path();
    dfs.write_at(&manifest, 0, &bytes)?;
    dfs.set_length(&manifest, bytes.len() as u64)?;
    dfs.flush(&manifest)?;
    info!("{}: {} blocks placed {:?}", job.file, map.blocks.len(), map.per_holder());
    Ok(map)
}

fn run_worker(job: &CryptJob, index: usize, addr: &str, plan: &BlockPlan, board: &Mutex<Board>, changed: &Condvar) {
    let fail = |reason: String, current: Option<u64>| {
        warn!("worker {addr} failed: {reason}");
        let mut b = board.lock().unwrap();
        if let Some(part) = current {
            b.in_flight -= 1;
            b.orphans.push_back(part);
        }
        let rest: Vec<u64> = b.queues[index].drain(..).collect();
        b.orphans.extend(rest);
        b.failures.push(format!("{addr}: {reason}"));
        changed.notify_all();
    };
    let mut link = match WorkerLink::connect(addr, &job.creds, job.security, job.buffer_size) {
        Ok(l) => l,
        Err(e) => return fail(e.to_string(), None),
    };
    loop {
        let part = {
            let mut b = board.lock().unwrap();
            loop {
                if let Some(p) = b.take(index) {
                    b.in_flight += 1;
                    break p;
                }
                // Another worker may still fail and leave orphans behind.
                if b.in_flight == 0 {
                    return;
                }
                b = changed.wait(b).unwrap();
            }
        };
        let desc = plan.blocks[part as usize];
        let task = job.task(part, desc.offset, desc.plain_length);
        match link.run(&task) {
            Ok(done) if done.part_num == part => {
                let holder = job.collector.clone().unwrap_or_else(|| addr.to_string());
                let mut b = board.lock().unwrap();
                b.in_flight -= 1;
                b.placed.insert(
                    part,
                    Placement {
                        part_num: part,
                        holder,
                        block_file: done.file,
                        length: done.length,
                        md5: done.md5,
                    },
                );
                changed.notify_all();
            }
            Ok(done) => return fail(format!("answered part {} for part {part}", done.part_num), Some(part)),
            Err(e) => return fail(e.to_string(), Some(part)),
        }
    }
}

/// Reads the manifest from the distributor's store.
pub fn load_manifest(distributor: &str, path: &str, creds: &Credentials, security: SecurityMode) -> Result<PlacementMap, CryptError> {
    let mut dfs = DfsClient::connect(distributor, creds.clone(), security, 65536)?;
    PlacementMap::from_bytes(&dfs.read_to_end(path)?)
}

fn partial_path(dest: &Path) -> PathBuf {
    let mut name = dest.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    dest.with_file_name(name)
}

/// Fetches every block, decrypts and verifies it, and writes the original
/// file to `dest`. Nothing is left at `dest` unless every block checks out.
pub fn reassemble(
    map: &PlacementMap,
    params: &CipherParams,
    creds: &Credentials,
    opts: &TransferOptions,
    dest: &Path,
) -> Result<(), CryptError> {
    if params.cipher_id() != map.cipher {
        return Err(CryptError::BadParams("cipher differs from the manifest".into()));
    }
    map.check_complete()?;
    let partial = partial_path(dest);
    let result = (|| {
        let out = OpenOptions::new().write(true).create(true).truncate(true).open(&partial)?;
        out.set_len(map.file_size)?;
        let plan = map.plan();
        for b in &map.blocks {
            let desc = plan.blocks[b.part_num as usize];
            let mut name = dest.file_name().unwrap_or_default().to_os_string();
            name.push(format!(".blk{}.fetch", b.part_num));
            let local = dest.with_file_name(name);
            let fetched = ftsm::pull(&b.holder, creds, &b.block_file, &local, opts).map_err(|e| match e {
                ftsm::FtsmError::NoSuchFile => CryptError::MissingBlock(b.part_num),
                ftsm::FtsmError::Remote { status: crate::wire::Status::NoSuchFile, .. } => CryptError::MissingBlock(b.part_num),
                other => CryptError::Ftsm(other),
            });
            let decoded = fetched.and_then(|_| decrypt_file_block(&local, b, desc.offset, desc.plain_length, params, &out, opts.buffer_size as usize));
            let _ = std::fs::remove_file(&local);
            let _ = std::fs::remove_file(ftsm::state_path(&local));
            decoded?;
        }
        out.sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            std::fs::rename(&partial, dest)?;
            Ok(())
        }
        Err(e) => {
            let _ = std::fs::remove_file(&partial);
            Err(e)
        }
    }
}

fn decrypt_file_block(
    path: &Path,
    placement: &Placement,
    offset: u64,
    plain_length: u64,
    params: &CipherParams,
    out: &File,
    piece: usize,
) -> Result<(), CryptError> {
    let part = Some(placement.part_num);
    let mut file = File::open(path)?;
    let mut head = [0u8; HEADER_LEN];
    file.read_exact(&mut head).map_err(|_| CryptError::IntegrityMismatch(part))?;
    let header = decode_block_header(&head)?;
    if header.part_num != placement.part_num || header.md5 != placement.md5 || header.length != placement.length {
        return Err(CryptError::IntegrityMismatch(part));
    }
    let mut dec = BlockDecryptor::new(params, header);
    let mut buf = vec![0u8; piece.max(4096)];
    let mut plain = Vec::with_capacity(buf.len() + 32);
    let mut pos = offset;
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        plain.clear();
        dec.update(&buf[..n], &mut plain);
        out.write_all_at(&plain, pos)?;
        pos += plain.len() as u64;
    }
    plain.clear();
    dec.finish(&mut plain)?;
    out.write_all_at(&plain, pos)?;
    pos += plain.len() as u64;
    if pos - offset != plain_length {
        return Err(CryptError::IntegrityMismatch(part));
    }
    Ok(())
}

/// Single-process reference: every block of a local file, encrypted in
/// memory with the one-shot cipher path.
pub fn encrypt_sequential(path: &Path, params: &CipherParams, block_size: u64) -> Result<Vec<(u64, Vec<u8>)>, CryptError> {
    let file = File::open(path)?;
    let plan = plan_blocks(file.metadata()?.len(), block_size);
    plan.blocks
        .iter()
        .map(|b| {
            let mut data = vec![0u8; b.plain_length as usize];
            file.read_exact_at(&mut data, b.offset)?;
            Ok((b.part_num, encrypt_block(&data, params, b.part_num)))
        })
        .collect()
}
