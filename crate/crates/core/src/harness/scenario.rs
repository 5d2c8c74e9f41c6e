use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};

use super::{Cluster, HarnessError, Record};
use crate::cryptengine::{self, CipherParams, CryptJob};
use crate::dfsm::DfsClient;
use crate::ftsm::{self, mbps, state_path, FtsmError, TransferOptions};
use crate::taskexec::{fan_out_pi, pi::pi_hex_digits};
use crate::wire::SecurityMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    Transfer,
    Crypt,
    Pi,
    Resume,
    All,
}

impl Scenario {
    pub fn parse(name: &str) -> Option<Scenario> {
        match name {
            "transfer" => Some(Scenario::Transfer),
            "crypt" => Some(Scenario::Crypt),
            "pi" => Some(Scenario::Pi),
            "resume" => Some(Scenario::Resume),
            "all" => Some(Scenario::All),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Transfer => "transfer",
            Scenario::Crypt => "crypt",
            Scenario::Pi => "pi",
            Scenario::Resume => "resume",
            Scenario::All => "all",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioOptions {
    pub repeats: u32,
    pub security: SecurityMode,
    pub transfer_bytes: u64,
    pub stream_counts: Vec<u8>,
    pub crypt_bytes: u64,
    pub block_size: u64,
    pub worker_counts: Vec<usize>,
    pub ciphers: Vec<String>,
    pub pi_digits: u64,
    pub seed: u64,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        ScenarioOptions {
            repeats: 3,
            security: SecurityMode::Secure,
            transfer_bytes: 16 << 20,
            stream_counts: vec![1, 2, 4, 8],
            crypt_bytes: 8 << 20,
            block_size: 1 << 20,
            worker_counts: vec![1, 2, 3],
            ciphers: vec!["aes128".into()],
            pi_digits: 1024,
            seed: 7,
        }
    }
}

/// Runs one scenario (or all of them) and returns its records. Any failed
/// record turns the result into [`HarnessError::ScenarioFailed`] carrying
/// every record produced.
pub fn run_scenario(cluster: &mut Cluster, scenario: Scenario, opts: &ScenarioOptions) -> Result<Vec<Record>, HarnessError> {
    let mut records = Vec::new();
    let list = match scenario {
        Scenario::All => vec![Scenario::Transfer, Scenario::Crypt, Scenario::Pi, Scenario::Resume],
        one => vec![one],
    };
    for s in list {
        match s {
            Scenario::Transfer => transfer(cluster, opts, &mut records)?,
            Scenario::Crypt => crypt(cluster, opts, &mut records)?,
            Scenario::Pi => pi(cluster, opts, &mut records),
            Scenario::Resume => resume(cluster, opts, &mut records)?,
            Scenario::All => unreachable!(),
        }
    }
    match records.iter().find(|r| !r.pass) {
        Some(bad) => Err(HarnessError::ScenarioFailed {
            scenario: bad.scenario.clone(),
            assertion: format!("{}: {}", bad.params, bad.detail),
            records,
        }),
        None => Ok(records),
    }
}

fn random_file(path: &Path, len: u64, seed: u64) -> std::io::Result<()> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut data = vec![0u8; len as usize];
    rng.fill_bytes(&mut data);
    fs::write(path, data)
}

/// Collects repeated runs into one record: mean time, throughput from the
/// formula over the mean, and the first failure if any.
struct Runs {
    seconds: Vec<f64>,
    failure: Option<String>,
    per_stream: Vec<u64>,
}

impl Runs {
    fn new() -> Self {
        Runs {
            seconds: Vec::new(),
            failure: None,
            per_stream: Vec::new(),
        }
    }

    fn fail(&mut self, why: impl Into<String>) {
        if self.failure.is_none() {
            self.failure = Some(why.into());
        }
    }

    fn record(self, scenario: &str, params: String, bytes: u64) -> Record {
        let n = self.seconds.len().max(1) as f64;
        let seconds = self.seconds.iter().sum::<f64>() / n;
        Record {
            scenario: scenario.into(),
            params,
            bytes,
            seconds,
            mbps: mbps(bytes, seconds),
            pass: self.failure.is_none() && !self.seconds.is_empty(),
            repeats: self.seconds.len() as u32,
            detail: self.failure.unwrap_or_default(),
            per_stream: self.per_stream,
        }
    }
}

fn transfer_target(cluster: &Cluster) -> String {
    cluster.workers().into_iter().next().unwrap_or_else(|| cluster.distributor().to_string())
}

fn transfer(cluster: &Cluster, opts: &ScenarioOptions, records: &mut Vec<Record>) -> Result<(), HarnessError> {
    let target = transfer_target(cluster);
    let source = cluster.scratch().join("transfer-source.bin");
    random_file(&source, opts.transfer_bytes, opts.seed)?;
    let want = ftsm::md5_file(&source)?;

    for memory in [true, false] {
        for &streams in &opts.stream_counts {
            let t = TransferOptions {
                security: opts.security,
                streams,
                ..TransferOptions::default()
            };
            let mut runs = Runs::new();
            for rep in 0..opts.repeats {
                let (per_stream, seconds) = if memory {
                    match ftsm::bench_memory(&target, &cluster.creds, &t, 0.0, opts.transfer_bytes) {
                        Ok(r) => {
                            if mbps(r.bytes, r.seconds) != r.mbps {
                                runs.fail("throughput does not follow bytes*8/(1e6*s)");
                            }
                            (r.per_stream, r.seconds)
                        }
                        Err(e) => {
                            runs.fail(e.to_string());
                            continue;
                        }
                    }
                } else {
                    let dst = format!("harness/transfer-s{streams}-r{rep}.bin");
                    let started = Instant::now();
                    match ftsm::push(&target, &cluster.creds, &source, &dst, &t) {
                        Ok(out) => {
                            if out.md5 != Some(want) {
                                runs.fail("destination MD5 differs from source");
                            }
                            (out.per_stream, started.elapsed().as_secs_f64())
                        }
                        Err(e) => {
                            runs.fail(e.to_string());
                            continue;
                        }
                    }
                };
                let moved: u64 = per_stream.iter().sum();
                if moved != opts.transfer_bytes {
                    runs.fail(format!("streams carried {moved} bytes, expected {}", opts.transfer_bytes));
                }
                runs.seconds.push(seconds);
                runs.per_stream = per_stream;
            }
            let params = format!("source={} streams={streams}", if memory { "mem" } else { "disk" });
            records.push(runs.record("transfer", params, opts.transfer_bytes));
        }
    }
    Ok(())
}

fn crypt(cluster: &Cluster, opts: &ScenarioOptions, records: &mut Vec<Record>) -> Result<(), HarnessError> {
    let source = cluster.scratch().join("crypt-source.bin");
    random_file(&source, opts.crypt_bytes, opts.seed + 1)?;
    let want = ftsm::md5_file(&source)?;
    let shared = "harness/crypt-source.bin";
    ftsm::push(
        cluster.distributor(),
        &cluster.creds,
        &source,
        shared,
        &TransferOptions {
            security: opts.security,
            ..TransferOptions::default()
        },
    )
    .map_err(|e| HarnessError::SpawnFailed(format!("cannot stage crypt source: {e}")))?;

    let available = cluster.workers();
    let expected_blocks = opts.crypt_bytes.div_ceil(opts.block_size).max(1) as usize;
    for cipher in &opts.ciphers {
        let (key, iv) = match cipher.as_str() {
            "tdes" => (vec![0x5a; 16], vec![0xa5; 8]),
            _ => (vec![0x5a; 16], vec![0xa5; 16]),
        };
        let params = match CipherParams::new(cipher, &key, &iv) {
            Ok(p) => p,
            Err(e) => {
                records.push(Runs::new().record("crypt", format!("cipher={cipher}"), 0));
                records.last_mut().unwrap().detail = e.to_string();
                continue;
            }
        };
        let oracle = cryptengine::encrypt_sequential(&source, &params, opts.block_size)
            .map_err(|e| HarnessError::SpawnFailed(format!("oracle failed: {e}")))?;
        for &count in &opts.worker_counts {
            if count == 0 || count > available.len() {
                continue;
            }
            let mut job = CryptJob::new(cluster.distributor(), shared, cluster.creds.clone(), params.clone(), available[..count].to_vec());
            job.block_size = opts.block_size;
            job.collector = cluster.collector();
            job.security = opts.security;
            let mut runs = Runs::new();
            for rep in 0..opts.repeats {
                let started = Instant::now();
                let map = match cryptengine::distribute(&job) {
                    Ok(m) => m,
                    Err(e) => {
                        runs.fail(e.to_string());
                        continue;
                    }
                };
                runs.seconds.push(started.elapsed().as_secs_f64());
                if map.blocks.len() != expected_blocks {
                    runs.fail(format!("{} blocks, expected {expected_blocks}", map.blocks.len()));
                }
                if let Err(e) = compare_blocks(&map, &oracle, cluster, opts.security) {
                    runs.fail(e);
                }
                let dest = cluster.scratch().join(format!("crypt-{cipher}-w{count}-r{rep}.out"));
                let t = TransferOptions {
                    security: opts.security,
                    ..TransferOptions::default()
                };
                match cryptengine::reassemble(&map, &params, &cluster.creds, &t, &dest) {
                    Ok(()) if ftsm::md5_file(&dest)? == want => {}
                    Ok(()) => runs.fail("reassembled file differs from source"),
                    Err(e) => runs.fail(format!("reassembly: {e}")),
                }
                let _ = fs::remove_file(&dest);
            }
            records.push(runs.record("crypt", format!("cipher={cipher} workers={count}"), opts.crypt_bytes));
        }
    }
    Ok(())
}

/// Block files on their holders must equal the sequential encryption.
fn compare_blocks(
    map: &cryptengine::PlacementMap,
    oracle: &[(u64, Vec<u8>)],
    cluster: &Cluster,
    security: SecurityMode,
) -> Result<(), String> {
    for placement in &map.blocks {
        let mut dfs = DfsClient::connect(&placement.holder, cluster.creds.clone(), security, 262144).map_err(|e| e.to_string())?;
        let bytes = dfs.read_to_end(&placement.block_file).map_err(|e| e.to_string())?;
        let expected = oracle
            .iter()
            .find(|(part, _)| *part == placement.part_num)
            .map(|(_, b)| b)
            .ok_or_else(|| format!("oracle has no block {}", placement.part_num))?;
        if &bytes != expected {
            return Err(format!("block {} differs from the sequential oracle", placement.part_num));
        }
    }
    Ok(())
}

fn pi(cluster: &Cluster, opts: &ScenarioOptions, records: &mut Vec<Record>) {
    let nodes: Vec<String> = cluster.nodes.iter().map(|n| n.addr.clone()).collect();
    let reference = pi_hex_digits(1, opts.pi_digits);
    let mut runs = Runs::new();
    for _ in 0..opts.repeats {
        let started = Instant::now();
        let spread = fan_out_pi(&nodes, &cluster.creds, opts.security, opts.pi_digits);
        runs.seconds.push(started.elapsed().as_secs_f64());
        let single = fan_out_pi(&nodes[..1], &cluster.creds, opts.security, opts.pi_digits);
        match (spread, single) {
            (Ok(a), Ok(b)) if a == b && a == reference => {}
            (Ok(_), Ok(_)) => runs.fail("digits differ between node counts"),
            (Err(e), _) | (_, Err(e)) => runs.fail(e.to_string()),
        }
    }
    records.push(runs.record("pi", format!("nodes={} digits={}", nodes.len(), opts.pi_digits), opts.pi_digits));
}

fn resume(cluster: &Cluster, opts: &ScenarioOptions, records: &mut Vec<Record>) -> Result<(), HarnessError> {
    let index = cluster.plan.workers().first().copied().unwrap_or(0);
    let target = cluster.addr(index).to_string();
    let source = cluster.scratch().join("resume-source.bin");
    random_file(&source, opts.transfer_bytes, opts.seed + 2)?;
    let want = ftsm::md5_file(&source)?;
    let mut runs = Runs::new();
    for rep in 0..opts.repeats {
        let dst = format!("harness/resume-r{rep}.bin");
        let on_disk = cluster.nodes[index].storage().join(&dst);
        let mut t = TransferOptions {
            security: opts.security,
            streams: 4,
            abort_after: Some(opts.transfer_bytes / 2),
            ..TransferOptions::default()
        };
        let started = Instant::now();
        match ftsm::push(&target, &cluster.creds, &source, &dst, &t) {
            Err(FtsmError::Aborted) => {}
            Ok(_) => runs.fail("interrupted transfer completed"),
            Err(e) => runs.fail(format!("interruption: {e}")),
        }
        if !state_path(&on_disk).exists() {
            runs.fail("no transfer state left after interruption");
        }
        t.abort_after = None;
        match ftsm::push(&target, &cluster.creds, &source, &dst, &t) {
            Ok(out) => {
                if !out.resumed {
                    runs.fail("second attempt did not resume");
                }
                if out.md5 != Some(want) {
                    runs.fail("resumed file MD5 differs");
                }
            }
            Err(e) => runs.fail(format!("resume: {e}")),
        }
        runs.seconds.push(started.elapsed().as_secs_f64());
        if state_path(&on_disk).exists() {
            runs.fail("transfer state left after success");
        }
    }
    records.push(runs.record("resume", "streams=4 cut=50%".into(), opts.transfer_bytes));
    Ok(())
}
