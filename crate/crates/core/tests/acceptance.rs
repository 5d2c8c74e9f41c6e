//! One line per acceptance criterion; exits non-zero if any fails.

mod common;

use std::fs;
use std::io::Cursor;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};

use common::proxy::{Conn, Recorder};
use common::{md5, md5_path, others_with, random_bytes, TestNode, SAMPLE_PERMISSIONS};
use gridfs::cryptengine::{
    decode_block_header, distribute, encode_block_header, encrypt_sequential, reassemble, BlockHeader, CipherParams,
    CryptError, CryptJob, HEADER_LEN,
};
use gridfs::dfsm::{DfsClient, DfsError};
use gridfs::ftsm::{self, mbps, state_path, FtsmError, TransferOptions};
use gridfs::harness::{plan, run_scenario, Cluster, Scenario, ScenarioOptions, Shape};
use gridfs::perms::{check, parse_permissions, AccountType, ActionKind, GuardedAction, PermissionDoc, PermissionFlag};
use gridfs::retry::RetryPolicy;
use gridfs::secchan::{compute_proof, Credentials};
use gridfs::taskexec::pi::pi_hex_digits;
use gridfs::taskexec::{fan_out_pi, TaskClient, TaskError, TaskSpec};
use gridfs::wire::{decode_frame, encode_frame, read_frame, FieldMap, Frame, FrameType, Hello, SecurityMode, Welcome};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("wire codec", wire_codec),
        ("ftsm matrix", ftsm_matrix),
        ("resume", resume),
        ("partial transfer", partial_transfer),
        ("dfsm", dfsm),
        ("security transcript", security_transcript),
        ("permissions", permissions),
        ("cryptengine", cryptengine),
        ("block header", block_header),
        ("pi demo", pi_demo),
        ("harness throughput", harness_throughput),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, run) in criteria {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({took:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({took:.1}s): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn wire_codec() -> Outcome {
    const MAX: u32 = 1 << 16;
    let started = Instant::now();
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    for i in 0..10_000 {
        let mut payload = vec![0u8; rng.gen_range(0..2048)];
        rng.fill_bytes(&mut payload);
        let frame = Frame {
            frame_type: FrameType(rng.gen()),
            flags: rng.gen(),
            payload,
        };
        let bytes = encode_frame(&frame, MAX).map_err(|e| e.to_string())?;
        let (back, rest) = decode_frame(&bytes, MAX).map_err(|e| format!("frame {i}: {e}"))?;
        ensure!(back == frame && rest.is_empty(), "frame {i} did not round-trip");
    }
    let seed = encode_frame(&Frame::new(FrameType::HELLO, FieldMap::new().with_u16(1, 1).encode()), MAX).unwrap();
    for _ in 0..100_000 {
        let mut input = if rng.gen_bool(0.5) {
            seed.clone()
        } else {
            let mut v = vec![0u8; rng.gen_range(0..48)];
            rng.fill_bytes(&mut v);
            v
        };
        if !input.is_empty() {
            let i = rng.gen_range(0..input.len());
            input[i] = rng.gen();
        }
        if let Ok((f, _)) = decode_frame(&input, MAX) {
            if let Ok(m) = FieldMap::decode(&f.payload) {
                let _ = Hello::from_fields(&m);
            }
        }
        let _ = read_frame(&mut Cursor::new(&input), MAX);
    }
    let took = started.elapsed();
    ensure!(took < Duration::from_secs(30), "took {took:?}");
    Ok(format!("10000 round-trips, 100000 fuzz inputs in {took:.1?}"))
}

fn ftsm_matrix() -> Outcome {
    let node = TestNode::start();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("big.bin");
    let data = random_bytes(64 << 20, 64);
    fs::write(&src, &data).unwrap();
    let want = md5(&data);
    drop(data);
    let mut slowest = Duration::ZERO;
    for security in [SecurityMode::NonSecure, SecurityMode::Secure, SecurityMode::SemiSecure] {
        for streams in [1u8, 2, 4, 8] {
            let opts = TransferOptions {
                security,
                streams,
                ..TransferOptions::default()
            };
            let started = Instant::now();
            ftsm::push(&node.addr(), &node.admin, &src, "m.bin", &opts).map_err(|e| format!("{security:?}x{streams}: {e}"))?;
            let took = started.elapsed();
            let landed = node.storage().join("m.bin");
            ensure!(md5_path(&landed) == want, "{security:?}x{streams}: md5 differs");
            ensure!(took < Duration::from_secs(30), "{security:?}x{streams} took {took:?}");
            slowest = slowest.max(took);
            fs::remove_file(landed).unwrap();
        }
    }
    Ok(format!("12 cells of 64 MiB match, slowest {slowest:.1?}"))
}

fn resume() -> Outcome {
    let node = TestNode::start();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("r.bin");
    let total = 16u64 << 20;
    let data = random_bytes(total as usize, 2);
    fs::write(&src, &data).unwrap();
    let landed = node.storage().join("r.bin");
    let mut opts = TransferOptions {
        streams: 4,
        abort_after: Some(total / 2),
        ..TransferOptions::default()
    };
    match ftsm::push(&node.addr(), &node.admin, &src, "r.bin", &opts) {
        Err(FtsmError::Aborted) => {}
        other => return Err(format!("cut transfer returned {other:?}")),
    }
    ensure!(state_path(&landed).exists(), "no state after the cut");
    opts.abort_after = None;
    let out = ftsm::push(&node.addr(), &node.admin, &src, "r.bin", &opts).map_err(|e| e.to_string())?;
    ensure!(out.resumed, "did not resume");
    ensure!(md5_path(&landed) == md5(&data), "md5 differs");
    ensure!(!state_path(&landed).exists(), "state left behind");
    Ok(format!("resumed after 50%, resent {} of {total} bytes", out.bytes()))
}

fn partial_transfer() -> Outcome {
    let node = TestNode::start();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("s.bin");
    fs::write(&src, b"0123456789ABCDEF").unwrap();
    let opts = TransferOptions {
        region: Some((10, 5)),
        ..TransferOptions::default()
    };
    ftsm::push(&node.addr(), &node.admin, &src, "p.bin", &opts).map_err(|e| e.to_string())?;
    let landed = fs::read(node.storage().join("p.bin")).unwrap();
    ensure!(landed.get(10..15) == Some(&b"ABCDE"[..]), "landed {landed:?}");
    Ok("bytes 10..15 = ABCDE".into())
}

fn dfsm() -> Outcome {
    let mut node = TestNode::start();
    let mut rng = rand::rngs::StdRng::seed_from_u64(5);
    let span = 32 * 1024u64;
    let plans: Vec<Vec<(u64, Vec<u8>)>> = (0..4)
        .map(|i| {
            (0..30)
                .map(|_| {
                    let len = rng.gen_range(1..2048u64);
                    let off = i * span + rng.gen_range(0..span - len);
                    let mut d = vec![0u8; len as usize];
                    rng.fill_bytes(&mut d);
                    (off, d)
                })
                .collect()
        })
        .collect();
    let mut oracle = Vec::new();
    for (off, d) in plans.iter().flatten() {
        let end = *off as usize + d.len();
        if oracle.len() < end {
            oracle.resize(end, 0);
        }
        oracle[*off as usize..end].copy_from_slice(d);
    }
    let barrier = Arc::new(Barrier::new(4));
    thread::scope(|s| {
        for plan in &plans {
            let (barrier, node) = (barrier.clone(), &node);
            s.spawn(move || {
                let mut c = DfsClient::connect(&node.addr(), node.admin.clone(), SecurityMode::Secure, 65536).unwrap();
                barrier.wait();
                for (off, d) in plan {
                    let id = c.lock("o.bin", *off, d.len() as u64).unwrap();
                    c.write_at("o.bin", *off, d).unwrap();
                    c.unlock("o.bin", id).unwrap();
                }
            });
        }
    });
    ensure!(fs::read(node.storage().join("o.bin")).unwrap() == oracle, "4-session file differs from oracle");

    let mut a = DfsClient::connect(&node.addr(), node.admin.clone(), SecurityMode::Secure, 65536).unwrap();
    let mut b = DfsClient::connect(&node.addr(), node.admin.clone(), SecurityMode::Secure, 65536).unwrap();
    a.lock("o.bin", 100, 100).unwrap();
    let trials = 200;
    for _ in 0..trials {
        let off = rng.gen_range(0..200u64);
        let len = if off < 100 { 101 - off + rng.gen_range(0..50) } else { rng.gen_range(1..50) };
        ensure!(matches!(b.lock("o.bin", off, len), Err(DfsError::LockConflict)), "[{off}+{len}) not refused");
    }
    drop((a, b));

    let addr = node.addr();
    let creds = node.admin.clone();
    let (tx, rx) = std::sync::mpsc::channel();
    let writer = thread::spawn(move || {
        let mut c = DfsClient::connect(&addr, creds, SecurityMode::Secure, 65536).unwrap().with_retry(RetryPolicy {
            retries: 8,
            initial_delay: Duration::from_millis(25),
        });
        for i in 0..100u64 {
            if i == 50 {
                tx.send(()).unwrap();
                thread::sleep(Duration::from_millis(150));
            }
            c.write_at("restart.bin", i * 8, &i.to_be_bytes()).unwrap();
        }
    });
    rx.recv().unwrap();
    node.restart();
    writer.join().map_err(|_| "writer failed across restart".to_string())?;
    let want: Vec<u8> = (0..100u64).flat_map(|i| i.to_be_bytes()).collect();
    ensure!(fs::read(node.storage().join("restart.bin")).unwrap() == want, "restart file differs");
    Ok(format!("oracle match, {trials}/{trials} conflicts, restart converged"))
}

fn security_transcript() -> Outcome {
    const PATH: &str = "secret-area/acceptance-path-marker.txt";
    let mut summary = Vec::new();
    for mode in [SecurityMode::NonSecure, SecurityMode::SemiSecure, SecurityMode::Secure] {
        let node = TestNode::start();
        let creds = node.add_user(
            "acceptance-auditor",
            &others_with(&[PermissionFlag::FileIOPermission, PermissionFlag::Execution]),
        );
        let file = random_bytes(128 * 1024, 3);
        let rec = Recorder::start(node.addr());
        let mut dfs = DfsClient::connect(&rec.addr, creds.clone(), mode, 65536).unwrap();
        dfs.write_at(PATH, 0, &file).unwrap();
        dfs.read_to_end(PATH).unwrap();
        drop(dfs);
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("f");
        fs::write(&src, &file).unwrap();
        let opts = TransferOptions {
            security: mode,
            ..TransferOptions::default()
        };
        ftsm::push(&rec.addr, &creds, &src, "xfer-marker/upload.bin", &opts).unwrap();
        let conns = rec.transcript();

        let wire: Vec<u8> = conns.iter().flat_map(|c| c.up.iter().chain(&c.down).copied()).collect();
        let mut secrets: Vec<Vec<u8>> = vec![
            PATH.into(),
            "xfer-marker/upload.bin".into(),
            creds.username.clone().into(),
            creds.psk.clone(),
        ];
        secrets.extend(proofs(&conns, &creds).into_iter().map(Vec::from));
        for s in &secrets {
            ensure!(!contains(&wire, s), "{mode:?}: secret visible ({} bytes)", s.len());
        }
        if mode == SecurityMode::Secure {
            for o in (0..file.len() - 16).step_by(2048) {
                ensure!(!contains(&wire, &file[o..o + 16]), "SECURE: file bytes at {o} visible");
            }
        }
        summary.push(format!("{mode:?} {} conns", conns.len()));
    }
    Ok(summary.join(", "))
}

fn proofs(conns: &[Conn], creds: &Credentials) -> Vec<[u8; 32]> {
    conns
        .iter()
        .filter_map(|c| {
            let (h, _) = decode_frame(&c.up, 1 << 20).ok()?;
            let (w, _) = decode_frame(&c.down, 1 << 20).ok()?;
            let h = Hello::from_fields(&FieldMap::decode(&h.payload).ok()?).ok()?;
            let w = Welcome::from_fields(&FieldMap::decode(&w.payload).ok()?).ok()?;
            Some(compute_proof(&creds.psk, &h.nonce, &w.nonce, &creds.username))
        })
        .collect()
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

fn permissions() -> Outcome {
    let doc = parse_permissions(SAMPLE_PERMISSIONS).map_err(|e| e.to_string())?;
    let flags: Vec<bool> = PermissionFlag::ALL.iter().map(|f| doc.allows(*f)).collect();
    ensure!(flags == [true, false, false, false, false, true], "flags {flags:?}");

    let node = TestNode::start();
    let user = node.add_user("sample", &doc);
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d"), b"d").unwrap();
    let mut tasks = TaskClient::connect(&node.addr(), &user, SecurityMode::Secure, 65536).unwrap();
    let err = tasks.submit(&[TaskSpec::process("cat", &["d"]).with_dependency("d", dir.path().join("d"))]);
    ensure!(matches!(err, Err(TaskError::PermissionDenied(_))), "submit gave {err:?}");
    ensure!(fs::read_dir(&node.config().tasks).unwrap().count() == 0, "staging happened");
    ensure!(node.audit.checks_precede_effects(), "an effect preceded its check");

    let mut rng = rand::rngs::StdRng::seed_from_u64(9);
    let kinds = [ActionKind::FileIo, ActionKind::Execution, ActionKind::Socket, ActionKind::Sql];
    for _ in 0..500 {
        let mut d = PermissionDoc::deny_all();
        for f in PermissionFlag::ALL {
            d.set(f, rng.gen());
        }
        d.account_type = AccountType::Administrator;
        let account = gridfs::perms::Account {
            username: "root-like".into(),
            psk: vec![],
            sandbox_root: node.storage(),
            perms: d,
        };
        for k in kinds {
            ensure!(check(&account, &GuardedAction::new(k, "x")).is_allowed(), "administrator denied {k:?}");
        }
    }
    Ok("six flags exact; Execution denial before staging; administrator allowed x500".into())
}

fn cryptengine() -> Outcome {
    let data = random_bytes(8 << 20, 8);
    let want = md5(&data);
    let mut slowest = Duration::ZERO;
    for workers in 1..=3usize {
        for cipher in ["aes128", "tdes"] {
            let started = Instant::now();
            let dist = TestNode::start();
            let nodes: Vec<TestNode> = (0..workers).map(|_| TestNode::start()).collect();
            let key = Some(vec![0x44; 32]);
            let admin = PermissionDoc::administrator();
            let creds = dist.add_user_keyed("crypt", &admin, key.clone());
            for n in &nodes {
                n.add_user_keyed("crypt", &admin, key.clone());
            }
            fs::write(dist.storage().join("f.bin"), &data).unwrap();
            let params = match cipher {
                "aes128" => CipherParams::new(cipher, &[1; 16], &[2; 16]),
                _ => CipherParams::new(cipher, &[3; 16], &[4; 8]),
            }
            .unwrap();
            let mut job = CryptJob::new(&dist.addr(), "f.bin", creds.clone(), params.clone(), nodes.iter().map(TestNode::addr).collect());
            job.block_size = 1 << 20;
            let map = distribute(&job).map_err(|e| format!("{workers}x{cipher}: {e}"))?;
            ensure!(map.blocks.len() == 8, "{workers}x{cipher}: {} blocks", map.blocks.len());
            let oracle = encrypt_sequential(&dist.storage().join("f.bin"), &params, 1 << 20).unwrap();
            let holder = |addr: &str| nodes.iter().find(|n| n.addr() == addr).unwrap().storage();
            for b in &map.blocks {
                let held = fs::read(holder(&b.holder).join(&b.block_file)).unwrap();
                ensure!(held == oracle[b.part_num as usize].1, "{workers}x{cipher}: block {} differs", b.part_num);
            }
            let out = tempfile::tempdir().unwrap();
            let dest = out.path().join("back");
            reassemble(&map, &params, &creds, &TransferOptions::default(), &dest).map_err(|e| e.to_string())?;
            ensure!(md5_path(&dest) == want, "{workers}x{cipher}: reassembly differs");

            let victim = &map.blocks[rand::thread_rng().gen_range(0..8)];
            let path = holder(&victim.holder).join(&victim.block_file);
            let mut bytes = fs::read(&path).unwrap();
            let at = rand::thread_rng().gen_range(HEADER_LEN..bytes.len());
            bytes[at] ^= 0x80;
            fs::write(&path, bytes).unwrap();
            let bad = reassemble(&map, &params, &creds, &TransferOptions::default(), &out.path().join("bad"));
            ensure!(
                matches!(bad, Err(CryptError::IntegrityMismatch(_) | CryptError::BadPadding(_))),
                "{workers}x{cipher}: corruption of block {} gave {bad:?}",
                victim.part_num
            );
            let took = started.elapsed();
            ensure!(took < Duration::from_secs(60), "{workers}x{cipher} took {took:?}");
            slowest = slowest.max(took);
        }
    }
    Ok(format!("6 cells: 8 blocks, oracle match, round trip, corruption caught; slowest {slowest:.1?}"))
}

fn block_header() -> Outcome {
    let mut rng = rand::rngs::StdRng::seed_from_u64(4);
    for _ in 0..10_000 {
        let h = BlockHeader {
            part_num: rng.gen(),
            length: rng.gen(),
            md5: rng.gen(),
        };
        ensure!(decode_block_header(&encode_block_header(&h)).ok() == Some(h), "{h:?} did not round-trip");
    }
    let empty = encode_block_header(&BlockHeader {
        part_num: 0,
        length: 0,
        md5: md5(b""),
    });
    let want = format!("{}d41d8cd98f00b204e9800998ecf8427e", "0".repeat(32));
    ensure!(hex::encode(empty) == want, "layout {}", hex::encode(empty));
    Ok("10000 round-trips; pinned layout matches".into())
}

fn pi_demo() -> Outcome {
    let first = pi_hex_digits(1, 16);
    ensure!(first == "243F6A8885A308D3", "pi_hex_digits(1,16) = {first}");
    let mut cluster = Cluster::spawn(plan(Shape::CompleteGraph, 4).unwrap(), Path::new(env!("CARGO_BIN_EXE_gridfs")))
        .map_err(|e| e.to_string())?;
    let addrs: Vec<String> = (0..4).map(|i| cluster.addr(i).to_string()).collect();
    let started = Instant::now();
    let four = fan_out_pi(&addrs, &cluster.creds, SecurityMode::Secure, 1024).map_err(|e| e.to_string())?;
    let took = started.elapsed();
    let one = fan_out_pi(&addrs[..1], &cluster.creds, SecurityMode::Secure, 1024).map_err(|e| e.to_string())?;
    let opts = ScenarioOptions {
        repeats: 1,
        ..ScenarioOptions::default()
    };
    let scenario = run_scenario(&mut cluster, Scenario::Pi, &opts);
    cluster.teardown();
    ensure!(four == one, "4-node digits differ from 1-node digits");
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    scenario.map_err(|e| e.to_string())?;
    Ok(format!("1024 digits on 4 nodes equal 1 node in {took:.1?}"))
}

fn harness_throughput() -> Outcome {
    let mut cluster = Cluster::spawn(plan(Shape::MasterSlaves, 2).unwrap(), Path::new(env!("CARGO_BIN_EXE_gridfs")))
        .map_err(|e| e.to_string())?;
    let opts = ScenarioOptions {
        repeats: 1,
        transfer_bytes: 8 << 20,
        ..ScenarioOptions::default()
    };
    let records = run_scenario(&mut cluster, Scenario::Transfer, &opts);
    cluster.teardown();
    let records = records.map_err(|e| e.to_string())?;
    let mem: Vec<_> = records.iter().filter(|r| r.params.contains("mem")).collect();
    ensure!(!mem.is_empty(), "no memory bench records");
    for r in &records {
        ensure!(r.per_stream.iter().sum::<u64>() == r.bytes, "{}: per-stream sum differs", r.params);
        ensure!(r.mbps == mbps(r.bytes, r.seconds), "{}: mbps off formula", r.params);
        ensure!(r.mbps == r.bytes as f64 * 8.0 / (1e6 * r.seconds), "{}: mbps off formula", r.params);
    }
    let best = records.iter().map(|r| r.mbps).fold(0.0, f64::max);
    Ok(format!("{} records conserve bytes; peak {best:.0} Mbps", records.len()))
}
