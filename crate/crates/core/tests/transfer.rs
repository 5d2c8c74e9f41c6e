mod common;

use std::fs;
use std::time::{Duration, Instant};

use common::{md5, md5_path, random_bytes, TestNode};
use gridfs::ftsm::{self, state_path, FtsmError, TransferOptions};
use gridfs::wire::SecurityMode;

const MODES: [SecurityMode; 3] = [SecurityMode::NonSecure, SecurityMode::Secure, SecurityMode::SemiSecure];

fn opts(security: SecurityMode, streams: u8) -> TransferOptions {
    TransferOptions {
        security,
        streams,
        ..TransferOptions::default()
    }
}

#[test]
fn sixty_four_mib_matrix() {
    let node = TestNode::start();
    let src_dir = tempfile::tempdir().unwrap();
    let src = src_dir.path().join("big.bin");
    let data = random_bytes(64 << 20, 64);
    fs::write(&src, &data).unwrap();
    let want = md5(&data);
    drop(data);

    for security in MODES {
        for streams in [1u8, 2, 4, 8] {
            let dst = format!("matrix/{security:?}-{streams}.bin");
            let started = Instant::now();
            let out = ftsm::push(&node.addr(), &node.admin, &src, &dst, &opts(security, streams)).unwrap();
            let took = started.elapsed();
            assert_eq!(out.md5, Some(want), "{security:?} x {streams}");
            let landed = node.storage().join(&dst);
            assert_eq!(md5_path(&landed), want, "{security:?} x {streams}");
            assert_eq!(out.per_stream.len(), streams as usize);
            assert_eq!(out.per_stream.iter().sum::<u64>(), 64 << 20);
            assert!(took < Duration::from_secs(30), "{security:?} x {streams} took {took:?}");
            fs::remove_file(landed).unwrap();
        }
    }
}

#[test]
fn pull_matches_source() {
    let node = TestNode::start();
    let data = random_bytes(3 << 20, 5);
    fs::write(node.storage().join("remote.bin"), &data).unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    for security in MODES {
        let dst = out_dir.path().join(format!("{security:?}.bin"));
        let out = ftsm::pull(&node.addr(), &node.admin, "remote.bin", &dst, &opts(security, 3)).unwrap();
        assert_eq!(out.md5, Some(md5(&data)));
        assert_eq!(fs::read(&dst).unwrap(), data);
    }
}

#[test]
fn interrupted_push_resumes_to_exact_copy() {
    let node = TestNode::start();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.bin");
    let total = 24u64 << 20;
    let data = random_bytes(total as usize, 9);
    fs::write(&src, &data).unwrap();
    let landed = node.storage().join("resume/out.bin");

    let mut o = opts(SecurityMode::Secure, 4);
    o.abort_after = Some(total / 2);
    let err = ftsm::push(&node.addr(), &node.admin, &src, "resume/out.bin", &o).unwrap_err();
    assert!(matches!(err, FtsmError::Aborted), "{err}");
    assert!(state_path(&landed).exists(), "state kept after the cut");

    o.abort_after = None;
    let out = ftsm::push(&node.addr(), &node.admin, &src, "resume/out.bin", &o).unwrap();
    assert!(out.resumed);
    assert!(out.bytes() < total, "resume resent {} of {total} bytes", out.bytes());
    assert_eq!(md5_path(&landed), md5(&data));
    assert!(!state_path(&landed).exists(), "state removed after success");
}

#[test]
fn interrupted_pull_resumes_to_exact_copy() {
    let node = TestNode::start();
    let data = random_bytes(8 << 20, 10);
    fs::write(node.storage().join("pull.bin"), &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let dst = dir.path().join("pull.bin");

    let mut o = opts(SecurityMode::SemiSecure, 2);
    o.abort_after = Some(4 << 20);
    assert!(ftsm::pull(&node.addr(), &node.admin, "pull.bin", &dst, &o).is_err());
    assert!(state_path(&dst).exists());
    o.abort_after = None;
    let out = ftsm::pull(&node.addr(), &node.admin, "pull.bin", &dst, &o).unwrap();
    assert!(out.resumed);
    assert_eq!(fs::read(&dst).unwrap(), data);
    assert!(!state_path(&dst).exists());
}

#[test]
fn region_lands_byte_exact() {
    let node = TestNode::start();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("sixteen.bin");
    fs::write(&src, b"0123456789ABCDEF").unwrap();

    let mut o = opts(SecurityMode::Secure, 2);
    o.region = Some((10, 5));
    let out = ftsm::push(&node.addr(), &node.admin, &src, "region.bin", &o).unwrap();
    assert_eq!((out.region_offset, out.region_length), (10, 5));
    assert_eq!(out.md5, Some(md5(b"ABCDE")));
    let landed = fs::read(node.storage().join("region.bin")).unwrap();
    assert_eq!(&landed[10..15], b"ABCDE");

    fs::copy(&src, node.storage().join("sixteen.bin")).unwrap();
    let back = dir.path().join("back.bin");
    ftsm::pull(&node.addr(), &node.admin, "sixteen.bin", &back, &o).unwrap();
    assert_eq!(&fs::read(&back).unwrap()[10..15], b"ABCDE");
}

#[test]
fn region_past_end_is_refused() {
    let node = TestNode::start();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("sixteen.bin");
    fs::write(&src, b"0123456789ABCDEF").unwrap();
    let mut o = opts(SecurityMode::Secure, 1);
    o.region = Some((10, 7));
    let err = ftsm::push(&node.addr(), &node.admin, &src, "x.bin", &o).unwrap_err();
    assert!(matches!(err, FtsmError::RegionOutOfBounds { .. }), "{err}");
}

#[test]
fn memory_bench_conserves_bytes() {
    let node = TestNode::start();
    let report = ftsm::bench_memory(&node.addr(), &node.admin, &opts(SecurityMode::NonSecure, 4), 0.0, 8 << 20).unwrap();
    assert_eq!(report.per_stream.len(), 4);
    assert_eq!(report.per_stream.iter().sum::<u64>(), report.bytes);
    assert_eq!(report.bytes, 8 << 20);
    assert_eq!(report.mbps, report.bytes as f64 * 8.0 / (1e6 * report.seconds));
}
