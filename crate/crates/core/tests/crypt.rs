mod common;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};

use common::{md5, random_bytes, TestNode};
use gridfs::cryptengine::{
    decode_block_header, distribute, encode_block_header, encrypt_sequential, load_manifest, reassemble, BlockHeader,
    CipherParams, CryptError, CryptJob, PlacementMap, HEADER_LEN,
};
use gridfs::ftsm::TransferOptions;
use gridfs::node::NodeHooks;
use gridfs::perms::PermissionDoc;
use gridfs::secchan::Credentials;
use gridfs::wire::SecurityMode;

const MIB: u64 = 1 << 20;

struct Grid {
    distributor: TestNode,
    workers: Vec<TestNode>,
    creds: Credentials,
}

impl Grid {
    fn new(workers: usize) -> Grid {
        Grid::with_hooks(vec![NodeHooks::default(); workers])
    }

    fn with_hooks(hooks: Vec<NodeHooks>) -> Grid {
        let distributor = TestNode::start();
        let workers: Vec<TestNode> = hooks.into_iter().map(|h| TestNode::start_with(|_| {}, h)).collect();
        let key = Some(vec![0x3c; 32]);
        let doc = PermissionDoc::administrator();
        let creds = distributor.add_user_keyed("crypt-op", &doc, key.clone());
        for w in &workers {
            w.add_user_keyed("crypt-op", &doc, key.clone());
        }
        Grid {
            distributor,
            workers,
            creds,
        }
    }

    fn worker_addrs(&self) -> Vec<String> {
        self.workers.iter().map(TestNode::addr).collect()
    }

    fn job(&self, file: &str, params: &CipherParams, block_size: u64) -> CryptJob {
        let mut job = CryptJob::new(&self.distributor.addr(), file, self.creds.clone(), params.clone(), self.worker_addrs());
        job.block_size = block_size;
        job
    }

    fn holder_storage(&self, addr: &str) -> &Path {
        let node = self.workers.iter().find(|w| w.addr() == addr).expect("holder is a worker");
        node.config().storage.as_path()
    }
}

fn params(cipher: &str) -> CipherParams {
    match cipher {
        "aes128" => CipherParams::new("aes128", &[0x11; 16], &[0x22; 16]).unwrap(),
        _ => CipherParams::new("tdes", &hex::decode("0123456789abcdeffedcba9876543210").unwrap(), &[0x33; 8]).unwrap(),
    }
}

fn transfer_opts() -> TransferOptions {
    TransferOptions {
        security: SecurityMode::Secure,
        ..TransferOptions::default()
    }
}

#[test]
fn eight_mib_matches_sequential_oracle_and_round_trips() {
    let data = random_bytes(8 * MIB as usize, 8);
    let want = md5(&data);
    for workers in 1..=3 {
        for cipher in ["aes128", "tdes"] {
            let grid = Grid::new(workers);
            fs::write(grid.distributor.storage().join("plain.bin"), &data).unwrap();
            let p = params(cipher);
            let job = grid.job("plain.bin", &p, MIB);
            let map = distribute(&job).unwrap();
            assert_eq!(map.blocks.len(), 8, "{workers} x {cipher}");

            let oracle = encrypt_sequential(&grid.distributor.storage().join("plain.bin"), &p, MIB).unwrap();
            for b in &map.blocks {
                let held = fs::read(grid.holder_storage(&b.holder).join(&b.block_file)).unwrap();
                assert!(held == oracle[b.part_num as usize].1, "{workers} x {cipher}: part {} differs", b.part_num);
            }

            let manifest = load_manifest(&job.distributor, &job.manifest_path(), &grid.creds, SecurityMode::Secure).unwrap();
            assert_eq!(manifest, map);
            let out = tempfile::tempdir().unwrap();
            let dest = out.path().join("back.bin");
            reassemble(&map, &p, &grid.creds, &transfer_opts(), &dest).unwrap();
            assert_eq!(md5(&fs::read(&dest).unwrap()), want, "{workers} x {cipher}");

            corrupt_one_byte(&grid, &map, (workers * 3) as u64 % 8);
            let dest2 = out.path().join("bad.bin");
            let err = reassemble(&map, &p, &grid.creds, &transfer_opts(), &dest2).unwrap_err();
            assert!(
                matches!(err, CryptError::IntegrityMismatch(_) | CryptError::BadPadding(_)),
                "{workers} x {cipher}: {err}"
            );
            assert!(!dest2.exists());
        }
    }
}

fn corrupt_one_byte(grid: &Grid, map: &PlacementMap, part: u64) {
    let b = map.blocks.iter().find(|b| b.part_num == part).unwrap();
    let path = grid.holder_storage(&b.holder).join(&b.block_file);
    let mut bytes = fs::read(&path).unwrap();
    let i = HEADER_LEN + (bytes.len() - HEADER_LEN) / 2;
    bytes[i] ^= 0x01;
    fs::write(&path, bytes).unwrap();
}

#[test]
fn three_workers_split_eight_blocks_three_three_two() {
    let grid = Grid::new(3);
    fs::write(grid.distributor.storage().join("f.bin"), random_bytes(8 * MIB as usize, 1)).unwrap();
    let map = distribute(&grid.job("f.bin", &params("aes128"), MIB)).unwrap();
    let mut counts: Vec<usize> = map.per_holder().values().copied().collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    assert_eq!(counts, [3, 3, 2]);
}

#[test]
fn crashed_worker_blocks_are_reassigned() {
    let grid = Grid::with_hooks(vec![
        NodeHooks::default(),
        NodeHooks {
            crypt_crash_after: Some(1),
            ..NodeHooks::default()
        },
        NodeHooks::default(),
    ]);
    let data = random_bytes(8 * MIB as usize, 2);
    fs::write(grid.distributor.storage().join("f.bin"), &data).unwrap();
    let p = params("tdes");
    let map = distribute(&grid.job("f.bin", &p, MIB)).unwrap();
    assert_eq!(map.blocks.len(), 8);
    let crashed = grid.workers[1].addr();
    assert!(map.per_holder().get(crashed.as_str()).copied().unwrap_or(0) <= 1);

    let out = tempfile::tempdir().unwrap();
    let dest = out.path().join("back.bin");
    reassemble(&map, &p, &grid.creds, &transfer_opts(), &dest).unwrap();
    assert!(fs::read(&dest).unwrap() == data);
}

#[test]
fn missing_block_fails_without_output() {
    let grid = Grid::new(2);
    fs::write(grid.distributor.storage().join("f.bin"), random_bytes(8 * MIB as usize, 3)).unwrap();
    let p = params("aes128");
    let map = distribute(&grid.job("f.bin", &p, MIB)).unwrap();
    let b = map.blocks.iter().find(|b| b.part_num == 3).unwrap();
    fs::remove_file(grid.holder_storage(&b.holder).join(&b.block_file)).unwrap();

    let out = tempfile::tempdir().unwrap();
    let dest = out.path().join("back.bin");
    let err = reassemble(&map, &p, &grid.creds, &transfer_opts(), &dest).unwrap_err();
    assert!(matches!(err, CryptError::MissingBlock(3)), "{err}");
    assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0, "partial output left behind");
}

#[test]
fn tiny_file_round_trips() {
    let grid = Grid::new(2);
    let data = b"forty-one bytes of plaintext for the test".to_vec();
    assert_eq!(data.len(), 41);
    fs::write(grid.distributor.storage().join("tiny.txt"), &data).unwrap();
    for cipher in ["aes128", "tdes"] {
        let p = params(cipher);
        let map = distribute(&grid.job("tiny.txt", &p, MIB)).unwrap();
        assert_eq!(map.blocks.len(), 1);
        assert_eq!(map.blocks[0].length, 48, "padded to the next full cipher block");
        let out = tempfile::tempdir().unwrap();
        let dest = out.path().join("tiny.txt");
        reassemble(&map, &p, &grid.creds, &transfer_opts(), &dest).unwrap();
        assert_eq!(fs::read(&dest).unwrap(), data);
    }
}

#[test]
fn worker_memory_stays_within_two_blocks() {
    let grid = Grid::new(1);
    fs::write(grid.distributor.storage().join("f.bin"), random_bytes(16 * MIB as usize, 4)).unwrap();
    distribute(&grid.job("f.bin", &params("aes128"), MIB)).unwrap();
    let peak = grid.workers[0].node().crypt().meter().peak();
    assert!(peak > 0, "meter saw nothing");
    assert!(peak as u64 <= 2 * MIB + 256 * 1024, "peak {peak}");
}

#[test]
fn block_header_round_trips_and_has_fixed_layout() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(0xB10C);
    for _ in 0..10_000 {
        let h = BlockHeader {
            part_num: rng.gen(),
            length: rng.gen(),
            md5: rng.gen(),
        };
        let bytes = encode_block_header(&h);
        assert_eq!(bytes.len(), 32);
        assert_eq!(decode_block_header(&bytes).unwrap(), h);
    }
    // Empty block: zero part, zero length, MD5 of no bytes (RFC 1321 test suite).
    let pinned = encode_block_header(&BlockHeader {
        part_num: 0,
        length: 0,
        md5: md5(b""),
    });
    assert_eq!(hex::encode(pinned), format!("{}{}d41d8cd98f00b204e9800998ecf8427e", "00".repeat(8), "00".repeat(8)));
    let far = encode_block_header(&BlockHeader {
        part_num: 1 << 40,
        length: 0x1000,
        md5: [0xAB; 16],
    });
    assert_eq!(hex::encode(&far[..16]), "00000100000000000000000000001000");
    assert!(matches!(decode_block_header(&pinned[..31]), Err(CryptError::TruncatedHeader)));
}
