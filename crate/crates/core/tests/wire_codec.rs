use std::io::Cursor;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};

use gridfs::dfsm::{DfsRequest, DfsResponse};
use gridfs::wire::{decode_frame, encode_frame, read_frame, write_frame, FieldMap, Frame, FrameType, Hello, MAGIC};

const MAX: u32 = 1 << 16;

fn random_frame(rng: &mut impl Rng) -> Frame {
    let len = match rng.gen_range(0..10) {
        0 => 0,
        1 => MAX as usize,
        _ => rng.gen_range(0..4096),
    };
    let mut payload = vec![0u8; len];
    rng.fill_bytes(&mut payload);
    Frame {
        frame_type: FrameType(rng.gen()),
        flags: rng.gen(),
        payload,
    }
}

#[test]
fn ten_thousand_random_frames_round_trip() {
    let started = Instant::now();
    let mut rng = rand::rngs::StdRng::seed_from_u64(0xF4A3);
    for _ in 0..10_000 {
        let frame = random_frame(&mut rng);
        let bytes = encode_frame(&frame, MAX).unwrap();
        let (decoded, rest) = decode_frame(&bytes, MAX).unwrap();
        assert_eq!(decoded, frame);
        assert!(rest.is_empty());

        let mut stream = Vec::new();
        write_frame(&mut stream, &frame, MAX).unwrap();
        assert_eq!(stream, bytes);
        assert_eq!(read_frame(&mut Cursor::new(stream), MAX).unwrap(), frame);
    }
    assert!(started.elapsed() < Duration::from_secs(30));
}

#[test]
fn back_to_back_frames_split_cleanly() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    let frames: Vec<Frame> = (0..50).map(|_| random_frame(&mut rng)).collect();
    let mut stream = Vec::new();
    for f in &frames {
        stream.extend(encode_frame(f, MAX).unwrap());
    }
    let mut rest = stream.as_slice();
    for f in &frames {
        let (got, tail) = decode_frame(rest, MAX).unwrap();
        assert_eq!(&got, f);
        rest = tail;
    }
    assert!(rest.is_empty());
}

#[test]
fn field_maps_round_trip() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(12);
    for _ in 0..2_000 {
        let mut map = FieldMap::new();
        for _ in 0..rng.gen_range(0..12) {
            let mut v = vec![0u8; rng.gen_range(0..64)];
            rng.fill_bytes(&mut v);
            map = map.with(rng.gen(), v);
        }
        assert_eq!(FieldMap::decode(&map.encode()).unwrap(), map);
    }
}

/// Inputs for the fuzz: raw noise, noise behind a valid magic, and
/// mutated valid frames.
fn fuzz_input(rng: &mut impl Rng, seeds: &[Vec<u8>]) -> Vec<u8> {
    match rng.gen_range(0..3) {
        0 => {
            let mut v = vec![0u8; rng.gen_range(0..64)];
            rng.fill_bytes(&mut v);
            v
        }
        1 => {
            let mut v = MAGIC.to_vec();
            let mut tail = vec![0u8; rng.gen_range(0..64)];
            rng.fill_bytes(&mut tail);
            v.extend(tail);
            v
        }
        _ => {
            let mut v = seeds[rng.gen_range(0..seeds.len())].clone();
            for _ in 0..rng.gen_range(1..4) {
                match rng.gen_range(0..3) {
                    0 if !v.is_empty() => {
                        let i = rng.gen_range(0..v.len());
                        v[i] ^= 1 << rng.gen_range(0..8);
                    }
                    1 if !v.is_empty() => v.truncate(rng.gen_range(0..v.len())),
                    _ => v.push(rng.gen()),
                }
            }
            v
        }
    }
}

#[test]
fn hundred_thousand_decode_fuzz_inputs_never_panic() {
    let started = Instant::now();
    let mut rng = rand::rngs::StdRng::seed_from_u64(0xFA22);
    let hello = FieldMap::new().with_u16(1, 1).with_u8(2, 3).with_u8(3, 1).with_u32(4, 65536).with_u8(5, 1);
    let req = FieldMap::new().with_u8(1, 1).with_u64(2, 7).with_str(3, "a/b").with_u64(4, 0).with_u64(5, 10);
    let seeds: Vec<Vec<u8>> = [hello.encode(), req.encode(), vec![]]
        .into_iter()
        .map(|p| encode_frame(&Frame::new(FrameType::DFS_REQ, p), MAX).unwrap())
        .collect();
    let mut accepted = 0u32;
    for _ in 0..100_000 {
        let input = fuzz_input(&mut rng, &seeds);
        if let Ok((frame, _)) = decode_frame(&input, MAX) {
            accepted += 1;
            if let Ok(map) = FieldMap::decode(&frame.payload) {
                let _ = Hello::from_fields(&map);
                let _ = DfsRequest::from_fields(&map);
                let _ = DfsResponse::from_fields(&map);
            }
        }
        let _ = read_frame(&mut Cursor::new(&input), MAX);
        let _ = FieldMap::decode(&input);
    }
    assert!(accepted > 0, "fuzz never produced a decodable frame");
    assert!(started.elapsed() < Duration::from_secs(30), "fuzz took {:?}", started.elapsed());
}
