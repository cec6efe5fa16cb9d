use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use embryo_core::sequence::{
    container_size, decode_frames, encode_frames, read_sequence_dir, write_sequence_dir, RawFrame, RawSequence,
    FRAMES_FILE, TIMES_FILE,
};

fn random_sequence(rng: &mut impl Rng) -> RawSequence {
    let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
    let focals = rng.gen_range(1..4);
    let mut raw = RawSequence::new("e", h, w, focals);
    let mut t = rng.gen_range(0.0..1.0);
    for _ in 0..rng.gen_range(1..30) {
        t += rng.gen_range(0.15..0.25);
        for f in 0..focals {
            raw.frames.push(RawFrame {
                // millihour resolution, as stored on disk
                hpi: (t * 1000.0f64).round() / 1000.0,
                focal_index: f as u16,
                pixels: (0..h * w).map(|_| rng.gen()).collect(),
            });
        }
    }
    raw
}

#[test]
fn frame_container_round_trip_is_byte_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..50 {
        let raw = random_sequence(&mut rng);
        let bytes = encode_frames(&raw).unwrap();
        assert_eq!(bytes.len() as u64, container_size(raw.frames.len() as u64, raw.height as u64, raw.width as u64));
        let (header, frames) = decode_frames(&bytes).unwrap();
        assert_eq!(header.frame_count as usize, raw.frames.len());
        assert!(frames.iter().zip(&raw.frames).all(|(a, b)| *a == b.pixels));

        let a = dir.path().join(format!("a{i}"));
        let b = dir.path().join(format!("b{i}"));
        write_sequence_dir(&a, &raw).unwrap();
        let back = read_sequence_dir(&a, "e").unwrap();
        assert_eq!(back, raw);
        write_sequence_dir(&b, &back).unwrap();
        for file in [FRAMES_FILE, TIMES_FILE] {
            assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap());
        }
    }
}

#[test]
fn corrupt_containers_are_rejected() {
    let raw = random_sequence(&mut ChaCha8Rng::seed_from_u64(2));
    let bytes = encode_frames(&raw).unwrap();
    assert!(decode_frames(&bytes[..bytes.len() - 1]).is_err());
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(decode_frames(&longer).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode_frames(&magic).is_err());
    assert!(decode_frames(&bytes[..10]).is_err());
}
