//! Raw time-lapse acquisitions and model-ready frame sequences.
//!
//! On disk each embryo owns a directory holding
//!
//! * `frames.bin`: a 16-byte little-endian header
//!   `{magic "TLF1", version u16, frame_count u32, num_focals u16, height u16, width u16}`
//!   followed by `frame_count` unsigned 8-bit row-major frames in
//!   (time, focal) order;
//! * `times.csv`: `frame_index,hpi,focal_index` with hpi written to three
//!   decimals.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"TLF1";
pub const CONTAINER_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const FRAMES_FILE: &str = "frames.bin";
pub const TIMES_FILE: &str = "times.csv";

/// Default start of the sampling grid, hours post insemination.
pub const GRID_START_HPI: f64 = 12.0;
pub const GRID_FRAMES: usize = 128;
pub const MODEL_SIDE: usize = 256;
/// Largest distance between a target time and the frame chosen for it.
pub const GAP_TOLERANCE_HOURS: f64 = 0.5;
pub const MIN_END_TIME: f64 = 108.0;
pub const MAX_END_TIME: f64 = 140.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    pub hpi: f64,
    pub focal_index: u16,
    pub pixels: Vec<u8>,
}

/// A native-resolution acquisition: every frame of every focal plane.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSequence {
    pub embryo_id: String,
    pub height: usize,
    pub width: usize,
    pub num_focals: usize,
    pub frames: Vec<RawFrame>,
}

impl RawSequence {
    pub fn new(embryo_id: &str, height: usize, width: usize, num_focals: usize) -> Self {
        Self {
            embryo_id: embryo_id.to_owned(),
            height,
            width,
            num_focals,
            frames: Vec::new(),
        }
    }

    /// Index of the central focal plane.
    pub fn central_focal(&self) -> usize {
        self.num_focals / 2
    }

    /// Checks the container invariants: 3 to 11 focal planes, shared frame
    /// size, (time, focal) ordering and strictly increasing times per plane.
    pub fn validate(&self) -> Result<()> {
        if !(3..=11).contains(&self.num_focals) {
            return Err(Error::Container(format!("{} focal planes outside [3, 11]", self.num_focals)));
        }
        let size = self.height * self.width;
        let mut last = vec![f64::NEG_INFINITY; self.num_focals];
        let mut prev: Option<(f64, u16)> = None;
        for (i, f) in self.frames.iter().enumerate() {
            if f.pixels.len() != size {
                return Err(Error::Container(format!("frame {i} has {} pixels, expected {size}", f.pixels.len())));
            }
            let plane = f.focal_index as usize;
            if plane >= self.num_focals {
                return Err(Error::Container(format!("frame {i} focal index {plane} out of range")));
            }
            if !(f.hpi > last[plane]) {
                return Err(Error::Container(format!("frame {i} time not increasing on plane {plane}")));
            }
            last[plane] = f.hpi;
            if let Some(p) = prev {
                if (f.hpi, f.focal_index) < p {
                    return Err(Error::Container(format!("frame {i} breaks (time, focal) order")));
                }
            }
            prev = Some((f.hpi, f.focal_index));
        }
        Ok(())
    }

    /// Frames of one focal plane as (time, frame index), ascending in time.
    pub fn plane(&self, focal: usize) -> Vec<(f64, usize)> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.focal_index as usize == focal)
            .map(|(i, f)| (f.hpi, i))
            .collect()
    }

    /// Mean interval between consecutive acquisitions on the central plane, in minutes.
    pub fn mean_acquisition_interval_minutes(&self) -> Option<f64> {
        let plane = self.plane(self.central_focal());
        if plane.len() < 2 {
            return None;
        }
        let span = plane[plane.len() - 1].0 - plane[0].0;
        Some(60.0 * span / (plane.len() - 1) as f64)
    }
}

/// Model input: a fixed number of square frames plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub embryo_id: String,
    pub side: usize,
    /// `frames × side × side`, row-major.
    pub data: Vec<u8>,
    pub validity_mask: Vec<bool>,
    pub target_times: Vec<f64>,
}

impl FrameSequence {
    pub fn zeros(embryo_id: &str, target_times: Vec<f64>, side: usize) -> Self {
        let n = target_times.len();
        Self {
            embryo_id: embryo_id.to_owned(),
            side,
            data: vec![0; n * side * side],
            validity_mask: vec![false; n],
            target_times,
        }
    }

    pub fn len(&self) -> usize {
        self.validity_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.validity_mask.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.side * self.side;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [u8] {
        let n = self.side * self.side;
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn valid_count(&self) -> usize {
        self.validity_mask.iter().filter(|v| **v).count()
    }
}

/// Hourly target times `start, start + 1, …`.
pub fn frame_grid(start_offset: f64, count: usize) -> Vec<f64> {
    frame_grid_with_step(start_offset, count, 1.0)
}

pub fn frame_grid_with_step(start_offset: f64, count: usize, step: f64) -> Vec<f64> {
    (0..count).map(|i| start_offset + i as f64 * step).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub side: usize,
    pub gap_tolerance: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            side: MODEL_SIDE,
            gap_tolerance: GAP_TOLERANCE_HOURS,
        }
    }
}

/// Selects one focal plane (central + offset, clamped) and, for every target
/// up to `end_time`, the nearest frame within the gap tolerance, resized to
/// `side × side`. Remaining slots stay zero and invalid.
pub fn sample_sequence(
    raw: &RawSequence,
    targets: &[f64],
    focal_offset: i32,
    end_time: f64,
    opts: &SampleOptions,
) -> Result<FrameSequence> {
    if raw.frames.is_empty() {
        return Err(Error::EmptySequence(raw.embryo_id.clone()));
    }
    if !(MIN_END_TIME..=MAX_END_TIME).contains(&end_time) {
        return Err(Error::InvalidArgument(format!(
            "end time {end_time} outside [{MIN_END_TIME}, {MAX_END_TIME}]"
        )));
    }
    let focal = (raw.central_focal() as i64 + focal_offset as i64).clamp(0, raw.num_focals as i64 - 1) as usize;
    let plane = raw.plane(focal);
    if plane.is_empty() {
        return Err(Error::MissingFocalPlane {
            embryo: raw.embryo_id.clone(),
            plane: focal,
        });
    }
    let resizer = Resizer::new(raw.height, raw.width, opts.side);
    let mut out = FrameSequence::zeros(&raw.embryo_id, targets.to_vec(), opts.side);
    for (slot, &t) in targets.iter().enumerate() {
        if t > end_time {
            continue;
        }
        let Some(idx) = nearest(&plane, t, opts.gap_tolerance) else {
            continue;
        };
        resizer.resize(&raw.frames[idx].pixels, out.frame_mut(slot));
        out.validity_mask[slot] = true;
    }
    Ok(out)
}

/// Nearest frame in time (earlier wins ties), if within `tolerance`.
fn nearest(plane: &[(f64, usize)], t: f64, tolerance: f64) -> Option<usize> {
    let pos = plane.partition_point(|(time, _)| *time < t);
    let mut best: Option<(f64, usize)> = None;
    for cand in [pos.checked_sub(1), Some(pos)].into_iter().flatten() {
        if let Some(&(time, idx)) = plane.get(cand) {
            let d = (time - t).abs();
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, idx));
            }
        }
    }
    best.filter(|(d, _)| *d <= tolerance).map(|(_, idx)| idx)
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub struct Resizer {
    in_w: usize,
    side: usize,
    xs: Vec<(usize, usize, f64)>,
    ys: Vec<(usize, usize, f64)>,
}

impl Resizer {
    pub fn new(in_h: usize, in_w: usize, side: usize) -> Self {
        fn axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
            let scale = n_in as f64 / n_out as f64;
            (0..n_out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        }
        Self {
            in_w,
            side,
            xs: axis(in_w, side),
            ys: axis(in_h, side),
        }
    }

    pub fn resize(&self, src: &[u8], dst: &mut [u8]) {
        for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
            let r0 = &src[y0 * self.in_w..(y0 + 1) * self.in_w];
            let r1 = &src[y1 * self.in_w..(y1 + 1) * self.in_w];
            let row = &mut dst[oy * self.side..(oy + 1) * self.side];
            for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                let top = r0[x0] as f64 * (1.0 - fx) + r0[x1] as f64 * fx;
                let bottom = r1[x0] as f64 * (1.0 - fx) + r1[x1] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                row[ox] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}

/// Size in bytes of a `frames.bin` holding `frame_count` frames.
pub fn container_size(frame_count: u64, height: u64, width: u64) -> u64 {
    HEADER_LEN as u64 + frame_count * height * width
}

/// Rounds a time to the millihour resolution of `times.csv`.
pub fn quantize_hpi(hpi: f64) -> f64 {
    (hpi * 1000.0).round() / 1000.0
}

pub fn encode_frames(raw: &RawSequence) -> Result<Vec<u8>> {
    let dim = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Container(format!("{what} {v} does not fit the header")))
    };
    let height = dim(raw.height, "height")?;
    let width = dim(raw.width, "width")?;
    let focals = dim(raw.num_focals, "focal count")?;
    let count = u32::try_from(raw.frames.len())
        .map_err(|_| Error::Container(format!("{} frames do not fit the header", raw.frames.len())))?;
    let frame_len = raw.height * raw.width;
    let mut buf = Vec::with_capacity(HEADER_LEN + frame_len * raw.frames.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&focals.to_le_bytes());
    buf.extend_from_slice(&height.to_le_bytes());
    buf.extend_from_slice(&width.to_le_bytes());
    for (i, f) in raw.frames.iter().enumerate() {
        if f.pixels.len() != frame_len {
            return Err(Error::Container(format!("frame {i} has {} pixels, expected {frame_len}", f.pixels.len())));
        }
        buf.extend_from_slice(&f.pixels);
    }
    Ok(buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub version: u16,
    pub frame_count: u32,
    pub num_focals: u16,
    pub height: u16,
    pub width: u16,
}

pub fn decode_header(bytes: &[u8]) -> Result<ContainerHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Container(format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Container(format!("bad magic {:?}", &bytes[..4])));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let header = ContainerHeader {
        version: u16_at(4),
        frame_count: u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]),
        num_focals: u16_at(10),
        height: u16_at(12),
        width: u16_at(14),
    };
    if header.version != CONTAINER_VERSION {
        return Err(Error::Container(format!("unsupported version {}", header.version)));
    }
    Ok(header)
}

/// Decodes `frames.bin` into per-frame pixel buffers.
pub fn decode_frames(bytes: &[u8]) -> Result<(ContainerHeader, Vec<Vec<u8>>)> {
    let header = decode_header(bytes)?;
    let frame_len = (header.height as usize)
        .checked_mul(header.width as usize)
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Container("dimension overflow or empty frame".into()))?;
    let payload = frame_len
        .checked_mul(header.frame_count as usize)
        .ok_or_else(|| Error::Container("dimension overflow".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload {
        return Err(Error::Container(format!("truncated payload: {} of {payload} bytes", body.len())));
    }
    if body.len() > payload {
        return Err(Error::Container(format!("{} trailing bytes after payload", body.len() - payload)));
    }
    Ok((header, body.chunks_exact(frame_len).map(<[u8]>::to_vec).collect()))
}

#[derive(Debug, Serialize, Deserialize)]
struct TimeRow {
    frame_index: u32,
    hpi: String,
    focal_index: u16,
}

pub fn write_sequence_dir(dir: &Path, raw: &RawSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let bin = encode_frames(raw)?;
    let frames_path = dir.join(FRAMES_FILE);
    fs::write(&frames_path, bin).map_err(io_err(&frames_path))?;
    let times_path = dir.join(TIMES_FILE);
    let mut w = csv::Writer::from_path(&times_path)?;
    for (i, f) in raw.frames.iter().enumerate() {
        w.serialize(TimeRow {
            frame_index: i as u32,
            hpi: format!("{:.3}", f.hpi),
            focal_index: f.focal_index,
        })?;
    }
    w.flush().map_err(io_err(&times_path))?;
    Ok(())
}

pub fn read_sequence_dir(dir: &Path, embryo_id: &str) -> Result<RawSequence> {
    let frames_path = dir.join(FRAMES_FILE);
    let bytes = fs::read(&frames_path).map_err(io_err(&frames_path))?;
    let (header, pixels) = decode_frames(&bytes)?;
    let mut rdr = csv::Reader::from_path(dir.join(TIMES_FILE))?;
    let rows: Vec<TimeRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    if rows.len() != pixels.len() {
        return Err(Error::Container(format!(
            "times.csv has {} rows for {} frames",
            rows.len(),
            pixels.len()
        )));
    }
    let mut raw = RawSequence::new(embryo_id, header.height as usize, header.width as usize, header.num_focals as usize);
    for (i, (row, px)) in rows.into_iter().zip(pixels).enumerate() {
        if row.frame_index as usize != i {
            return Err(Error::Container(format!("times.csv row {i} has frame_index {}", row.frame_index)));
        }
        let hpi: f64 = row
            .hpi
            .parse()
            .map_err(|_| Error::Container(format!("times.csv row {i}: bad hpi `{}`", row.hpi)))?;
        raw.frames.push(RawFrame {
            hpi,
            focal_index: row.focal_index,
            pixels: px,
        });
    }
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn synthetic(times: &[f64], side: usize, focals: usize) -> RawSequence {
        let mut raw = RawSequence::new("e", side, side, focals);
        for (ti, &t) in times.iter().enumerate() {
            for f in 0..focals {
                let pixels = (0..side * side).map(|p| ((p + ti * 7 + f * 31) % 251) as u8).collect();
                raw.frames.push(RawFrame {
                    hpi: quantize_hpi(t),
                    focal_index: f as u16,
                    pixels,
                });
            }
        }
        raw
    }

    #[test]
    fn grid_examples() {
        let g = frame_grid(12.0, 128);
        assert_eq!(g.len(), 128);
        assert_eq!(g[0], 12.0);
        assert_eq!(g[127], 139.0);
        assert_eq!(g[127] - g[0], 127.0);
        assert_eq!(frame_grid(12.5, 3), vec![12.5, 13.5, 14.5]);
    }

    #[test]
    fn validity_follows_available_frames() {
        let times: Vec<f64> = (0..=440).map(|i| 10.0 + i as f64 * 0.25).collect();
        let raw = synthetic(&times, 8, 3);
        let targets = frame_grid(12.0, 128);
        let opts = SampleOptions { side: 8, ..Default::default() };
        let seq = sample_sequence(&raw, &targets, 0, 140.0, &opts).unwrap();
        for (i, &t) in targets.iter().enumerate() {
            assert_eq!(seq.validity_mask[i], t <= 120.0, "target {t}");
        }

        let seq = sample_sequence(&raw, &targets, 0, 108.0, &opts).unwrap();
        // enumeration oracle: grid points not after 108
        let expected = targets.iter().filter(|&&t| t <= 108.0).count();
        assert_eq!(expected, 97);
        assert_eq!(seq.valid_count(), expected);
        for i in 0..seq.len() {
            if !seq.validity_mask[i] {
                assert!(seq.frame(i).iter().all(|&b| b == 0));
            }
        }
    }

    #[test]
    fn nearest_frame_wins() {
        let mut raw = RawSequence::new("e", 2, 2, 3);
        for (t, v) in [(49.9, 10u8), (50.2, 200u8)] {
            for f in 0..3 {
                raw.frames.push(RawFrame {
                    hpi: t,
                    focal_index: f,
                    pixels: vec![v; 4],
                });
            }
        }
        let opts = SampleOptions { side: 2, ..Default::default() };
        let seq = sample_sequence(&raw, &[50.0], 0, 140.0, &opts).unwrap();
        assert_eq!(seq.frame(0), &[10, 10, 10, 10]);
    }

    #[test]
    fn focal_selection_clamps() {
        let mut raw = RawSequence::new("e", 1, 1, 3);
        for f in 0..3u16 {
            raw.frames.push(RawFrame {
                hpi: 20.0,
                focal_index: f,
                pixels: vec![f as u8 * 100],
            });
        }
        let opts = SampleOptions { side: 1, ..Default::default() };
        let pick = |offset| sample_sequence(&raw, &[20.0], offset, 140.0, &opts).unwrap().data[0];
        assert_eq!(pick(0), 100);
        assert_eq!(pick(-1), 0);
        assert_eq!(pick(1), 200);
        assert_eq!(pick(5), 200);
        assert_eq!(pick(-5), 0);
    }

    #[test]
    fn sampling_errors() {
        let empty = RawSequence::new("e", 4, 4, 3);
        let opts = SampleOptions::default();
        assert!(matches!(
            sample_sequence(&empty, &[12.0], 0, 140.0, &opts),
            Err(Error::EmptySequence(_))
        ));
        let mut only_top = RawSequence::new("e", 1, 1, 3);
        only_top.frames.push(RawFrame {
            hpi: 12.0,
            focal_index: 0,
            pixels: vec![1],
        });
        assert!(matches!(
            sample_sequence(&only_top, &[12.0], 0, 140.0, &opts),
            Err(Error::MissingFocalPlane { plane: 1, .. })
        ));
        let raw = synthetic(&[12.0], 2, 3);
        assert!(sample_sequence(&raw, &[12.0], 0, 150.0, &opts).is_err());
    }

    #[test]
    fn resize_identity_and_range() {
        let src: Vec<u8> = (0..64).map(|i| (i * 4) as u8).collect();
        let mut dst = vec![0; 64];
        Resizer::new(8, 8, 8).resize(&src, &mut dst);
        assert_eq!(src, dst);
        let mut up = vec![0; 256];
        Resizer::new(8, 8, 16).resize(&src, &mut up);
        let (lo, hi) = (*src.iter().min().unwrap(), *src.iter().max().unwrap());
        assert!(up.iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let raw = synthetic(&[12.0, 12.25, 12.5], 64, 1);
        let mut raw = raw;
        raw.num_focals = 1;
        let path = dir.path().join("e");
        write_sequence_dir(&path, &raw).unwrap();
        let back = read_sequence_dir(&path, "e").unwrap();
        assert_eq!(back, raw);
        let bytes = fs::read(path.join(FRAMES_FILE)).unwrap();
        let times = fs::read(path.join(TIMES_FILE)).unwrap();
        write_sequence_dir(&path, &back).unwrap();
        assert_eq!(fs::read(path.join(FRAMES_FILE)).unwrap(), bytes);
        assert_eq!(fs::read(path.join(TIMES_FILE)).unwrap(), times);
        assert_eq!(bytes.len() as u64, container_size(3, 64, 64));
    }

    #[test]
    fn container_corruption_is_detected() {
        let raw = synthetic(&[12.0, 13.0], 4, 3);
        let bytes = encode_frames(&raw).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_frames(&bad), Err(Error::Container(m)) if m.contains("magic")));
        assert!(matches!(decode_frames(&bytes[..bytes.len() - 1]), Err(Error::Container(m)) if m.contains("truncated")));
        assert!(decode_frames(&bytes[..10]).is_err());
        let mut zero = bytes.clone();
        zero[12] = 0;
        zero[13] = 0;
        assert!(decode_frames(&zero).is_err());
    }

    #[test]
    fn full_model_payload_size() {
        assert_eq!(container_size(128, 256, 256) - HEADER_LEN as u64, 8_388_608);
    }

    #[test]
    fn validate_catches_order_and_plane_errors() {
        let raw = synthetic(&[12.0, 12.25], 2, 3);
        raw.validate().unwrap();
        let mut swapped = raw.clone();
        swapped.frames.swap(0, 3);
        assert!(swapped.validate().is_err());
        let mut two_planes = raw.clone();
        two_planes.num_focals = 2;
        assert!(two_planes.validate().is_err());
    }

    proptest! {
        #[test]
        fn container_round_trip(
            side in 1usize..6,
            focals in 3usize..5,
            steps in prop::collection::vec(1u32..500, 1..6),
            seed in any::<u8>(),
        ) {
            let mut t = 10.0;
            let mut times = Vec::new();
            for s in steps {
                t += s as f64 / 1000.0;
                times.push(t);
            }
            let mut raw = synthetic(&times, side, focals);
            for f in &mut raw.frames {
                for p in &mut f.pixels {
                    *p = p.wrapping_add(seed);
                }
            }
            let dir = tempfile::tempdir().unwrap();
            write_sequence_dir(dir.path(), &raw).unwrap();
            let back = read_sequence_dir(dir.path(), "e").unwrap();
            prop_assert_eq!(back, raw);
        }
    }
}
