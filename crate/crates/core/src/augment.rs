//! Two-stage training augmentation.
//!
//! Stage 1 perturbs the sampling of the raw timeline: one global time
//! offset, one focal-plane offset, independent per-frame jitter and a random
//! end-time truncation. Stage 2 draws one spatial/photometric parameter set
//! per sequence and applies it to every frame.
//!
//! All randomness goes through [`Draw`], which yields centred uniforms in
//! `[-1, 1)`. A draw of zero maps every parameter to its neutral value.

use serde::{Deserialize, Serialize};

use crate::sequence::FrameSequence;

pub trait Draw {
    /// Uniform in `[-1, 1)`.
    fn centered(&mut self) -> f64;

    /// Uniform in `[0, 1)`.
    fn unit(&mut self) -> f64 {
        (self.centered() + 1.0) / 2.0
    }
}

impl<R: rand::Rng> Draw for R {
    fn centered(&mut self) -> f64 {
        self.gen::<f64>() * 2.0 - 1.0
    }
}

/// Always draws zero, i.e. the neutral value of every parameter.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDraw;

impl Draw for ZeroDraw {
    fn centered(&mut self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Global sequence offset is uniform in `±sequence_offset_range` hours.
    pub sequence_offset_range: f64,
    /// Probabilities of focal offsets -1, 0, +1.
    pub focal_offset_probs: [f64; 3],
    pub per_frame_jitter: f64,
    pub truncation_range: [f64; 2],
    pub cutout_enabled: bool,
    /// Cutout side as a fraction of the image side.
    pub cutout_side_range: [f64; 2],
    pub rescale_range: [f64; 2],
    /// Maximum translation as a fraction of the image side.
    pub translation_max: f64,
    /// Brightness factor is uniform in `1 ± brightness_delta_max`.
    pub brightness_delta_max: f64,
    pub rotation_max_deg: f64,
    pub hflip_prob: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            sequence_offset_range: 0.5,
            focal_offset_probs: [0.25, 0.50, 0.25],
            per_frame_jitter: 0.375,
            truncation_range: [108.0, 140.0],
            cutout_enabled: true,
            cutout_side_range: [0.10, 0.30],
            rescale_range: [0.90, 1.10],
            translation_max: 0.10,
            brightness_delta_max: 0.10,
            rotation_max_deg: 10.0,
            hflip_prob: 0.5,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<(), String> {
        let p = self.focal_offset_probs;
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) || ((p[0] + p[1] + p[2]) - 1.0).abs() > 1e-9 {
            return Err(format!("focal offset probabilities {p:?} must be in [0,1] and sum to 1"));
        }
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if !ordered(self.truncation_range) || !ordered(self.rescale_range) || !ordered(self.cutout_side_range) {
            return Err("ranges must be ordered [lo, hi]".into());
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(format!("hflip probability {} outside [0,1]", self.hflip_prob));
        }
        if self.sequence_offset_range < 0.0
            || self.per_frame_jitter < 0.0
            || self.translation_max < 0.0
            || self.brightness_delta_max < 0.0
            || self.rotation_max_deg < 0.0
        {
            return Err("augmentation magnitudes must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalDraw {
    pub targets: Vec<f64>,
    pub focal_offset: i32,
    pub end_time: f64,
}

fn lerp(range: [f64; 2], u: f64) -> f64 {
    range[0] + (range[1] - range[0]) * u
}

/// Maps a centred draw onto a range; zero lands exactly on the midpoint.
fn around_mid(range: [f64; 2], c: f64) -> f64 {
    (range[0] + range[1]) / 2.0 + (range[1] - range[0]) / 2.0 * c
}

/// Stage 1: perturbs the nominal sampling grid.
pub fn stage1_temporal(grid: &[f64], config: &AugmentationConfig, draw: &mut impl Draw) -> TemporalDraw {
    let offset = draw.centered() * config.sequence_offset_range;
    let u = draw.unit();
    let [p_minus, p_zero, _] = config.focal_offset_probs;
    let focal_offset = if u < p_minus {
        -1
    } else if u < p_minus + p_zero {
        0
    } else {
        1
    };
    let end_time = around_mid(config.truncation_range, draw.centered());
    let targets = grid
        .iter()
        .map(|&t| t + offset + draw.centered() * config.per_frame_jitter)
        .collect();
    TemporalDraw {
        targets,
        focal_offset,
        end_time,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// One spatial/photometric parameter set, shared by all frames of a sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialParams {
    pub scale: f64,
    /// Translation in pixels.
    pub tx: f64,
    pub ty: f64,
    pub rotation_deg: f64,
    pub brightness: f64,
    pub hflip: bool,
    pub cutout: Option<Rect>,
}

impl SpatialParams {
    pub const IDENTITY: SpatialParams = SpatialParams {
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
        rotation_deg: 0.0,
        brightness: 1.0,
        hflip: false,
        cutout: None,
    };
}

pub fn draw_spatial(config: &AugmentationConfig, side: usize, draw: &mut impl Draw) -> SpatialParams {
    let scale = around_mid(config.rescale_range, draw.centered());
    let tx = draw.centered() * config.translation_max * side as f64;
    let ty = draw.centered() * config.translation_max * side as f64;
    let rotation_deg = draw.centered() * config.rotation_max_deg;
    let brightness = 1.0 + draw.centered() * config.brightness_delta_max;
    let hflip = draw.unit() < config.hflip_prob;
    let cutout = config.cutout_enabled.then(|| {
        let len = ((lerp(config.cutout_side_range, draw.unit()) * side as f64).round() as usize).clamp(1, side);
        let room = side - len;
        let x = (draw.unit() * (room + 1) as f64) as usize;
        let y = (draw.unit() * (room + 1) as f64) as usize;
        Rect {
            x: x.min(room),
            y: y.min(room),
            w: len,
            h: len,
        }
    });
    SpatialParams {
        scale,
        tx,
        ty,
        rotation_deg,
        brightness,
        hflip,
        cutout,
    }
}

/// Stage 2: draws parameters once and applies them to every frame.
pub fn stage2_spatial(seq: &FrameSequence, config: &AugmentationConfig, draw: &mut impl Draw) -> (FrameSequence, SpatialParams) {
    let params = draw_spatial(config, seq.side, draw);
    (apply_spatial(seq, &params), params)
}

/// Per output pixel: four source taps (index, weight); taps outside the
/// frame are dropped, which is zero fill.
struct Warp {
    taps: Vec<[(u32, f32); 4]>,
}

impl Warp {
    fn new(side: usize, p: &SpatialParams) -> Self {
        let c = side as f64 / 2.0;
        let (sin, cos) = (-p.rotation_deg.to_radians()).sin_cos();
        let mut taps = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                // inverse map: undo translation, scale, rotation, flip
                let ox = (x as f64 + 0.5 - c - p.tx) / p.scale;
                let oy = (y as f64 + 0.5 - c - p.ty) / p.scale;
                let mut px = ox * cos - oy * sin;
                let py = ox * sin + oy * cos;
                if p.hflip {
                    px = -px;
                }
                let sx = px + c - 0.5;
                let sy = py + c - 0.5;
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let mut t = [(0u32, 0f32); 4];
                let corners = [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x0 + 1.0, y0, fx * (1.0 - fy)),
                    (x0, y0 + 1.0, (1.0 - fx) * fy),
                    (x0 + 1.0, y0 + 1.0, fx * fy),
                ];
                for (slot, (cx, cy, w)) in corners.into_iter().enumerate() {
                    if w > 0.0 && cx >= 0.0 && cy >= 0.0 && cx < side as f64 && cy < side as f64 {
                        t[slot] = ((cy as usize * side + cx as usize) as u32, w as f32);
                    }
                }
                taps.push(t);
            }
        }
        Self { taps }
    }

    fn apply(&self, src: &[u8], dst: &mut [u8], brightness: f64) {
        for (out, taps) in dst.iter_mut().zip(&self.taps) {
            let v: f64 = taps.iter().map(|&(i, w)| src[i as usize] as f64 * w as f64).sum();
            *out = (v * brightness).round().clamp(0.0, 255.0) as u8;
        }
    }
}

pub fn apply_spatial(seq: &FrameSequence, p: &SpatialParams) -> FrameSequence {
    let mut out = FrameSequence::zeros(&seq.embryo_id, seq.target_times.clone(), seq.side);
    out.validity_mask = seq.validity_mask.clone();
    let geometric = p.scale != 1.0 || p.tx != 0.0 || p.ty != 0.0 || p.rotation_deg != 0.0 || p.hflip;
    let warp = geometric.then(|| Warp::new(seq.side, p));
    for i in 0..seq.len() {
        if !seq.validity_mask[i] {
            continue;
        }
        let src = seq.frame(i);
        let dst = out.frame_mut(i);
        match &warp {
            Some(w) => w.apply(src, dst, p.brightness),
            None if p.brightness == 1.0 => dst.copy_from_slice(src),
            None => {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s as f64 * p.brightness).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        if let Some(r) = p.cutout {
            for row in r.y..r.y + r.h {
                dst[row * seq.side + r.x..row * seq.side + r.x + r.w].fill(0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::sequence::frame_grid;

    fn test_sequence(side: usize, frames: usize) -> FrameSequence {
        let mut seq = FrameSequence::zeros("e", frame_grid(12.0, frames), side);
        for i in 0..frames {
            if i % 5 == 4 {
                continue;
            }
            seq.validity_mask[i] = true;
            for (p, v) in seq.frame_mut(i).iter_mut().enumerate() {
                *v = ((p * 13 + i * 3) % 256) as u8;
            }
        }
        seq
    }

    #[test]
    fn zero_draw_is_neutral() {
        let grid = frame_grid(12.0, 128);
        let d = stage1_temporal(&grid, &AugmentationConfig::default(), &mut ZeroDraw);
        assert_eq!(d.targets, grid);
        assert_eq!(d.focal_offset, 0);
        assert_eq!(d.end_time, 124.0);
        let p = draw_spatial(&AugmentationConfig { cutout_enabled: false, ..Default::default() }, 64, &mut ZeroDraw);
        assert_eq!(p, SpatialParams::IDENTITY);
    }

    #[test]
    fn temporal_bounds() {
        let grid = frame_grid(12.0, 128);
        let cfg = AugmentationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let d = stage1_temporal(&grid, &cfg, &mut rng);
            for (i, t) in d.targets.iter().enumerate() {
                assert!((t - (12.0 + i as f64)).abs() <= 0.875);
            }
            assert!((108.0..=140.0).contains(&d.end_time));
            assert!((-1..=1).contains(&d.focal_offset));
        }
    }

    #[test]
    fn focal_offset_frequencies() {
        let grid = [12.0];
        let cfg = AugmentationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            counts[(stage1_temporal(&grid, &cfg, &mut rng).focal_offset + 1) as usize] += 1;
        }
        for (c, want) in counts.iter().zip([0.25, 0.5, 0.25]) {
            assert!((*c as f64 / n as f64 - want).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn identity_params_leave_input_unchanged() {
        let seq = test_sequence(16, 10);
        assert_eq!(apply_spatial(&seq, &SpatialParams::IDENTITY), seq);
    }

    #[test]
    fn double_flip_is_identity() {
        let seq = test_sequence(16, 10);
        let flip = SpatialParams {
            hflip: true,
            ..SpatialParams::IDENTITY
        };
        let once = apply_spatial(&seq, &flip);
        assert_ne!(once, seq);
        assert_eq!(once.frame(0)[0], seq.frame(0)[15]);
        assert_eq!(apply_spatial(&once, &flip), seq);
    }

    #[test]
    fn cutout_is_temporally_coherent() {
        let mut seq = test_sequence(32, 128);
        seq.data.iter_mut().enumerate().for_each(|(i, v)| {
            if seq.validity_mask[i / (32 * 32)] {
                *v = 200
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AugmentationConfig {
            rescale_range: [1.0, 1.0],
            translation_max: 0.0,
            rotation_max_deg: 0.0,
            brightness_delta_max: 0.0,
            hflip_prob: 0.0,
            ..Default::default()
        };
        let (out, params) = stage2_spatial(&seq, &cfg, &mut rng);
        let rect = params.cutout.unwrap();
        for i in 0..out.len() {
            if !out.validity_mask[i] {
                continue;
            }
            let zeroed: Vec<usize> = (0..32 * 32).filter(|&p| out.frame(i)[p] == 0).collect();
            let expected: Vec<usize> = (0..32 * 32)
                .filter(|p| {
                    let (x, y) = (p % 32, p / 32);
                    x >= rect.x && x < rect.x + rect.w && y >= rect.y && y < rect.y + rect.h
                })
                .collect();
            assert_eq!(zeroed, expected, "frame {i}");
        }
    }

    #[test]
    fn invariants_under_random_draws() {
        let seq = test_sequence(24, 20);
        let cfg = AugmentationConfig::default();
        for seed in 0..20 {
            let (a, pa) = stage2_spatial(&seq, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let (b, pb) = stage2_spatial(&seq, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(a, b);
            assert_eq!(pa, pb);
            assert_eq!(a.data.len(), seq.data.len());
            for i in 0..a.len() {
                if !a.validity_mask[i] {
                    assert!(a.frame(i).iter().all(|&v| v == 0));
                }
            }
            assert!(pa.scale >= 0.9 && pa.scale <= 1.1);
            assert!(pa.rotation_deg.abs() <= 10.0);
            assert!(pa.tx.abs() <= 2.4 + 1e-12 && pa.ty.abs() <= 2.4 + 1e-12);
        }
    }

    #[test]
    fn brightness_clamps_to_byte_range() {
        let mut seq = test_sequence(4, 2);
        seq.frame_mut(0).fill(250);
        let p = SpatialParams {
            brightness: 1.1,
            ..SpatialParams::IDENTITY
        };
        assert!(apply_spatial(&seq, &p).frame(0).iter().all(|&v| v == 255));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentationConfig::default().validate().is_ok());
        let bad = AugmentationConfig {
            focal_offset_probs: [0.3, 0.3, 0.3],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
