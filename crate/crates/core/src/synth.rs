//! Deterministic synthetic clinics.
//!
//! Each embryo gets a latent viability in `[0, 1]` which drives arrest,
//! cleavage and blastulation timing, direct cleavage, blastocyst grades and
//! the implantation probability. Frames are procedurally rendered: a zona
//! ring, cell blobs between cleavages, a compacted morula and an expanding
//! blastocoel ring after tB. The generator writes transfer events and a
//! labeled manifest in the regular cohort formats, and the ground truth to
//! a separate sidecar file.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{
    label_outcomes, write_events, write_manifest, EmbryoRecord, IncubationDay, Insemination, TransferEvent,
    TransferProtocol,
};
use crate::error::{io_err, Error, Result};
use crate::jsonl;
use crate::morpho::{Grade, MorphokineticRecord};
use crate::seed::derive_seed;
use crate::sequence::{quantize_hpi, write_sequence_dir, RawFrame, RawSequence};
use crate::stats::auc;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SEQUENCES_DIR: &str = "sequences";
pub const TRUTH_FILE: &str = "truth.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Native frame side in pixels.
    pub side: usize,
    pub num_focals: usize,
    /// Per-embryo mean acquisition interval is drawn from this range;
    /// individual gaps stay within [11, 15] minutes.
    pub interval_minutes: [f64; 2],
    pub start_hpi: [f64; 2],
    pub end_hpi: [f64; 2],
    /// Pixel noise standard deviation in grey levels.
    pub noise_sd: f64,
    /// Edge softness on the central plane, in pixels; grows by
    /// `blur_per_plane` for each plane away from the centre.
    pub edge_softness: f64,
    pub blur_per_plane: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            side: 32,
            num_focals: 3,
            interval_minutes: [11.5, 14.5],
            start_hpi: [0.25, 0.75],
            end_hpi: [140.0, 148.0],
            noise_sd: 5.0,
            edge_softness: 0.7,
            blur_per_plane: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_clinics: usize,
    pub embryos_per_clinic: [usize; 2],
    pub embryos_per_treatment: [usize; 2],
    pub age_mean: [f64; 2],
    pub age_sd: f64,
    /// Arrest probability is `sigmoid((arrest_midpoint - v) / arrest_width)`.
    pub arrest_midpoint: f64,
    pub arrest_width: f64,
    /// Direct 1-3 cleavage probability `dc1_3_max (1 - v)^2`, direct 2-5
    /// cleavage probability `dc2_5_max (1 - v)`.
    pub dc1_3_max: f64,
    pub dc2_5_max: f64,
    /// tB = `tb_fast + tb_span (1 - v) + N(0, tb_sd)` before the DC delay.
    pub tb_fast: f64,
    pub tb_span: f64,
    pub tb_sd: f64,
    pub grade_noise: f64,
    /// Transfers one embryo per treatment, two with this probability.
    pub double_transfer_prob: f64,
    pub fresh_prob: f64,
    /// Noise of the morphology proxy used to choose transfers.
    pub proxy_noise: f64,
    /// Untransferred embryos below this proxy (or arrested, or without a
    /// blastocyst by `discard_tb`) are discarded; the rest stay pending.
    pub discard_proxy: f64,
    pub discard_tb: f64,
    /// Implantation probability `sigmoid(outcome_slope (v - outcome_mid))`.
    pub outcome_slope: f64,
    pub outcome_mid: f64,
    pub missing_outcome_prob: f64,
    pub annotated_fraction: f64,
    pub render: RenderConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_clinics: 4,
            embryos_per_clinic: [140, 160],
            embryos_per_treatment: [3, 7],
            age_mean: [32.0, 38.0],
            age_sd: 4.0,
            arrest_midpoint: 0.3,
            arrest_width: 0.06,
            dc1_3_max: 0.3,
            dc2_5_max: 0.2,
            tb_fast: 96.0,
            tb_span: 26.0,
            tb_sd: 3.0,
            grade_noise: 0.15,
            double_transfer_prob: 0.15,
            fresh_prob: 0.6,
            proxy_noise: 0.15,
            discard_proxy: 0.4,
            discard_tb: 128.0,
            outcome_slope: 10.0,
            outcome_mid: 0.75,
            missing_outcome_prob: 0.02,
            annotated_fraction: 0.7,
            render: RenderConfig::default(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_clinics == 0 {
            return bad("num_clinics must be positive".into());
        }
        for (name, r) in [
            ("embryos_per_clinic", self.embryos_per_clinic),
            ("embryos_per_treatment", self.embryos_per_treatment),
        ] {
            if r[0] == 0 || r[0] > r[1] {
                return bad(format!("{name} range {r:?} is empty"));
            }
        }
        // the largest transfer must fit in the smallest treatment
        let k_max = if self.double_transfer_prob > 0.0 { 2 } else { 1 };
        if self.embryos_per_treatment[0] < k_max || self.embryos_per_clinic[0] < k_max {
            return bad(format!(
                "transfer policy needs {k_max} embryos but treatments may have {}",
                self.embryos_per_treatment[0].min(self.embryos_per_clinic[0])
            ));
        }
        for (name, p) in [
            ("dc1_3_max", self.dc1_3_max),
            ("dc2_5_max", self.dc2_5_max),
            ("double_transfer_prob", self.double_transfer_prob),
            ("fresh_prob", self.fresh_prob),
            ("missing_outcome_prob", self.missing_outcome_prob),
            ("annotated_fraction", self.annotated_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.dc1_3_max + self.dc2_5_max > 1.0 {
            return bad("dc1_3_max + dc2_5_max exceeds 1".into());
        }
        let r = &self.render;
        if !(3..=11).contains(&r.num_focals) || r.side < 8 {
            return bad(format!("render needs 3-11 focal planes and side >= 8 (got {}, {})", r.num_focals, r.side));
        }
        if !(11.0 <= r.interval_minutes[0] && r.interval_minutes[0] <= r.interval_minutes[1] && r.interval_minutes[1] <= 15.0)
        {
            return bad(format!("interval range {:?} outside [11, 15] minutes", r.interval_minutes));
        }
        if r.start_hpi[0] < 0.0 || r.start_hpi[0] > r.start_hpi[1] || r.end_hpi[0] > r.end_hpi[1] || r.start_hpi[1] >= r.end_hpi[0] {
            return bad("recording window ranges are inconsistent".into());
        }
        if self.arrest_width <= 0.0 || self.tb_sd < 0.0 || r.noise_sd < 0.0 {
            return bad("widths and noise levels must be non-negative".into());
        }
        Ok(())
    }
}

/// Generator ground truth for one embryo. Events after arrest are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEmbryoTruth {
    pub embryo_id: String,
    pub clinic_id: String,
    pub latent_viability: f64,
    pub arrested: bool,
    pub arrest_time: Option<f64>,
    pub true_events: MorphokineticRecord,
    /// Cleavage to four cells.
    pub t4: Option<f64>,
    /// Onset of compaction.
    pub t_morula: Option<f64>,
    pub implantation_probability: f64,
}

/// What the renderer draws at a time point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stage {
    /// One cell with the given number of visible pronuclei.
    Zygote { pronuclei: u8 },
    Cleaving { cells: usize },
    Morula,
    /// Blastocoel expansion in `[0, 1]`.
    Blastocyst { expansion: f64 },
}

impl Stage {
    /// Number of cell blobs drawn; the morula and the inner cell mass count
    /// as one.
    pub fn blobs(self) -> usize {
        match self {
            Stage::Cleaving { cells } => cells,
            _ => 1,
        }
    }
}

pub const MAX_CELLS: usize = 16;
const HOURS_PER_EXTRA_CELL: f64 = 6.0;
const EXPANSION_HOURS: f64 = 12.0;

impl SynthEmbryoTruth {
    /// Developmental stage at `hpi`; frozen at the arrest time.
    pub fn stage_at(&self, hpi: f64) -> Stage {
        let t = match self.arrest_time {
            Some(a) => hpi.min(a),
            None => hpi,
        };
        let e = &self.true_events;
        let reached = |x: Option<f64>| x.is_some_and(|x| t >= x);
        if reached(e.tb) {
            let expansion = ((t - e.tb.unwrap_or(t)) / EXPANSION_HOURS).clamp(0.0, 1.0);
            return Stage::Blastocyst { expansion };
        }
        if reached(self.t_morula) {
            return Stage::Morula;
        }
        if reached(e.t5) {
            let extra = ((t - e.t5.unwrap_or(t)) / HOURS_PER_EXTRA_CELL).floor() as usize;
            return Stage::Cleaving {
                cells: (5 + extra).min(MAX_CELLS),
            };
        }
        if reached(self.t4) {
            return Stage::Cleaving { cells: 4 };
        }
        if reached(e.t3) {
            return Stage::Cleaving { cells: 3 };
        }
        if reached(e.t2) {
            return Stage::Cleaving { cells: 2 };
        }
        let pronuclei = if reached(e.t_pnf) { 0 } else { e.pn.unwrap_or(2) };
        Stage::Zygote { pronuclei }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbryoPlan {
    truth: SynthEmbryoTruth,
    seed: u64,
    clinic_brightness: f64,
}

/// A simulated cohort before rendering.
#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub records: Vec<EmbryoRecord>,
    pub events: Vec<TransferEvent>,
    pub truths: Vec<SynthEmbryoTruth>,
    plans: Vec<EmbryoPlan>,
}

fn normal(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    Normal::new(mean, sd).expect("finite sd").sample(rng)
}

fn grade_of(q: f64) -> Grade {
    if q > 0.66 {
        Grade::A
    } else if q > 0.33 {
        Grade::B
    } else {
        Grade::C
    }
}

/// Draws one embryo's timeline.
fn simulate_embryo(cfg: &SynthConfig, id: &str, clinic: &str, rng: &mut impl Rng) -> SynthEmbryoTruth {
    let v: f64 = rng.gen();
    let slow = 1.0 - v;
    let pn = if rng.gen::<f64>() < 0.04 + 0.08 * slow {
        if rng.gen::<bool>() {
            1
        } else {
            3
        }
    } else {
        2
    };
    let t_pnf = normal(rng, 22.0 + 3.0 * slow, 1.2).max(16.0);
    let t2 = t_pnf + normal(rng, 2.5, 0.3).clamp(1.0, 3.5);
    let u: f64 = rng.gen();
    let p13 = cfg.dc1_3_max * slow * slow;
    let p25 = cfg.dc2_5_max * slow;
    let (dc13, dc25) = (u < p13, u >= p13 && u < p13 + p25);
    let t3 = if dc13 {
        t2 + rng.gen_range(0.3..1.4)
    } else {
        (t2 + normal(rng, 10.5 + 2.0 * slow, 1.0)).max(t_pnf + 6.0)
    };
    let t5 = if dc25 {
        t3 + rng.gen_range(1.0..4.0)
    } else {
        (t3 + normal(rng, 12.0 + 2.0 * slow, 1.0)).max(t3 + 6.0)
    };
    let t4 = t3 + (t5 - t3) / 2.0;
    let delay = if dc13 { 5.0 } else if dc25 { 3.0 } else { 0.0 };
    let tb = (cfg.tb_fast + cfg.tb_span * slow + delay + normal(rng, 0.0, cfg.tb_sd)).max(t5 + 20.0);
    let t_morula = (tb - 12.0).max(t5 + (tb - t5) / 2.0);
    let icm = grade_of(v + normal(rng, 0.0, cfg.grade_noise));
    let te = grade_of(v + normal(rng, 0.0, cfg.grade_noise));

    let arrested = rng.gen::<f64>() < sigmoid((cfg.arrest_midpoint - v) / cfg.arrest_width);
    let arrest_time = arrested.then(|| rng.gen_range(26.0..(tb - 1.0).min(110.0)));
    let keep = |t: f64| arrest_time.map_or(true, |a| t <= a);
    let opt = |t: f64| keep(t).then_some(t);
    let blast = keep(tb);
    let events = MorphokineticRecord {
        pn: Some(pn),
        t_pnf: opt(t_pnf),
        t2: opt(t2),
        t3: opt(t3),
        t5: opt(t5),
        tb: opt(tb),
        icm: blast.then_some(icm),
        te: blast.then_some(te),
    };
    SynthEmbryoTruth {
        embryo_id: id.to_owned(),
        clinic_id: clinic.to_owned(),
        latent_viability: v,
        arrested,
        arrest_time,
        true_events: events,
        t4: opt(t4),
        t_morula: opt(t_morula),
        implantation_probability: sigmoid(cfg.outcome_slope * (v - cfg.outcome_mid)),
    }
}

/// Simulates metadata, timelines, transfers and outcomes. Deterministic in
/// `config.seed`; no pixels are produced.
pub fn simulate_cohort(config: &SynthConfig) -> Result<SynthCohort> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[b"cohort"]));
    let mut records = Vec::new();
    let mut events = Vec::new();
    let mut truths = Vec::new();
    let mut plans = Vec::new();

    for c in 0..config.num_clinics {
        let clinic = format!("C{:02}", c + 1);
        let n = rng.gen_range(config.embryos_per_clinic[0]..=config.embryos_per_clinic[1]);
        let age_mean = rng.gen_range(config.age_mean[0]..=config.age_mean[1]);
        let brightness = normal(&mut rng, 0.0, 6.0);

        // treatment sizes; a short remainder joins the last treatment
        let mut sizes = Vec::new();
        let mut left = n;
        while left > 0 {
            let s = rng.gen_range(config.embryos_per_treatment[0]..=config.embryos_per_treatment[1]).min(left);
            sizes.push(s);
            left -= s;
        }
        if sizes.len() > 1 && *sizes.last().unwrap() < config.embryos_per_treatment[0] {
            let s = sizes.pop().unwrap();
            *sizes.last_mut().unwrap() += s;
        }

        for (t, &size) in sizes.iter().enumerate() {
            let treatment = format!("{clinic}-T{:03}", t + 1);
            let age = normal(&mut rng, age_mean, config.age_sd).round().clamp(20.0, 46.0) as u8;
            let insemination = if rng.gen::<f64>() < 0.55 { Insemination::Icsi } else { Insemination::Ivf };
            let fresh = rng.gen::<f64>() < config.fresh_prob;
            let day = if fresh || rng.gen::<f64>() < 0.5 { IncubationDay::D5 } else { IncubationDay::D6 };
            let protocol = if fresh { TransferProtocol::Fresh } else { TransferProtocol::Cryopreserved };

            let mut members = Vec::with_capacity(size);
            for e in 0..size {
                let id = format!("{treatment}-E{:02}", e + 1);
                let truth = simulate_embryo(config, &id, &clinic, &mut rng);
                let proxy = truth.latent_viability + normal(&mut rng, 0.0, config.proxy_noise)
                    - if truth.arrested { 1.0 } else { 0.0 };
                let mut rec = EmbryoRecord::unlabeled(&id, &clinic, &treatment);
                rec.female_age = Some(age);
                rec.insemination = insemination;
                rec.incubation_day = day;
                rec.sequence_ref = format!("{SEQUENCES_DIR}/{id}");
                if rng.gen::<f64>() < config.annotated_fraction {
                    let mut visible = truth.true_events.clone();
                    if visible.tb.is_some_and(|tb| tb > config.render.end_hpi[0]) {
                        visible.tb = None;
                        visible.icm = None;
                        visible.te = None;
                    }
                    rec.annotations = Some(visible);
                }
                members.push((rec, truth, proxy));
            }

            let k = if rng.gen::<f64>() < config.double_transfer_prob { 2 } else { 1 };
            let mut order: Vec<usize> = (0..size).collect();
            order.sort_by(|&a, &b| members[b].2.total_cmp(&members[a].2));
            let chosen: Vec<usize> = order[..k].to_vec();
            let mut heartbeats = 0u32;
            for &i in &chosen {
                members[i].0.transfer_protocol = protocol;
                if rng.gen::<f64>() < members[i].1.implantation_probability {
                    heartbeats += 1;
                }
            }
            let missing = rng.gen::<f64>() < config.missing_outcome_prob;
            let discarded: Vec<String> = (0..size)
                .filter(|i| !chosen.contains(i))
                .filter(|&i| {
                    let (_, truth, proxy) = &members[i];
                    truth.arrested
                        || truth.true_events.tb.map_or(true, |tb| tb > config.discard_tb)
                        || *proxy < config.discard_proxy
                })
                .map(|i| members[i].0.embryo_id.clone())
                .collect();
            events.push(TransferEvent {
                treatment_id: treatment.clone(),
                embryo_ids: chosen.iter().map(|&i| members[i].0.embryo_id.clone()).collect(),
                num_fetal_heartbeats: (!missing).then_some(heartbeats),
                discarded_ids: discarded,
            });
            for (rec, truth, _) in members {
                plans.push(EmbryoPlan {
                    seed: derive_seed(config.seed, &[b"render", rec.embryo_id.as_bytes()]),
                    truth: truth.clone(),
                    clinic_brightness: brightness,
                });
                records.push(rec);
                truths.push(truth);
            }
        }
    }
    let records = label_outcomes(&events, &records)?;
    Ok(SynthCohort {
        records,
        events,
        truths,
        plans,
    })
}

/// One rendered acquisition time with the drawn stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderedTime {
    pub hpi: f64,
    pub stage: Stage,
    pub blobs: usize,
}

/// Acquisition times: gaps within `[11, 15]` minutes around a per-embryo
/// mean interval, quantized to the container resolution.
fn acquisition_times(cfg: &RenderConfig, rng: &mut impl Rng) -> Vec<f64> {
    let mean = rng.gen_range(cfg.interval_minutes[0]..=cfg.interval_minutes[1]);
    let start = rng.gen_range(cfg.start_hpi[0]..=cfg.start_hpi[1]);
    let end = rng.gen_range(cfg.end_hpi[0]..=cfg.end_hpi[1]);
    let mut times = vec![quantize_hpi(start)];
    let mut t = start;
    loop {
        let gap = (mean + rng.gen_range(-0.4..0.4)).clamp(11.05, 14.95);
        t += gap / 60.0;
        if t > end {
            break;
        }
        times.push(quantize_hpi(t));
    }
    times
}

/// Per-embryo drawing constants.
struct Layout {
    cx: f64,
    cy: f64,
    phase: f64,
    side: f64,
    icm_quality: f64,
    te_quality: f64,
    brightness: f64,
}

/// Soft disk coverage in `[0, 1]` at distance `d` from the centre.
fn disk(d: f64, radius: f64, softness: f64) -> f64 {
    ((radius - d) / softness + 0.5).clamp(0.0, 1.0)
}

fn draw_clean(stage: Stage, lay: &Layout, softness: f64) -> Vec<f32> {
    let s = lay.side;
    let n = s as usize;
    let zona_r = 0.44 * s;
    let cell_r = 0.34 * s;
    let mut blobs: Vec<(f64, f64, f64, f64)> = Vec::new(); // x, y, radius, intensity
    let mut ring: Option<(f64, f64, f64)> = None; // radius, thickness, intensity
    let mut cavity: Option<f64> = None;
    match stage {
        Stage::Zygote { pronuclei } => {
            blobs.push((lay.cx, lay.cy, cell_r, 150.0));
            for k in 0..pronuclei {
                let a = lay.phase + PI * k as f64;
                let off = 0.06 * s;
                blobs.push((lay.cx + off * a.cos(), lay.cy + off * a.sin(), 0.06 * s, 95.0));
            }
        }
        Stage::Cleaving { cells } => {
            let r = cell_r * (0.95 / (cells as f64).sqrt()).min(0.7);
            let (centre, ring_n) = if cells >= 7 { (1, cells - 1) } else { (0, cells) };
            if centre == 1 {
                blobs.push((lay.cx, lay.cy, r, 165.0));
            }
            let orbit = (cell_r - r).max(0.0);
            for k in 0..ring_n {
                let a = lay.phase + 2.0 * PI * k as f64 / ring_n as f64;
                blobs.push((lay.cx + orbit * a.cos(), lay.cy + orbit * a.sin(), r, 165.0));
            }
        }
        Stage::Morula => {
            blobs.push((lay.cx, lay.cy, 0.29 * s, 180.0));
        }
        Stage::Blastocyst { expansion } => {
            let r = 0.28 * s + 0.13 * s * expansion;
            ring = Some((r, 0.05 * s, 110.0 + 60.0 * lay.te_quality));
            cavity = Some(r);
            let icm_r = 0.07 * s + 0.05 * s * lay.icm_quality;
            let off = 0.55 * r;
            blobs.push((
                lay.cx + off * lay.phase.cos(),
                lay.cy + off * lay.phase.sin(),
                icm_r,
                130.0 + 80.0 * lay.icm_quality,
            ));
        }
    }
    let mut img = vec![0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = ((px - lay.cx).powi(2) + (py - lay.cy).powi(2)).sqrt();
            let mut v = 30.0 + lay.brightness;
            // zona pellucida ring
            let zona_t = 0.05 * s;
            let z = disk(d, zona_r + zona_t / 2.0, softness) - disk(d, zona_r - zona_t / 2.0, softness);
            v += z * 90.0;
            if let Some(r) = cavity {
                v += disk(d, r, softness) * 35.0;
            }
            if let Some((r, t, intensity)) = ring {
                let w = disk(d, r + t / 2.0, softness) - disk(d, r - t / 2.0, softness);
                v += w * (intensity - 30.0);
            }
            for &(bx, by, br, bi) in &blobs {
                let bd = ((px - bx).powi(2) + (py - by).powi(2)).sqrt();
                let c = disk(bd, br, softness);
                // darker membrane rim
                let rim = disk(bd, br, softness) - disk(bd, br - 1.0, softness);
                v = v * (1.0 - c) + c * (bi + lay.brightness) - rim * 25.0;
            }
            img[y * n + x] = v as f32;
        }
    }
    img
}

fn stage_key(stage: Stage) -> (u8, u32) {
    match stage {
        Stage::Zygote { pronuclei } => (0, pronuclei as u32),
        Stage::Cleaving { cells } => (1, cells as u32),
        Stage::Morula => (2, 0),
        Stage::Blastocyst { expansion } => (3, (expansion * 64.0).round() as u32),
    }
}

fn quantized_stage(stage: Stage) -> Stage {
    match stage {
        Stage::Blastocyst { expansion } => Stage::Blastocyst {
            expansion: (expansion * 64.0).round() / 64.0,
        },
        s => s,
    }
}

/// Renders every acquisition of every focal plane, with per-time stage
/// instrumentation. `brightness` shifts all grey levels.
pub fn render_instrumented(
    truth: &SynthEmbryoTruth,
    config: &RenderConfig,
    brightness: f64,
    rng: &mut impl Rng,
) -> (RawSequence, Vec<RenderedTime>) {
    let times = acquisition_times(config, rng);
    let side = config.side as f64;
    let lay = Layout {
        cx: side / 2.0 + rng.gen_range(-1.5..1.5),
        cy: side / 2.0 + rng.gen_range(-1.5..1.5),
        phase: rng.gen_range(0.0..2.0 * PI),
        side,
        icm_quality: truth.true_events.icm.map_or(0.0, Grade::quality),
        te_quality: truth.true_events.te.map_or(0.0, Grade::quality),
        brightness,
    };
    let mid = config.num_focals / 2;
    let noise = Normal::new(0.0, config.noise_sd.max(1e-12)).expect("finite noise");
    let mut cache: HashMap<(u8, u32, usize), Vec<f32>> = HashMap::new();
    let mut raw = RawSequence::new(&truth.embryo_id, config.side, config.side, config.num_focals);
    let mut info = Vec::with_capacity(times.len());
    for &hpi in &times {
        let stage = truth.stage_at(hpi);
        info.push(RenderedTime {
            hpi,
            stage,
            blobs: stage.blobs(),
        });
        let (code, param) = stage_key(stage);
        for focal in 0..config.num_focals {
            let softness = config.edge_softness + config.blur_per_plane * focal.abs_diff(mid) as f64;
            let clean = cache
                .entry((code, param, focal))
                .or_insert_with(|| draw_clean(quantized_stage(stage), &lay, softness));
            let pixels = clean
                .iter()
                .map(|&v| (v as f64 + noise.sample(rng)).round().clamp(0.0, 255.0) as u8)
                .collect();
            raw.frames.push(RawFrame {
                hpi,
                focal_index: focal as u16,
                pixels,
            });
        }
    }
    (raw, info)
}

pub fn render_frames(truth: &SynthEmbryoTruth, config: &RenderConfig, rng: &mut impl Rng) -> RawSequence {
    render_instrumented(truth, config, 0.0, rng).0
}

impl SynthCohort {
    /// Renders one embryo exactly as [`generate_cohort`] does.
    pub fn render(&self, index: usize, config: &RenderConfig) -> RawSequence {
        let plan = &self.plans[index];
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        render_instrumented(&plan.truth, config, plan.clinic_brightness, &mut rng).0
    }
}

/// Simulates the cohort and writes `manifest.jsonl`, `events.jsonl` and
/// `sequences/<id>/` under `cohort_dir`, and the truth sidecar to
/// `truth_path`. Embryos are rendered and written one at a time.
pub fn generate_cohort(config: &SynthConfig, cohort_dir: &Path, truth_path: &Path) -> Result<SynthCohort> {
    let cohort = simulate_cohort(config)?;
    if truth_path.starts_with(cohort_dir) {
        return Err(Error::InvalidArgument(format!(
            "truth sidecar {} must live outside the cohort directory",
            truth_path.display()
        )));
    }
    std::fs::create_dir_all(cohort_dir.join(SEQUENCES_DIR)).map_err(io_err(cohort_dir))?;
    for (i, rec) in cohort.records.iter().enumerate() {
        let raw = cohort.render(i, &config.render);
        write_sequence_dir(&cohort_dir.join(&rec.sequence_ref), &raw)?;
    }
    write_manifest(&cohort_dir.join(MANIFEST_FILE), &cohort.records)?;
    write_events(&cohort_dir.join(EVENTS_FILE), &cohort.events)?;
    if let Some(parent) = truth_path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    jsonl::write(truth_path, &cohort.truths)?;
    log::info!("wrote {} synthetic embryos to {}", cohort.records.len(), cohort_dir.display());
    Ok(cohort)
}

pub fn read_truth(path: &Path) -> Result<Vec<SynthEmbryoTruth>> {
    jsonl::read(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleAuc {
    pub auc: f64,
    /// AUC of the latent viability itself on the same embryos.
    pub ceiling: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// AUC of `scores` against realized outcomes of the labeled records, with
/// the latent-viability ceiling. Only records present in all three inputs
/// are used.
pub fn oracle_auc(
    truth: &[SynthEmbryoTruth],
    records: &[EmbryoRecord],
    scores: &std::collections::BTreeMap<String, f64>,
) -> Result<OracleAuc> {
    let v: HashMap<&str, f64> = truth.iter().map(|t| (t.embryo_id.as_str(), t.latent_viability)).collect();
    let mut s = Vec::new();
    let mut lv = Vec::new();
    let mut labels = Vec::new();
    for r in records.iter().filter(|r| r.is_labeled()) {
        if let (Some(&p), Some(&vi)) = (scores.get(&r.embryo_id), v.get(r.embryo_id.as_str())) {
            s.push(p);
            lv.push(vi);
            labels.push(r.is_positive());
        }
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    Ok(OracleAuc {
        auc: auc(&s, &labels)?,
        ceiling: auc(&lv, &labels)?,
        n_pos,
        n_neg: labels.len() - n_pos,
    })
}

/// Shuffled copy of the ids, for picking sampled embryos in tests.
pub fn sample_ids(truth: &[SynthEmbryoTruth], n: usize, seed: u64) -> Vec<String> {
    let mut ids: Vec<String> = truth.iter().map(|t| t.embryo_id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.truncate(n);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{read_manifest, OutcomeLabel};
    use crate::sequence::read_sequence_dir;
    use crate::stats::spearman;

    fn small() -> SynthConfig {
        SynthConfig {
            num_clinics: 2,
            embryos_per_clinic: [12, 14],
            ..SynthConfig::default()
        }
    }

    /// Cells expected from the event times alone.
    fn expected_cells(t: &SynthEmbryoTruth, hpi: f64) -> usize {
        let h = t.arrest_time.map_or(hpi, |a| hpi.min(a));
        let e = &t.true_events;
        let at = |x: Option<f64>| x.map_or(false, |x| h >= x);
        if at(e.tb) || at(t.t_morula) {
            1
        } else if at(e.t5) {
            (5 + ((h - e.t5.unwrap()) / 6.0).floor() as usize).min(16)
        } else if at(t.t4) {
            4
        } else if at(e.t3) {
            3
        } else if at(e.t2) {
            2
        } else {
            1
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let a = simulate_cohort(&small()).unwrap();
        let b = simulate_cohort(&small()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.truths, b.truths);
        let c = simulate_cohort(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.truths, c.truths);
    }

    #[test]
    fn events_are_consistent_and_arrest_removes_tb() {
        let cohort = simulate_cohort(&SynthConfig {
            embryos_per_clinic: [200, 200],
            ..SynthConfig::default()
        })
        .unwrap();
        for t in &cohort.truths {
            assert!(t.true_events.is_consistent(), "{t:?}");
            assert!((0.0..=1.0).contains(&t.latent_viability));
            assert!((0.0..=1.0).contains(&t.implantation_probability));
            if t.arrested {
                assert!(t.true_events.tb.is_none());
            }
        }
        for r in &cohort.records {
            r.check_invariants().unwrap();
        }
    }

    #[test]
    fn labeling_round_trips() {
        let cohort = simulate_cohort(&small()).unwrap();
        let relabeled = label_outcomes(&cohort.events, &cohort.records).unwrap();
        assert_eq!(relabeled, cohort.records);
    }

    #[test]
    fn transferred_fraction_follows_policy() {
        let cfg = SynthConfig {
            double_transfer_prob: 0.0,
            ..small()
        };
        let cohort = simulate_cohort(&cfg).unwrap();
        let transferred = cohort.records.iter().filter(|r| r.transferred).count();
        assert_eq!(transferred, cohort.events.len());
    }

    #[test]
    fn unsatisfiable_policy_is_rejected() {
        let cfg = SynthConfig {
            embryos_per_treatment: [1, 3],
            double_transfer_prob: 0.2,
            ..small()
        };
        assert!(simulate_cohort(&cfg).is_err());
    }

    #[test]
    fn viability_predicts_blastulation() {
        let cohort = simulate_cohort(&SynthConfig {
            embryos_per_clinic: [250, 250],
            ..SynthConfig::default()
        })
        .unwrap();
        let (v, tb): (Vec<f64>, Vec<f64>) = cohort
            .truths
            .iter()
            .filter(|t| !t.arrested)
            .map(|t| (t.latent_viability, t.true_events.tb.unwrap()))
            .unzip();
        assert!(v.len() >= 500);
        assert!(spearman(&v, &tb).unwrap() < -0.3);
    }

    #[test]
    fn rendered_stage_matches_events() {
        let cohort = simulate_cohort(&small()).unwrap();
        let cfg = RenderConfig::default();
        let mut checked = 0;
        for (i, truth) in cohort.truths.iter().enumerate().take(8) {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let (raw, info) = render_instrumented(truth, &cfg, 0.0, &mut rng);
            raw.validate().unwrap();
            assert_eq!(raw.frames.len(), info.len() * cfg.num_focals);
            for r in info.iter().step_by(13) {
                assert_eq!(r.blobs, expected_cells(truth, r.hpi), "{} at {}", truth.embryo_id, r.hpi);
                checked += 1;
            }
            if let (Some(t2), Some(t3)) = (truth.true_events.t2, truth.true_events.t3) {
                if truth.arrest_time.map_or(true, |a| a > t3) {
                    assert_eq!(truth.stage_at((t2 + t3) / 2.0).blobs(), 2);
                }
            }
            let gaps: Vec<f64> = info.windows(2).map(|w| 60.0 * (w[1].hpi - w[0].hpi)).collect();
            assert!(gaps.iter().all(|g| (11.0..=15.0).contains(g)), "{gaps:?}");
        }
        assert!(checked >= 100);
    }

    #[test]
    fn arrested_content_is_static() {
        let cohort = simulate_cohort(&SynthConfig {
            embryos_per_clinic: [60, 60],
            ..small()
        })
        .unwrap();
        let truth = cohort.truths.iter().find(|t| t.arrested).expect("an arrested embryo");
        let cfg = RenderConfig {
            noise_sd: 0.0,
            ..RenderConfig::default()
        };
        let (raw, info) = render_instrumented(truth, &cfg, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        let arrest = truth.arrest_time.unwrap();
        let after: Vec<&RawFrame> = raw.frames.iter().filter(|f| f.hpi > arrest && f.focal_index == 1).collect();
        assert!(after.len() > 10);
        assert!(after.windows(2).all(|w| w[0].pixels == w[1].pixels));
        assert!(info.iter().filter(|r| r.hpi > arrest).all(|r| r.stage == truth.stage_at(arrest)));
    }

    #[test]
    fn generation_is_byte_identical_and_readable() {
        let cfg = SynthConfig {
            num_clinics: 1,
            embryos_per_clinic: [6, 6],
            render: RenderConfig {
                end_hpi: [30.0, 32.0],
                ..RenderConfig::default()
            },
            ..SynthConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate_cohort(&cfg, &a.join("cohort"), &a.join("truth").join(TRUTH_FILE)).unwrap();
        generate_cohort(&cfg, &b.join("cohort"), &b.join("truth").join(TRUTH_FILE)).unwrap();
        for rel in [MANIFEST_FILE, EVENTS_FILE] {
            assert_eq!(
                std::fs::read(a.join("cohort").join(rel)).unwrap(),
                std::fs::read(b.join("cohort").join(rel)).unwrap()
            );
        }
        let records = read_manifest(&a.join("cohort").join(MANIFEST_FILE)).unwrap();
        for r in &records {
            let fa = std::fs::read(a.join("cohort").join(&r.sequence_ref).join("frames.bin")).unwrap();
            let fb = std::fs::read(b.join("cohort").join(&r.sequence_ref).join("frames.bin")).unwrap();
            assert_eq!(fa, fb);
            let raw = read_sequence_dir(&a.join("cohort").join(&r.sequence_ref), &r.embryo_id).unwrap();
            let minutes = raw.mean_acquisition_interval_minutes().unwrap();
            assert!((11.0..=15.0).contains(&minutes));
        }
        assert_eq!(read_truth(&a.join("truth").join(TRUTH_FILE)).unwrap().len(), records.len());
        assert!(generate_cohort(&cfg, &a.join("cohort"), &a.join("cohort").join(TRUTH_FILE)).is_err());
    }

    #[test]
    fn oracle_ceiling_and_labels() {
        let cohort = simulate_cohort(&SynthConfig::default()).unwrap();
        let viability = cohort
            .truths
            .iter()
            .map(|t| (t.embryo_id.clone(), t.latent_viability))
            .collect();
        let o = oracle_auc(&cohort.truths, &cohort.records, &viability).unwrap();
        assert_eq!(o.auc, o.ceiling);
        assert!(o.ceiling < 1.0);
        assert!(o.n_pos > 30, "{o:?}");
        let labels: Vec<OutcomeLabel> = cohort.records.iter().map(|r| r.outcome_label).collect();
        for l in [OutcomeLabel::FhPos, OutcomeLabel::FhNeg, OutcomeLabel::Unknown, OutcomeLabel::Pending] {
            assert!(labels.contains(&l), "{l:?} missing");
        }
    }
}
