//! Stratified batch sampling, focal loss on both heads, Adam with a
//! one-cycle learning-rate schedule, and scoring.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use embryo_core::augment::{stage1_temporal, stage2_spatial, AugmentationConfig};
use embryo_core::cohort::{EmbryoRecord, OutcomeLabel};
use embryo_core::score::ScoredEmbryo;
use embryo_core::seed::derive_seed;
use embryo_core::sequence::{
    frame_grid_with_step, read_sequence_dir, sample_sequence, FrameSequence, RawSequence, SampleOptions, GRID_START_HPI,
    MAX_END_TIME,
};
use embryo_core::stats::auc;
use embryo_core::synth::TRUTH_FILE;

use crate::error::{NetError, Result};
use crate::model::{Network, NetworkConfig, Profile};

/// Probabilities are clamped to `[FOCAL_EPSILON, 1 - FOCAL_EPSILON]` before the log.
pub const FOCAL_EPSILON: f64 = 1e-7;

/// `-alpha_t (1 - p_t)^gamma ln p_t`.
pub fn focal_loss(p: f64, y: f64, gamma: f64, alpha: f64) -> f64 {
    let p = p.clamp(FOCAL_EPSILON, 1.0 - FOCAL_EPSILON);
    let (pt, at) = if y >= 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Derivative of [`focal_loss`] with respect to `p` (zero where clamped).
pub fn focal_loss_grad(p: f64, y: f64, gamma: f64, alpha: f64) -> f64 {
    if !(FOCAL_EPSILON..=1.0 - FOCAL_EPSILON).contains(&p) {
        return 0.0;
    }
    let (pt, at, sign) = if y >= 0.5 { (p, alpha, 1.0) } else { (1.0 - p, 1.0 - alpha, -1.0) };
    let q = 1.0 - pt;
    let mut d = q.powf(gamma) / pt;
    if gamma != 0.0 {
        d -= gamma * q.powf(gamma - 1.0) * pt.ln();
    }
    -at * d * sign
}

/// Focal loss and its gradient with respect to the logit.
pub fn focal_loss_logit(logit: f64, y: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = 1.0 / (1.0 + (-logit).exp());
    (focal_loss(p, y, gamma, alpha), focal_loss_grad(p, y, gamma, alpha) * p * (1.0 - p))
}

/// One-cycle schedule: cosine ramp from `initial_lr` to `max_lr` over the
/// first `warmup_fraction` of steps, then cosine anneal to
/// `initial_lr / final_divisor` at the last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub initial_lr: f64,
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub final_divisor: f64,
}

impl OneCycle {
    pub fn new(initial_lr: f64, max_lr: f64) -> Self {
        Self {
            initial_lr,
            max_lr,
            warmup_fraction: 0.3,
            final_divisor: 10.0,
        }
    }

    pub fn peak_step(&self, total: usize) -> usize {
        (self.warmup_fraction * total as f64).floor() as usize
    }

    pub fn lr(&self, step: usize, total: usize) -> Result<f64> {
        if step >= total {
            return Err(NetError::StepOutOfRange { step, total });
        }
        let peak = self.peak_step(total);
        if peak == 0 || peak + 1 >= total {
            return Err(NetError::TrainConfig(format!(
                "one-cycle schedule needs a warm-up and an anneal phase; {total} steps is too few"
            )));
        }
        let lerp = |a: f64, b: f64, w: f64| a * (1.0 - w) + b * w;
        let cos_w = |num: usize, den: usize| (1.0 - (std::f64::consts::PI * num as f64 / den as f64).cos()) / 2.0;
        Ok(if step <= peak {
            lerp(self.initial_lr, self.max_lr, cos_w(step, peak))
        } else {
            let end = self.initial_lr / self.final_divisor;
            lerp(self.max_lr, end, cos_w(step - peak, total - 1 - peak))
        })
    }
}

pub fn one_cycle_lr(step: usize, total: usize, initial_lr: f64, max_lr: f64) -> Result<f64> {
    OneCycle::new(initial_lr, max_lr).lr(step, total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrataProbs {
    pub fh_pos_kid: f64,
    pub fh_neg_kid: f64,
    pub discarded: f64,
}

impl Default for StrataProbs {
    fn default() -> Self {
        Self {
            fh_pos_kid: 0.50,
            fh_neg_kid: 0.10,
            discarded: 0.40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: Profile,
    pub batch_size: usize,
    pub total_batches: usize,
    pub initial_lr: f64,
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub final_lr_divisor: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub strata_probs: StrataProbs,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            batch_size: 64,
            total_batches: 9264,
            initial_lr: 1e-5,
            max_lr: 1e-4,
            warmup_fraction: 0.3,
            final_lr_divisor: 10.0,
            focal_gamma: 2.0,
            focal_alpha: 0.5,
            strata_probs: StrataProbs::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-7,
            seed: 0,
        }
    }

    /// Short, higher-rate schedule for the small test network.
    pub fn tiny() -> Self {
        Self {
            profile: Profile::Tiny,
            batch_size: 8,
            total_batches: 600,
            initial_lr: 2e-4,
            max_lr: 2e-3,
            ..Self::paper()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Tiny => Self::tiny(),
        }
    }

    pub fn schedule(&self) -> OneCycle {
        OneCycle {
            initial_lr: self.initial_lr,
            max_lr: self.max_lr,
            warmup_fraction: self.warmup_fraction,
            final_divisor: self.final_lr_divisor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::TrainConfig(m));
        let s = self.strata_probs;
        let probs = [s.fh_pos_kid, s.fh_neg_kid, s.discarded];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("stratum probabilities {probs:?} must lie in [0, 1] and sum to 1"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr <= self.max_lr) {
            return bad(format!("need 0 < initial_lr ({}) <= max_lr ({})", self.initial_lr, self.max_lr));
        }
        if !(self.focal_gamma >= 0.0) {
            return bad(format!("focal gamma {} must be >= 0", self.focal_gamma));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return bad(format!("focal alpha {} outside (0, 1)", self.focal_alpha));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) || !(self.final_lr_divisor >= 1.0) {
            return bad("warm-up fraction must be in (0, 1) and the final divisor >= 1".into());
        }
        self.schedule().lr(0, self.total_batches).map(|_| ())
    }
}

/// Everything a training run is configured by; one file on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            network: NetworkConfig::for_profile(profile),
            train: TrainConfig::for_profile(profile),
            augmentation: AugmentationConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if self.network.profile != self.train.profile {
            return Err(NetError::TrainConfig(format!(
                "network profile {} differs from training profile {}",
                self.network.profile, self.train.profile
            )));
        }
        self.augmentation.validate().map_err(NetError::TrainConfig)
    }

    /// Nominal target times of the network input.
    pub fn grid(&self) -> Vec<f64> {
        nominal_grid(&self.network)
    }
}

pub fn nominal_grid(net: &NetworkConfig) -> Vec<f64> {
    frame_grid_with_step(GRID_START_HPI, net.input_frames, net.frame_spacing_hours)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    FhPosKid,
    FhNegKid,
    Discarded,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::FhPosKid, Stratum::FhNegKid, Stratum::Discarded];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::FhPosKid => "fh_pos_kid",
            Stratum::FhNegKid => "fh_neg_kid",
            Stratum::Discarded => "discarded",
        }
    }

    pub fn of(record: &EmbryoRecord) -> Option<Stratum> {
        match record.outcome_label {
            OutcomeLabel::FhPos if record.kid => Some(Stratum::FhPosKid),
            OutcomeLabel::FhNeg if record.kid => Some(Stratum::FhNegKid),
            OutcomeLabel::FhNeg if record.is_discarded() => Some(Stratum::Discarded),
            _ => None,
        }
    }
}

/// Indices into a training set, by stratum.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Strata {
    pub fh_pos_kid: Vec<usize>,
    pub fh_neg_kid: Vec<usize>,
    pub discarded: Vec<usize>,
}

impl Strata {
    pub fn from_records(records: &[EmbryoRecord]) -> Self {
        let mut s = Self::default();
        for (i, r) in records.iter().enumerate() {
            match Stratum::of(r) {
                Some(Stratum::FhPosKid) => s.fh_pos_kid.push(i),
                Some(Stratum::FhNegKid) => s.fh_neg_kid.push(i),
                Some(Stratum::Discarded) => s.discarded.push(i),
                None => {}
            }
        }
        s
    }

    pub fn get(&self, stratum: Stratum) -> &[usize] {
        match stratum {
            Stratum::FhPosKid => &self.fh_pos_kid,
            Stratum::FhNegKid => &self.fh_neg_kid,
            Stratum::Discarded => &self.discarded,
        }
    }

    pub fn check(&self) -> Result<()> {
        for s in Stratum::ALL {
            if self.get(s).is_empty() {
                return Err(NetError::EmptyStratum(s.name()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchItem {
    /// Index into the training records.
    pub index: usize,
    pub stratum: Stratum,
    pub fh_target: f64,
    pub discard_target: f64,
}

/// Draws `batch_size` slots: a stratum per slot from the configured
/// probabilities, then an embryo uniformly within it, with replacement.
pub fn sample_batch(
    strata: &Strata,
    records: &[EmbryoRecord],
    probs: &StrataProbs,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<BatchItem>> {
    strata.check()?;
    (0..batch_size)
        .map(|_| {
            let u: f64 = rng.gen();
            let stratum = if u < probs.fh_pos_kid {
                Stratum::FhPosKid
            } else if u < probs.fh_pos_kid + probs.fh_neg_kid {
                Stratum::FhNegKid
            } else {
                Stratum::Discarded
            };
            let pool = strata.get(stratum);
            let index = pool[rng.gen_range(0..pool.len())];
            let r = &records[index];
            Ok(BatchItem {
                index,
                stratum,
                fh_target: if r.is_positive() { 1.0 } else { 0.0 },
                discard_target: if r.is_discarded() { 1.0 } else { 0.0 },
            })
        })
        .collect()
}

/// Where raw time-lapse sequences come from.
pub trait SequenceSource {
    fn load(&self, record: &EmbryoRecord) -> Result<RawSequence>;
}

/// Sequences stored under a cohort directory at each record's `sequence_ref`.
#[derive(Debug, Clone)]
pub struct DirSource {
    root: PathBuf,
}

/// Rejects the synthetic ground-truth sidecar as model input.
pub fn guard_truth(path: &Path) -> Result<()> {
    let leak = path.file_name().is_some_and(|n| n == TRUTH_FILE) || (path.is_dir() && path.join(TRUTH_FILE).exists());
    if leak {
        return Err(embryo_core::Error::TruthLeak(path.to_owned()).into());
    }
    Ok(())
}

impl DirSource {
    pub fn new(root: &Path) -> Result<Self> {
        guard_truth(root)?;
        Ok(Self { root: root.to_owned() })
    }
}

impl SequenceSource for DirSource {
    fn load(&self, record: &EmbryoRecord) -> Result<RawSequence> {
        let dir = self.root.join(&record.sequence_ref);
        guard_truth(&dir)?;
        Ok(read_sequence_dir(&dir, &record.embryo_id)?)
    }
}

/// In-memory sequences by embryo id.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    pub sequences: HashMap<String, RawSequence>,
}

impl SequenceSource for MemorySource {
    fn load(&self, record: &EmbryoRecord) -> Result<RawSequence> {
        self.sequences
            .get(&record.embryo_id)
            .cloned()
            .ok_or_else(|| embryo_core::Error::InvalidArgument(format!("no sequence for `{}`", record.embryo_id)).into())
    }
}

/// Augmented training input for one slot.
pub fn training_example(raw: &RawSequence, cfg: &RunConfig, rng: &mut impl Rng) -> Result<FrameSequence> {
    let opts = SampleOptions {
        side: cfg.network.input_side,
        ..SampleOptions::default()
    };
    let t = stage1_temporal(&cfg.grid(), &cfg.augmentation, rng);
    let seq = sample_sequence(raw, &t.targets, t.focal_offset, t.end_time, &opts)?;
    Ok(stage2_spatial(&seq, &cfg.augmentation, rng).0)
}

/// Un-augmented input: nominal grid, central plane, full length.
pub fn evaluation_example(raw: &RawSequence, net: &NetworkConfig) -> Result<FrameSequence> {
    let opts = SampleOptions {
        side: net.input_side,
        ..SampleOptions::default()
    };
    Ok(sample_sequence(raw, &nominal_grid(net), 0, MAX_END_TIME, &opts)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss_fh: f64,
    pub loss_discard: f64,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut k = 0;
        net.visit_params(&mut |p| {
            if ms.len() == k {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut ms[k], &mut vs[k]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            k += 1;
        });
    }
}

/// Mean focal losses of a batch and the logit gradients of their sum
/// averaged over the batch.
pub fn batch_loss(logits: &[(f64, f64)], items: &[BatchItem], cfg: &TrainConfig) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let n = items.len() as f64;
    let (mut lf, mut ld) = (0.0, 0.0);
    let mut gf = Vec::with_capacity(items.len());
    let mut gd = Vec::with_capacity(items.len());
    for (&(a, b), it) in logits.iter().zip(items) {
        let (l, g) = focal_loss_logit(a, it.fh_target, cfg.focal_gamma, cfg.focal_alpha);
        lf += l;
        gf.push(g / n);
        let (l, g) = focal_loss_logit(b, it.discard_target, cfg.focal_gamma, cfg.focal_alpha);
        ld += l;
        gd.push(g / n);
    }
    (lf / n, ld / n, gf, gd)
}

/// Seed of the freshly initialized network for a run.
pub fn init_seed(cfg: &TrainConfig) -> u64 {
    derive_seed(cfg.seed, &[b"init"])
}

/// Trains `net` in place on `records` and returns the per-step log.
/// `on_step` sees each log entry as it is produced.
pub fn train(
    net: &mut Network,
    records: &[EmbryoRecord],
    source: &dyn SequenceSource,
    cfg: &RunConfig,
    mut on_step: impl FnMut(&LogEntry),
) -> Result<Vec<LogEntry>> {
    cfg.validate()?;
    if net.config() != &cfg.network {
        return Err(NetError::Incompatible("network was built from a different config".into()));
    }
    let tc = &cfg.train;
    let strata = Strata::from_records(records);
    strata.check()?;
    let schedule = tc.schedule();
    let mut adam = Adam::new(tc.adam_beta1, tc.adam_beta2, tc.adam_epsilon);
    net.reseed_dropout(derive_seed(tc.seed, &[b"dropout"]));
    let mut log = Vec::with_capacity(tc.total_batches);
    for step in 0..tc.total_batches {
        let lr = schedule.lr(step, tc.total_batches)?;
        let step_bytes = (step as u64).to_le_bytes();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[b"batch", &step_bytes]));
        let items = sample_batch(&strata, records, &tc.strata_probs, tc.batch_size, &mut rng)?;
        let mut batch = Vec::with_capacity(items.len());
        for (slot, it) in items.iter().enumerate() {
            let rec = &records[it.index];
            let slot_bytes = (slot as u64).to_le_bytes();
            let mut aug = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[b"augment", &step_bytes, &slot_bytes]));
            batch.push(training_example(&source.load(rec)?, cfg, &mut aug)?);
        }
        let x = net.input_tensor(&batch)?;
        drop(batch);
        let (logits, tape) = net.forward_train(&x)?;
        let (loss_fh, loss_discard, gf, gd) = batch_loss(&logits, &items, tc);
        if !(loss_fh.is_finite() && loss_discard.is_finite()) {
            let ids: Vec<&str> = items.iter().map(|it| records[it.index].embryo_id.as_str()).collect();
            return Err(NetError::NonFiniteLoss {
                step,
                embryos: ids.join(", "),
            });
        }
        net.zero_grad();
        net.backward(tape, &gf, &gd);
        adam.step(net, lr);
        let entry = LogEntry {
            step,
            lr,
            loss_fh,
            loss_discard,
        };
        on_step(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Scores every record with the evaluation-mode network.
pub fn score_records(net: &Network, records: &[EmbryoRecord], source: &dyn SequenceSource) -> Result<Vec<ScoredEmbryo>> {
    const CHUNK: usize = 8;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(CHUNK) {
        let batch = chunk
            .iter()
            .map(|r| evaluation_example(&source.load(r)?, net.config()))
            .collect::<Result<Vec<_>>>()?;
        for (r, o) in chunk.iter().zip(net.predict(&batch)?) {
            out.push(ScoredEmbryo::new(r.embryo_id.clone(), o.fh_probability)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Whole-cohort AUC on the labeled test embryos, when both classes occur.
    pub auc: Option<f64>,
}

/// Assigns whole treatments to `k` folds.
pub fn treatment_folds(records: &[EmbryoRecord], k: usize, seed: u64) -> Result<Vec<BTreeSet<String>>> {
    let mut treatments: Vec<&str> = records.iter().map(|r| r.treatment_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    if k < 2 || treatments.len() < k {
        return Err(NetError::TrainConfig(format!(
            "{k}-fold cross-validation needs k >= 2 and at least k treatments (have {})",
            treatments.len()
        )));
    }
    treatments.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![BTreeSet::new(); k];
    for (i, t) in treatments.into_iter().enumerate() {
        folds[i % k].insert(t.to_owned());
    }
    Ok(folds)
}

/// Treatment-grouped k-fold cross-validation with fresh networks.
pub fn cross_validate(records: &[EmbryoRecord], source: &dyn SequenceSource, cfg: &RunConfig, k: usize) -> Result<Vec<FoldResult>> {
    let folds = treatment_folds(records, k, derive_seed(cfg.train.seed, &[b"folds"]))?;
    let mut results = Vec::with_capacity(k);
    for (fold, held) in folds.iter().enumerate() {
        let (test, train_set): (Vec<EmbryoRecord>, Vec<EmbryoRecord>) =
            records.iter().cloned().partition(|r| held.contains(&r.treatment_id));
        let mut net = Network::build(&cfg.network, init_seed(&cfg.train))?;
        train(&mut net, &train_set, source, cfg, |_| {})?;
        let labeled: Vec<EmbryoRecord> = test.iter().filter(|r| r.is_labeled()).cloned().collect();
        let scores = score_records(&net, &labeled, source)?;
        let p: Vec<f64> = scores.iter().map(|s| s.fh_probability).collect();
        let y: Vec<bool> = labeled.iter().map(|r| r.is_positive()).collect();
        results.push(FoldResult {
            fold,
            n_train: train_set.len(),
            n_test: test.len(),
            auc: auc(&p, &y).ok(),
        });
    }
    Ok(results)
}
