//! Embryo records, outcome labeling, dataset construction and train/test
//! splitting.
//!
//! Outcome rules, applied per transfer event:
//!
//! * heartbeats equal to the number of transferred embryos: all `FH_POS`;
//! * zero heartbeats: all `FH_NEG` (route `transferred_negative`);
//! * anything in between, or no recorded count: all `UNKNOWN`;
//! * discarded embryos: `FH_NEG` (route `discarded`);
//! * neither transferred nor discarded: `PENDING`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::morpho::MorphokineticRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Insemination {
    #[serde(rename = "IVF")]
    Ivf,
    #[serde(rename = "ICSI")]
    Icsi,
    #[serde(rename = "unknown")]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IncubationDay {
    D5,
    D6,
    #[serde(rename = "unknown")]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferProtocol {
    Fresh,
    Cryopreserved,
    NotTransferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeLabel {
    FhPos,
    FhNeg,
    Unknown,
    Pending,
}

impl fmt::Display for OutcomeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OutcomeLabel::FhPos => "FH+",
            OutcomeLabel::FhNeg => "FH-",
            OutcomeLabel::Unknown => "Unknown",
            OutcomeLabel::Pending => "Pending",
        };
        f.write_str(s)
    }
}

/// How an embryo came to be `FH_NEG`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeRoute {
    TransferredNegative,
    Discarded,
}

/// One embryo's metadata and outcome. Serialized one per line in the cohort
/// manifest; absent values are written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbryoRecord {
    pub embryo_id: String,
    pub clinic_id: String,
    pub treatment_id: String,
    pub female_age: Option<u8>,
    pub insemination: Insemination,
    pub incubation_day: IncubationDay,
    pub transfer_protocol: TransferProtocol,
    pub transferred: bool,
    pub outcome_label: OutcomeLabel,
    pub fh_neg_route: Option<NegativeRoute>,
    pub kid: bool,
    pub sequence_ref: String,
    pub annotations: Option<MorphokineticRecord>,
}

impl EmbryoRecord {
    /// A record before labeling: not transferred, pending.
    pub fn unlabeled(embryo_id: &str, clinic_id: &str, treatment_id: &str) -> Self {
        Self {
            embryo_id: embryo_id.to_owned(),
            clinic_id: clinic_id.to_owned(),
            treatment_id: treatment_id.to_owned(),
            female_age: None,
            insemination: Insemination::Unknown,
            incubation_day: IncubationDay::Unknown,
            transfer_protocol: TransferProtocol::NotTransferred,
            transferred: false,
            outcome_label: OutcomeLabel::Pending,
            fh_neg_route: None,
            kid: false,
            sequence_ref: format!("sequences/{embryo_id}"),
            annotations: None,
        }
    }

    pub fn is_labeled(&self) -> bool {
        matches!(self.outcome_label, OutcomeLabel::FhPos | OutcomeLabel::FhNeg)
    }

    pub fn is_positive(&self) -> bool {
        self.outcome_label == OutcomeLabel::FhPos
    }

    pub fn is_discarded(&self) -> bool {
        self.fh_neg_route == Some(NegativeRoute::Discarded)
    }

    /// Checks the record-level invariants.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.kid && !(self.transferred && self.is_labeled()) {
            return Err(format!("{}: KID requires a transferred, labeled embryo", self.embryo_id));
        }
        if !self.transferred && self.transfer_protocol != TransferProtocol::NotTransferred {
            return Err(format!("{}: untransferred embryo has a transfer protocol", self.embryo_id));
        }
        if self.outcome_label == OutcomeLabel::Pending && self.transferred {
            return Err(format!("{}: pending embryo marked transferred", self.embryo_id));
        }
        if (self.outcome_label == OutcomeLabel::FhNeg) != self.fh_neg_route.is_some() {
            return Err(format!("{}: negative route inconsistent with label", self.embryo_id));
        }
        Ok(())
    }
}

/// A treatment's transfer and its ultrasound outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub treatment_id: String,
    pub embryo_ids: Vec<String>,
    pub num_fetal_heartbeats: Option<u32>,
    pub discarded_ids: Vec<String>,
}

/// Labels every record from the transfer events. Existing labels on the
/// input records are ignored, so the operation is idempotent.
pub fn label_outcomes(events: &[TransferEvent], embryos: &[EmbryoRecord]) -> Result<Vec<EmbryoRecord>> {
    let mut index = HashMap::with_capacity(embryos.len());
    for (i, e) in embryos.iter().enumerate() {
        if index.insert(e.embryo_id.as_str(), i).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate embryo id `{}`", e.embryo_id)));
        }
    }

    // embryo index -> outcome for transferred embryos
    let mut transferred: HashMap<usize, OutcomeLabel> = HashMap::new();
    let mut discarded: HashSet<usize> = HashSet::new();

    for event in events {
        let n = event.embryo_ids.len();
        if let Some(k) = event.num_fetal_heartbeats {
            if k as usize > n {
                return Err(Error::TooManyHeartbeats {
                    treatment: event.treatment_id.clone(),
                    heartbeats: k,
                    transferred: n,
                });
            }
        }
        let label = match event.num_fetal_heartbeats {
            Some(0) => OutcomeLabel::FhNeg,
            Some(k) if k as usize == n => OutcomeLabel::FhPos,
            _ => OutcomeLabel::Unknown,
        };
        for id in &event.embryo_ids {
            let &i = index.get(id.as_str()).ok_or_else(|| Error::UnknownEmbryo(id.clone()))?;
            if transferred.insert(i, label).is_some() {
                return Err(Error::DuplicateTransfer(id.clone()));
            }
        }
        for id in &event.discarded_ids {
            let &i = index.get(id.as_str()).ok_or_else(|| Error::UnknownEmbryo(id.clone()))?;
            discarded.insert(i);
        }
    }
    if let Some(&i) = discarded.iter().find(|i| transferred.contains_key(i)) {
        return Err(Error::TransferredAndDiscarded(embryos[i].embryo_id.clone()));
    }

    embryos
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut rec = rec.clone();
            if let Some(&label) = transferred.get(&i) {
                if rec.transfer_protocol == TransferProtocol::NotTransferred {
                    return Err(Error::MissingProtocol(rec.embryo_id));
                }
                rec.transferred = true;
                rec.outcome_label = label;
                rec.fh_neg_route = (label == OutcomeLabel::FhNeg).then_some(NegativeRoute::TransferredNegative);
                rec.kid = rec.is_labeled();
            } else {
                rec.transferred = false;
                rec.transfer_protocol = TransferProtocol::NotTransferred;
                rec.kid = false;
                if discarded.contains(&i) {
                    rec.outcome_label = OutcomeLabel::FhNeg;
                    rec.fh_neg_route = Some(NegativeRoute::Discarded);
                } else {
                    rec.outcome_label = OutcomeLabel::Pending;
                    rec.fh_neg_route = None;
                }
            }
            Ok(rec)
        })
        .collect()
}

/// Label counts of a labeled cohort.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub fh_pos: usize,
    pub fh_neg_transferred: usize,
    pub fh_neg_discarded: usize,
    pub unknown: usize,
    pub pending: usize,
}

impl DatasetReport {
    pub fn tally(records: &[EmbryoRecord]) -> Self {
        let mut r = Self::default();
        for rec in records {
            match (rec.outcome_label, rec.fh_neg_route) {
                (OutcomeLabel::FhPos, _) => r.fh_pos += 1,
                (OutcomeLabel::FhNeg, Some(NegativeRoute::Discarded)) => r.fh_neg_discarded += 1,
                (OutcomeLabel::FhNeg, _) => r.fh_neg_transferred += 1,
                (OutcomeLabel::Unknown, _) => r.unknown += 1,
                (OutcomeLabel::Pending, _) => r.pending += 1,
            }
        }
        r
    }

    /// Transferred embryos with a definite outcome.
    pub fn kid(&self) -> usize {
        self.fh_pos + self.fh_neg_transferred
    }

    /// Size of the final dataset (FH+ and FH- through either route).
    pub fn labeled(&self) -> usize {
        self.fh_pos + self.fh_neg_transferred + self.fh_neg_discarded
    }
}

impl fmt::Display for DatasetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "FH+ {} | FH- transferred {} | FH- discarded {} | unknown {} (excluded) | pending {} (excluded) | labeled {} | KID {}",
            self.fh_pos,
            self.fh_neg_transferred,
            self.fh_neg_discarded,
            self.unknown,
            self.pending,
            self.labeled(),
            self.kid()
        )
    }
}

/// Keeps exactly the `FH_POS` and `FH_NEG` records.
pub fn build_dataset(embryos: &[EmbryoRecord]) -> Result<(Vec<EmbryoRecord>, DatasetReport)> {
    let report = DatasetReport::tally(embryos);
    let kept: Vec<EmbryoRecord> = embryos.iter().filter(|r| r.is_labeled()).cloned().collect();
    if kept.is_empty() {
        return Err(Error::DegenerateDataset(format!(
            "no FH+ or FH- embryos among {} records",
            embryos.len()
        )));
    }
    Ok((kept, report))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Each embryo is assigned independently of its treatment and clinic.
    #[default]
    PerEmbryo,
    /// Whole treatments go to one side.
    GroupedByTreatment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn train_fraction(&self) -> f64 {
        self.train_ids.len() as f64 / (self.train_ids.len() + self.test_ids.len()) as f64
    }
}

/// Per-embryo random split; `round(fraction * n)` embryos go to training.
pub fn split_dataset(embryos: &[EmbryoRecord], fraction: f64, seed: u64) -> Result<DatasetSplit> {
    split_dataset_with(embryos, fraction, seed, SplitMode::PerEmbryo)
}

pub fn split_dataset_with(
    embryos: &[EmbryoRecord],
    fraction: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {fraction} outside (0, 1)")));
    }
    if embryos.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 embryos to split, got {}",
            embryos.len()
        )));
    }
    let mut ids: Vec<&str> = embryos.iter().map(|e| e.embryo_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument(format!("duplicate embryo id `{}`", w[0])));
    }
    let n = ids.len();
    let target = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let train_ids: BTreeSet<String> = match mode {
        SplitMode::PerEmbryo => {
            ids.shuffle(&mut rng);
            ids[..target].iter().map(|s| s.to_string()).collect()
        }
        SplitMode::GroupedByTreatment => {
            let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
            for e in embryos {
                groups.entry(e.treatment_id.as_str()).or_default().push(&e.embryo_id);
            }
            let mut groups: Vec<Vec<&str>> = groups.into_values().collect();
            groups.shuffle(&mut rng);
            let mut train = BTreeSet::new();
            for g in groups {
                if train.len() >= target {
                    break;
                }
                train.extend(g.into_iter().map(str::to_string));
            }
            if train.len() == n {
                return Err(Error::DegenerateDataset(
                    "grouped split put every embryo in training".into(),
                ));
            }
            train
        }
    };
    let test_ids = ids
        .iter()
        .filter(|id| !train_ids.contains(**id))
        .map(|s| s.to_string())
        .collect();
    Ok(DatasetSplit {
        train_ids,
        test_ids,
        seed,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<EmbryoRecord>> {
    jsonl::read(path)
}

pub fn write_manifest(path: &Path, records: &[EmbryoRecord]) -> Result<()> {
    jsonl::write(path, records)
}

pub fn read_events(path: &Path) -> Result<Vec<TransferEvent>> {
    jsonl::read(path)
}

pub fn write_events(path: &Path, events: &[TransferEvent]) -> Result<()> {
    jsonl::write(path, events)
}
