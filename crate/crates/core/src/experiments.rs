//! Evaluation reports: KID and whole-cohort AUC, subgroup tables,
//! leave-one-clinic-out hold-out, morphokinetic score groups and paired
//! model comparison.
//!
//! Every report is a pure function of the persisted scores and the cohort
//! manifest. Scores are passed as probabilities keyed by embryo id; AUCs are
//! invariant to the [1.0, 9.9] rescale, group means are reported on it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::cohort::{EmbryoRecord, IncubationDay, Insemination, TransferProtocol};
use crate::error::{Error, Result};
use crate::morpho::{classify_direct_cleavage, tb_group, CleavagePattern, Grade, TbGroup};
use crate::score::rescale_score;
use crate::stats::{
    delong_test_paired, delong_test_unpaired, mann_whitney, mean_sd, Alternative, ConfidenceInterval, RocResult, Sample,
    Tail, TestResult,
};

/// Probability of fetal heartbeat per embryo id.
pub type ScoreMap = BTreeMap<String, f64>;

pub const DEFAULT_THRESHOLD_KID: usize = 250;
pub const DEFAULT_ALPHA: f64 = 0.05;

/// `direction` for one-tailed tests, two-sided otherwise.
fn alternative(tail: Tail, direction: Alternative) -> Alternative {
    match tail {
        Tail::One => direction,
        Tail::Two => Alternative::TwoSided,
    }
}

fn tail_text(tail: Tail) -> &'static str {
    match tail {
        Tail::One => "one-tailed",
        Tail::Two => "two-tailed",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub n_pos: usize,
    pub n_neg: usize,
    /// Absent when one class is empty.
    pub auc: Option<f64>,
    /// Absent with fewer than two examples in either class.
    pub ci95: Option<ConfidenceInterval>,
}

impl AucSummary {
    pub fn of(scores: &[f64], labels: &[bool]) -> Self {
        let n_pos = labels.iter().filter(|l| **l).count();
        let n_neg = labels.len() - n_pos;
        match RocResult::compute(scores, labels) {
            Ok(roc) => Self {
                n_pos,
                n_neg,
                auc: Some(roc.auc),
                ci95: roc.ci95,
            },
            Err(_) => Self {
                n_pos,
                n_neg,
                auc: None,
                ci95: None,
            },
        }
    }

    pub fn n(&self) -> usize {
        self.n_pos + self.n_neg
    }

    fn auc_text(&self) -> String {
        match (self.auc, self.ci95) {
            (Some(a), Some(ci)) => format!("{a:.3}  ({:.3} - {:.3}){}", ci.lo, ci.hi, if ci.clipped { " c" } else { "" }),
            (Some(a), None) => format!("{a:.3}"),
            _ => "-".into(),
        }
    }
}

/// Scores and labels for labeled records matching `keep`, in record order.
fn gather<'a>(
    scores: &ScoreMap,
    records: impl IntoIterator<Item = &'a EmbryoRecord>,
) -> Result<(Vec<&'a EmbryoRecord>, Vec<f64>, Vec<bool>)> {
    let mut recs = Vec::new();
    let mut s = Vec::new();
    let mut l = Vec::new();
    for r in records {
        if !r.is_labeled() {
            continue;
        }
        let p = scores
            .get(&r.embryo_id)
            .ok_or_else(|| Error::ScoreSetMismatch(format!("embryo `{}` has no score", r.embryo_id)))?;
        recs.push(r);
        s.push(*p);
        l.push(r.is_positive());
    }
    Ok((recs, s, l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEvaluation {
    /// Transferred embryos with known implantation data.
    pub kid: Option<AucSummary>,
    /// All labeled embryos, discarded ones included.
    pub all: AucSummary,
}

pub fn evaluate_cohorts(scores: &ScoreMap, records: &[EmbryoRecord]) -> Result<CohortEvaluation> {
    let (_, s, l) = gather(scores, records)?;
    let all = AucSummary::of(&s, &l);
    let (kid_recs, ks, kl) = gather(scores, records.iter().filter(|r| r.kid))?;
    let kid = if kid_recs.is_empty() {
        log::warn!("no KID embryos among the evaluated records; KID AUC omitted");
        None
    } else {
        Some(AucSummary::of(&ks, &kl))
    };
    Ok(CohortEvaluation { kid, all })
}

impl fmt::Display for CohortEvaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>6} {:>6}  AUC (95% CI)", "Cohort", "FH+", "FH-")?;
        if let Some(k) = &self.kid {
            writeln!(f, "{:<14} {:>6} {:>6}  {}", "KID", k.n_pos, k.n_neg, k.auc_text())?;
        } else {
            writeln!(f, "{:<14} {:>6} {:>6}  -", "KID", 0, 0)?;
        }
        writeln!(f, "{:<14} {:>6} {:>6}  {}", "All embryos", self.all.n_pos, self.all.n_neg, self.all.auc_text())?;
        writeln!(f)?;
        writeln!(f, "Reference values (real-world cohort): KID 0.67 (0.64 - 0.69), all embryos 0.95 (0.95 - 0.96)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Age,
    Insemination,
    IncubationLength,
    TransferProtocol,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Age,
        Dimension::Insemination,
        Dimension::IncubationLength,
        Dimension::TransferProtocol,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Age => "Age",
            Dimension::Insemination => "Insemination",
            Dimension::IncubationLength => "Incubation",
            Dimension::TransferProtocol => "Transfer",
        }
    }

    pub fn bins(self) -> &'static [&'static str] {
        match self {
            Dimension::Age => &["<30", "30-34", "35-39", ">39"],
            Dimension::Insemination => &["IVF", "ICSI"],
            Dimension::IncubationLength => &["Day 5", "Day 6"],
            Dimension::TransferProtocol => &["Fresh", "Cryopreserved"],
        }
    }

    /// Bin of a record, or `None` when the metadata is absent.
    pub fn bin_of(self, r: &EmbryoRecord) -> Option<&'static str> {
        let b = self.bins();
        match self {
            Dimension::Age => r.female_age.map(|a| match a {
                0..=29 => b[0],
                30..=34 => b[1],
                35..=39 => b[2],
                _ => b[3],
            }),
            Dimension::Insemination => match r.insemination {
                Insemination::Ivf => Some(b[0]),
                Insemination::Icsi => Some(b[1]),
                Insemination::Unknown => None,
            },
            Dimension::IncubationLength => match r.incubation_day {
                IncubationDay::D5 => Some(b[0]),
                IncubationDay::D6 => Some(b[1]),
                IncubationDay::Unknown => None,
            },
            Dimension::TransferProtocol => match r.transfer_protocol {
                TransferProtocol::Fresh => Some(b[0]),
                TransferProtocol::Cryopreserved => Some(b[1]),
                TransferProtocol::NotTransferred => None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupSpec {
    pub dimension: Dimension,
    pub bins: Vec<String>,
}

impl SubgroupSpec {
    pub fn new(dimension: Dimension) -> Self {
        Self {
            dimension,
            bins: dimension.bins().iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn standard() -> Vec<SubgroupSpec> {
        Dimension::ALL.into_iter().map(Self::new).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    /// `None` for the overall row.
    pub dimension: Option<Dimension>,
    pub bin: String,
    pub summary: AucSummary,
    /// One-tailed unpaired p for "bin lower than the rest of its dimension".
    pub p_value: Option<f64>,
    pub star: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupTable {
    pub alpha: f64,
    pub tail: Tail,
    pub rows: Vec<SubgroupRow>,
}

/// KID AUC per subgroup; a bin is starred when its AUC is significantly
/// lower than that of the remaining bins of the same dimension (or, with
/// `Tail::Two`, significantly different).
pub fn subgroup_analysis(
    scores: &ScoreMap,
    records: &[EmbryoRecord],
    specs: &[SubgroupSpec],
    alpha: f64,
    tail: Tail,
) -> Result<SubgroupTable> {
    let (kid, s, l) = gather(scores, records.iter().filter(|r| r.kid))?;
    let mut rows = vec![SubgroupRow {
        dimension: None,
        bin: "Overall".into(),
        summary: AucSummary::of(&s, &l),
        p_value: None,
        star: false,
        degenerate: false,
    }];
    for spec in specs {
        let bins: Vec<Option<&str>> = kid.iter().map(|r| spec.dimension.bin_of(r)).collect();
        for bin in &spec.bins {
            let pick = |inside: bool| -> (Vec<f64>, Vec<bool>, Vec<String>) {
                let mut out = (Vec::new(), Vec::new(), Vec::new());
                for (i, b) in bins.iter().enumerate() {
                    let Some(b) = b else { continue };
                    if (*b == bin.as_str()) == inside {
                        out.0.push(s[i]);
                        out.1.push(l[i]);
                        out.2.push(kid[i].embryo_id.clone());
                    }
                }
                out
            };
            let (bs, bl, bi) = pick(true);
            let (cs, cl, ci) = pick(false);
            let test = delong_test_unpaired(
                Sample::new(&bs, &bl).with_ids(&bi),
                Sample::new(&cs, &cl).with_ids(&ci),
                alternative(tail, Alternative::Less),
            )
            .ok();
            rows.push(SubgroupRow {
                dimension: Some(spec.dimension),
                bin: bin.clone(),
                summary: AucSummary::of(&bs, &bl),
                p_value: test.as_ref().map(|t| t.p_value),
                star: test.as_ref().is_some_and(|t| t.p_value < alpha),
                degenerate: test.as_ref().is_some_and(TestResult::is_degenerate),
            });
        }
    }
    Ok(SubgroupTable { alpha, tail, rows })
}

impl fmt::Display for SubgroupTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "KID embryos by subgroup. Star: {} unpaired DeLong test, bin vs the rest of its dimension, p < {}",
            tail_text(self.tail),
            self.alpha
        )?;
        writeln!(f, "{:<14} {:<14} {:>6} {:>6}  {:<26} {:>8}", "Dimension", "Subgroup", "FH+", "FH-", "AUC (95% CI)", "p")?;
        for r in &self.rows {
            let dim = r.dimension.map_or("", Dimension::name);
            let auc = format!("{}{}", r.summary.auc_text(), if r.star { " *" } else { "" });
            let p = r.p_value.map_or("-".into(), |p| format!("{p:.4}"));
            writeln!(f, "{dim:<14} {:<14} {:>6} {:>6}  {auc:<26} {p:>8}", r.bin, r.summary.n_pos, r.summary.n_neg)?;
        }
        writeln!(f)?;
        writeln!(
            f,
            "Reference values (real-world cohort): overall 0.67; ICSI n=738 0.69; fresh 0.69 vs cryopreserved 0.65 *"
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub held_out: String,
    pub training_clinics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutPlan {
    pub threshold_kid: usize,
    pub eligible_clinics: Vec<String>,
    pub folds: Vec<Fold>,
}

/// One fold per clinic with strictly more than `threshold_kid` KID embryos.
/// Each fold trains on every other clinic, eligible or not.
pub fn plan_holdout(records: &[EmbryoRecord], threshold_kid: usize) -> HoldoutPlan {
    let mut kid_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        let c = kid_counts.entry(r.clinic_id.as_str()).or_default();
        if r.kid {
            *c += 1;
        }
    }
    let clinics: Vec<String> = kid_counts.keys().map(|c| c.to_string()).collect();
    let eligible: Vec<String> = kid_counts
        .iter()
        .filter(|(_, &n)| n > threshold_kid)
        .map(|(c, _)| c.to_string())
        .collect();
    let folds = eligible
        .iter()
        .map(|held| Fold {
            held_out: held.clone(),
            training_clinics: clinics.iter().filter(|c| *c != held).cloned().collect(),
        })
        .collect();
    HoldoutPlan {
        threshold_kid,
        eligible_clinics: eligible,
        folds,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutConfig {
    pub threshold_kid: usize,
    pub alpha: f64,
    pub tail: Tail,
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        Self {
            threshold_kid: DEFAULT_THRESHOLD_KID,
            alpha: DEFAULT_ALPHA,
            tail: Tail::One,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRow {
    pub clinic: String,
    pub kid: AucSummary,
    /// Whole-cohort AUC of the clinic, logged alongside.
    pub all: AucSummary,
    /// One-tailed unpaired p for "clinic lower than the other held-out clinics pooled".
    pub p_value: Option<f64>,
    pub star: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub clinic: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub plan: HoldoutPlan,
    pub alpha: f64,
    pub tail: Tail,
    pub rows: Vec<HoldoutRow>,
    /// KID AUC over all held-out predictions pooled.
    pub pooled: AucSummary,
    pub failures: Vec<FoldFailure>,
}

/// Leave-one-clinic-out evaluation. `train_fn(fold, train, test)` trains on
/// `train` and returns one probability per `test` record, in order. A failing
/// fold is logged and skipped.
pub fn clinic_holdout<F>(records: &[EmbryoRecord], mut train_fn: F, config: &HoldoutConfig) -> Result<HoldoutReport>
where
    F: FnMut(&Fold, &[EmbryoRecord], &[EmbryoRecord]) -> Result<Vec<f64>>,
{
    let plan = plan_holdout(records, config.threshold_kid);
    let mut held: Vec<(String, Vec<EmbryoRecord>, ScoreMap)> = Vec::new();
    let mut failures = Vec::new();
    for fold in &plan.folds {
        let (test, train): (Vec<EmbryoRecord>, Vec<EmbryoRecord>) =
            records.iter().cloned().partition(|r| r.clinic_id == fold.held_out);
        let outcome = train_fn(fold, &train, &test).and_then(|p| {
            if p.len() == test.len() {
                Ok(p)
            } else {
                Err(Error::LengthMismatch(format!("{} scores for {} held-out embryos", p.len(), test.len())))
            }
        });
        match outcome {
            Ok(p) => {
                let map = test.iter().map(|r| r.embryo_id.clone()).zip(p).collect();
                held.push((fold.held_out.clone(), test, map));
            }
            Err(e) => {
                log::error!("hold-out fold for clinic {} failed: {e}", fold.held_out);
                failures.push(FoldFailure {
                    clinic: fold.held_out.clone(),
                    error: e.to_string(),
                });
            }
        }
    }

    let mut kid_parts = Vec::new();
    for (clinic, test, map) in &held {
        let (recs, s, l) = gather(map, test.iter().filter(|r| r.kid))?;
        let ids: Vec<String> = recs.iter().map(|r| r.embryo_id.clone()).collect();
        kid_parts.push((clinic.clone(), s, l, ids));
    }
    let pooled_s: Vec<f64> = kid_parts.iter().flat_map(|p| p.1.iter().copied()).collect();
    let pooled_l: Vec<bool> = kid_parts.iter().flat_map(|p| p.2.iter().copied()).collect();

    let mut rows = Vec::new();
    for ((clinic, test, map), (_, s, l, ids)) in held.iter().zip(&kid_parts) {
        let (_, all_s, all_l) = gather(map, test)?;
        let mut rest = (Vec::new(), Vec::new(), Vec::new());
        for (other, os, ol, oi) in &kid_parts {
            if other != clinic {
                rest.0.extend_from_slice(os);
                rest.1.extend_from_slice(ol);
                rest.2.extend_from_slice(oi);
            }
        }
        let test = delong_test_unpaired(
            Sample::new(s, l).with_ids(ids),
            Sample::new(&rest.0, &rest.1).with_ids(&rest.2),
            alternative(config.tail, Alternative::Less),
        )
        .ok();
        rows.push(HoldoutRow {
            clinic: clinic.clone(),
            kid: AucSummary::of(s, l),
            all: AucSummary::of(&all_s, &all_l),
            p_value: test.as_ref().map(|t| t.p_value),
            star: test.as_ref().is_some_and(|t| t.p_value < config.alpha),
        });
    }
    Ok(HoldoutReport {
        plan,
        alpha: config.alpha,
        tail: config.tail,
        rows,
        pooled: AucSummary::of(&pooled_s, &pooled_l),
        failures,
    })
}

impl fmt::Display for HoldoutReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "Leave-one-clinic-out on {} clinics with > {} KID embryos. Star: {} unpaired DeLong test, clinic vs the other held-out clinics pooled, p < {}",
            self.plan.eligible_clinics.len(),
            self.plan.threshold_kid,
            tail_text(self.tail),
            self.alpha
        )?;
        writeln!(f, "{:<12} {:>6} {:>6}  {:<26} {:>8}  {:<10}", "Clinic", "FH+", "FH-", "KID AUC (95% CI)", "p", "All AUC")?;
        for r in &self.rows {
            let auc = format!("{}{}", r.kid.auc_text(), if r.star { " *" } else { "" });
            let p = r.p_value.map_or("-".into(), |p| format!("{p:.4}"));
            let all = r.all.auc.map_or("-".into(), |a| format!("{a:.3}"));
            writeln!(f, "{:<12} {:>6} {:>6}  {auc:<26} {p:>8}  {all:<10}", r.clinic, r.kid.n_pos, r.kid.n_neg)?;
        }
        writeln!(f, "{:<12} {:>6} {:>6}  {}", "Pooled", self.pooled.n_pos, self.pooled.n_neg, self.pooled.auc_text())?;
        for fail in &self.failures {
            writeln!(f, "fold {} failed: {}", fail.clinic, fail.error)?;
        }
        writeln!(f)?;
        writeln!(f, "Reference values (real-world cohort): clinic KID AUCs 0.60 - 0.75, two of twelve clinics starred")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub label: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphoSection {
    pub title: String,
    pub groups: Vec<GroupStat>,
    pub pairwise: Vec<PairwiseTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphoReport {
    pub sections: Vec<MorphoSection>,
}

impl MorphoReport {
    pub fn section(&self, title: &str) -> Option<&MorphoSection> {
        self.sections.iter().find(|s| s.title == title)
    }
}

impl MorphoSection {
    pub fn group(&self, label: &str) -> Option<&GroupStat> {
        self.groups.iter().find(|g| g.label == label)
    }

    pub fn p(&self, a: &str, b: &str) -> Option<f64> {
        self.pairwise
            .iter()
            .find(|t| (t.a == a && t.b == b) || (t.a == b && t.b == a))
            .map(|t| t.p_value)
    }
}

pub const SECTION_DC_ALL: &str = "Direct cleavage, all annotated";
pub const SECTION_DC_BLAST: &str = "Direct cleavage, blastocysts";
pub const SECTION_TB: &str = "Time to blastocyst";
pub const SECTION_ICM: &str = "ICM grade";
pub const SECTION_TE: &str = "TE grade";

fn section(title: &str, groups: Vec<(String, Vec<f64>)>) -> Result<MorphoSection> {
    let groups: Vec<(String, Vec<f64>)> = groups.into_iter().filter(|(_, v)| !v.is_empty()).collect();
    let mut pairwise = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let t = mann_whitney(&groups[i].1, &groups[j].1, Alternative::TwoSided)?;
            pairwise.push(PairwiseTest {
                a: groups[i].0.clone(),
                b: groups[j].0.clone(),
                statistic: t.statistic,
                p_value: t.p_value,
            });
        }
    }
    let groups = groups
        .into_iter()
        .map(|(label, v)| {
            let (mean, sd) = mean_sd(&v);
            GroupStat { label, n: v.len(), mean, sd }
        })
        .collect();
    Ok(MorphoSection {
        title: title.into(),
        groups,
        pairwise,
    })
}

/// Mean rescaled score by morphokinetic group with two-tailed pairwise
/// Mann–Whitney tests. Only annotated records are used; labels are not.
pub fn morphokinetic_report(scores: &ScoreMap, records: &[EmbryoRecord]) -> Result<MorphoReport> {
    let mut annotated = Vec::new();
    for r in records {
        let Some(a) = &r.annotations else { continue };
        let p = scores
            .get(&r.embryo_id)
            .ok_or_else(|| Error::ScoreSetMismatch(format!("embryo `{}` has no score", r.embryo_id)))?;
        annotated.push((a, rescale_score(*p)?));
    }
    let dc_groups = |blast_only: bool| {
        [CleavagePattern::NoDc, CleavagePattern::Dc2_5, CleavagePattern::Dc1_3]
            .into_iter()
            .map(|pat| {
                let v = annotated
                    .iter()
                    .filter(|(a, _)| classify_direct_cleavage(a) == pat && (!blast_only || a.tb.is_some()))
                    .map(|(_, s)| *s)
                    .collect();
                (pat.label().to_string(), v)
            })
            .collect::<Vec<_>>()
    };
    let tb = TbGroup::ALL
        .into_iter()
        .map(|g| {
            let v = annotated.iter().filter(|(a, _)| tb_group(a) == Some(g)).map(|(_, s)| *s).collect();
            (g.label().to_string(), v)
        })
        .collect();
    let grade = |pick: fn(&crate::morpho::MorphokineticRecord) -> Option<Grade>| {
        Grade::ALL
            .into_iter()
            .map(|g| {
                let v = annotated.iter().filter(|(a, _)| pick(a) == Some(g)).map(|(_, s)| *s).collect();
                (g.to_string(), v)
            })
            .collect::<Vec<_>>()
    };
    Ok(MorphoReport {
        sections: vec![
            section(SECTION_DC_ALL, dc_groups(false))?,
            section(SECTION_DC_BLAST, dc_groups(true))?,
            section(SECTION_TB, tb)?,
            section(SECTION_ICM, grade(|a| a.icm))?,
            section(SECTION_TE, grade(|a| a.te))?,
        ],
    })
}

impl fmt::Display for MorphoReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mean score [1.0, 9.9] by morphokinetic group; pairwise two-tailed Mann-Whitney tests")?;
        for s in &self.sections {
            writeln!(f)?;
            writeln!(f, "{}", s.title)?;
            writeln!(f, "  {:<14} {:>6} {:>8} {:>8}", "Group", "n", "mean", "sd")?;
            for g in &s.groups {
                writeln!(f, "  {:<14} {:>6} {:>8.3} {:>8.3}", g.label, g.n, g.mean, g.sd)?;
            }
            for t in &s.pairwise {
                writeln!(f, "  {} vs {}: p = {:.4}", t.a, t.b, t.p_value)?;
            }
        }
        writeln!(f)?;
        writeln!(
            f,
            "Reference values (real-world cohort): all three DC groups differ (p < 0.0001); blastocysts DC1-3 vs DC2-5 p = 0.18"
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub cohort: String,
    pub roc_a: RocResult,
    pub roc_b: RocResult,
    /// Paired DeLong test, one-tailed alternative "A greater than B".
    pub test: TestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub label_a: String,
    pub label_b: String,
    pub tail: Tail,
    pub comparisons: Vec<ModelComparison>,
}

pub const COHORT_ANNOTATED: &str = "annotated";
pub const COHORT_ANNOTATED_KID: &str = "annotated_kid";

fn fully_graded(r: &EmbryoRecord) -> bool {
    r.annotations
        .as_ref()
        .is_some_and(|a| a.tb.is_some() && a.icm.is_some() && a.te.is_some())
}

/// Paired comparison of two scorers on labeled embryos annotated with tB,
/// ICM and TE, and on the KID part of that set. Both score sets must cover
/// every compared embryo.
pub fn compare_models(
    label_a: &str,
    scores_a: &ScoreMap,
    label_b: &str,
    scores_b: &ScoreMap,
    records: &[EmbryoRecord],
    tail: Tail,
) -> Result<ComparisonReport> {
    let subset: Vec<&EmbryoRecord> = records.iter().filter(|r| r.is_labeled() && fully_graded(r)).collect();
    for r in &subset {
        if scores_a.contains_key(&r.embryo_id) != scores_b.contains_key(&r.embryo_id) {
            return Err(Error::ScoreSetMismatch(format!("embryo `{}` is scored by only one model", r.embryo_id)));
        }
    }
    let mut comparisons = Vec::new();
    for (cohort, kid_only) in [(COHORT_ANNOTATED, false), (COHORT_ANNOTATED_KID, true)] {
        let recs: Vec<&EmbryoRecord> = subset.iter().copied().filter(|r| !kid_only || r.kid).collect();
        let (_, sa, labels) = gather(scores_a, recs.iter().copied())?;
        let (_, sb, _) = gather(scores_b, recs.iter().copied())?;
        let test = match delong_test_paired(&sa, &sb, &labels, alternative(tail, Alternative::Greater)) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("{cohort}: comparison skipped: {e}");
                continue;
            }
        };
        comparisons.push(ModelComparison {
            cohort: cohort.into(),
            roc_a: RocResult::compute(&sa, &labels)?,
            roc_b: RocResult::compute(&sb, &labels)?,
            test,
        });
    }
    Ok(ComparisonReport {
        label_a: label_a.into(),
        label_b: label_b.into(),
        tail,
        comparisons,
    })
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} vs {}: paired {} DeLong test{}",
            self.label_a,
            self.label_b,
            tail_text(self.tail),
            match self.tail {
                Tail::One => format!(" (alternative: {} higher)", self.label_a),
                Tail::Two => String::new(),
            }
        )?;
        let mut line = String::new();
        for c in &self.comparisons {
            let ci = |r: &RocResult| r.ci95.map_or(String::new(), |ci| format!(" ({:.3} - {:.3})", ci.lo, ci.hi));
            line.clear();
            let _ = write!(
                line,
                "{:<14} FH+ {:>5} FH- {:>5}  {} {:.3}{}  {} {:.3}{}  p = {:.4}{}",
                c.cohort,
                c.roc_a.n_pos,
                c.roc_a.n_neg,
                self.label_a,
                c.roc_a.auc,
                ci(&c.roc_a),
                self.label_b,
                c.roc_b.auc,
                ci(&c.roc_b),
                c.test.p_value,
                if c.test.is_degenerate() { " (degenerate)" } else { "" }
            );
            writeln!(f, "{line}")?;
        }
        writeln!(f)?;
        writeln!(
            f,
            "Reference values (real-world cohort, network vs rule-based model): annotated 0.92 vs 0.89 (significant); KID 0.67 vs 0.66 (not significant)"
        )
    }
}

/// Ids of embryos present in `records`, for restricting score files.
pub fn record_ids(records: &[EmbryoRecord]) -> BTreeSet<String> {
    records.iter().map(|r| r.embryo_id.clone()).collect()
}
