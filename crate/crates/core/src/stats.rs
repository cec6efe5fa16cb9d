//! ROC/AUC estimation, DeLong variance, confidence intervals and tests, and
//! the Mann–Whitney–Wilcoxon test.
//!
//! Ties between a positive and a negative score count one half, so the AUC
//! is exactly the normalized Mann–Whitney U statistic. DeLong placement
//! values are computed from mid-ranks in `O(n log n)`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Direction of the alternative hypothesis, phrased as "first vs second".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// First AUC (or sample) is lower than the second.
    Less,
    /// First AUC (or sample) is greater than the second.
    Greater,
    TwoSided,
}

impl Alternative {
    pub fn tail(self) -> Tail {
        match self {
            Alternative::TwoSided => Tail::Two,
            _ => Tail::One,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    DelongPaired,
    DelongUnpaired,
    MannWhitney,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFlag {
    /// The standard error of the statistic is zero.
    ZeroVariance,
    /// Exact permutation distribution was used.
    Exact,
    NormalApproximation,
}

/// Outcome of a hypothesis test, serialized as
/// `{kind, tail, alternative, statistic, p, n_pos, n_neg, flags}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub tail: Tail,
    pub alternative: Alternative,
    pub statistic: f64,
    #[serde(rename = "p")]
    pub p_value: f64,
    /// Positives (DeLong) or size of the first sample (Mann–Whitney).
    pub n_pos: usize,
    /// Negatives (DeLong) or size of the second sample (Mann–Whitney).
    pub n_neg: usize,
    pub flags: Vec<TestFlag>,
}

impl TestResult {
    pub fn is_degenerate(&self) -> bool {
        self.flags.contains(&TestFlag::ZeroVariance)
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Two-sided critical value for a confidence level, e.g. 1.959964 for 0.95.
pub fn z_critical(level: f64) -> f64 {
    std_normal().inverse_cdf(0.5 + level / 2.0)
}

/// p-value of a standard normal statistic under the given alternative.
pub fn normal_p_value(z: f64, alternative: Alternative) -> f64 {
    let n = std_normal();
    let p = match alternative {
        Alternative::Greater => n.cdf(-z),
        Alternative::Less => n.cdf(z),
        Alternative::TwoSided => 2.0 * n.cdf(-z.abs()),
    };
    p.clamp(0.0, 1.0)
}

/// Mid-ranks (1-based, ties averaged).
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn split_classes(scores: &[f64], labels: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {s} is not a number")));
    }
    let pos = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    Ok((pos, neg))
}

/// Area under the ROC curve: the mean over (positive, negative) pairs of
/// 1 (positive scores higher), 1/2 (tie) or 0.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = split_classes(scores, labels)?;
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass {
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    Ok(auc_from_classes(&pos, &neg))
}

fn auc_from_classes(pos: &[f64], neg: &[f64]) -> f64 {
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let ranks = midranks(&all);
    let rank_sum: f64 = ranks[..pos.len()].iter().sum();
    (rank_sum - m * (m + 1.0) / 2.0) / (m * n)
}

/// DeLong structural components: one placement value per positive (share
/// of negatives it outranks) and per negative (share of positives that
/// outrank it).
#[derive(Debug, Clone, PartialEq)]
pub struct Placements {
    pub auc: f64,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl Placements {
    pub fn new(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let (pos, neg) = split_classes(scores, labels)?;
        if pos.len() < 2 || neg.len() < 2 {
            return Err(Error::TooFewPerClass {
                required: 2,
                positives: pos.len(),
                negatives: neg.len(),
            });
        }
        Ok(Self::from_classes(&pos, &neg))
    }

    fn from_classes(pos: &[f64], neg: &[f64]) -> Self {
        let (m, n) = (pos.len(), neg.len());
        let all: Vec<f64> = pos.iter().chain(neg).copied().collect();
        let combined = midranks(&all);
        let within_pos = midranks(pos);
        let within_neg = midranks(neg);
        let positive: Vec<f64> = (0..m).map(|i| (combined[i] - within_pos[i]) / n as f64).collect();
        let negative: Vec<f64> = (0..n)
            .map(|j| 1.0 - (combined[m + j] - within_neg[j]) / m as f64)
            .collect();
        Self {
            auc: auc_from_classes(pos, neg),
            positive,
            negative,
        }
    }

    /// `S10/m + S01/n` with sample variances (n - 1 denominators).
    pub fn variance(&self) -> f64 {
        covariance(&self.positive, &self.positive) / self.positive.len() as f64
            + covariance(&self.negative, &self.negative) / self.negative.len() as f64
    }
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

/// AUC and its DeLong variance.
pub fn delong_variance(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let p = Placements::new(scores, labels)?;
    Ok((p.auc, p.variance().max(0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    /// The unclipped interval left `[0, 1]`.
    pub clipped: bool,
}

impl ConfidenceInterval {
    pub fn around(auc: f64, variance: f64, level: f64) -> Self {
        let half = z_critical(level) * variance.max(0.0).sqrt();
        let (lo, hi) = (auc - half, auc + half);
        Self {
            lo: lo.max(0.0),
            hi: hi.min(1.0),
            level,
            clipped: lo < 0.0 || hi > 1.0,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

impl fmt::Display for ConfidenceInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} - {:.2}", self.lo, self.hi)
    }
}

/// `auc ± z(level)·sd`, clipped to `[0, 1]`.
pub fn delong_ci(scores: &[f64], labels: &[bool], level: f64) -> Result<ConfidenceInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} outside (0, 1)")));
    }
    let (auc, var) = delong_variance(scores, labels)?;
    Ok(ConfidenceInterval::around(auc, var, level))
}

/// Converts a difference and its variance to a test result. A zero
/// denominator with a zero difference yields a neutral p (0.5 one-tailed,
/// 1 two-tailed); with a nonzero difference the statistic is infinite.
fn z_test(kind: TestKind, diff: f64, var: f64, alternative: Alternative, n_pos: usize, n_neg: usize) -> TestResult {
    let mut flags = Vec::new();
    let (statistic, p_value) = if var <= 1e-300 {
        flags.push(TestFlag::ZeroVariance);
        if diff == 0.0 {
            let p = match alternative.tail() {
                Tail::One => 0.5,
                Tail::Two => 1.0,
            };
            (0.0, p)
        } else {
            let z = diff.signum() * f64::INFINITY;
            (z, normal_p_value(z, alternative))
        }
    } else {
        let z = diff / var.sqrt();
        (z, normal_p_value(z, alternative))
    };
    TestResult {
        kind,
        tail: alternative.tail(),
        alternative,
        statistic,
        p_value,
        n_pos,
        n_neg,
        flags,
    }
}

/// DeLong test for two scorers evaluated on the same embryos.
pub fn delong_test_paired(scores_a: &[f64], scores_b: &[f64], labels: &[bool], alternative: Alternative) -> Result<TestResult> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::LengthMismatch(format!(
            "paired scores have lengths {} and {}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    let a = Placements::new(scores_a, labels)?;
    let b = Placements::new(scores_b, labels)?;
    let (m, n) = (a.positive.len(), a.negative.len());
    let var_a = a.variance();
    let var_b = b.variance();
    let cov = covariance(&a.positive, &b.positive) / m as f64 + covariance(&a.negative, &b.negative) / n as f64;
    let var = (var_a + var_b - 2.0 * cov).max(0.0);
    Ok(z_test(TestKind::DelongPaired, a.auc - b.auc, var, alternative, m, n))
}

/// A labeled score sample, optionally carrying embryo ids so that overlap
/// between samples can be rejected.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub scores: &'a [f64],
    pub labels: &'a [bool],
    pub ids: Option<&'a [String]>,
}

impl<'a> Sample<'a> {
    pub fn new(scores: &'a [f64], labels: &'a [bool]) -> Self {
        Self { scores, labels, ids: None }
    }

    pub fn with_ids(mut self, ids: &'a [String]) -> Self {
        self.ids = Some(ids);
        self
    }
}

/// DeLong test for two scorers (or one scorer) on disjoint embryo sets.
pub fn delong_test_unpaired(a: Sample<'_>, b: Sample<'_>, alternative: Alternative) -> Result<TestResult> {
    if let (Some(ia), Some(ib)) = (a.ids, b.ids) {
        let set: std::collections::HashSet<&str> = ia.iter().map(String::as_str).collect();
        if let Some(dup) = ib.iter().find(|id| set.contains(id.as_str())) {
            return Err(Error::OverlappingSamples(dup.clone()));
        }
    }
    let pa = Placements::new(a.scores, a.labels)?;
    let pb = Placements::new(b.scores, b.labels)?;
    let var = pa.variance() + pb.variance();
    Ok(z_test(
        TestKind::DelongUnpaired,
        pa.auc - pb.auc,
        var,
        alternative,
        pa.positive.len() + pb.positive.len(),
        pa.negative.len() + pb.negative.len(),
    ))
}

/// U statistic of `a`: pairs with `a` above `b`, ties counting one half.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> f64 {
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&all);
    let na = a.len() as f64;
    ranks[..a.len()].iter().sum::<f64>() - na * (na + 1.0) / 2.0
}

fn has_ties(a: &[f64], b: &[f64]) -> bool {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(|x, y| x.partial_cmp(y).unwrap_or(Ordering::Equal));
    all.windows(2).any(|w| w[0] == w[1])
}

/// Largest combined size for which [`mann_whitney`] enumerates.
pub const EXACT_LIMIT: usize = 12;

/// Mann–Whitney–Wilcoxon test of `a` against `b`. Exact when the samples
/// are small and tie-free, otherwise the normal approximation with tie and
/// continuity corrections.
pub fn mann_whitney(a: &[f64], b: &[f64], alternative: Alternative) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("Mann-Whitney needs two non-empty samples".into()));
    }
    if a.len() + b.len() <= EXACT_LIMIT && !has_ties(a, b) {
        mann_whitney_exact(a, b, alternative)
    } else {
        mann_whitney_normal(a, b, alternative)
    }
}

/// Number of rank subsets per U value: `counts[u]` ways for the first
/// sample of size `na` (out of `na + nb`) to have statistic `u`.
fn u_distribution(na: usize, nb: usize) -> Vec<f64> {
    // ways[k][u]: choose k of the items seen so far with statistic u
    let max_u = na * nb;
    let mut ways = vec![vec![0.0f64; max_u + 1]; na + 1];
    ways[0][0] = 1.0;
    for item in 0..na + nb {
        for k in (1..=na.min(item + 1)).rev() {
            // the k-th chosen item at position `item` has (item - (k-1)) unchosen below it
            let below = item + 1 - k;
            if below > nb {
                continue;
            }
            for u in (below..=max_u).rev() {
                ways[k][u] += ways[k - 1][u - below];
            }
        }
    }
    ways.swap_remove(na)
}

pub fn mann_whitney_exact(a: &[f64], b: &[f64], alternative: Alternative) -> Result<TestResult> {
    if has_ties(a, b) {
        return Err(Error::InvalidArgument("exact Mann-Whitney requires tie-free samples".into()));
    }
    let u = mann_whitney_u(a, b).round() as usize;
    let counts = u_distribution(a.len(), b.len());
    let total: f64 = counts.iter().sum();
    let mean = (a.len() * b.len()) as f64 / 2.0;
    let mass = |pred: &dyn Fn(usize) -> bool| {
        counts.iter().enumerate().filter(|(k, _)| pred(*k)).map(|(_, c)| c).sum::<f64>() / total
    };
    let p = match alternative {
        Alternative::Greater => mass(&|k| k >= u),
        Alternative::Less => mass(&|k| k <= u),
        Alternative::TwoSided => {
            let d = (u as f64 - mean).abs();
            mass(&|k| (k as f64 - mean).abs() >= d - 1e-9)
        }
    };
    Ok(TestResult {
        kind: TestKind::MannWhitney,
        tail: alternative.tail(),
        alternative,
        statistic: u as f64,
        p_value: p.clamp(0.0, 1.0),
        n_pos: a.len(),
        n_neg: b.len(),
        flags: vec![TestFlag::Exact],
    })
}

pub fn mann_whitney_normal(a: &[f64], b: &[f64], alternative: Alternative) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("Mann-Whitney needs two non-empty samples".into()));
    }
    let u = mann_whitney_u(a, b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(|x, y| x.partial_cmp(y).unwrap_or(Ordering::Equal));
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j] == all[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)).max(1.0));
    let mean = na * nb / 2.0;
    let mut flags = vec![TestFlag::NormalApproximation];
    let (z, p) = if var <= 1e-300 {
        flags.push(TestFlag::ZeroVariance);
        (0.0, 1.0)
    } else {
        let sd = var.sqrt();
        let z = match alternative {
            Alternative::Greater => (u - mean - 0.5) / sd,
            Alternative::Less => (u - mean + 0.5) / sd,
            Alternative::TwoSided => ((u - mean).abs() - 0.5).max(0.0) / sd,
        };
        (z, normal_p_value(z, alternative))
    };
    let _ = z;
    Ok(TestResult {
        kind: TestKind::MannWhitney,
        tail: alternative.tail(),
        alternative,
        statistic: u,
        p_value: p,
        n_pos: a.len(),
        n_neg: b.len(),
        flags,
    })
}

/// ROC curve with AUC and, when each class has at least two members, the
/// DeLong variance and confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// Distinct score values, descending; point `k + 1` classifies scores
    /// `>= thresholds[k]` as positive. Point 0 is (0, 0).
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
    pub variance: Option<f64>,
    pub ci95: Option<ConfidenceInterval>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl RocResult {
    pub fn compute(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let (pos, neg) = split_classes(scores, labels)?;
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::SingleClass {
                positives: pos.len(),
                negatives: neg.len(),
            });
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
        let (m, n) = (pos.len() as f64, neg.len() as f64);
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut thresholds = Vec::new();
        let mut fpr = vec![0.0];
        let mut tpr = vec![0.0];
        let mut i = 0;
        while i < order.len() {
            let s = scores[order[i]];
            while i < order.len() && scores[order[i]] == s {
                if labels[order[i]] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            thresholds.push(s);
            fpr.push(fp as f64 / n);
            tpr.push(tp as f64 / m);
        }
        let (variance, ci95) = if pos.len() >= 2 && neg.len() >= 2 {
            let p = Placements::from_classes(&pos, &neg);
            let v = p.variance().max(0.0);
            (Some(v), Some(ConfidenceInterval::around(p.auc, v, 0.95)))
        } else {
            (None, None)
        };
        Ok(Self {
            thresholds,
            fpr,
            tpr,
            auc: auc_from_classes(&pos, &neg),
            variance,
            ci95,
            n_pos: pos.len(),
            n_neg: neg.len(),
        })
    }

    /// Trapezoidal area under the stored points.
    pub fn trapezoid_area(&self) -> f64 {
        self.fpr
            .windows(2)
            .zip(self.tpr.windows(2))
            .map(|(f, t)| (f[1] - f[0]) * (t[0] + t[1]) / 2.0)
            .sum()
    }

    /// Two whitespace-separated columns `fpr tpr`, one point per line.
    pub fn to_two_column(&self) -> String {
        let mut out = String::from("# fpr\ttpr\n");
        for (f, t) in self.fpr.iter().zip(&self.tpr) {
            out.push_str(&format!("{f:.6}\t{t:.6}\n"));
        }
        out
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::LengthMismatch(format!("pearson on {} and {} values", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("correlation of a constant sample".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation (Pearson on mid-ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&midranks(x), &midranks(y))
}

/// Kolmogorov–Smirnov distance between a sample and Uniform(0, 1).
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}
