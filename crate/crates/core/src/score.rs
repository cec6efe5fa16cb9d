//! Scored embryos and the [1.0, 9.9] score scale.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 9.9;

/// Maps a probability in `[0, 1]` to `1.0 + 8.9 p`.
pub fn rescale_score(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    Ok(SCORE_MIN + (SCORE_MAX - SCORE_MIN) * p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEmbryo {
    pub embryo_id: String,
    pub fh_probability: f64,
    pub idascore: f64,
}

impl ScoredEmbryo {
    pub fn new(embryo_id: impl Into<String>, fh_probability: f64) -> Result<Self> {
        Ok(Self {
            embryo_id: embryo_id.into(),
            idascore: rescale_score(fh_probability)?,
            fh_probability,
        })
    }
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredEmbryo>> {
    jsonl::read(path)
}

pub fn write_scores(path: &Path, scores: &[ScoredEmbryo]) -> Result<()> {
    jsonl::write(path, scores)
}

/// Probability per embryo id; duplicate ids are rejected.
pub fn score_map(scores: &[ScoredEmbryo]) -> Result<BTreeMap<String, f64>> {
    let mut map = BTreeMap::new();
    for s in scores {
        if map.insert(s.embryo_id.clone(), s.fh_probability).is_some() {
            return Err(Error::ScoreSetMismatch(format!("embryo `{}` scored twice", s.embryo_id)));
        }
    }
    Ok(map)
}

/// Checks that two score sets cover exactly the same embryos.
pub fn same_embryos(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<()> {
    let ka: BTreeSet<&String> = a.keys().collect();
    let kb: BTreeSet<&String> = b.keys().collect();
    if let Some(id) = ka.symmetric_difference(&kb).next() {
        return Err(Error::ScoreSetMismatch(format!("embryo `{id}` is scored by only one model")));
    }
    Ok(())
}
