//! Morphokinetic annotations, direct-cleavage classification, time-to-blastocyst
//! grouping and a rule-based surrogate scorer.
//!
//! The surrogate scorer is a stand-in for a proprietary annotation-based
//! model. Its rule table is fixed and documented on [`baseline_score`]; it
//! is never a reproduction of the proprietary coefficients.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Direct cleavage threshold in hours (strict inequality).
pub const DIRECT_CLEAVAGE_HOURS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    A,
    B,
    C,
}

impl Grade {
    pub const ALL: [Grade; 3] = [Grade::A, Grade::B, Grade::C];

    /// 1.0 for A, 0.5 for B, 0.0 for C.
    pub fn quality(self) -> f64 {
        match self {
            Grade::A => 1.0,
            Grade::B => 0.5,
            Grade::C => 0.0,
        }
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Grade::A => "A",
            Grade::B => "B",
            Grade::C => "C",
        };
        f.write_str(s)
    }
}

/// Annotated developmental timings (hours post insemination) and blastocyst
/// grades. Every field may be absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MorphokineticRecord {
    pub pn: Option<u8>,
    #[serde(rename = "tPNf")]
    pub t_pnf: Option<f64>,
    pub t2: Option<f64>,
    pub t3: Option<f64>,
    pub t5: Option<f64>,
    #[serde(rename = "tB")]
    pub tb: Option<f64>,
    pub icm: Option<Grade>,
    pub te: Option<Grade>,
}

impl MorphokineticRecord {
    /// Checks positivity and ordering of the present timings.
    pub fn is_consistent(&self) -> bool {
        let chain = [self.t_pnf, self.t2, self.t3, self.t5, self.tb];
        if chain.iter().flatten().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return false;
        }
        let present: Vec<f64> = chain.iter().flatten().copied().collect();
        present.windows(2).all(|w| w[0] <= w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CleavagePattern {
    NoDc,
    Dc1_3,
    Dc2_5,
    Undetermined,
}

impl CleavagePattern {
    pub fn label(self) -> &'static str {
        match self {
            CleavagePattern::NoDc => "no-DC",
            CleavagePattern::Dc1_3 => "DC1-3",
            CleavagePattern::Dc2_5 => "DC2-5",
            CleavagePattern::Undetermined => "undetermined",
        }
    }
}

/// Classifies direct cleavages. DC1-3 takes precedence over DC2-5 when both
/// hold. `t2` is not required.
pub fn classify_direct_cleavage(rec: &MorphokineticRecord) -> CleavagePattern {
    let (Some(t_pnf), Some(t3), Some(t5)) = (rec.t_pnf, rec.t3, rec.t5) else {
        return CleavagePattern::Undetermined;
    };
    if t3 - t_pnf < DIRECT_CLEAVAGE_HOURS {
        CleavagePattern::Dc1_3
    } else if t5 - t3 < DIRECT_CLEAVAGE_HOURS {
        CleavagePattern::Dc2_5
    } else {
        CleavagePattern::NoDc
    }
}

/// Time-to-blastocyst bins, lower-inclusive: `[100, 105)` etc.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TbGroup {
    Below100,
    From100To105,
    From105To110,
    From110To115,
    Above115,
}

impl TbGroup {
    pub const ALL: [TbGroup; 5] = [
        TbGroup::Below100,
        TbGroup::From100To105,
        TbGroup::From105To110,
        TbGroup::From110To115,
        TbGroup::Above115,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TbGroup::Below100 => "<100",
            TbGroup::From100To105 => "100-105",
            TbGroup::From105To110 => "105-110",
            TbGroup::From110To115 => "110-115",
            TbGroup::Above115 => ">115",
        }
    }

    pub fn of(tb: f64) -> TbGroup {
        if tb < 100.0 {
            TbGroup::Below100
        } else if tb < 105.0 {
            TbGroup::From100To105
        } else if tb < 110.0 {
            TbGroup::From105To110
        } else if tb < 115.0 {
            TbGroup::From110To115
        } else {
            TbGroup::Above115
        }
    }
}

pub fn tb_group(rec: &MorphokineticRecord) -> Option<TbGroup> {
    rec.tb.map(TbGroup::of)
}

/// Bands of the surrogate rule score.
pub mod bands {
    /// Abnormal pronuclear count.
    pub const ABNORMAL_PN: f64 = 1.0;
    /// Short 2-to-3 cell cycle.
    pub const FAST_2_3: f64 = 2.0;
    /// Short 3-to-5 cell cycle.
    pub const FAST_3_5: f64 = 2.5;
    /// Lowest score of a normally cleaving embryo.
    pub const NORMAL_BASE: f64 = 4.0;
    pub const TB_WEIGHT: f64 = 2.9;
    pub const ICM_WEIGHT: f64 = 1.8;
    pub const TE_WEIGHT: f64 = 1.2;
    /// tB at or before this earns the full timing credit.
    pub const TB_FAST: f64 = 95.0;
    /// tB at or after this earns no timing credit.
    pub const TB_SLOW: f64 = 120.0;
}

/// Surrogate annotation-based score in `[1.0, 9.9]`, or `None` when any of
/// PN, t2, t3, t5, tB, ICM or TE is missing.
///
/// Only those seven inputs are used, so the fast-cleavage checks are phrased
/// on cell-cycle intervals (`t3 - t2`, `t5 - t3`) rather than on tPNf.
/// Rule table (evaluated top to bottom):
///
/// | condition                  | score                                           |
/// |----------------------------|-------------------------------------------------|
/// | PN != 2                    | 1.0                                             |
/// | t3 - t2 < 5 h              | 2.0                                             |
/// | t5 - t3 < 5 h              | 2.5                                             |
/// | otherwise                  | 4.0 + 2.9·speed + 1.8·icm + 1.2·te              |
///
/// with `speed = clamp((120 - tB) / 25, 0, 1)` and grade qualities
/// A = 1, B = 0.5, C = 0.
pub fn baseline_score(rec: &MorphokineticRecord) -> Option<f64> {
    let pn = rec.pn?;
    let t2 = rec.t2?;
    let t3 = rec.t3?;
    let t5 = rec.t5?;
    let tb = rec.tb?;
    let icm = rec.icm?;
    let te = rec.te?;

    if pn != 2 {
        return Some(bands::ABNORMAL_PN);
    }
    if t3 - t2 < DIRECT_CLEAVAGE_HOURS {
        return Some(bands::FAST_2_3);
    }
    if t5 - t3 < DIRECT_CLEAVAGE_HOURS {
        return Some(bands::FAST_3_5);
    }
    let speed = ((bands::TB_SLOW - tb) / (bands::TB_SLOW - bands::TB_FAST)).clamp(0.0, 1.0);
    let score = bands::NORMAL_BASE
        + bands::TB_WEIGHT * speed
        + bands::ICM_WEIGHT * icm.quality()
        + bands::TE_WEIGHT * te.quality();
    Some(score.clamp(1.0, 9.9))
}
