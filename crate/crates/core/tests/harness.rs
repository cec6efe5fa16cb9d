use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use embryo_core::cohort::{EmbryoRecord, NegativeRoute, OutcomeLabel, TransferProtocol};
use embryo_core::experiments::{
    clinic_holdout, plan_holdout, subgroup_analysis, Dimension, HoldoutConfig, ScoreMap, SubgroupSpec,
};
use embryo_core::stats::Tail;

fn kid_record(id: String, clinic: &str, positive: bool, protocol: TransferProtocol) -> EmbryoRecord {
    let mut r = EmbryoRecord::unlabeled(&id, clinic, &format!("T-{id}"));
    r.transferred = true;
    r.kid = true;
    r.transfer_protocol = protocol;
    if positive {
        r.outcome_label = OutcomeLabel::FhPos;
    } else {
        r.outcome_label = OutcomeLabel::FhNeg;
        r.fh_neg_route = Some(NegativeRoute::TransferredNegative);
    }
    r
}

fn discarded(id: String, clinic: &str) -> EmbryoRecord {
    let mut r = EmbryoRecord::unlabeled(&id, clinic, &format!("T-{id}"));
    r.outcome_label = OutcomeLabel::FhNeg;
    r.fh_neg_route = Some(NegativeRoute::Discarded);
    r
}

/// Binormal separation giving the requested AUC.
fn shift(auc: f64) -> f64 {
    std::f64::consts::SQRT_2 * Normal::new(0.0, 1.0).unwrap().inverse_cdf(auc)
}

/// Probability-like score for one embryo at the given AUC.
fn score(rng: &mut impl Rng, positive: bool, auc: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    let x = z + if positive { shift(auc) } else { 0.0 };
    1.0 / (1.0 + (-x).exp())
}

/// Clinics with their KID counts and scorer AUC; half of the KID embryos
/// are positive. Each clinic also has a few discarded embryos.
fn cohort(rng: &mut impl Rng, clinics: &[(&str, usize, f64)]) -> (Vec<EmbryoRecord>, ScoreMap) {
    let mut records = Vec::new();
    let mut scores = ScoreMap::new();
    for &(clinic, n_kid, auc) in clinics {
        for i in 0..n_kid {
            let id = format!("{clinic}-{i}");
            let positive = i % 2 == 0;
            let protocol = if i % 3 == 0 { TransferProtocol::Cryopreserved } else { TransferProtocol::Fresh };
            scores.insert(id.clone(), score(rng, positive, auc));
            records.push(kid_record(id, clinic, positive, protocol));
        }
        for i in 0..20 {
            let id = format!("{clinic}-d{i}");
            scores.insert(id.clone(), score(rng, false, auc));
            records.push(discarded(id, clinic));
        }
    }
    (records, scores)
}

#[test]
fn holdout_folds_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (records, scores) = cohort(&mut rng, &[("A", 400, 0.7), ("B", 251, 0.7), ("C", 250, 0.7), ("D", 90, 0.7)]);
    let plan = plan_holdout(&records, 250);
    assert_eq!(plan.eligible_clinics, ["A", "B"]);
    assert_eq!(plan.folds.len(), 2);

    let clinics: BTreeSet<String> = records.iter().map(|r| r.clinic_id.clone()).collect();
    let mut seen_test = BTreeSet::new();
    let report = clinic_holdout(
        &records,
        |fold, train, test| {
            let train_ids: BTreeSet<&str> = train.iter().map(|r| r.embryo_id.as_str()).collect();
            let test_ids: BTreeSet<&str> = test.iter().map(|r| r.embryo_id.as_str()).collect();
            assert!(train_ids.is_disjoint(&test_ids));
            assert_eq!(train_ids.len() + test_ids.len(), records.len());
            assert!(test.iter().all(|r| r.clinic_id == fold.held_out));
            assert!(train.iter().all(|r| r.clinic_id != fold.held_out));
            // every other clinic trains, eligible or not
            let train_clinics: BTreeSet<String> = train.iter().map(|r| r.clinic_id.clone()).collect();
            assert_eq!(train_clinics.len(), clinics.len() - 1);
            for id in &test_ids {
                assert!(seen_test.insert(id.to_string()));
            }
            Ok(test.iter().map(|r| scores[&r.embryo_id]).collect())
        },
        &HoldoutConfig::default(),
    )
    .unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.pooled.n(), 651);
}

fn star_rate(weak_auc: f64, sims: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stars = 0;
    for _ in 0..sims {
        let (records, scores) = cohort(
            &mut rng,
            &[("A", 400, 0.7), ("B", 400, 0.7), ("C", 400, 0.7), ("W", 400, weak_auc), ("S", 100, 0.7)],
        );
        let report = clinic_holdout(
            &records,
            |_, _, test| Ok(test.iter().map(|r| scores[&r.embryo_id]).collect()),
            &HoldoutConfig::default(),
        )
        .unwrap();
        assert_eq!(report.plan.folds.len(), 4);
        if report.rows.iter().find(|r| r.clinic == "W").unwrap().star {
            stars += 1;
        }
    }
    stars as f64 / sims as f64
}

#[test]
fn planted_weak_clinic_is_starred() {
    let power = star_rate(0.6, 300, 2);
    assert!(power > 0.8, "power {power}");
}

#[test]
fn null_clinic_star_rate_is_near_alpha() {
    let rate = star_rate(0.7, 300, 3);
    assert!(rate < 0.1, "false star rate {rate}");
}

#[test]
fn planted_weak_subgroup_is_starred() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = [SubgroupSpec::new(Dimension::TransferProtocol)];
    let mut stars = BTreeMap::<String, usize>::new();
    let sims = 200;
    for _ in 0..sims {
        let (records, mut scores) = cohort(&mut rng, &[("A", 1500, 0.75)]);
        // cryopreserved transfers get a weaker scorer
        for r in records.iter().filter(|r| r.transfer_protocol == TransferProtocol::Cryopreserved) {
            scores.insert(r.embryo_id.clone(), score(&mut rng, r.outcome_label == OutcomeLabel::FhPos, 0.65));
        }
        let table = subgroup_analysis(&scores, &records, &spec, 0.05, Tail::One).unwrap();
        for row in table.rows.iter().filter(|r| r.star) {
            *stars.entry(row.bin.clone()).or_default() += 1;
        }
    }
    let rate = |bin: &str| stars.get(bin).copied().unwrap_or(0) as f64 / sims as f64;
    assert!(rate("Cryopreserved") > 0.8, "{stars:?}");
    assert!(rate("Fresh") < 0.05, "{stars:?}");
}
