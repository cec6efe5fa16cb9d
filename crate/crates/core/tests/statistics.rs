use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use embryo_core::score::rescale_score;
use embryo_core::stats::{
    auc, delong_ci, delong_test_paired, delong_test_unpaired, delong_variance, ks_uniform, mann_whitney,
    mann_whitney_exact, mann_whitney_normal, Alternative, Sample,
};

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
fn concordance(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

/// Scores on a coarse grid so that ties are common; both classes present.
fn random_instance(rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(2..=200);
    let levels = rng.gen_range(2..=50);
    let shift = rng.gen_range(0.0..3.0);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = labels
        .iter()
        .map(|&l| {
            let z = normal(rng);
            ((z + if l { shift } else { 0.0 }) * levels as f64 / 4.0).round() / levels as f64
        })
        .collect();
    (scores, labels)
}

#[test]
fn auc_matches_brute_force_concordance() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let (s, l) = random_instance(&mut rng);
        let got = auc(&s, &l).unwrap();
        assert!((got - concordance(&s, &l)).abs() <= 1e-12);
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn delong_hand_case() {
    // placements: positives 0.8 -> 1, 0.6 -> 1/2; negatives 0.3 -> 0, 0.7 -> 1/2
    // auc 3/4; var of each placement set 1/8, divided by 2 and summed
    let s = [0.8, 0.6, 0.3, 0.7];
    let l = [true, true, false, false];
    let (a, v) = delong_variance(&s, &l).unwrap();
    assert!((a - 0.75).abs() <= 1e-12);
    assert!((v - 0.125).abs() <= 1e-12);
}

fn binormal(rng: &mut impl Rng, n_pos: usize, n_neg: usize, true_auc: f64) -> (Vec<f64>, Vec<bool>) {
    let d = std::f64::consts::SQRT_2 * Normal::new(0.0, 1.0).unwrap().inverse_cdf(true_auc);
    let mut s = Vec::with_capacity(n_pos + n_neg);
    let mut l = Vec::with_capacity(n_pos + n_neg);
    for i in 0..n_pos + n_neg {
        let z = normal(rng);
        let pos = i < n_pos;
        s.push(z + if pos { d } else { 0.0 });
        l.push(pos);
    }
    (s, l)
}

#[test]
fn delong_ci_coverage_is_calibrated() {
    let start = Instant::now();
    let trials = 2000;
    for (seed, true_auc) in [(2, 0.75), (3, 0.6)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let covered = (0..trials)
            .filter(|_| {
                let (s, l) = binormal(&mut rng, 100, 100, true_auc);
                delong_ci(&s, &l, 0.95).unwrap().contains(true_auc)
            })
            .count();
        let rate = covered as f64 / trials as f64;
        assert!((rate - 0.95).abs() <= 0.02, "auc {true_auc}: coverage {rate}");
    }
    assert!(start.elapsed().as_secs() < 300);
}

#[test]
fn unpaired_null_p_values_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p: Vec<f64> = (0..500)
        .map(|_| {
            let (sa, la) = binormal(&mut rng, 60, 90, 0.7);
            let (sb, lb) = binormal(&mut rng, 80, 120, 0.7);
            delong_test_unpaired(Sample::new(&sa, &la), Sample::new(&sb, &lb), Alternative::Less)
                .unwrap()
                .p_value
        })
        .collect();
    let ks = ks_uniform(&p);
    assert!(ks < 0.1, "KS {ks}");
}

#[test]
fn paired_null_p_values_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p: Vec<f64> = (0..500)
        .map(|_| {
            // two noisy readings of one latent score
            let (latent, l) = binormal(&mut rng, 80, 120, 0.75);
            let noisy = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                latent.iter().map(|x| x + 0.5 * normal(rng)).collect()
            };
            let a = noisy(&mut rng);
            let b = noisy(&mut rng);
            delong_test_paired(&a, &b, &l, Alternative::Greater).unwrap().p_value
        })
        .collect();
    assert!(ks_uniform(&p) < 0.1);
}

#[test]
fn one_tailed_is_half_of_two_tailed_in_the_observed_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (sa, la) = binormal(&mut rng, 50, 50, 0.6);
    let (sb, lb) = binormal(&mut rng, 50, 50, 0.8);
    let two = delong_test_unpaired(Sample::new(&sa, &la), Sample::new(&sb, &lb), Alternative::TwoSided).unwrap();
    let less = delong_test_unpaired(Sample::new(&sa, &la), Sample::new(&sb, &lb), Alternative::Less).unwrap();
    if two.statistic < 0.0 {
        assert!((less.p_value - two.p_value / 2.0).abs() < 1e-12);
    } else {
        assert!((less.p_value - (1.0 - two.p_value / 2.0)).abs() < 1e-12);
    }
}

/// Two-sided exact p by enumerating every assignment of the pooled values
/// to a first sample of size `a.len()`; tied pairs count half in U.
fn permutation_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let m = a.len();
    let u = |first: &[f64], second: &[f64]| -> f64 {
        let mut u = 0.0;
        for &x in first {
            for &y in second {
                u += if x > y {
                    1.0
                } else if x == y {
                    0.5
                } else {
                    0.0
                };
            }
        }
        u
    };
    let center = (m * (n - m)) as f64 / 2.0;
    let observed = (u(a, b) - center).abs();
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let (first, second): (Vec<f64>, Vec<f64>) = {
            let mut f = Vec::new();
            let mut s = Vec::new();
            for (i, &v) in pooled.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    f.push(v)
                } else {
                    s.push(v)
                }
            }
            (f, s)
        };
        total += 1;
        if (u(&first, &second) - center).abs() >= observed - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

#[test]
fn mann_whitney_exact_cases() {
    let r = mann_whitney(&[1.0, 2.0], &[3.0, 4.0], Alternative::TwoSided).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert_eq!(r.p_value, 1.0 / 3.0);
    let same = mann_whitney(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0], Alternative::TwoSided).unwrap();
    assert_eq!(same.p_value, 1.0);
}

#[test]
fn mann_whitney_exact_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..40 {
        let m = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=6);
        let a: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.3).collect();
        let got = mann_whitney_exact(&a, &b, Alternative::TwoSided).unwrap().p_value;
        let want = permutation_p(&a, &b);
        assert!((got - want).abs() < 1e-12, "{a:?} {b:?}: {got} vs {want}");
    }
}

#[test]
fn mann_whitney_exact_and_normal_agree_at_six_and_six() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let shift = rng.gen_range(0.0..1.5);
        let a: Vec<f64> = (0..6).map(|_| normal(&mut rng)).collect();
        let b: Vec<f64> = (0..6).map(|_| shift + normal(&mut rng)).collect();
        let exact = mann_whitney_exact(&a, &b, Alternative::TwoSided).unwrap().p_value;
        let approx = mann_whitney_normal(&a, &b, Alternative::TwoSided).unwrap().p_value;
        worst = worst.max((exact - approx).abs());
    }
    assert!(worst <= 0.02, "max |exact - normal| = {worst}");
}

#[test]
fn auc_is_invariant_to_the_score_rescale() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let n = rng.gen_range(2..100);
        let mut l: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        l[0] = true;
        l[1] = false;
        // coarse probabilities produce ties, which must survive the rescale
        let p: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 20.0).round() / 20.0).collect();
        let r: Vec<f64> = p.iter().map(|&x| rescale_score(x).unwrap()).collect();
        assert_eq!(auc(&p, &l).unwrap(), auc(&r, &l).unwrap());
    }
}
