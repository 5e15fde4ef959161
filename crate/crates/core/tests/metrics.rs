use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use trialmoe::metrics::*;
use trialmoe::schema::{Phase, PhaseSet};

/// Pairwise Mann–Whitney count.
fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, si) in scores.iter().enumerate() {
        for (j, sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Walks down the ranking, adding precision whenever a positive appears.
fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let total_pos = labels.iter().filter(|&&y| y == 1).count();
    let (mut rank, mut hits, mut acc) = (0usize, 0usize, 0.0);
    while !remaining.is_empty() {
        // first index with the highest score
        let mut best = 0;
        for k in 1..remaining.len() {
            if scores[remaining[k]] > scores[remaining[best]] {
                best = k;
            }
        }
        let i = remaining.remove(best);
        rank += 1;
        if labels[i] == 1 {
            hits += 1;
            acc += hits as f64 / rank as f64;
        }
    }
    acc / total_pos as f64
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=200);
    // coarse scores so ties are common
    let levels = rng.random_range(2..50);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    labels[0] = 1;
    labels[1] = 0;
    let scores = (0..n)
        .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
        .collect();
    (scores, labels)
}

#[test]
fn ranking_metrics_match_oracles_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let (s, y) = random_instance(&mut rng);
        assert_eq!(auc_roc(&s, &y).unwrap(), auc_oracle(&s, &y));
        assert_eq!(average_precision(&s, &y).unwrap(), ap_oracle(&s, &y));
    }
}

#[test]
fn reference_cases() {
    assert_eq!(auc_roc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_eq!(auc_roc(&[0.9, 0.8, 0.2, 0.1], &[1, 0, 1, 0]).unwrap(), 0.75);
    assert_eq!(auc_roc(&[0.4; 6], &[1, 0, 0, 1, 0, 1]).unwrap(), 0.5);
    assert_eq!(
        auc_roc(&[0.1, 0.2], &[0, 0]),
        Err(MetricError::DegenerateLabels)
    );
    assert_eq!(
        average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(),
        1.0
    );
    let ap = average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 0, 1, 0]).unwrap();
    assert!((ap - 0.833_333_333_333_333_4).abs() < 1e-15);
    assert_eq!(
        average_precision(&[5.0, 4.0, 3.0, 2.0, 1.0], &[0, 0, 0, 0, 1]).unwrap(),
        0.2
    );
    assert_eq!(
        average_precision(&[0.5], &[0]),
        Err(MetricError::DegenerateLabels)
    );
    assert_eq!(f1_at(&[0.9, 0.1], &[1, 0], 0.5), 1.0);
    assert_eq!(f1_at(&[0.1, 0.2], &[1, 1], 0.5), 0.0);
    // TP=1, FP=1, FN=1
    assert_eq!(f1_at(&[0.9, 0.8, 0.1], &[1, 0, 1], 0.5), 0.5);
}

#[test]
fn tuned_threshold_maximizes_f1() {
    let s = [0.9, 0.35, 0.3, 0.2, 0.1];
    let y = [1, 1, 1, 0, 0];
    let (t, f) = tune_threshold(&s, &y);
    assert_eq!(t, 0.3);
    assert_eq!(f, 1.0);
    assert!(f >= f1_at(&s, &y, 0.5));
}

#[test]
fn ece_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels: Vec<u8> = (0..20_000).map(|_| rng.random_range(0..2)).collect();
    assert!(ece(&vec![0.5; 20_000], &labels, 10) < 0.02);
    assert_eq!(ece(&[1.0; 8], &[0; 8], 10), 1.0);
    // a single occupied bin: the nine empty ones add nothing
    assert!((ece(&[0.25, 0.25], &[1, 0], 10) - 0.25).abs() < 1e-15);
    assert_eq!(ece(&[], &[], 10), 0.0);
}

/// Logits ~ N(0, 2.5²), labels ~ Bernoulli(σ(ℓ)); the model reports T·ℓ.
fn calibration_sample(t_true: f64, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 2.5).unwrap();
    let mut logits = Vec::with_capacity(10_000);
    let mut labels = Vec::with_capacity(10_000);
    for _ in 0..10_000 {
        let l: f64 = dist.sample(&mut rng);
        labels.push((rng.random::<f64>() < 1.0 / (1.0 + (-l).exp())) as u8);
        logits.push(l * t_true);
    }
    (logits, labels)
}

#[test]
fn temperature_is_recovered() {
    for (t_true, seed) in [(0.5, 1), (1.0, 2), (2.0, 3)] {
        let (logits, labels) = calibration_sample(t_true, seed);
        let t = fit_temperature(&logits, &labels).unwrap();
        assert!((t - t_true).abs() <= 0.05, "T={t_true}: fitted {t}");
        assert!(
            nll_at_temperature(&logits, &labels, t) <= nll_at_temperature(&logits, &labels, 1.0)
        );
        let before = auc_roc(&logits, &labels).unwrap();
        let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
        assert!((auc_roc(&scaled, &labels).unwrap() - before).abs() <= 1e-12);
    }
    assert_eq!(
        fit_temperature(&[1.0, 2.0], &[1, 1]),
        Err(MetricError::DegenerateLabels)
    );
}

#[test]
fn report_has_per_phase_sections() {
    let logits = [2.0, -1.0, 0.5, -0.2, 1.5, -3.0];
    let labels = [1, 0, 1, 0, 1, 0];
    let phases = [
        Phase::I,
        Phase::I,
        Phase::II,
        Phase::II,
        Phase::III,
        Phase::III,
    ]
    .map(PhaseSet::single);
    let r = evaluate(&logits, &labels, &phases, 1.0, 0.5);
    assert_eq!(r.overall.auc_roc, Some(1.0));
    assert_eq!(r.per_phase.len(), 3);
    assert_eq!(r.per_phase["PHASE2"].n, 2);
    let json = serde_json::to_value(&r).unwrap();
    assert!(json.get("auc_roc").is_some() && json.get("per_phase").is_some());
    for m in std::iter::once(&r.overall).chain(r.per_phase.values()) {
        for v in [m.f1, m.ece, m.f1_tuned] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(m.nll >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn temperature_never_worsens_nll(
        logits in proptest::collection::vec(-8.0f64..8.0, 4..60),
        flips in proptest::collection::vec(any::<bool>(), 60),
    ) {
        let mut labels: Vec<u8> = logits.iter().zip(&flips).map(|(l, f)| ((*l > 0.0) ^ f) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let t = fit_temperature(&logits, &labels).unwrap();
        prop_assert!((T_MIN..=T_MAX).contains(&t));
        prop_assert!(nll_at_temperature(&logits, &labels, t) <= nll_at_temperature(&logits, &labels, 1.0));
    }
}
