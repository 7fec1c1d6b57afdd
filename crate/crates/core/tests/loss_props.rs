use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use td2net::loss::{ar_loss, bce_loss, bce_term, effective_number_weight, focal_loss, mlm_loss, LossConfig, LossKind};

fn plain_ar(gamma_pos: f64, gamma_neg: f64) -> LossConfig {
    LossConfig {
        kind: LossKind::Ar,
        gamma_pos,
        gamma_neg,
        use_class_balance: false,
        ..LossConfig::default()
    }
}

#[test]
fn ar_and_focal_reduce_to_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = plain_ar(0.0, 0.0);
    for _ in 0..1000 {
        let n = rng.random_range(1..30);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let bce = bce_loss(&p, &y).unwrap();
        assert!((ar_loss(&p, &y, &cfg).unwrap() - bce).abs() <= 1e-12);
        for (&pi, &yi) in p.iter().zip(&y) {
            assert!((focal_loss(pi, yi, 0.0).unwrap() - bce_term(pi, yi)).abs() <= 1e-12);
        }
    }
}

#[test]
fn effective_number_limits() {
    for n in 1..=1000u64 {
        assert_eq!(effective_number_weight(n, 0.0f64).unwrap(), 1.0);
        let w: f64 = effective_number_weight(n, 1.0 - 1e-9).unwrap();
        let expected = 1.0 / n as f64;
        assert!(((w - expected) / expected).abs() <= 1e-4, "n={n}: {w}");
    }
    for beta in [0.0, 0.5, 0.9, 0.999, 0.9999] {
        assert_eq!(effective_number_weight(1, beta).unwrap(), 1.0);
    }
}

#[test]
fn focal_branches_are_monotone_on_a_grid() {
    for gamma in [0.0, 0.5, 1.0, 2.0, 5.0] {
        let grid: Vec<f64> = (1..999).map(|i| i as f64 * 1e-3).collect();
        for w in grid.windows(2) {
            let (a, b) = (w[0], w[1]);
            assert!(focal_loss(b, true, gamma).unwrap() <= focal_loss(a, true, gamma).unwrap(), "gamma {gamma} p {a}");
            assert!(focal_loss(b, false, gamma).unwrap() >= focal_loss(a, false, gamma).unwrap(), "gamma {gamma} p {a}");
        }
    }
}

#[test]
fn default_config_focuses_harder_on_negatives() {
    let cfg = LossConfig::default();
    assert!(cfg.gamma_neg >= cfg.gamma_pos);
}

proptest! {
    #[test]
    fn losses_are_non_negative_and_finite(
        p in proptest::collection::vec(0.0f64..=1.0, 1..20),
        seed in any::<u64>(),
        gamma in 0.0f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<bool> = p.iter().map(|_| rng.random_bool(0.4)).collect();
        let cfg = LossConfig {
            kind: LossKind::Ar,
            gamma_pos: gamma / 2.0,
            gamma_neg: gamma,
            beta: 0.99,
            class_counts: p.iter().map(|_| rng.random_range(1..500)).collect(),
            ..LossConfig::default()
        };
        let values = [
            bce_loss(&p, &y).unwrap(),
            ar_loss(&p, &y, &cfg).unwrap(),
            focal_loss(p[0], y[0], gamma).unwrap(),
            mlm_loss(
                &p,
                &(0..p.len()).filter(|&i| y[i]).collect::<Vec<_>>(),
                &(0..p.len()).filter(|&i| !y[i]).collect::<Vec<_>>(),
                1.0,
            )
            .unwrap(),
        ];
        for v in values {
            prop_assert!(v.is_finite() && v >= 0.0, "{}", v);
        }
    }

    #[test]
    fn negatives_are_discounted_and_positives_untouched(p in 1e-6f64..1.0 - 1e-6, gamma_neg in 0.1f64..6.0) {
        let cfg = plain_ar(0.0, gamma_neg);
        let neg = ar_loss(&[p], &[false], &cfg).unwrap();
        let pos = ar_loss(&[p], &[true], &cfg).unwrap();
        prop_assert!(neg < bce_term(p, false));
        prop_assert_eq!(pos, bce_term(p, true));
    }

    #[test]
    fn weight_decreases_with_class_size(n in 1u64..10_000, beta in 0.01f64..0.99999) {
        let a: f64 = effective_number_weight(n, beta).unwrap();
        let b: f64 = effective_number_weight(n + 1, beta).unwrap();
        prop_assert!(b <= a);
        // Once beta^n drops below f64 resolution the weight saturates at 1 - beta.
        if beta.powf(n as f64) * (1.0 - beta) > 1e-10 {
            prop_assert!(b < a);
        }
    }
}
