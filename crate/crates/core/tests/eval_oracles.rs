mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajgraph::eval::{jensen_distance, pearson, quantile, set_metrics};
use trajgraph::graph::haversine;
use trajgraph::loss::{combine, db_loss, DbLossConfig};

fn plain() -> DbLossConfig {
    DbLossConfig {
        lambda: 1.0,
        kappa: 0.0,
        rebalance_floor: 0.5,
        rebalance_sharpness: 0.0,
        rebalance_center: 0.3,
    }
}

fn distribution<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.2) {
                0.0
            } else {
                rng.gen_range(0.0..5.0)
            }
        })
        .collect()
}

#[test]
fn jensen_matches_entropy_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.gen_range(2..40);
        let mut p = distribution(&mut rng, n);
        let mut q = distribution(&mut rng, n);
        p[0] += 0.1;
        q[n - 1] += 0.1;
        let got = jensen_distance(&p, &q).unwrap();
        assert!((got - common::jensen_oracle(&p, &q)).abs() < 1e-10);
        assert!((0.0..=1.0).contains(&got));
    }
    assert_eq!(jensen_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    assert_eq!(jensen_distance(&[2.0, 3.0], &[4.0, 6.0]).unwrap(), 0.0);
    assert!(jensen_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
}

#[test]
fn pearson_matches_standard_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let n = rng.gen_range(3..200);
        let slope = rng.gen_range(-2.0..2.0);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|a| slope * a + rng.gen_range(-5.0..5.0))
            .collect();
        let got = pearson(&x, &y).unwrap();
        assert!((got - common::pearson_oracle(&x, &y)).abs() < 1e-10);
    }
    assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
}

#[test]
fn haversine_matches_chord_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (a, b) = (rng.gen_range(-89.0..89.0), rng.gen_range(-180.0..180.0));
        let (c, d) = if rng.gen_bool(0.5) {
            (
                a + rng.gen_range(-0.05..0.05),
                b + rng.gen_range(-0.05..0.05),
            )
        } else {
            (rng.gen_range(-89.0..89.0), rng.gen_range(-180.0..180.0))
        };
        let got = haversine(a, b, c, d);
        let want = common::great_circle_oracle(a, b, c, d);
        assert!(
            (got - want).abs() <= 1e-10 * want.max(1.0),
            "{got} vs {want}"
        );
    }
    assert_eq!(haversine(35.0, 139.0, 35.0, 139.0), 0.0);
}

#[test]
fn quantile_matches_type_seven() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let p = rng.gen_range(0.0..=1.0);
        let want = common::quantile_oracle(&x, p);
        x.sort_by(f64::total_cmp);
        assert!((quantile(&x, p) - want).abs() < 1e-10);
    }
}

#[test]
fn plain_loss_is_binary_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.gen_range(1..64);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|_| f64::from(u8::from(rng.gen_bool(0.3))))
            .collect();
        let priors: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
        let got = db_loss(&z, &y, &priors, &plain()).unwrap();
        assert!((got - common::bce_with_logits(&z, &y)).abs() < 1e-12);
    }
}

#[test]
fn heads_are_weighted() {
    assert!((combine(1.0, 0.0, 0.0) - 0.1).abs() < 1e-15);
    assert!((combine(0.0, 1.0, 0.0) - 0.1).abs() < 1e-15);
    assert_eq!(combine(0.0, 0.0, 1.0), 1.0);
}

#[test]
fn set_scores_on_known_sets() {
    let (acc, p, r, f1) =
        set_metrics(&[true, true, false, false], &[true, false, true, false]).unwrap();
    assert_eq!((acc, p, r, f1), (1.0 / 3.0, 0.5, 0.5, 0.5));
    assert!(set_metrics(&[true], &[false]).is_none());
    assert_eq!(
        set_metrics(&[false, false], &[true, false]).unwrap(),
        (0.0, 0.0, 0.0, 0.0)
    );
}

proptest! {
    #[test]
    fn jensen_is_symmetric(p in prop::collection::vec(0.01f64..1.0, 2..20), shift in 0usize..20) {
        let q: Vec<f64> = (0..p.len()).map(|i| p[(i + shift) % p.len()]).collect();
        let a = jensen_distance(&p, &q).unwrap();
        let b = jensen_distance(&q, &p).unwrap();
        prop_assert!((a - b).abs() < 1e-15);
        prop_assert!(jensen_distance(&p, &p).unwrap() < 1e-7);
    }

    #[test]
    fn db_loss_is_nonnegative(z in prop::collection::vec(-20.0f64..20.0, 1..30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = z.iter().map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect();
        let priors: Vec<f64> = z.iter().map(|_| rng.gen_range(0.001..0.999)).collect();
        let l = db_loss(&z, &y, &priors, &DbLossConfig::default()).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }
}
