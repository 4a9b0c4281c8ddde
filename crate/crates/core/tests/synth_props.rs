mod common;

use proptest::prelude::*;
use trajgraph::eval::{frequency_distributions, jensen_distance};
use trajgraph::graph::build_graph;
use trajgraph::ingest::{
    ingest, parse_checkins, write_checkins, CategoryMap, FormatConfig, ParsedCheckins,
};
use trajgraph::synth::{
    default_profiles, generate, profile_distance, total_variation, SynthCorpus,
};

fn default_corpus() -> SynthCorpus {
    generate(&default_profiles(), 50, 10, 7).unwrap()
}

#[test]
fn default_corpus_survives_the_pipeline() {
    let c = default_corpus();
    let mut text = Vec::new();
    write_checkins(&mut text, &c.records).unwrap();
    let parsed = parse_checkins(&text[..], &FormatConfig::default()).unwrap();
    assert!(parsed.invalid.is_empty());
    assert_eq!(parsed.records.len(), c.records.len());

    let (histories, report) = ingest(&parsed, &CategoryMap::default());
    assert!(report.is_conserved());
    assert_eq!(report.invalid, 0);
    assert_eq!(histories.len(), 200);
    for h in &histories {
        assert!(h.trajectories.len() >= 3, "{}", h.user_id);
        build_graph(h, 10).unwrap();
    }
}

#[test]
fn empirical_joint_tracks_the_kernel() {
    let c = default_corpus();
    let parsed = ParsedCheckins {
        records: c.records.clone(),
        invalid: Vec::new(),
    };
    let (histories, _) = ingest(&parsed, &CategoryMap::default());
    let mut worst: f64 = 0.0;
    for (h, ((id, _), expected)) in histories.iter().zip(c.labels.iter().zip(&c.expected_joint)) {
        assert_eq!(&h.user_id, id);
        let g = build_graph(h, 10).unwrap();
        let tv = total_variation(&frequency_distributions(&g).joint, expected);
        worst = worst.max(tv);
    }
    assert!(worst < 0.15, "worst total variation {worst}");
}

#[test]
fn same_profile_users_are_closer() {
    let c = default_corpus();
    let (histories, _) = ingest(
        &ParsedCheckins {
            records: c.records.clone(),
            invalid: Vec::new(),
        },
        &CategoryMap::default(),
    );
    let joints: Vec<Vec<f64>> = histories
        .iter()
        .map(|h| frequency_distributions(&build_graph(h, 10).unwrap()).joint)
        .collect();
    let (mut same, mut cross) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..joints.len() {
        for j in i + 1..joints.len() {
            let d = jensen_distance(&joints[i], &joints[j]).unwrap();
            let acc = if c.labels[i].1 == c.labels[j].1 {
                &mut same
            } else {
                &mut cross
            };
            acc.0 += d;
            acc.1 += 1;
        }
    }
    let (same, cross) = (same.0 / same.1 as f64, cross.0 / cross.1 as f64);
    assert!(same < cross, "{same} vs {cross}");
}

#[test]
fn profile_distance_matches_oracle() {
    let profiles = default_profiles();
    for a in &profiles {
        assert_eq!(profile_distance(a, a).unwrap(), 0.0);
        for b in &profiles {
            let got = profile_distance(a, b).unwrap();
            let want = common::jensen_oracle(&a.joint_marginal(), &b.joint_marginal());
            assert!((got - want).abs() < 1e-12);
            if a.id != b.id {
                assert!(got >= 0.4, "{} vs {}: {got}", a.name, b.name);
            }
        }
    }
}

#[test]
fn requests_are_validated() {
    let p = default_profiles();
    assert!(generate(&p[..1], 5, 10, 1).is_err());
    assert!(generate(&p, 5, 2, 1).is_err());
    assert!(generate(&p, 0, 5, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn any_seed_yields_valid_users(seed in any::<u64>(), days in 3usize..6) {
        let c = generate(&default_profiles(), 2, days, seed).unwrap();
        prop_assert_eq!(&c, &generate(&default_profiles(), 2, days, seed).unwrap());
        let (histories, report) = ingest(
            &ParsedCheckins { records: c.records, invalid: Vec::new() },
            &CategoryMap::default(),
        );
        prop_assert_eq!(report.users_kept, 8);
        for h in &histories {
            prop_assert!(build_graph(h, 10).is_ok());
        }
    }

    #[test]
    fn personalized_kernels_sum_to_one(seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for p in default_profiles() {
            let q = p.personalize(&mut rng);
            prop_assert!(q.validate().is_ok());
            let total: f64 = q.kernel().iter().map(|e| e.probability).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(q.kernel().iter().all(|e| e.departure_bin + e.duration_bins < 48));
        }
    }
}
