use proptest::prelude::*;

use synthaug::balance::{adasyn_allocation, smote, NeighborConfig, Origin, TaggedDataset};
use synthaug::data::{deserialize_great, read_csv, serialize_great, write_csv, Dataset, GroupKey};
use synthaug::dgp::{joint_table, sample_world, softmax, BoundDomain, WorldConfig};
use synthaug::risk::{combined_empirical_risk, combined_weights, LossKind, Objective, Theta};
use synthaug::rng::stream;
use synthaug::scaling::{gaussian_estimate, Design, GaussianSeqConfig, Lambda};
use synthaug::tfgen::{build_generator, default_omega, encode_tokens, generated_distribution};

fn dataset(rows: Vec<Vec<f64>>, labels: Vec<u8>) -> Dataset {
    let d = rows.first().map_or(1, Vec::len);
    let names = (0..d).map(|j| format!("f{j}")).collect();
    Dataset::new(names, "y", rows, labels).unwrap()
}

fn rows_strategy(d: usize, n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<u8>)> {
    n.prop_flat_map(move |n| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n),
            prop::collection::vec(0u8..=1, n),
        )
    })
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
    diff / scale
}

fn finite_difference(obj: &Objective, theta: &[f64]) -> Vec<f64> {
    let h = 1e-6;
    (0..theta.len())
        .map(|j| {
            let mut p = theta.to_vec();
            let mut m = theta.to_vec();
            p[j] += h;
            m[j] -= h;
            (obj.value(&p) - obj.value(&m)) / (2.0 * h)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gradients_match_finite_differences(
        (rows, labels) in rows_strategy(3, 2..20),
        theta in prop::collection::vec(-1.0f64..1.0, 3),
        squared in any::<bool>(),
    ) {
        let kind = if squared { LossKind::Squared } else { LossKind::Logistic };
        let y: Vec<f64> = labels.iter().map(|&v| f64::from(v)).collect();
        let w = vec![1.0 / rows.len() as f64; rows.len()];
        let obj = Objective::from_rows(kind, &rows, &y, w).unwrap();
        prop_assert!(rel_err(&obj.gradient(&theta), &finite_difference(&obj, &theta)) < 1e-5);
    }

    #[test]
    fn combined_weights_reproduce_combined_risk(
        (raw_rows, raw_y) in rows_strategy(2, 1..10),
        (ovs_rows, ovs_y) in rows_strategy(2, 0..10),
        (aug_rows, aug_y) in rows_strategy(2, 1..10),
        alpha in 0.0f64..=1.0,
        coef in prop::collection::vec(-2.0f64..2.0, 3),
        squared in any::<bool>(),
    ) {
        let kind = if squared { LossKind::Squared } else { LossKind::Logistic };
        let raw = dataset(raw_rows, raw_y);
        let ovs = if ovs_rows.is_empty() { raw.empty_like() } else { dataset(ovs_rows, ovs_y) };
        let aug = dataset(aug_rows, aug_y);
        let mut all = raw.clone();
        all.extend(&ovs).unwrap();
        all.extend(&aug).unwrap();
        let mut origin = vec![Origin::Raw; raw.n_rows()];
        origin.extend(vec![Origin::Oversampled; ovs.n_rows()]);
        origin.extend(vec![Origin::Augmented; aug.n_rows()]);
        let group_of = all.labels().iter().map(|&y| GroupKey::label(y)).collect();
        let tagged = TaggedDataset {
            dataset: all.clone(),
            group_of,
            origin,
            groups: vec![GroupKey::label(0), GroupKey::label(1)],
        };
        let theta = Theta { coef, intercept: true };
        let w = combined_weights(&tagged, alpha).unwrap();
        let weighted = Objective::new(kind, &all, w, true).unwrap().value(&theta.coef);
        let direct = combined_empirical_risk(kind, &theta, &raw, &ovs, &aug, alpha).unwrap();
        prop_assert!((weighted - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn great_round_trip_is_exact(
        (rows, labels) in rows_strategy(3, 1..15),
        scale in prop::sample::select(vec![1e-300, 1e-7, 1.0, 1e9, 1e300]),
    ) {
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.into_iter().map(|v| v * scale).collect()).collect();
        let ds = dataset(rows, labels);
        let back = deserialize_great(&serialize_great(&ds).unwrap(), "y").unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn csv_round_trip_is_exact((rows, labels) in rows_strategy(4, 1..15)) {
        let ds = dataset(rows, labels);
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        prop_assert_eq!(read_csv(buf.as_slice(), "y").unwrap(), ds);
    }

    #[test]
    fn softmax_sums_to_one(logits in prop::collection::vec(-500.0f64..500.0, 1..50)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn world_tables_sum_to_one(seed in any::<u64>(), d in 2usize..10, r in 1usize..4, eta in 0.05f64..3.0) {
        let cfg = WorldConfig { d, r, n_subjects: 2, n_functions: 2, l0: 1, r0: 3, eta, bound: BoundDomain::Tokens };
        let w = sample_world(&cfg, seed).unwrap();
        for t in 0..2 {
            for m in 0..2 {
                let table = joint_table(&w, t, m).unwrap();
                prop_assert!((table.total() - 1.0).abs() < 1e-10);
            }
        }
        let stack = build_generator(&w, default_omega(d, r)).unwrap();
        let h = encode_tokens(&[(0, 1), (1, 0)], &w).unwrap();
        let law = generated_distribution(&stack, &h, &w, eta).unwrap();
        prop_assert!((law.table.total() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn shrinkage_never_amplifies(seed in any::<u64>(), lambda in 0.0f64..10.0, alpha in 0.0f64..=1.0) {
        let design = Design { n: vec![30, 90], n_aug: 50, alpha, sigma: vec![1.0, 0.5], sigma_tilde: vec![0.7, 1.2] };
        let mut cfg = GaussianSeqConfig::standard(2, 3, 0.2, design);
        cfg.lambda = Lambda::Fixed(0.0);
        let means = gaussian_estimate(&cfg, &mut stream(seed, &[])).unwrap();
        cfg.lambda = Lambda::Fixed(lambda);
        let est = gaussian_estimate(&cfg, &mut stream(seed, &[])).unwrap();
        prop_assert!(est.iter().zip(&means).all(|(a, b)| a.abs() <= b.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn smote_points_lie_on_group_segments(
        (rows, _) in rows_strategy(2, 3..12),
        k in 1usize..3,
        m in 1usize..20,
        seed in any::<u64>(),
    ) {
        let n = rows.len();
        let ds = dataset(rows, vec![1; n]);
        let group: Vec<usize> = (0..n).collect();
        let out = smote(&ds, &group, m, NeighborConfig { k, standardize: false }, &mut stream(seed, &[])).unwrap();
        prop_assert_eq!(out.n_rows(), m);
        for p in out.rows() {
            let on_segment = group.iter().any(|&a| group.iter().any(|&b| {
                let (xa, xb) = (ds.row(a), ds.row(b));
                let dir: Vec<f64> = xa.iter().zip(xb).map(|(u, v)| v - u).collect();
                let len2: f64 = dir.iter().map(|v| v * v).sum();
                let t = if len2 > 0.0 {
                    (p.iter().zip(xa).zip(&dir).map(|((pi, ai), di)| (pi - ai) * di).sum::<f64>() / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                p.iter().zip(xa).zip(&dir).all(|((pi, ai), di)| (pi - (ai + t * di)).abs() < 1e-9)
            }));
            prop_assert!(on_segment);
        }
    }

    #[test]
    fn adasyn_allocation_is_proportional(
        r in prop::collection::vec(prop_oneof![Just(0.0f64), 0.0f64..1.0], 1..30),
        m in 0usize..500,
    ) {
        let alloc = adasyn_allocation(&r, m).unwrap();
        prop_assert_eq!(alloc.iter().sum::<usize>(), m);
        let total: f64 = r.iter().sum();
        for (i, &a) in alloc.iter().enumerate() {
            let share = if total > 0.0 { m as f64 * r[i] / total } else { m as f64 / r.len() as f64 };
            prop_assert!((a as f64) >= share.floor() && (a as f64) <= share.ceil() + 1e-9);
        }
    }
}
