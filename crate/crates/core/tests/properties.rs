use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use residual_ood::decision::{fit_thresholds, global_decision, local_ood_prob, percentile};
use residual_ood::eval::{accuracies, auroc, LabeledScore};
use residual_ood::kde::KdeModel;
use residual_ood::residual::{
    generate_train_residuals, make_residual, standardize, ResidualVector, Spfv,
};
use residual_ood::stats::{pair_stats, stat_distance, DistanceForm};
use residual_ood::{
    load_dataset, save_dataset, Aggregation, FeatureDataset, FeatureSample, Manifest, ProbForm,
    SamplingPolicy, Split, Truth,
};

fn population(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn spread_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3..1e3_f64, len).prop_filter("needs spread", |v| population(v).1 > 1e-6)
}

fn labeled(known: &[f64], unknown: &[f64]) -> Vec<LabeledScore<f64>> {
    known
        .iter()
        .map(|&s| (s, Truth::Known))
        .chain(unknown.iter().map(|&s| (s, Truth::Unknown)))
        .enumerate()
        .map(|(i, (global_score, truth))| LabeledScore {
            sample_id: format!("s{i}"),
            truth,
            decision: truth,
            global_score,
        })
        .collect()
}

fn train_set(sizes: &[usize], dim: usize, values: &[f64]) -> Vec<Spfv<f64>> {
    let mut out = Vec::new();
    let mut it = values.iter().cycle();
    for (c, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let mut raw: Vec<f64> = (0..dim).map(|_| *it.next().unwrap()).collect();
            raw[0] += 1.0 + i as f64;
            raw[1] -= 2.0 + c as f64;
            out.push(Spfv::from_features(&raw, format!("c{c}-{i}"), format!("c{c}"), Split::Train).unwrap());
        }
    }
    out
}

fn pair_keys(rs: &[ResidualVector<f64>]) -> Vec<(String, String, &'static str)> {
    rs.iter()
        .map(|r| (r.left_id.clone(), r.right_id.clone(), r.kind.as_str()))
        .collect()
}

proptest! {
    #[test]
    fn standardized_vectors_have_zero_mean_unit_variance(v in spread_vec(2..64)) {
        let s = standardize(&v).unwrap();
        let (mean, var) = population(&s);
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-9);
        let again = standardize(&s).unwrap();
        for (a, b) in s.iter().zip(&again) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn residuals_are_antisymmetric(a in spread_vec(8..9), b in spread_vec(8..9)) {
        let sa = Spfv::from_features(&a, "a", "x", Split::Train).unwrap();
        let sb = Spfv::from_features(&b, "b", "y", Split::Train).unwrap();
        let ab = make_residual(&sa, &sb).unwrap();
        let ba = make_residual(&sb, &sa).unwrap();
        for (x, y) in ab.values.iter().zip(&ba.values) {
            prop_assert_eq!(*x, -*y);
        }
        let neg = Spfv { values: sa.values.iter().map(|x| -x).collect(), ..sa.clone() };
        let doubled = make_residual(&sa, &neg).unwrap();
        for (r, x) in doubled.values.iter().zip(&sa.values) {
            prop_assert!((r - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_identity_and_ranges(a in spread_vec(2..64), seed in any::<u64>(), mix in -1.0..=1.0_f64) {
        let noise: Vec<f64> = (0..a.len()).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 1000) as f64) / 7.0).collect();
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, n)| mix * x + (1.0 - mix.abs()) * n).collect();
        prop_assume!(population(&b).1 > 1e-6);
        let sa = standardize(&a).unwrap();
        let sb = standardize(&b).unwrap();
        let st = pair_stats(&sa, &sb).unwrap();
        let diff: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| x - y).collect();
        let (mean, var) = population(&diff);
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 2.0 * (1.0 - st.rho)).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&st.rho));
        prop_assert!((0.0..=4.0).contains(&st.variance));
    }

    #[test]
    fn stat_distance_decomposes(rho in -1.0..=1.0_f64, var in 0.0..=4.0_f64, form in 0..3usize) {
        let form = [DistanceForm::VarianceTerm, DistanceForm::StdTerm, DistanceForm::RhoOnly][form];
        let d = stat_distance(rho, var, form);
        prop_assert!((d.value - (d.one_minus_rho + d.sigma_term)).abs() < 1e-12);
        prop_assert!(d.value >= 0.0);
    }

    #[test]
    fn train_pairs_match_enumeration(
        sizes in prop::collection::vec(2..=6usize, 1..=4),
        values in prop::collection::vec(-5.0..5.0_f64, 16),
    ) {
        let train = train_set(&sizes, 4, &values);
        let got = generate_train_residuals(&train, &SamplingPolicy::full()).unwrap();
        let mut brute = BTreeSet::new();
        for i in 0..train.len() {
            for j in i + 1..train.len() {
                let (a, b) = (&train[i], &train[j]);
                let (l, r) = if a.source_id < b.source_id { (a, b) } else { (b, a) };
                let kind = if l.label == r.label { "in_class" } else { "inter_class" };
                brute.insert((l.source_id.clone(), r.source_id.clone(), kind));
            }
        }
        let keys = pair_keys(&got);
        prop_assert_eq!(keys.len(), brute.len());
        prop_assert_eq!(keys.into_iter().collect::<BTreeSet<_>>(), brute);
        for r in &got {
            let l = train.iter().find(|s| s.source_id == r.left_id).unwrap();
            let rt = train.iter().find(|s| s.source_id == r.right_id).unwrap();
            for ((x, a), b) in r.values.iter().zip(&l.values).zip(&rt.values) {
                prop_assert_eq!(*x, a - b);
            }
        }
    }

    #[test]
    fn sampling_is_seeded_and_order_free(
        sizes in prop::collection::vec(2..=6usize, 2..=3),
        values in prop::collection::vec(-5.0..5.0_f64, 16),
        rate in 0.05..1.0_f64,
        seed in any::<u64>(),
        rotate in 0..20usize,
    ) {
        let train = train_set(&sizes, 4, &values);
        let policy = SamplingPolicy::rate(rate, seed);
        let first = pair_keys(&generate_train_residuals(&train, &policy).unwrap());
        let mut shuffled = train.clone();
        shuffled.reverse();
        let by = rotate % shuffled.len();
        shuffled.rotate_left(by);
        let second = pair_keys(&generate_train_residuals(&shuffled, &policy).unwrap());
        prop_assert_eq!(&first, &second);

        let mut per_stratum: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (l, r, _) in &first {
            let lc = l.split('-').next().unwrap().to_string();
            let rc = r.split('-').next().unwrap().to_string();
            let key = if lc <= rc { (lc, rc) } else { (rc, lc) };
            *per_stratum.entry(key).or_default() += 1;
        }
        for (i, &a) in sizes.iter().enumerate() {
            for (j, &b) in sizes.iter().enumerate().skip(i) {
                let n = if i == j { a * (a - 1) / 2 } else { a * b };
                let want = ((rate * n as f64).round() as usize).clamp(1, n);
                let key = (format!("c{i}"), format!("c{j}"));
                prop_assert_eq!(per_stratum.get(&key).copied().unwrap_or(0), want);
            }
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_maps(
        known in prop::collection::vec(-1000..1000i32, 1..60),
        unknown in prop::collection::vec(-1000..1000i32, 1..60),
    ) {
        let k: Vec<f64> = known.iter().map(|&x| x as f64).collect();
        let u: Vec<f64> = unknown.iter().map(|&x| x as f64).collect();
        let base = auroc(&labeled(&k, &u)).unwrap();
        let maps: [fn(f64) -> f64; 3] = [|x| 3.0 * x + 7.0, |x| x.powi(3), |x| (x / 100.0).exp()];
        for f in maps {
            let k2: Vec<f64> = k.iter().map(|&x| f(x)).collect();
            let u2: Vec<f64> = u.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(auroc(&labeled(&k2, &u2)).unwrap(), base);
        }
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn auroc_of_negated_scores_is_complement(
        scores in prop::collection::btree_set(-10_000..10_000i32, 2..120),
        split in any::<prop::sample::Index>(),
    ) {
        let all: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let cut = 1 + split.index(all.len() - 1);
        let (k, u) = all.split_at(cut);
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let a = auroc(&labeled(k, u)).unwrap();
        let b = auroc(&labeled(&neg(k), &neg(u))).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overall_accuracy_weights_known_and_unknown(
        rows in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200),
    ) {
        let results: Vec<LabeledScore<f64>> = rows
            .iter()
            .enumerate()
            .map(|(i, &(unknown, wrong))| {
                let truth = if unknown { Truth::Unknown } else { Truth::Known };
                let decision = match (truth, wrong) {
                    (t, false) => t,
                    (Truth::Known, true) => Truth::Unknown,
                    (Truth::Unknown, true) => Truth::Known,
                };
                LabeledScore { sample_id: i.to_string(), truth, decision, global_score: 0.0 }
            })
            .collect();
        let acc = accuracies(&results).unwrap();
        let nu = rows.iter().filter(|r| r.0).count() as f64;
        let nk = rows.len() as f64 - nu;
        let weighted = acc.ka.unwrap_or(0.0) * nk + acc.ua.unwrap_or(0.0) * nu;
        prop_assert!((acc.oa - weighted / rows.len() as f64).abs() < 1e-12);
        prop_assert_eq!(acc.ka.is_none(), nk == 0.0);
        prop_assert_eq!(acc.ua.is_none(), nu == 0.0);
    }

    #[test]
    fn thresholds_ignore_input_order(
        scores in prop::collection::vec(-50.0..50.0_f64, 1..40).prop_shuffle(),
        pct in 0.0..=100.0_f64,
    ) {
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let a = fit_thresholds(&BTreeMap::from([("A".to_string(), scores.clone())]), pct).unwrap();
        let b = fit_thresholds(&BTreeMap::from([("A".to_string(), sorted.clone())]), pct).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(percentile(&scores, 100.0).unwrap(), *sorted.last().unwrap());
        prop_assert_eq!(percentile(&scores, 0.0).unwrap(), sorted[0]);
    }

    #[test]
    fn global_decision_is_the_product(bits in prop::collection::vec(any::<bool>(), 1..8)) {
        let product: u32 = bits.iter().map(|&b| u32::from(b)).product();
        prop_assert_eq!(global_decision(bits.iter().copied()), product == 1);
    }

    #[test]
    fn kde_cdf_and_probability_are_monotone(
        points in prop::collection::vec(-20.0..20.0_f64, 5..60),
        probes in prop::collection::vec(-40.0..40.0_f64, 2..50),
    ) {
        let kde = KdeModel::fit(&points).unwrap();
        let mut xs = probes;
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut prev_cdf = 0.0;
        let mut prev_p = 0.0;
        for &x in &xs {
            let c = kde.cdf(x);
            let p = local_ood_prob(&kde, x, 120.0, ProbForm::BoundedExp);
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert!(c >= prev_cdf && p >= prev_p);
            prop_assert!(p > 0.0 && p <= 1.0);
            prev_cdf = c;
            prev_p = p;
        }
    }

    #[test]
    fn aggregation_is_ordered(values in prop::collection::vec(-1e6..1e6_f64, 1..50)) {
        let lo = Aggregation::Min.apply(&values);
        let mid = Aggregation::Mean.apply(&values);
        let hi = Aggregation::Max.apply(&values);
        prop_assert!(lo <= mid && mid <= hi);
    }
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        prop::num::f64::NORMAL,
        prop::num::f64::SUBNORMAL,
        prop::num::f64::ZERO,
        -10.0..10.0_f64,
    ]
}

fn dataset() -> impl Strategy<Value = FeatureDataset> {
    (2..6usize, any::<bool>(), 2..12usize).prop_flat_map(|(dim, with_logits, n)| {
        prop::collection::vec(
            (
                0..3usize,
                any::<bool>(),
                prop::collection::vec(finite(), dim),
                prop::collection::vec(finite(), 2),
            ),
            n,
        )
        .prop_map(move |rows| {
            let class_names = vec!["a".to_string(), "b".into(), "z".into()];
            let samples = rows
                .into_iter()
                .enumerate()
                .map(|(i, (label, test, features, logits))| {
                    // Only known classes may appear in the train split.
                    let split = if test || label == 2 { Split::Test } else { Split::Train };
                    FeatureSample {
                        sample_id: format!("id,{i}\"q"),
                        label: class_names[label].clone(),
                        split,
                        features,
                        logits: with_logits.then_some(logits),
                    }
                })
                .collect();
            let manifest = Manifest {
                class_names: class_names.clone(),
                known_labels: class_names[..2].to_vec(),
                feature_dim: dim,
                logit_dim: with_logits.then_some(2),
                seed: Some(5),
                provenance: "property test".into(),
            };
            FeatureDataset::new(manifest, samples).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn store_round_trips_exactly(ds in dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.json");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        prop_assert_eq!(back.manifest(), ds.manifest());
        prop_assert_eq!(back.samples().len(), ds.samples().len());
        for (a, b) in back.samples().iter().zip(ds.samples()) {
            prop_assert_eq!(&a.sample_id, &b.sample_id);
            prop_assert_eq!(a.split, b.split);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.features), bits(&b.features));
            prop_assert_eq!(a.logits.as_deref().map(bits), b.logits.as_deref().map(bits));
        }
    }
}
