use std::collections::BTreeMap;

use proptest::prelude::*;

use bmtraj::boost::{self, GbdtConfig};
use bmtraj::cluster::{adjusted_rand_index, fit_gmm, fit_gmm_traced, GmmConfig};
use bmtraj::evalstat::{auc, auc_trapezoid, permutation_test};
use bmtraj::featspace::{impute_series, standardize_apply, standardize_fit, ColumnKind, ColumnMeta, ColumnOrigin, FeatureMatrix};
use bmtraj::ingest::{apply_cohort_criteria, parse_trajectory_table, write_trajectory_table, CohortCriteria};
use bmtraj::resample::{normalize_volumes, resample, ResampleMethod, GRID_DAYS};
use bmtraj::tgat::{build_graph, forward, predict, GatParams};
use bmtraj::track::{connected_components, match_components, ComponentSet, Geometry, LabelVolume};
use bmtraj::trajcore::{classify_response, classify_volumes, compute_flows, ResponseCategory, ResponseCriteria};
use bmtraj::{LesionKey, LesionTrajectory, ScanRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn volume_series() -> impl Strategy<Value = Vec<f64>> {
    (0.5f64..500.0, prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..3.0], 1..7))
        .prop_map(|(b, rel)| std::iter::once(b).chain(rel.into_iter().map(|r| r * b)).collect())
}

fn schedule() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(1u32..150, 1..9).prop_map(|incs| {
        let mut days = vec![0];
        for i in incs {
            days.push(days.last().unwrap() + i);
        }
        days
    })
}

fn trajectory(patient: &str, lesion: &str) -> impl Strategy<Value = LesionTrajectory> {
    let (p, l) = (patient.to_string(), lesion.to_string());
    schedule().prop_flat_map(move |days| {
        let n = days.len();
        let (p, l) = (p.clone(), l.clone());
        (0.1f64..1e4, prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..5e3], n - 1), prop::collection::vec(-10.0f64..10.0, n))
            .prop_map(move |(b, rest, feat)| {
                let mut records: Vec<ScanRecord> = Vec::with_capacity(n);
                for (k, &d) in days.iter().enumerate() {
                    let v = if k == 0 { b } else { rest[k - 1] };
                    let mut r = ScanRecord::new(d, v);
                    r.features.insert("feat_x".into(), feat[k]);
                    records.push(r);
                }
                LesionTrajectory::new(p.clone(), l.clone(), records).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn classification_is_scale_invariant(v in volume_series(), c in 1e-3f64..1e3) {
        let crit = ResponseCriteria::default();
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        if v.len() >= 2 {
            let a = classify_volumes(&v, &crit).unwrap();
            let b = classify_volumes(&scaled, &crit).unwrap();
            // Products within the boundary tolerance may legitimately flip; compare away from them.
            for (k, (x, y)) in a.iter().zip(&b).enumerate() {
                let cur = v[k + 1];
                let nadir = v[..=k].iter().copied().fold(f64::INFINITY, f64::min);
                let near = |t: f64| t > 0.0 && ((cur - t) / t).abs() < 1e-9;
                if !near(0.343 * v[0]) && !near(1.728 * nadir) {
                    prop_assert_eq!(x, y);
                }
            }
        }
    }

    #[test]
    fn exactly_one_category_with_precedence(b in 0.1f64..100.0, priors in prop::collection::vec(0.0f64..300.0, 0..6), cur in prop_oneof![Just(0.0), 0.0f64..300.0]) {
        let mut all = vec![b];
        all.extend(priors);
        let c = classify_response(b, &all, cur, &ResponseCriteria::default()).unwrap();
        let nadir = all.iter().copied().fold(f64::INFINITY, f64::min);
        if cur == 0.0 {
            prop_assert_eq!(c, ResponseCategory::CR);
        } else if c == ResponseCategory::PD {
            prop_assert!(cur > 1.728 * nadir * (1.0 - 1e-9));
        } else if c == ResponseCategory::PR {
            prop_assert!(cur < 0.343 * b * (1.0 + 1e-9));
        }
    }

    #[test]
    fn zeros_from_k_onward_are_cr(v in volume_series(), k in 1usize..7) {
        let mut v = v;
        if v.len() < 2 { v.push(0.0); }
        let k = k.min(v.len() - 1);
        for x in &mut v[k..] { *x = 0.0; }
        let cats = classify_volumes(&v, &ResponseCriteria::default()).unwrap();
        prop_assert!(cats[k - 1..].iter().all(|&c| c == ResponseCategory::CR));
    }

    #[test]
    fn flows_conserve_mass(series in prop::collection::vec(prop::collection::vec(0.0f64..3.0, 6), 1..40), base in 1.0f64..50.0) {
        let crit = ResponseCriteria::default();
        let classified: Vec<Vec<ResponseCategory>> = series
            .iter()
            .map(|rel| {
                let v: Vec<f64> = std::iter::once(base).chain(rel.iter().map(|r| r * base)).collect();
                classify_volumes(&v, &crit).unwrap()
            })
            .collect();
        let flows = compute_flows(&classified).unwrap();
        prop_assert_eq!(flows.len(), 5);
        for f in &flows {
            prop_assert_eq!(f.total(), series.len() as u64);
        }
        for w in flows.windows(2) {
            for c in ResponseCategory::ALL {
                prop_assert_eq!(w[1].outflow(c), w[0].inflow(c));
            }
        }
    }

    #[test]
    fn trajectory_table_round_trips(a in trajectory("P1", "L1"), b in trajectory("P1", "L2"), c in trajectory("P2", "L1")) {
        let trajs = vec![a, b, c];
        let mut buf = Vec::new();
        write_trajectory_table(&mut buf, &trajs).unwrap();
        let back = parse_trajectory_table(buf.as_slice()).unwrap();
        prop_assert_eq!(back, trajs);
    }

    #[test]
    fn cohort_criteria_partition_input(trajs in prop::collection::vec(trajectory("P", "L"), 1..12)) {
        let trajs: Vec<LesionTrajectory> = trajs
            .into_iter()
            .enumerate()
            .map(|(i, mut t)| { t.lesion_id = format!("L{i}"); t })
            .collect();
        let crit = CohortCriteria::default();
        let (kept, flags) = apply_cohort_criteria(trajs.clone(), &crit);
        prop_assert_eq!(kept.len() + flags.len(), trajs.len());
        let mut rev = trajs.clone();
        rev.reverse();
        let (kept_rev, mut flags_rev) = apply_cohort_criteria(rev, &crit);
        flags_rev.reverse();
        prop_assert_eq!(flags, flags_rev);
        prop_assert_eq!(kept.len(), kept_rev.len());
    }

    #[test]
    fn nearest_neighbour_invents_nothing(t in trajectory("P", "L")) {
        let r = resample(&t, ResampleMethod::Nearest).unwrap();
        let observed = t.volumes();
        for v in r.volumes_mm3 {
            prop_assert!(observed.contains(&v));
        }
    }

    #[test]
    fn methods_agree_on_grid_samples(b in 1.0f64..100.0, rel in prop::collection::vec(0.05f64..3.0, 6)) {
        let vols: Vec<f64> = std::iter::once(b).chain(rel.iter().map(|r| r * b)).collect();
        let t = LesionTrajectory::from_volumes("P", "L", &GRID_DAYS, &vols).unwrap();
        let nn = resample(&t, ResampleMethod::Nearest).unwrap().volumes_mm3;
        for m in [ResampleMethod::Linear, ResampleMethod::Bspline] {
            let other = resample(&t, m).unwrap().volumes_mm3;
            for (x, y) in nn.iter().zip(&other) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn normalization_is_idempotent(rel in prop::collection::vec(0.0f64..5.0, 6)) {
        let mut v = [1.0; 7];
        v[1..].copy_from_slice(&rel);
        prop_assert_eq!(normalize_volumes(&v).unwrap(), v);
    }

    #[test]
    fn imputation_preserves_terminal_zeros(v in prop::collection::vec(prop_oneof![Just(0.0), 0.1f64..10.0], 3..8), tail in 1usize..4) {
        let mut volumes = v.clone();
        volumes[0] = volumes[0].max(1.0);
        let n = volumes.len();
        let tail = tail.min(n - 1);
        for x in &mut volumes[n - tail..] { *x = 0.0; }
        let before = volumes.clone();
        let days: Vec<u32> = (0..n as u32).map(|k| 60 * k).collect();
        let mut feats = vec![BTreeMap::new(); n];
        let mut observed = vec![true; n];
        impute_series(&days, &mut volumes, &mut feats, &mut observed);
        prop_assert!(volumes[n - tail..].iter().all(|&x| x == 0.0));
        for k in 0..n {
            if before[k] != 0.0 { prop_assert_eq!(volumes[k], before[k]); }
        }
    }

    #[test]
    fn standardized_training_columns_have_zero_mean(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..30)) {
        let columns = (0..3)
            .map(|j| ColumnMeta { name: format!("c{j}"), origin: ColumnOrigin::Clinical, kind: ColumnKind::Numeric })
            .collect();
        let m = FeatureMatrix { rows: (0..rows.len()).map(|i| LesionKey::new("P", format!("L{i}"))).collect(), columns, values: rows };
        let train: Vec<usize> = (0..m.n_rows()).collect();
        let p = standardize_fit(&m, &train).unwrap();
        let s = standardize_apply(&p, &m).unwrap();
        for j in 0..3 {
            let mean = s.column(j).iter().sum::<f64>() / s.n_rows() as f64;
            prop_assert!(mean.abs() < 1e-10, "column {} mean {}", j, mean);
        }
    }

    #[test]
    fn auc_equals_trapezoid(pairs in prop::collection::vec((any::<bool>(), 0u8..6), 2..60)) {
        let mut labels: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = pairs.iter().map(|p| p.1 as f64 / 5.0).collect();
        let a = auc(&labels, &scores).unwrap();
        prop_assert!((a - auc_trapezoid(&labels, &scores).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn permutation_p_is_in_unit_interval(pairs in prop::collection::vec((any::<bool>(), 0.0f64..1.0, 0.0f64..1.0), 4..30), seed in any::<u64>()) {
        let mut labels: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        labels[0] = true;
        labels[1] = false;
        let a: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let p = permutation_test(&labels, &a, &b, 50, seed).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn component_volumes_conserve_foreground(mask in prop::collection::vec(prop::bool::weighted(0.3), 6 * 5 * 4)) {
        let g = Geometry { dims: [6, 5, 4], spacing_mm: [0.5, 1.0, 2.0], origin_mm: [0.0; 3] };
        let vol = LabelVolume::new(g, mask.iter().map(|&b| u16::from(b)).collect()).unwrap();
        let comps = connected_components(&vol);
        let total: f64 = comps.iter().map(|c| c.volume_mm3).sum();
        prop_assert!((total - vol.foreground_count() as f64 * g.voxel_volume()).abs() < 1e-9);
        prop_assert_eq!(comps.iter().map(|c| c.voxel_count).sum::<usize>(), vol.foreground_count());
    }

    #[test]
    fn matching_is_symmetric(a in prop::collection::vec(prop::bool::weighted(0.2), 8 * 8 * 3), b in prop::collection::vec(prop::bool::weighted(0.2), 8 * 8 * 3)) {
        let g = Geometry { dims: [8, 8, 3], spacing_mm: [1.0; 3], origin_mm: [0.0; 3] };
        let va = LabelVolume::new(g, a.iter().map(|&x| u16::from(x)).collect()).unwrap();
        let vb = LabelVolume::new(g, b.iter().map(|&x| u16::from(x)).collect()).unwrap();
        let (sa, sb) = (ComponentSet::from_volume(&va), ComponentSet::from_volume(&vb));
        let ab = match_components(&sa, &sb, 10.0).unwrap();
        let ba = match_components(&sb, &sa, 10.0).unwrap();
        // Compare matched sets only when scores are untied.
        let score = |i: usize, j: usize, x: &ComponentSet, y: &ComponentSet| {
            let ov = x.components[i].voxels.iter().filter(|v| y.components[j].voxels.binary_search(v).is_ok()).count();
            (ov, (x.components[i].centroid_distance(&y.components[j]) * 1e9) as i64)
        };
        let mut scores = Vec::new();
        for i in 0..sa.components.len() {
            for j in 0..sb.components.len() {
                scores.push(score(i, j, &sa, &sb));
            }
        }
        let mut dedup = scores.clone();
        dedup.sort();
        dedup.dedup();
        if dedup.len() == scores.len() {
            let mut fwd = ab.pairs.clone();
            fwd.sort();
            let mut back: Vec<(usize, usize)> = ba.pairs.iter().map(|&(j, i)| (i, j)).collect();
            back.sort();
            prop_assert_eq!(fwd, back);
        }
    }

    #[test]
    fn boosting_loss_never_increases(rows in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), any::<bool>()), 6..40)) {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let mut y: Vec<bool> = rows.iter().map(|r| r.1).collect();
        y[0] = true;
        y[1] = false;
        let cfg = GbdtConfig { n_rounds: 25, ..GbdtConfig::default() };
        let (model, losses) = boost::fit_traced(&x, &y, &cfg).unwrap();
        for w in losses.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
        prop_assert_eq!(&model, &boost::fit(&x, &y, &cfg).unwrap());
    }

    #[test]
    fn unused_columns_do_not_affect_predictions(rows in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 6..30), noise in prop::collection::vec(-9.0f64..9.0, 30)) {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0, 7.0]).collect();
        let mut y: Vec<bool> = rows.iter().map(|r| r.1).collect();
        y[0] = true;
        y[1] = false;
        let model = boost::fit(&x, &y, &GbdtConfig { n_rounds: 10, ..GbdtConfig::default() }).unwrap();
        prop_assert!(!model.used_features().contains(&1));
        let perturbed: Vec<Vec<f64>> = x.iter().zip(&noise).map(|(r, n)| vec![r[0], *n]).collect();
        prop_assert_eq!(boost::predict_proba(&model, &x).unwrap(), boost::predict_proba(&model, &perturbed).unwrap());
    }

    #[test]
    fn em_is_monotone_and_responsibilities_normalize(seed in 0u64..1000, n in 20usize..60) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..3).map(|_| (i % 3) as f64 * 4.0 + rng.random_range(-1.0..1.0)).collect())
            .collect();
        let cfg = GmmConfig { k: 3, n_init: 3, seed, ..GmmConfig::default() };
        let (model, trace) = fit_gmm_traced(&data, &cfg).unwrap();
        for r in &trace.restarts {
            for w in r.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9);
            }
        }
        for x in &data {
            let s: f64 = model.responsibilities(x).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(&model, &fit_gmm(&data, &cfg).unwrap());
    }

    #[test]
    fn ari_is_label_permutation_invariant(labels in prop::collection::vec(0usize..4, 2..50), perm in Just([2usize, 0, 3, 1])) {
        let relabeled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        prop_assert!((adjusted_rand_index(&labels, &relabeled) - 1.0).abs() < 1e-12 || labels.iter().all(|&l| l == labels[0]));
    }

    #[test]
    fn attention_rows_normalize_and_crops_match(points in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..7), seed in any::<u64>(), n in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = build_graph(&points, &[0.5], true).unwrap();
        let p = GatParams::init(5, 8, &mut rng);
        let (_, att) = forward(&p, &g).unwrap();
        for row in &att {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let n = n.min(g.horizon);
        let fresh = build_graph(&points[..=n], &[0.5], true).unwrap();
        prop_assert_eq!(&g.crop(n).unwrap(), &fresh);
        let via_predict = predict(&p, std::slice::from_ref(&g), n).unwrap()[0];
        prop_assert_eq!(via_predict, forward(&p, &fresh).unwrap().0);
        prop_assert_eq!(via_predict, predict(&p, &[g], n).unwrap()[0]);
    }
}
