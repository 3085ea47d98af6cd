mod common;

use gpq_core::attention::{attention_with_weights, decoder_forward_with, AttentionParams, Decoder, SelfAttention};
use gpq_core::bench::{
    count_flops, map_from_detections, parse_reference_points, reference_points_csv, selection_frequency, FlopsConfig,
    DEFAULT_THRESHOLDS,
};
use gpq_core::detector::{
    format_scenes, generate_dataset, parse_scenes, select_topk, Detection, Detector, ModelConfig, Object, Prediction,
    Scene, SceneConfig,
};
use gpq_core::gpq::{select_for_removal, Criterion, PruneReport};
use gpq_core::matching::{build_cost, hungarian, set_loss, CostMatrix, LossConfig};
use gpq_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_model(nq: usize, seed: u64) -> Detector {
    Detector::new(
        ModelConfig {
            num_queries: nq,
            grid: 3,
            embed_dim: 8,
            heads: 2,
            ffn_dim: 16,
            layers: 2,
            num_classes: 3,
            frequencies: 2,
        },
        seed,
    )
    .unwrap()
}

fn brute_force(c: &CostMatrix) -> f64 {
    fn go(c: &CostMatrix, g: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if g == c.num_targets() {
            *best = best.min(acc);
            return;
        }
        for q in 0..c.num_queries() {
            if !used[q] {
                used[q] = true;
                go(c, g + 1, used, acc + c.get(q, g), best);
                used[q] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.num_queries()], 0.0, &mut best);
    best
}

fn cost_matrix() -> impl Strategy<Value = CostMatrix> {
    (1usize..=7)
        .prop_flat_map(|q| (Just(q), 1usize..=q))
        .prop_flat_map(|(q, g)| {
            // Small integers make ties common.
            proptest::collection::vec(-5i32..=5, q * g)
                .prop_map(move |v| CostMatrix::new(q, g, v.into_iter().map(f64::from).collect()).unwrap())
        })
}

fn object() -> impl Strategy<Value = Object> {
    (0usize..3, 0.0f32..1.0, 0.0f32..1.0, 0.05f32..0.3, 0.05f32..0.3).prop_map(|(c, x, y, w, h)| Object {
        class_id: c,
        center: [x, y],
        size: [w, h],
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn hungarian_is_optimal(c in cost_matrix()) {
        let a = hungarian(&c).unwrap();
        prop_assert_eq!(a.total(), brute_force(&c));
        prop_assert_eq!(a.pairs().len(), c.num_targets());
        let mut qs = a.queries();
        qs.sort_unstable();
        qs.dedup();
        prop_assert_eq!(qs.len(), c.num_targets());
    }

    #[test]
    fn assignment_ignores_constant_shift(c in cost_matrix(), delta in -4i32..=4) {
        let a = hungarian(&c).unwrap();
        let b = hungarian(&c.shifted(f64::from(delta))).unwrap();
        prop_assert_eq!(a.pairs(), b.pairs());
    }

    #[test]
    fn set_loss_is_invariant_to_query_order(seed in 0u64..1000, objs in proptest::collection::vec(object(), 1..4)) {
        let scene = Scene { id: 0, objects: objs };
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let nq = 5;
        let scores = common::randn(&mut r, nq, 3).map(|v| 1.0 / (1.0 + (-v).exp()));
        let boxes = common::randn(&mut r, nq, 4).map(|v| 1.0 / (1.0 + (-v).exp()));
        let pred = Prediction { scores, boxes, layer_index: 0 };
        let perm = [3, 0, 4, 1, 2];
        let shuffled = Prediction {
            scores: pred.scores.select_rows(&perm),
            boxes: pred.boxes.select_rows(&perm),
            layer_index: 0,
        };
        let cfg = LossConfig::default();
        let a = set_loss(&[pred], &scene, &cfg).unwrap();
        let b = set_loss(&[shuffled], &scene, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn topk_matches_full_sort(scores in proptest::collection::vec(0u8..6, 2..40), k_frac in 0.0f64..1.0) {
        let c = 2;
        let nq = scores.len() / c;
        prop_assume!(nq >= 1);
        let data: Vec<f32> = scores[..nq * c].iter().map(|&v| f32::from(v) / 5.0).collect();
        let pred = Prediction {
            scores: Tensor::matrix(nq, c, data.clone()).unwrap(),
            boxes: Tensor::zeros(&[nq, 4]),
            layer_index: 0,
        };
        let k = 1 + (k_frac * (nq * c - 1) as f64) as usize;
        let got: Vec<(usize, usize)> = select_topk(&pred, k).unwrap().iter().map(|d| (d.query_index, d.class_id)).collect();
        let mut all: Vec<usize> = (0..nq * c).collect();
        all.sort_by(|&a, &b| data[b].total_cmp(&data[a]).then(a.cmp(&b)));
        let want: Vec<(usize, usize)> = all[..k].iter().map(|&f| (f / c, f % c)).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..10_000, nq in 1usize..9, nk in 1usize..9, heads in 1usize..4) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let e = heads * 2;
        let p = AttentionParams::new(e, e, heads, &mut r).unwrap();
        let q = common::randn(&mut r, nq, e).map(|v| v * 3.0);
        let k = common::randn(&mut r, nk, e).map(|v| v * 3.0);
        let v = common::randn(&mut r, nk, e);
        let (_, w) = attention_with_weights(&q, &k, &v, &p).unwrap();
        prop_assert_eq!(w.len(), heads * nq * nk);
        for row in w.chunks(nk) {
            let s: f64 = row.iter().map(|&x| f64::from(x)).sum();
            prop_assert!((s - 1.0).abs() < 1e-6, "row sum {}", s);
        }
    }

    #[test]
    fn decoder_is_query_permutation_equivariant(seed in 0u64..10_000, nq in 2usize..7) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let d = Decoder::new(2, 8, 2, 16, &mut r).unwrap();
        let q = common::randn(&mut r, nq, 8);
        let f = common::randn(&mut r, 5, 8);
        let perm: Vec<usize> = (0..nq).rev().collect();
        let a = decoder_forward_with(&q, &f, &d, SelfAttention::Enabled).unwrap();
        let b = decoder_forward_with(&q.select_rows(&perm), &f, &d, SelfAttention::Enabled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let x = x.select_rows(&perm);
            for (u, v) in x.data().iter().zip(y.data()) {
                prop_assert!((u - v).abs() <= 1e-5 * u.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matmul_row_deletion_is_exact(seed in 0u64..10_000, m in 2usize..9, k in 1usize..9, n in 1usize..9, drop in 0usize..8) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = common::randn(&mut r, m, k);
        let b = common::randn(&mut r, k, n);
        let drop = drop % m;
        let full = a.matmul(&b).unwrap();
        let part = a.without_rows(&[drop]).matmul(&b).unwrap();
        prop_assert_eq!(part, full.without_rows(&[drop]));
    }

    #[test]
    fn flops_are_monotone_in_queries(nq in 2u64..2000, nk in 1u64..5000, e in 1u64..512, h in 1u64..4096, n in 1u64..8) {
        let c = FlopsConfig { num_queries: nq, num_keys: nk, embed_dim: e, value_dim: e, ffn_dim: h, heads: 1, layers: n, num_classes: 10, frequencies: 16 };
        let big = count_flops(&c).unwrap();
        let small = count_flops(&c.with_queries(nq - 1)).unwrap();
        prop_assert!(small.total() < big.total());
        prop_assert_eq!(big.total(), big.parts().iter().map(|p| p.1).sum::<u64>());
        prop_assert!(small.self_attention < big.self_attention);
    }

    #[test]
    fn low_and_high_criteria_are_disjoint(means in proptest::collection::vec(-3i32..3, 2..20)) {
        let means: Vec<f64> = means.into_iter().map(f64::from).collect();
        prop_assume!(means.iter().any(|&m| m != means[0]));
        let lo = select_for_removal(&means, Criterion::LowestScore, 1);
        let hi = select_for_removal(&means, Criterion::HighestScore, 1);
        prop_assert_ne!(lo, hi);
        let mut distinct = means.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() == means.len() {
            let k = means.len() / 2;
            let lo = select_for_removal(&means, Criterion::LowestScore, k);
            let hi = select_for_removal(&means, Criterion::HighestScore, k);
            prop_assert!(lo.iter().all(|i| !hi.contains(i)));
        }
    }

    #[test]
    fn scenes_round_trip_through_text(seed in 0u64..1000, count in 1usize..20) {
        let scenes = generate_dataset(seed, count, &SceneConfig::default()).unwrap();
        prop_assert_eq!(parse_scenes(&format_scenes(&scenes)).unwrap(), scenes);
    }

    #[test]
    fn map_is_bounded_and_duplicates_never_help(seed in 0u64..1000, n in 1usize..6) {
        let scenes = generate_dataset(seed, n, &SceneConfig { num_classes: 3, ..SceneConfig::default() }).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut dets: Vec<Vec<Detection>> = scenes
            .iter()
            .map(|s| {
                s.objects
                    .iter()
                    .map(|o| {
                        let jitter = common::randn(&mut r, 1, 3).into_data();
                        Detection {
                            query_index: 0,
                            class_id: o.class_id,
                            score: 0.5 + 0.3 * jitter[2].tanh(),
                            box_: [o.center[0] + 0.05 * jitter[0], o.center[1] + 0.05 * jitter[1], o.size[0], o.size[1]],
                        }
                    })
                    .collect()
            })
            .collect();
        let base = map_from_detections(&dets, &scenes, 3, &DEFAULT_THRESHOLDS).unwrap();
        prop_assert!((0.0..=1.0).contains(&base.map));
        let o = &scenes[0].objects[0];
        // A duplicate could legitimately claim a different nearby object of
        // the same class, so require the object to be isolated.
        let max_t = DEFAULT_THRESHOLDS.iter().cloned().fold(0.0, f64::max);
        prop_assume!(scenes[0].objects[1..].iter().all(|p| {
            let d = f64::from(p.center[0] - o.center[0]).hypot(f64::from(p.center[1] - o.center[1]));
            p.class_id != o.class_id || d >= max_t
        }));
        dets[0].push(Detection { query_index: 1, class_id: o.class_id, score: 0.99, box_: o.as_box() });
        let first = map_from_detections(&dets, &scenes, 3, &DEFAULT_THRESHOLDS).unwrap();
        dets[0].push(Detection { query_index: 2, class_id: o.class_id, score: 0.98, box_: o.as_box() });
        let dup = map_from_detections(&dets, &scenes, 3, &DEFAULT_THRESHOLDS).unwrap();
        prop_assert!((0.0..=1.0).contains(&dup.map));
        prop_assert!(dup.map <= first.map + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn selection_counts_sum_to_k_times_scenes(seed in 0u64..1000, k in 1usize..10, n in 1usize..8) {
        let model = tiny_model(6, seed);
        let scenes = generate_dataset(seed, n, &SceneConfig { num_classes: 3, ..SceneConfig::default() }).unwrap();
        let counts = selection_frequency(&model, &scenes, k).unwrap();
        prop_assert_eq!(counts.iter().map(|c| c.1).sum::<u64>(), (k * n) as u64);
        prop_assert!(counts.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn reference_points_round_trip(seed in 0u64..1000, drop in proptest::collection::btree_set(0usize..8, 0..7)) {
        let mut model = tiny_model(8, seed);
        let drop: Vec<usize> = drop.into_iter().collect();
        model.bank.remove_positions(&drop).unwrap();
        let rows = parse_reference_points(&reference_points_csv(&model.bank)).unwrap();
        prop_assert_eq!(rows.len(), 8);
        prop_assert_eq!(rows.iter().filter(|r| !r.2).count(), drop.len());
        prop_assert_eq!(rows, model.bank.all_points());
    }

    #[test]
    fn negatives_dominate_matching(seed in 0u64..1000) {
        let model = tiny_model(64, seed);
        let scene = &generate_dataset(seed, 1, &SceneConfig { num_classes: 3, ..SceneConfig::default() }).unwrap()[0];
        let pred = model.predict(scene).unwrap();
        let a = hungarian(&build_cost(&pred, scene, 2.0, 0.25).unwrap()).unwrap();
        prop_assert!(64 - a.pairs().len() >= 56);
    }
}

#[test]
fn prune_report_csv_round_trips() {
    let model = tiny_model(6, 1);
    let scenes = generate_dataset(1, 16, &SceneConfig { num_classes: 3, max_objects: 3, ..SceneConfig::default() }).unwrap();
    let mut s = gpq_core::PruneSchedule::new(12, 6, 3, 3);
    s.criterion = Criterion::HighestScore;
    let train = gpq_core::optim::TrainConfig {
        iterations: 12,
        batch_size: 2,
        warmup: 1,
        ..Default::default()
    };
    let (_, report): (Detector, PruneReport) = gpq_core::gpq::finetune(model, &scenes, &s, train).unwrap();
    let rows = PruneReport::parse_csv(&report.to_csv()).unwrap();
    let flat: Vec<(usize, usize, f64)> = report
        .events
        .iter()
        .flat_map(|e| e.removed.iter().zip(&e.scores).map(move |(&i, &sc)| (e.iteration, i, sc)))
        .collect();
    assert_eq!(rows, flat);
}
