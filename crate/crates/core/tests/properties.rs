//! Property tests for the spec-level invariants: tracker/mean equivalence,
//! threshold-sweep optimality, amplification monotonicity, softmax and
//! histogram behavior, metric finiteness, and checkpoint roundtrips.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use nglab_core::attack::{
    metric_confidence, metric_entropy, metric_modified_entropy, sweep_threshold, Direction,
    ScoreRecord,
};
use nglab_core::checkpoint::{load_checkpoint, save_checkpoint};
use nglab_core::eval::{build_histogram, distance_report, shared_range};
use nglab_core::nn::{argmax, build_model, softmax_rows, Activation, LayerSpec};
use nglab_core::reg::{amplify_top_fraction, ClassMeanTracker};

fn score_vec(k: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-4.0f64..4.0, k).prop_map(|logits| {
        let arr = Array2::from_shape_vec((1, logits.len()), logits).unwrap();
        softmax_rows(&arr).row(0).to_vec()
    })
}

fn record_from(scores: Vec<f64>, label: usize, member: bool) -> ScoreRecord {
    let predicted = argmax(ndarray::ArrayView1::from(&scores));
    ScoreRecord {
        sample_id: 0,
        is_member: member,
        true_label: label,
        predicted_label: predicted,
        scores,
        boundary_distance: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        logits in proptest::collection::vec(-30.0f64..30.0, 2..12),
        shift in -50.0f64..50.0,
    ) {
        let n = logits.len();
        let base = Array2::from_shape_vec((1, n), logits.clone()).unwrap();
        let shifted = base.mapv(|v| v + shift);
        let p = softmax_rows(&base);
        let q = softmax_rows(&shifted);
        prop_assert!((p.sum() - 1.0).abs() < 1e-9);
        for (a, b) in p.iter().zip(q.iter()) {
            prop_assert!(*a >= 0.0);
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn tracker_matches_from_scratch_means(
        batches in proptest::collection::vec(
            proptest::collection::vec((score_vec(4), 0usize..4), 1..6),
            1..8,
        )
    ) {
        let mut tracker = ClassMeanTracker::new(4);
        let mut seen: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for batch in &batches {
            let rows: Vec<Vec<f64>> = batch.iter().map(|(s, _)| s.clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
            let mut m = Array2::zeros((rows.len(), 4));
            for (i, r) in rows.iter().enumerate() {
                for (j, v) in r.iter().enumerate() {
                    m[[i, j]] = *v;
                }
            }
            tracker.update(&m, &labels).unwrap();
            for (s, l) in batch {
                seen.entry(*l).or_default().push(s.clone());
            }
        }
        for (class, rows) in seen {
            let n = rows.len() as f64;
            for j in 0..4 {
                let oracle: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                prop_assert!((tracker.mean(class)[j] - oracle).abs() < 1e-12);
            }
            prop_assert_eq!(tracker.count(class), rows.len() as u64);
            // Means of softmax vectors stay inside the simplex.
            let sum: f64 = tracker.mean(class).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sweep_is_optimal_over_all_distinguishable_thresholds(
        values in proptest::collection::vec((0u8..12, proptest::bool::ANY), 2..24),
        ge in proptest::bool::ANY,
    ) {
        // Discretized values force plenty of ties across and within sides.
        let values: Vec<(f64, bool)> = values
            .into_iter()
            .map(|(v, m)| (v as f64 / 4.0, m))
            .collect();
        let direction = if ge { Direction::MemberIfGE } else { Direction::MemberIfLE };
        let (tau, best) = sweep_threshold(&values, direction).unwrap();

        let balanced = |threshold: f64| {
            let members = values.iter().filter(|(_, m)| *m).count();
            let nonmembers = values.len() - members;
            let hit_m = values.iter().filter(|&&(v, m)| {
                m && match direction {
                    Direction::MemberIfGE => v >= threshold,
                    Direction::MemberIfLE => v <= threshold,
                }
            }).count();
            let hit_n = values.iter().filter(|&&(v, m)| {
                !m && !match direction {
                    Direction::MemberIfGE => v >= threshold,
                    Direction::MemberIfLE => v <= threshold,
                }
            }).count();
            let mr = if members == 0 { 1.0 } else { hit_m as f64 / members as f64 };
            let nr = if nonmembers == 0 { 1.0 } else { hit_n as f64 / nonmembers as f64 };
            0.5 * (mr + nr)
        };

        // Exhaustive oracle: data points, nudged points, midpoints, sentinels.
        let mut exhaustive = vec![f64::NEG_INFINITY, f64::INFINITY];
        for &(v, _) in &values {
            exhaustive.push(v);
            exhaustive.push(v - 1e-9);
            exhaustive.push(v + 1e-9);
        }
        let mut sorted: Vec<f64> = values.iter().map(|&(v, _)| v).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        for pair in sorted.windows(2) {
            exhaustive.push(0.5 * (pair[0] + pair[1]));
        }
        let oracle_best = exhaustive
            .iter()
            .map(|&t| balanced(t))
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(best + 1e-12 >= oracle_best,
            "sweep found {best} at {tau}, oracle found {oracle_best}");
        prop_assert!((balanced(tau) - best).abs() < 1e-12);
    }

    #[test]
    fn amplification_monotone_and_leaves_unselected_untouched(
        v in proptest::collection::vec(-2.0f64..2.0, 1..16),
        fraction in 0.0f64..1.0,
        factor in 1.0f64..8.0,
    ) {
        let input = Array1::from_vec(v.clone());
        let out = amplify_top_fraction(&input, fraction, factor);
        let count = ((fraction * v.len() as f64).ceil() as usize).min(v.len());
        let changed = out
            .iter()
            .zip(input.iter())
            .filter(|(o, i)| *o != *i)
            .count();
        prop_assert!(changed <= count);
        for (o, i) in out.iter().zip(input.iter()) {
            if *o != *i {
                prop_assert!((o - i * factor).abs() < 1e-12);
            }
        }
        // Selection is by raw value: every selected entry is at least as
        // large as every unselected entry.
        if count > 0 && count < v.len() {
            let selected_min = out
                .iter()
                .zip(input.iter())
                .filter(|(o, i)| *o != *i || factor == 1.0)
                .map(|(_, i)| *i)
                .fold(f64::INFINITY, f64::min);
            let unselected_max = out
                .iter()
                .zip(input.iter())
                .filter(|(o, i)| *o == *i && factor != 1.0)
                .map(|(_, i)| *i)
                .fold(f64::NEG_INFINITY, f64::max);
            if factor != 1.0 && changed == count {
                prop_assert!(selected_min >= unselected_max);
            }
        }
    }

    #[test]
    fn metric_values_are_finite_and_bounded(
        scores in score_vec(6),
        label in 0usize..6,
    ) {
        let r = record_from(scores, label, true);
        let conf = metric_confidence(&r);
        prop_assert!((0.0..=1.0).contains(&conf));
        let h = metric_entropy(&r);
        prop_assert!(h.is_finite());
        prop_assert!(h >= -1e-12 && h <= (6.0f64).ln() + 1e-9);
        let me = metric_modified_entropy(&r);
        prop_assert!(me.is_finite());
        prop_assert!(me >= -1e-12);
    }

    #[test]
    fn histogram_counts_total_and_distances_behave(
        a in proptest::collection::vec(-5.0f64..5.0, 1..40),
        b in proptest::collection::vec(-5.0f64..5.0, 1..40),
        bins in 1usize..12,
    ) {
        let range = shared_range(&a, &b).unwrap();
        let p = build_histogram(&a, bins, range).unwrap();
        let q = build_histogram(&b, bins, range).unwrap();
        prop_assert_eq!(p.counts.iter().sum::<u64>(), a.len() as u64);
        prop_assert_eq!(q.counts.iter().sum::<u64>(), b.len() as u64);

        let pq = distance_report(&p, &q).unwrap();
        let qp = distance_report(&q, &p).unwrap();
        prop_assert!((pq.tv - qp.tv).abs() < 1e-12);
        prop_assert!(pq.tv >= 0.0 && pq.tv <= 1.0);
        prop_assert!(pq.kl >= -1e-12);
        prop_assert!((pq.euclidean - qp.euclidean).abs() < 1e-12);

        let pp = distance_report(&p, &p).unwrap();
        prop_assert_eq!(pp.kl, 0.0);
        prop_assert_eq!(pp.tv, 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_roundtrip_is_exact(
        widths in proptest::collection::vec(1usize..6, 2..4),
        seed in 0u64..1000,
    ) {
        let mut specs = Vec::new();
        for i in 0..widths.len() - 1 {
            let act = if i == widths.len() - 2 {
                Activation::Softmax
            } else {
                Activation::Tanh
            };
            specs.push(LayerSpec::new(widths[i], widths[i + 1], act));
        }
        let model = build_model(&specs, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ngc");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        for (a, b) in model.weights().iter().zip(loaded.weights()) {
            prop_assert_eq!(a, b);
        }
        for (a, b) in model.biases().iter().zip(loaded.biases()) {
            prop_assert_eq!(a, b);
        }
    }
}
