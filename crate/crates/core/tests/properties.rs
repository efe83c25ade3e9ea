mod common;

use intuition_autograd::Tensor;
use intuition_core::data::{sample_subset, split_dataset, Label, RawSample, Vocab, PAD_ID, SEQUENCE_LENGTH};
use intuition_core::experience::{compress_attention, ExperienceRecord};
use intuition_core::filter::{check_record, filter_by_internals, PurityMap};
use intuition_core::metrics::{accuracy, gated_ratio, intuitive_accuracy, is_gated};
use intuition_core::objectives::{focus_loss_value, purity_loss};
use intuition_core::tracer::{bag_similarity, pattern_stats};
use intuition_core::vq::{squared_distance, Codebook};
use proptest::prelude::*;

fn text() -> impl Strategy<Value = String> {
    "[a-z .,!?]{0,140}"
}

fn vocab() -> Vocab {
    let chars: String = ('a'..='z').chain(" .,!?".chars()).collect();
    Vocab::build(&[RawSample::new(chars, Label::World)]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_is_fixed_length_and_decodes_to_prefix(s in text()) {
        let v = vocab();
        let ids = v.encode(&s);
        prop_assert_eq!(ids.len(), SEQUENCE_LENGTH);
        let prefix: String = s.chars().take(SEQUENCE_LENGTH).collect();
        prop_assert_eq!(v.decode(&ids), prefix.clone());
        let n = prefix.chars().count();
        prop_assert!(ids[n..].iter().all(|&i| i == PAD_ID));
        prop_assert!(ids[..n].iter().all(|&i| i >= 2 && i < v.len()));
    }

    #[test]
    fn split_partitions(n in 1usize..300, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (train, val) = split_dataset(&items, frac, seed).unwrap();
        prop_assert_eq!(train.len(), (n as f64 * frac).floor() as usize);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, items.clone());
        prop_assert_eq!(split_dataset(&items, frac, seed).unwrap(), (train, val));
    }

    #[test]
    fn subset_is_sorted_distinct_and_sized(n in 1usize..400, seed in any::<u64>(), pick in 0.0f64..=1.0) {
        let items: Vec<usize> = (0..n).collect();
        let size = (n as f64 * pick) as usize;
        let s = sample_subset(&items, size, seed).unwrap();
        prop_assert_eq!(s.len(), size);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(sample_subset(&items, n + 1, seed).is_err());
    }

    #[test]
    fn quantize_matches_oracle_and_is_idempotent(seed in any::<u64>(), rows in 1usize..40) {
        let (k, d) = (16, 8);
        let mut cb = Codebook::init(k, d, seed).unwrap();
        let x = Tensor::from_fn([rows, d], |i| (((i as u64 ^ seed) % 97) as f32 / 97.0 - 0.5) * 0.2);
        let q = cb.quantize(&x).unwrap();
        for r in 0..rows {
            let row = x.row(r);
            let best = (0..k)
                .min_by(|&a, &b| {
                    squared_distance(row, cb.vectors().row(a))
                        .partial_cmp(&squared_distance(row, cb.vectors().row(b)))
                        .unwrap()
                })
                .unwrap();
            prop_assert_eq!(q.indices[r], best);
        }
        let again = cb.quantize(&q.z_q).unwrap();
        prop_assert_eq!(again.indices, q.indices);
        prop_assert_eq!(again.z_q, q.z_q);
        prop_assert_eq!(again.commitment_loss, 0.0);
    }

    #[test]
    fn purity_loss_ignores_sample_order(pairs in prop::collection::vec((0usize..6, 0usize..4), 1..60), rot in 0usize..60) {
        let (s, l): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let mut rotated = pairs.clone();
        rotated.rotate_left(rot % pairs.len());
        let (rs, rl): (Vec<usize>, Vec<usize>) = rotated.into_iter().unzip();
        let a = purity_loss(&s, &l);
        prop_assert!((a - purity_loss(&rs, &rl)).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn purity_map_equals_tally(seed in any::<u64>(), n in 1usize..300) {
        let db = common::random_db(n, 12, seed);
        let map = PurityMap::build(&db, 12).unwrap();
        let mut tally = vec![[0u64; 4]; 12];
        for r in &db {
            tally[r.quantized_indices[0]][r.label_text.id()] += 1;
        }
        for (k, row) in tally.iter().enumerate() {
            prop_assert_eq!(map.counts(k), *row);
            prop_assert_eq!(map.total(k), row.iter().sum::<u64>());
            let pct: f64 = map.tendencies(k).iter().map(|t| t.percentage).sum();
            if map.total(k) > 0 {
                prop_assert!((pct - 100.0).abs() <= 0.02);
            }
        }
        prop_assert_eq!(map.grand_total(), n as u64);
    }

    #[test]
    fn filter_output_is_checked_ordered_and_monotone(seed in any::<u64>(), n in 1usize..300) {
        let db = common::random_db(n, 8, seed);
        let map = PurityMap::build(&db, 8).unwrap();
        let mut previous: Option<Vec<usize>> = None;
        for min_gate in [0.0, 0.3, 0.5, 0.7, 0.95] {
            let kept = filter_by_internals(&db, &map, min_gate);
            prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
            for &id in &kept {
                let r = &db[id];
                prop_assert!(r.quantized_indices.iter().all(|&s| s == r.quantized_indices[0]));
                prop_assert!(r.gating_scores.iter().all(|&g| g as f64 > min_gate));
                prop_assert_eq!(map.top_label(r.quantized_indices[0]), Some(r.label_text));
            }
            prop_assert_eq!(filter_by_internals(&db, &map, min_gate), kept.clone());
            if let Some(prev) = &previous {
                prop_assert!(kept.iter().all(|id| prev.contains(id)));
            }
            previous = Some(kept);
        }
    }

    #[test]
    fn gated_ratio_is_non_increasing(seed in any::<u64>(), n in 1usize..200) {
        let db = common::random_db(n, 8, seed);
        let ratios: Vec<f64> = (0..=20).map(|t| gated_ratio(&db, t as f64 / 20.0).unwrap()).collect();
        prop_assert!(ratios.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(ratios[20], 0.0);
    }

    #[test]
    fn correct_count_partitions(seed in any::<u64>(), n in 1usize..200, theta in 0.0f64..1.0) {
        let db = common::random_db(n, 8, seed);
        let gated: Vec<&ExperienceRecord> = db.iter().filter(|r| is_gated(r, theta)).collect();
        let correct_outside = db.iter().filter(|r| !is_gated(r, theta) && r.is_correct()).count() as f64;
        let inside = intuitive_accuracy(&db, theta).map_or(0.0, |a| a * gated.len() as f64);
        let total = accuracy(&db).unwrap() * n as f64;
        prop_assert!((inside + correct_outside - total).abs() < 1e-9);
    }

    #[test]
    fn record_json_round_trips(seed in any::<u64>()) {
        let mut db = common::random_db(5, 8, seed);
        let grid: Vec<f32> = (0..36).map(|i| ((i as u64 * 7 + seed) % 11) as f32 / 11.0).collect();
        db[0].attention_weights = vec![compress_attention(&grid, 6, 3); 2];
        let json = serde_json::to_string(&db).unwrap();
        let back: Vec<ExperienceRecord> = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, db);
    }

    #[test]
    fn compression_keeps_uniform_rows(l in 1usize..40, n in 1usize..12) {
        let m = vec![1.0 / l as f32; l * l];
        let c = compress_attention(&m, l, n);
        prop_assert_eq!(c.len(), n.min(l));
        let expect = ((1000.0 / l as f64).round() / 1000.0) as f32;
        prop_assert!(c.iter().flatten().all(|&v| v == expect));
    }

    #[test]
    fn similarity_is_symmetric_and_bounded(a in prop::collection::vec(0usize..12, 0..30), b in prop::collection::vec(0usize..12, 0..30)) {
        let s = bag_similarity(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, bag_similarity(&b, &a));
        if a.iter().any(|&i| i != PAD_ID) {
            prop_assert_eq!(bag_similarity(&a, &a), 1.0);
        }
    }

    #[test]
    fn pattern_stats_match_scan(seed in any::<u64>(), a in 0usize..4, b in 0usize..4) {
        let db = common::random_db(120, 4, seed);
        let chain = [a, b];
        let hits: Vec<f32> = db.iter().filter(|r| r.quantized_indices == chain).map(|r| r.reward).collect();
        let (count, rate) = pattern_stats(&chain, &db);
        prop_assert_eq!(count, hits.len());
        match rate {
            None => prop_assert!(hits.is_empty()),
            Some(r) => {
                let mean = hits.iter().map(|&h| h as f64).sum::<f64>() / hits.len() as f64;
                prop_assert!((r - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn focus_loss_is_smallest_at_mean_reward(rewards in prop::collection::vec(prop::bool::ANY, 1..40)) {
        let r: Vec<f64> = rewards.iter().map(|&b| b as u8 as f64).collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let at = |g: f64| focus_loss_value(&vec![g; r.len()], &r);
        let best = (1..1000).map(|i| i as f64 / 1000.0).min_by(|&x, &y| at(x).partial_cmp(&at(y)).unwrap()).unwrap();
        let target = mean.clamp(0.001, 0.999);
        prop_assert!((best - target).abs() <= 0.0011, "best {best}, mean {mean}");
    }
}

#[test]
fn rejects_records_without_gates() {
    let mut db = common::random_db(3, 4, 1);
    db[0].gating_scores.clear();
    let map = PurityMap::build(&db, 4).unwrap();
    assert!(check_record(&db[0], &map, 0.0).is_err());
}
