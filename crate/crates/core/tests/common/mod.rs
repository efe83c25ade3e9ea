#![allow(dead_code)]

use intuition_core::data::Label;
use intuition_core::experience::ExperienceRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A database with symbols drawn from `0..k`, stable chains about half the
/// time, and each symbol biased towards one label so consistency can hold.
pub fn random_db(n: usize, k: usize, seed: u64) -> Vec<ExperienceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let first = rng.random_range(0..k);
            let second = if rng.random_bool(0.5) { first } else { rng.random_range(0..k) };
            let label = if rng.random_bool(0.6) {
                Label::ALL[first % Label::COUNT]
            } else {
                Label::ALL[rng.random_range(0..Label::COUNT)]
            };
            let prediction = if rng.random_bool(0.5) {
                label
            } else {
                Label::ALL[rng.random_range(0..Label::COUNT)]
            };
            // Gates on a 0.05 grid so some sit exactly on common thresholds.
            let gates = (0..2).map(|_| rng.random_range(0..=20) as f32 / 20.0).collect();
            ExperienceRecord {
                id,
                text: format!("sample {id}"),
                label_text: label,
                quantized_indices: vec![first, second],
                gating_scores: gates,
                attention_weights: Vec::new(),
                prediction,
                reward: if prediction == label { 1.0 } else { 0.0 },
            }
        })
        .collect()
}
