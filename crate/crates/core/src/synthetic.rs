//! A deterministic four-topic news-like corpus for tests and offline runs.
//!
//! Each text mixes topic keywords into common filler words. Some texts also
//! borrow keywords from a second topic, and a fraction carry a random
//! label, so a classifier trained on it makes some mistakes.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::data::{Label, RawSample};
use crate::seed::{self, Stream};

const WORLD: &[&str] = &[
    "iraq", "troops", "minister", "election", "embassy", "ceasefire", "rebels", "parliament",
    "refugees", "sanctions", "diplomats", "president", "border", "militants", "treaty", "nuclear",
    "protest", "government", "summit", "envoy",
];
const SPORTS: &[&str] = &[
    "game", "season", "coach", "league", "cup", "victory", "score", "championship", "olympic",
    "team", "players", "tournament", "match", "goal", "quarterback", "inning", "medal", "defeat",
    "playoffs", "striker",
];
const BUSINESS: &[&str] = &[
    "shares", "profit", "stocks", "market", "oil", "prices", "quarterly", "earnings", "bank",
    "investors", "merger", "economy", "sales", "dollar", "company", "billion", "revenue", "rates",
    "retail", "airline",
];
const SCITECH: &[&str] = &[
    "software", "internet", "microsoft", "computer", "space", "nasa", "google", "researchers",
    "wireless", "technology", "linux", "chip", "scientists", "online", "web", "mobile", "study",
    "apple", "network", "satellite",
];
const FILLER: &[&str] = &[
    "the", "a", "on", "in", "of", "to", "for", "with", "new", "after", "said", "today", "report",
    "over", "as", "by", "and", "first", "week", "says", "its", "from", "will", "more", "could",
    "two", "year", "at", "officials", "monday", "tuesday", "late", "plan", "big",
];

fn keywords(label: Label) -> &'static [&'static str] {
    match label {
        Label::World => WORLD,
        Label::Sports => SPORTS,
        Label::Business => BUSINESS,
        Label::SciTech => SCITECH,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub words: usize,
    pub topic_words: usize,
    /// Probability that keywords of a second topic are mixed in.
    pub ambiguity: f64,
    /// Probability that the label is replaced by a uniform draw.
    pub label_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            words: 16,
            topic_words: 4,
            ambiguity: 0.3,
            label_noise: 0.1,
        }
    }
}

pub fn generate(n: usize, seed: u64) -> Vec<RawSample> {
    generate_with(n, seed, &SyntheticSpec::default())
}

pub fn generate_with(n: usize, seed: u64, spec: &SyntheticSpec) -> Vec<RawSample> {
    let mut rng = seed::rng(seed, Stream::Synthetic);
    (0..n)
        .map(|i| {
            let topic = Label::ALL[i % Label::COUNT];
            let mut words: Vec<&str> = (0..spec.words)
                .map(|_| *FILLER.choose(&mut rng).expect("non-empty"))
                .collect();
            let mut place = |rng: &mut rand_chacha::ChaCha8Rng, pool: &[&'static str], count: usize| {
                for _ in 0..count {
                    let slot = rng.random_range(0..words.len());
                    words[slot] = pool.choose(rng).expect("non-empty");
                }
            };
            place(&mut rng, keywords(topic), spec.topic_words);
            if rng.random_bool(spec.ambiguity) {
                let other = Label::ALL[(topic.id() + rng.random_range(1..Label::COUNT)) % Label::COUNT];
                place(&mut rng, keywords(other), spec.topic_words.div_ceil(2));
            }
            let label = if rng.random_bool(spec.label_noise) {
                Label::ALL[rng.random_range(0..Label::COUNT)]
            } else {
                topic
            };
            RawSample::new(words.join(" "), label)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = generate(400, 42);
        assert_eq!(a, generate(400, 42));
        assert_ne!(a, generate(400, 43));
        for label in Label::ALL {
            let n = a.iter().filter(|s| s.label == label).count();
            assert!((70..=130).contains(&n), "{label}: {n}");
        }
        assert!(a.iter().all(|s| !s.text.is_empty() && s.text == s.text.to_lowercase()));
    }
}
