//! Five-step inference reports grounded in the experience database.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Label, Vocab, PAD_ID};
use crate::error::{Error, Result};
use crate::experience::{format_chain, ExperienceRecord};
use crate::filter::{PurityMap, Tendency};

const PREVIEW_IDS: usize = 20;
const HEADER: &str = "========================= Inference Prediction Result =========================";
const FOOTER_WIDTH: usize = 68;

/// Cosine similarity of bag-of-id count vectors, ignoring padding.
pub fn bag_similarity(a: &[usize], b: &[usize]) -> f64 {
    let size = a.iter().chain(b).copied().max().map_or(0, |m| m + 1);
    let mut ca = vec![0f64; size];
    let mut cb = vec![0f64; size];
    for &i in a.iter().filter(|&&i| i != PAD_ID) {
        ca[i] += 1.0;
    }
    for &i in b.iter().filter(|&&i| i != PAD_ID) {
        cb[i] += 1.0;
    }
    let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    let na: f64 = ca.iter().map(|x| x * x).sum();
    let nb: f64 = cb.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        // Counts are integers, so identical bags give exactly 1.
        (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
    }
}

/// The most similar record; ties go to the lowest id.
pub fn find_similar_experience<'a>(
    input_ids: &[usize],
    db: &'a [ExperienceRecord],
    vocab: &Vocab,
) -> Option<(&'a ExperienceRecord, f64)> {
    let mut best: Option<(&ExperienceRecord, f64)> = None;
    for rec in db {
        let sim = bag_similarity(input_ids, &vocab.encode(&rec.text));
        let better = match best {
            None => true,
            Some((b, s)) => sim > s || (sim == s && rec.id < b.id),
        };
        if better {
            best = Some((rec, sim));
        }
    }
    best
}

/// Number of records with exactly this chain and their mean reward.
pub fn pattern_stats(chain: &[usize], db: &[ExperienceRecord]) -> (usize, Option<f64>) {
    let rewards: Vec<f64> = db
        .iter()
        .filter(|r| r.quantized_indices == chain)
        .map(|r| r.reward as f64)
        .collect();
    if rewards.is_empty() {
        return (0, None);
    }
    (rewards.len(), Some(rewards.iter().sum::<f64>() / rewards.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedExperience {
    pub id: usize,
    pub similarity: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTendency {
    /// 1-based layer number.
    pub layer: usize,
    pub symbol: usize,
    pub total: u64,
    pub tendencies: Vec<Tendency>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub input_ids_preview: Vec<usize>,
    pub matched_experience: Option<MatchedExperience>,
    pub predicted_category: Label,
    pub thought_chain: Vec<usize>,
    pub gate_scores: Vec<f32>,
    pub average_gate: Option<f64>,
    pub intuition_activated: bool,
    pub symbol_tendencies: Vec<LayerTendency>,
    pub pattern_count: usize,
    pub pattern_success_rate: Option<f64>,
    pub theta: f64,
    /// Whether step 3 replayed the matched record instead of running the model.
    pub replayed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct TraceOptions {
    pub theta: f64,
    pub replay: bool,
}

/// Runs the five steps for `text`. The model, database and purity map must
/// come from the same run as `vocab`.
pub fn trace(
    text: &str,
    checkpoint: &Checkpoint,
    vocab: &Vocab,
    db: &[ExperienceRecord],
    purity: &PurityMap,
    opts: TraceOptions,
) -> Result<TraceReport> {
    checkpoint.check_vocab(&vocab.hash())?;
    let ids = vocab.encode(&text.to_lowercase());
    let matched = find_similar_experience(&ids, db, vocab);

    let (predicted, chain, gates) = match (opts.replay, matched) {
        (true, Some((rec, _))) => (rec.prediction, rec.quantized_indices.clone(), rec.gating_scores.clone()),
        (true, None) => return Err(Error::Empty("experience database")),
        (false, _) => {
            let inf = checkpoint.model.infer(&ids)?;
            (
                Label::from_id(inf.prediction()).expect("four classes"),
                inf.traces.iter().filter_map(|t| t.symbol_index).collect(),
                inf.traces.iter().filter_map(|t| t.gate_score).collect::<Vec<f32>>(),
            )
        }
    };
    let average_gate =
        (!gates.is_empty()).then(|| gates.iter().map(|&g| g as f64).sum::<f64>() / gates.len() as f64);
    let (pattern_count, pattern_success_rate) = pattern_stats(&chain, db);
    Ok(TraceReport {
        input_ids_preview: ids.iter().copied().take(PREVIEW_IDS).collect(),
        matched_experience: matched.map(|(r, s)| MatchedExperience {
            id: r.id,
            similarity: s,
            text: r.text.clone(),
        }),
        predicted_category: predicted,
        symbol_tendencies: chain
            .iter()
            .enumerate()
            .map(|(i, &symbol)| LayerTendency {
                layer: i + 1,
                symbol,
                total: purity.total(symbol),
                tendencies: purity.tendencies(symbol),
            })
            .collect(),
        thought_chain: chain,
        gate_scores: gates,
        intuition_activated: average_gate.is_some_and(|g| g > opts.theta),
        average_gate,
        pattern_count,
        pattern_success_rate,
        theta: opts.theta,
        replayed: opts.replay,
    })
}

fn or_none(s: String) -> String {
    if s.is_empty() {
        "(none)".into()
    } else {
        s
    }
}

/// The fixed-layout text report.
pub fn render(r: &TraceReport) -> String {
    let mut o = String::new();
    let w = &mut o;
    let ids: Vec<String> = r.input_ids_preview.iter().map(usize::to_string).collect();
    writeln!(w, "{HEADER}").unwrap();
    writeln!(w, "[Step 1: Text to Input IDs (Based on your input)]").unwrap();
    writeln!(w, "  - [{}]...", ids.join(", ")).unwrap();
    writeln!(w).unwrap();
    match &r.matched_experience {
        Some(m) => {
            writeln!(
                w,
                "[Step 2: Found Most Similar Experience (ID: {}, Similarity: {:.2})]",
                m.id, m.similarity
            )
            .unwrap();
            writeln!(w, "  - Original Text: {}", m.text).unwrap();
        }
        None => {
            writeln!(w, "[Step 2: Found Most Similar Experience (ID: none, Similarity: 0.00)]").unwrap();
            writeln!(w, "  - Original Text: (experience database is empty)").unwrap();
        }
    }
    writeln!(w).unwrap();
    writeln!(w, "[Step 3: Simulate inference process based on the matched experience]").unwrap();
    writeln!(w, "  - Predicted Category: {}", r.predicted_category).unwrap();
    writeln!(w, "  - Triggered AI Thought Chain: {}", or_none(format_chain(&r.thought_chain))).unwrap();
    let gates: Vec<String> = r.gate_scores.iter().map(|g| format!("{g:.3}")).collect();
    writeln!(w, "  - Gate Scores per Layer: {}", or_none(gates.join(" -> "))).unwrap();
    writeln!(
        w,
        "  - Intuition Channel Activated: {} (Average Gate Value: {})",
        if r.intuition_activated { "Yes" } else { "No" },
        r.average_gate.map_or("n/a".into(), |g| format!("{g:.4}"))
    )
    .unwrap();
    writeln!(w).unwrap();
    writeln!(w, "[Step 4: Analyze the historical semantic tendency of each Symbol in the thought chain]").unwrap();
    if r.symbol_tendencies.is_empty() {
        writeln!(w, "  - (no symbols)").unwrap();
    }
    for t in &r.symbol_tendencies {
        writeln!(
            w,
            "  - [Layer {}] Symbol {} (appeared {} times):",
            t.layer, t.symbol, t.total
        )
        .unwrap();
        for tend in &t.tendencies {
            writeln!(
                w,
                "    - Tends towards {}: {} times ({:.2}%)",
                tend.label, tend.count, tend.percentage
            )
            .unwrap();
        }
    }
    writeln!(w).unwrap();
    writeln!(w, "[Step 5: Deep Pattern Analysis based on Experience Database]").unwrap();
    writeln!(
        w,
        "  - Thought pattern {} appeared {} times in history.",
        or_none(format_chain(&r.thought_chain)),
        r.pattern_count
    )
    .unwrap();
    writeln!(
        w,
        "  - Historical Success Rate (Average Reward): {}",
        r.pattern_success_rate.map_or("n/a".into(), |p| format!("{:.2}%", 100.0 * p))
    )
    .unwrap();
    writeln!(w, "{}", "=".repeat(FOOTER_WIDTH)).unwrap();
    o
}
