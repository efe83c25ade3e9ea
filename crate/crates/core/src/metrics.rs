//! Accuracy, gated ratio, intuitive accuracy and the distribution exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{sample_subset, Label, RawSample, Vocab};
use crate::error::{write_file, Error, Result};
use crate::experience::{record_all, ExperienceRecord};
use crate::model::Model;

pub const DEFAULT_THETA: f64 = 0.7;
pub const GATE_BINS: usize = 20;

pub const REWARD_CSV: &str = "reward_distribution.csv";
pub const GATE_CSV: &str = "gate_distribution.csv";
pub const SYMBOL_CSV: &str = "symbol_label_distribution.csv";

fn nonempty(records: &[ExperienceRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty("record set"));
    }
    Ok(())
}

/// Whether the record's mean gate exceeds `theta`. Records without gates
/// never count as gated.
pub fn is_gated(record: &ExperienceRecord, theta: f64) -> bool {
    record.mean_gate().is_some_and(|g| g > theta)
}

pub fn accuracy(records: &[ExperienceRecord]) -> Result<f64> {
    nonempty(records)?;
    let correct = records.iter().filter(|r| r.is_correct()).count();
    Ok(correct as f64 / records.len() as f64)
}

pub fn gated_ratio(records: &[ExperienceRecord], theta: f64) -> Result<f64> {
    nonempty(records)?;
    let gated = records.iter().filter(|r| is_gated(r, theta)).count();
    Ok(gated as f64 / records.len() as f64)
}

/// Accuracy among gated records; `None` when none are gated.
pub fn intuitive_accuracy(records: &[ExperienceRecord], theta: f64) -> Option<f64> {
    let gated: Vec<_> = records.iter().filter(|r| is_gated(r, theta)).collect();
    if gated.is_empty() {
        return None;
    }
    let correct = gated.iter().filter(|r| r.is_correct()).count();
    Some(correct as f64 / gated.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardHistogram {
    pub incorrect: u64,
    pub correct: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub gated_ratio: f64,
    pub intuitive_accuracy: Option<f64>,
    pub theta: f64,
    pub n: usize,
    pub reward_histogram: RewardHistogram,
    /// Counts of per-record mean gates in 20 equal bins over `[0, 1]`.
    pub gate_histogram: Vec<u64>,
    /// First-layer symbol → label → count.
    pub symbol_label_distribution: BTreeMap<usize, BTreeMap<Label, u64>>,
    /// Mean gate over correct and over incorrect records.
    pub mean_gate_correct: Option<f64>,
    pub mean_gate_incorrect: Option<f64>,
}

pub fn gate_bin(g: f64) -> usize {
    ((g * GATE_BINS as f64).floor().max(0.0) as usize).min(GATE_BINS - 1)
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Every metric, computed from records alone.
pub fn evaluate_records(records: &[ExperienceRecord], theta: f64) -> Result<EvalResult> {
    let mut rewards = RewardHistogram::default();
    let mut gates = vec![0u64; GATE_BINS];
    let mut symbols: BTreeMap<usize, BTreeMap<Label, u64>> = BTreeMap::new();
    for r in records {
        if r.is_correct() {
            rewards.correct += 1;
        } else {
            rewards.incorrect += 1;
        }
        if let Some(g) = r.mean_gate() {
            gates[gate_bin(g)] += 1;
        }
        if let Some(&s) = r.quantized_indices.first() {
            *symbols.entry(s).or_default().entry(r.label_text).or_default() += 1;
        }
    }
    let gate_mean = |correct: bool| {
        mean(
            records
                .iter()
                .filter(|r| r.is_correct() == correct)
                .filter_map(ExperienceRecord::mean_gate),
        )
    };
    Ok(EvalResult {
        accuracy: accuracy(records)?,
        gated_ratio: gated_ratio(records, theta)?,
        intuitive_accuracy: intuitive_accuracy(records, theta),
        theta,
        n: records.len(),
        reward_histogram: rewards,
        gate_histogram: gates,
        symbol_label_distribution: symbols,
        mean_gate_correct: gate_mean(true),
        mean_gate_incorrect: gate_mean(false),
    })
}

/// Optionally subsamples `dataset`, runs the model over it and computes
/// the metrics. Returns the records alongside.
pub fn evaluate_model(
    model: &Model,
    vocab: &Vocab,
    dataset: &[RawSample],
    theta: f64,
    sample_size: Option<usize>,
    seed: u64,
) -> Result<(EvalResult, Vec<ExperienceRecord>)> {
    let subset = match sample_size {
        Some(n) => sample_subset(dataset, n, seed)?,
        None => dataset.to_vec(),
    };
    let records = record_all(model, vocab, &subset)?;
    Ok((evaluate_records(&records, theta)?, records))
}

pub fn reward_csv(r: &EvalResult) -> String {
    format!(
        "reward,count\n0.0,{}\n1.0,{}\n",
        r.reward_histogram.incorrect, r.reward_histogram.correct
    )
}

pub fn gate_csv(r: &EvalResult) -> String {
    let mut out = String::from("bin_start,bin_end,count\n");
    for (i, c) in r.gate_histogram.iter().enumerate() {
        let w = 1.0 / GATE_BINS as f64;
        writeln!(out, "{:.2},{:.2},{c}", i as f64 * w, (i + 1) as f64 * w).expect("string write");
    }
    out
}

pub fn symbol_csv(r: &EvalResult) -> String {
    let mut out = String::from("symbol");
    for l in Label::ALL {
        write!(out, ",{l}").expect("string write");
    }
    out.push('\n');
    for (s, counts) in &r.symbol_label_distribution {
        write!(out, "{s}").expect("string write");
        for l in Label::ALL {
            write!(out, ",{}", counts.get(&l).copied().unwrap_or(0)).expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Writes `eval_result.json` and the three distribution CSVs into `dir`.
pub fn write_eval(dir: &Path, r: &EvalResult) -> Result<()> {
    let json = serde_json::to_string_pretty(r).expect("result serializes");
    write_file(&dir.join("eval_result.json"), json)?;
    write_file(&dir.join(REWARD_CSV), reward_csv(r))?;
    write_file(&dir.join(GATE_CSV), gate_csv(r))?;
    write_file(&dir.join(SYMBOL_CSV), symbol_csv(r))
}
