//! The experience database: one audited inference per training sample.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Label, RawSample, Vocab};
use crate::error::{read_to_string, write_file, Error, Result};
use crate::model::{Inference, Model};

/// Side length of the pooled attention grid stored per layer.
pub const ATTENTION_CHUNKS: usize = 10;
const RECORD_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperienceRecord {
    pub id: usize,
    pub text: String,
    pub label_text: Label,
    /// Position-0 symbol of each layer. Empty for models without symbols.
    pub quantized_indices: Vec<usize>,
    /// Gate of each layer. Empty for models without gates.
    pub gating_scores: Vec<f32>,
    /// Per layer, a `10×10` grid of chunk-mean attention weights.
    pub attention_weights: Vec<Vec<Vec<f32>>>,
    pub prediction: Label,
    pub reward: f32,
}

impl ExperienceRecord {
    pub fn from_inference(id: usize, sample: &RawSample, inference: &Inference, seq_len: usize) -> Self {
        let prediction = Label::from_id(inference.prediction()).expect("four-class head");
        Self {
            id,
            text: sample.text.clone(),
            label_text: sample.label,
            quantized_indices: inference.traces.iter().filter_map(|t| t.symbol_index).collect(),
            gating_scores: inference.traces.iter().filter_map(|t| t.gate_score).collect(),
            attention_weights: inference
                .traces
                .iter()
                .map(|t| compress_attention(&t.attention, seq_len, ATTENTION_CHUNKS))
                .collect(),
            prediction,
            reward: if prediction == sample.label { 1.0 } else { 0.0 },
        }
    }

    pub fn is_correct(&self) -> bool {
        self.reward == 1.0
    }

    /// Mean gate over layers, `None` when the record has no gates.
    pub fn mean_gate(&self) -> Option<f64> {
        if self.gating_scores.is_empty() {
            return None;
        }
        Some(self.gating_scores.iter().map(|&g| g as f64).sum::<f64>() / self.gating_scores.len() as f64)
    }

    /// Symbols joined as `A -> B`.
    pub fn chain(&self) -> String {
        format_chain(&self.quantized_indices)
    }
}

pub fn format_chain(symbols: &[usize]) -> String {
    symbols
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" -> ")
}

fn round3(v: f64) -> f32 {
    ((v * 1000.0).round() / 1000.0) as f32
}

/// Pools a row-major `[l, l]` matrix into `[n, n]` block means, rounded to
/// three decimals. Chunk `c` covers rows `c·l/n .. (c+1)·l/n`; when
/// `l < n` the grid shrinks to `l`.
pub fn compress_attention(matrix: &[f32], l: usize, n: usize) -> Vec<Vec<f32>> {
    if matrix.is_empty() || l == 0 {
        return Vec::new();
    }
    let n = n.min(l);
    let bounds: Vec<(usize, usize)> = (0..n).map(|c| (c * l / n, (c + 1) * l / n)).collect();
    bounds
        .iter()
        .map(|&(r0, r1)| {
            bounds
                .iter()
                .map(|&(c0, c1)| {
                    let mut sum = 0.0f64;
                    for r in r0..r1 {
                        sum += matrix[r * l + c0..r * l + c1].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    round3(sum / ((r1 - r0) * (c1 - c0)) as f64)
                })
                .collect()
        })
        .collect()
}

/// Runs the frozen model over one sample.
pub fn record_experience(model: &Model, vocab: &Vocab, sample: &RawSample, id: usize) -> Result<ExperienceRecord> {
    let ids = vocab.encode(&sample.text);
    let inf = model.infer(&ids)?;
    Ok(ExperienceRecord::from_inference(id, sample, &inf, model.config().sequence_length))
}

/// Records every sample with ids `0..n`. Fixed-size batches are spread over
/// worker threads and merged in id order, so the result does not depend on
/// scheduling.
pub fn record_all(model: &Model, vocab: &Vocab, samples: &[RawSample]) -> Result<Vec<ExperienceRecord>> {
    let seq_len = model.config().sequence_length;
    let batches: Vec<Vec<ExperienceRecord>> = samples
        .par_chunks(RECORD_BATCH)
        .enumerate()
        .map(|(chunk, batch)| {
            let encoded: Vec<Vec<usize>> = batch.iter().map(|s| vocab.encode(&s.text)).collect();
            let refs: Vec<&[usize]> = encoded.iter().map(Vec::as_slice).collect();
            let inferences = model.infer_batch(&refs)?;
            Ok(batch
                .iter()
                .zip(&inferences)
                .enumerate()
                .map(|(i, (s, inf))| ExperienceRecord::from_inference(chunk * RECORD_BATCH + i, s, inf, seq_len))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(batches.into_iter().flatten().collect())
}

pub fn save_db(path: &Path, records: &[ExperienceRecord]) -> Result<()> {
    let json = serde_json::to_string(records).expect("records serialize");
    write_file(path, json)
}

pub fn load_db(path: &Path) -> Result<Vec<ExperienceRecord>> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::json(&text, &e))
}
