//! The purity map and the stability/activation/consistency filter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{save_dataset, Label, RawSample};
use crate::error::{write_file, Error, Result};
use crate::experience::ExperienceRecord;

pub const DEFAULT_MIN_GATE: f64 = 0.5;

/// Symbol × label counts over the first-layer symbol of each record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PurityMap {
    counts: Vec<[u64; Label::COUNT]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tendency {
    pub label: Label,
    pub count: u64,
    /// Share of the symbol's occurrences, in percent, rounded to 2 places.
    pub percentage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolReport {
    pub symbol: usize,
    pub total: u64,
    pub tendencies: Vec<Tendency>,
}

/// `100·count/total` with two decimals, e.g. `"34.95"`.
pub fn format_percentage(count: u64, total: u64) -> String {
    format!("{:.2}", percentage(count, total))
}

fn percentage(count: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

fn round2(v: f64) -> f64 {
    format!("{v:.2}").parse().expect("formatted float")
}

impl PurityMap {
    pub fn empty(codebook_size: usize) -> Self {
        Self {
            counts: vec![[0; Label::COUNT]; codebook_size],
        }
    }

    pub fn build(db: &[ExperienceRecord], codebook_size: usize) -> Result<Self> {
        if db.is_empty() {
            return Err(Error::Empty("experience database"));
        }
        let mut map = Self::empty(codebook_size);
        for rec in db {
            let &symbol = rec.quantized_indices.first().ok_or_else(|| {
                Error::Config(format!("record {} has no symbols", rec.id))
            })?;
            map.add(symbol, rec.label_text)?;
        }
        Ok(map)
    }

    pub fn add(&mut self, symbol: usize, label: Label) -> Result<()> {
        let size = self.counts.len();
        let row = self
            .counts
            .get_mut(symbol)
            .ok_or_else(|| Error::Dimension(format!("symbol {symbol} outside codebook of size {size}")))?;
        row[label.id()] += 1;
        Ok(())
    }

    pub fn codebook_size(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self, symbol: usize) -> [u64; Label::COUNT] {
        self.counts.get(symbol).copied().unwrap_or_default()
    }

    pub fn total(&self, symbol: usize) -> u64 {
        self.counts(symbol).iter().sum()
    }

    pub fn grand_total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// The label with the strictly largest count; `None` for unused
    /// symbols and for ties.
    pub fn top_label(&self, symbol: usize) -> Option<Label> {
        let row = self.counts(symbol);
        let max = *row.iter().max()?;
        if max == 0 || row.iter().filter(|&&c| c == max).count() > 1 {
            return None;
        }
        Label::from_id(row.iter().position(|&c| c == max)?)
    }

    /// Labels seen with this symbol, most frequent first (label order on ties).
    pub fn tendencies(&self, symbol: usize) -> Vec<Tendency> {
        let row = self.counts(symbol);
        let total = row.iter().sum();
        let mut out: Vec<Tendency> = Label::ALL
            .iter()
            .filter(|l| row[l.id()] > 0)
            .map(|&label| Tendency {
                label,
                count: row[label.id()],
                percentage: round2(percentage(row[label.id()], total)),
            })
            .collect();
        out.sort_by(|a, b| b.count.cmp(&a.count).then(a.label.cmp(&b.label)));
        out
    }

    /// One entry per used symbol, in symbol order.
    pub fn report(&self) -> Vec<SymbolReport> {
        (0..self.counts.len())
            .filter(|&k| self.total(k) > 0)
            .map(|k| SymbolReport {
                symbol: k,
                total: self.total(k),
                tendencies: self.tendencies(k),
            })
            .collect()
    }

    pub fn from_report(report: &[SymbolReport], codebook_size: usize) -> Result<Self> {
        let mut map = Self::empty(codebook_size);
        for entry in report {
            for t in &entry.tendencies {
                for _ in 0..t.count {
                    map.add(entry.symbol, t.label)?;
                }
            }
        }
        Ok(map)
    }
}

pub fn save_purity_report(path: &Path, map: &PurityMap) -> Result<()> {
    let json = serde_json::to_string_pretty(&map.report()).expect("report serializes");
    write_file(path, json)
}

/// Stability, activation and consistency, in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    Unstable,
    Inactive,
    Inconsistent,
}

/// Checks one record against the three criteria.
pub fn check_record(rec: &ExperienceRecord, map: &PurityMap, min_gate: f64) -> std::result::Result<(), Rejection> {
    let symbols = &rec.quantized_indices;
    let Some(&first) = symbols.first() else {
        return Err(Rejection::Unstable);
    };
    if symbols.iter().any(|&s| s != first) {
        return Err(Rejection::Unstable);
    }
    if rec.gating_scores.is_empty() || rec.gating_scores.iter().any(|&g| g as f64 <= min_gate) {
        return Err(Rejection::Inactive);
    }
    if map.top_label(first) != Some(rec.label_text) {
        return Err(Rejection::Inconsistent);
    }
    Ok(())
}

/// Ids of the records meeting every criterion, in database order.
pub fn filter_by_internals(db: &[ExperienceRecord], map: &PurityMap, min_gate: f64) -> Vec<usize> {
    db.iter()
        .filter(|r| check_record(r, map, min_gate).is_ok())
        .map(|r| r.id)
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub considered: usize,
    pub kept: usize,
    pub unstable: usize,
    pub inactive: usize,
    pub inconsistent: usize,
}

pub fn summarize(db: &[ExperienceRecord], map: &PurityMap, min_gate: f64) -> FilterSummary {
    let mut s = FilterSummary {
        considered: db.len(),
        ..Default::default()
    };
    for rec in db {
        match check_record(rec, map, min_gate) {
            Ok(()) => s.kept += 1,
            Err(Rejection::Unstable) => s.unstable += 1,
            Err(Rejection::Inactive) => s.inactive += 1,
            Err(Rejection::Inconsistent) => s.inconsistent += 1,
        }
    }
    s
}

/// The kept records as `{text, label}` samples.
pub fn filtered_samples(db: &[ExperienceRecord], kept: &[usize]) -> Vec<RawSample> {
    let mut kept = kept.iter().peekable();
    db.iter()
        .filter(|r| {
            if kept.peek() == Some(&&r.id) {
                kept.next();
                true
            } else {
                false
            }
        })
        .map(|r| RawSample::new(r.text.clone(), r.label_text))
        .collect()
}

pub fn save_filtered(path: &Path, samples: &[RawSample]) -> Result<()> {
    save_dataset(path, samples)
}
