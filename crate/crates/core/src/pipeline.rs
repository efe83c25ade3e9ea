//! The on-disk run layout and the steps that read and write it.
//!
//! Every step reads its inputs from a run directory and writes its outputs
//! back there, so steps can run in separate processes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_manifest, Checkpoint};
use crate::data::{load_dataset, save_dataset, split_dataset, RawSample, Vocab};
use crate::error::{read_to_string, write_file, Error, Result};
use crate::experience::{load_db, record_all, save_db, ExperienceRecord};
use crate::filter::{filter_by_internals, filtered_samples, save_filtered, save_purity_report, summarize, FilterSummary, PurityMap};
use crate::metrics::{evaluate_model, evaluate_records, write_eval, EvalResult};
use crate::model::ModelConfig;
use crate::objectives::Phase;
use crate::train::{run_phase0, run_phase1, run_phase2, StageReport, TrainRunConfig};

pub const TRAINING_DATA: &str = "training_data.json";
pub const VALIDATION_DATA: &str = "validation_data.json";
pub const MODEL_CONFIG: &str = "model_config.json";
pub const DB_FINETUNED: &str = "experience_db_finetuned.json";
pub const DB_GENERATED: &str = "experience_db_generated.json";
pub const FILTERED_DATA: &str = "filtered_data_purist.json";
pub const PURITY_REPORT: &str = "purity_report.json";

/// Paths inside one run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoint(&self, phase: Phase) -> PathBuf {
        self.root.join("checkpoints").join(format!("phase{}", phase as u8))
    }

    pub fn loss_log(&self, phase: Phase) -> PathBuf {
        self.root.join(format!("loss_log_phase{}.jsonl", phase as u8))
    }

    pub fn eval_dir(&self, phase: Phase) -> PathBuf {
        self.root.join(format!("eval_phase{}", phase as u8))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub train: Vec<RawSample>,
    pub validation: Vec<RawSample>,
    pub vocab: Vocab,
}

/// Splits `samples`, builds the vocabulary from the training part and
/// writes both sets and `model_config.json`.
pub fn prepare(layout: &Layout, samples: &[RawSample], train_fraction: f64, seed: u64) -> Result<Prepared> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (train, validation) = split_dataset(samples, train_fraction, seed)?;
    let vocab = Vocab::build(&train)?;
    save_dataset(&layout.file(TRAINING_DATA), &train)?;
    save_dataset(&layout.file(VALIDATION_DATA), &validation)?;
    vocab.save(&layout.file(MODEL_CONFIG))?;
    Ok(Prepared {
        train,
        validation,
        vocab,
    })
}

pub fn load_prepared(layout: &Layout) -> Result<Prepared> {
    Ok(Prepared {
        train: load_dataset(&layout.file(TRAINING_DATA))?,
        validation: load_dataset(&layout.file(VALIDATION_DATA))?,
        vocab: Vocab::load(&layout.file(MODEL_CONFIG))?,
    })
}

/// Architecture choices on top of the vocabulary-determined sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub codebook_size: usize,
    pub ffn_hidden: usize,
    pub intuition_enabled: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        let s = ModelConfig::standard(2);
        Self {
            d_model: s.d_model,
            num_heads: s.num_heads,
            num_layers: s.num_layers,
            codebook_size: s.codebook_size,
            ffn_hidden: s.ffn_hidden,
            intuition_enabled: s.intuition_enabled,
        }
    }
}

impl Architecture {
    pub fn model_config(&self, vocab: &Vocab) -> Result<ModelConfig> {
        let config = ModelConfig {
            d_model: self.d_model,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            codebook_size: self.codebook_size,
            ffn_hidden: self.ffn_hidden,
            intuition_enabled: self.intuition_enabled,
            ..ModelConfig::standard(vocab.len())
        };
        config.validate()?;
        Ok(config)
    }
}

fn with_log(cfg: &TrainRunConfig, layout: &Layout, phase: Phase) -> TrainRunConfig {
    TrainRunConfig {
        phase,
        loss_log: cfg.loss_log.clone().or_else(|| Some(layout.loss_log(phase))),
        ..cfg.clone()
    }
}

pub fn pretrain(layout: &Layout, cfg: &TrainRunConfig, arch: &Architecture) -> Result<(Checkpoint, StageReport)> {
    let p = load_prepared(layout)?;
    let data = p.vocab.tokenize_all(&p.train);
    let out = run_phase0(
        &with_log(cfg, layout, Phase::Pretrain),
        arch.model_config(&p.vocab)?,
        &data,
        &p.vocab.hash(),
    )?;
    out.checkpoint.save(&layout.checkpoint(Phase::Pretrain))?;
    Ok((out.checkpoint, out.report))
}

/// Phase 1 from the phase-0 checkpoint (or from fresh weights with
/// `from_scratch`), then a recording pass over the training set.
pub fn train_baseline(
    layout: &Layout,
    cfg: &TrainRunConfig,
    arch: &Architecture,
    from_scratch: bool,
) -> Result<(Checkpoint, StageReport)> {
    let p = load_prepared(layout)?;
    let init = if from_scratch {
        None
    } else {
        Some(Checkpoint::load(&layout.checkpoint(Phase::Pretrain))?)
    };
    let data = p.vocab.tokenize_all(&p.train);
    let out = run_phase1(
        &with_log(cfg, layout, Phase::Baseline),
        arch.model_config(&p.vocab)?,
        &data,
        init.as_ref(),
        &p.vocab.hash(),
    )?;
    out.checkpoint.save(&layout.checkpoint(Phase::Baseline))?;
    let db = record_all(&out.checkpoint.model, &p.vocab, &p.train)?;
    save_db(&layout.file(DB_FINETUNED), &db)?;
    Ok((out.checkpoint, out.report))
}

/// Builds the purity map from the phase-1 database, writes the purity
/// report and the filtered dataset.
pub fn filter(layout: &Layout, min_gate: f64) -> Result<FilterSummary> {
    let db = load_db(&layout.file(DB_FINETUNED))?;
    let map = PurityMap::build(&db, codebook_size(layout, Phase::Baseline)?)?;
    save_purity_report(&layout.file(PURITY_REPORT), &map)?;
    let kept = filter_by_internals(&db, &map, min_gate);
    save_filtered(&layout.file(FILTERED_DATA), &filtered_samples(&db, &kept))?;
    Ok(summarize(&db, &map, min_gate))
}

fn codebook_size(layout: &Layout, phase: Phase) -> Result<usize> {
    Ok(read_manifest(&layout.checkpoint(phase))?.config.codebook_size)
}

/// Phase 2 on the training set plus the filtered set, then a recording pass
/// over the training set.
pub fn train_expert(layout: &Layout, cfg: &TrainRunConfig) -> Result<(Checkpoint, StageReport)> {
    let p = load_prepared(layout)?;
    let init = Checkpoint::load(&layout.checkpoint(Phase::Baseline))?;
    let filtered = load_dataset(&layout.file(FILTERED_DATA))?;
    let out = run_phase2(
        &with_log(cfg, layout, Phase::Expert),
        &p.vocab.tokenize_all(&p.train),
        &p.vocab.tokenize_all(&filtered),
        &init,
        &p.vocab.hash(),
    )?;
    out.checkpoint.save(&layout.checkpoint(Phase::Expert))?;
    let db = record_all(&out.checkpoint.model, &p.vocab, &p.train)?;
    save_db(&layout.file(DB_GENERATED), &db)?;
    Ok((out.checkpoint, out.report))
}

/// Evaluates a phase's checkpoint on the validation set and writes the
/// result files into that phase's eval directory.
pub fn evaluate(
    layout: &Layout,
    phase: Phase,
    theta: f64,
    sample_size: Option<usize>,
    seed: u64,
) -> Result<(EvalResult, Vec<ExperienceRecord>)> {
    let p = load_prepared(layout)?;
    let ckpt = Checkpoint::load(&layout.checkpoint(phase))?;
    ckpt.check_vocab(&p.vocab.hash())?;
    let sample_size = sample_size.map(|n| n.min(p.validation.len()));
    let (result, records) = evaluate_model(&ckpt.model, &p.vocab, &p.validation, theta, sample_size, seed)?;
    write_eval(&layout.eval_dir(phase), &result)?;
    Ok((result, records))
}

/// Copies what the dashboard reads into `out`: the experience database (the
/// phase-2 one when present, else phase 1), `model_config.json`, and a purity
/// report and distribution CSVs recomputed from that database.
pub fn export_dashboard(layout: &Layout, out: &Path, theta: f64) -> Result<EvalResult> {
    let (db_path, phase) = if layout.file(DB_GENERATED).exists() {
        (layout.file(DB_GENERATED), Phase::Expert)
    } else {
        (layout.file(DB_FINETUNED), Phase::Baseline)
    };
    let db = load_db(&db_path)?;
    save_db(&out.join(DB_GENERATED), &db)?;
    let config = read_to_string(&layout.file(MODEL_CONFIG))?;
    write_file(&out.join(MODEL_CONFIG), config)?;
    let map = PurityMap::build(&db, codebook_size(layout, phase)?)?;
    save_purity_report(&out.join(PURITY_REPORT), &map)?;
    let result = evaluate_records(&db, theta)?;
    write_eval(out, &result)?;
    Ok(result)
}
