//! Optimizer, training loops for the three phases, and the loss log.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use intuition_autograd::{Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::TokenizedSample;
use crate::error::{Error, Result};
use crate::model::{self, is_pretrain_param, ForwardOptions, GateMode, Model, ModelConfig, ParamMap};
use crate::objectives::{self, phase_total, LossBreakdown, LossWeights, Phase};
use crate::seed::{self, Stream, DEFAULT_SEED};

/// Adaptive moment estimation without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter that has a gradient. A non-finite gradient
    /// rejects the whole step before anything changes.
    pub fn step(&mut self, params: &mut ParamMap, grads: &BTreeMap<String, Tensor<f32>>, batch: usize) -> Result<()> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: name.clone(),
                batch,
            });
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Dimension(format!("gradient for unknown parameter {name}")))?;
            let n = p.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub phase: Phase,
    /// Epochs of phase 0, phase 2, or the first (gate-detached) stage of phase 1.
    pub epochs: usize,
    /// Epochs of the second (gates live) stage of phase 1.
    pub gated_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub freeze_codebook: bool,
    /// Reconstruct from the last block instead of the first in phase 0.
    pub recon_full_stack: bool,
    /// JSON-lines loss log, one entry per optimizer step.
    pub loss_log: Option<PathBuf>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Baseline,
            epochs: 3,
            gated_epochs: 1,
            batch_size: 32,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            seed: DEFAULT_SEED,
            freeze_codebook: false,
            recon_full_stack: false,
            loss_log: None,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        let w = &self.weights;
        if [w.beta, w.lambda_purity, w.lambda_focus].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// What a stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Pretrain { full_stack: bool },
    Baseline { gate: GateMode },
    Expert,
}

impl Objective {
    pub fn phase(self) -> Phase {
        match self {
            Objective::Pretrain { .. } => Phase::Pretrain,
            Objective::Baseline { .. } => Phase::Baseline,
            Objective::Expert => Phase::Expert,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossLogEntry {
    pub phase: Phase,
    pub stage: String,
    pub epoch: usize,
    pub step: u64,
    pub batch: usize,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub losses: LossBreakdown,
    /// Predictions of the batch, when the objective classifies.
    pub correct: Option<usize>,
}

fn mean_of(vals: &[f64]) -> f64 {
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}

/// One forward/backward pass and optimizer update on a batch.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&TokenizedSample],
    objective: Objective,
    cfg: &TrainRunConfig,
    batch_index: usize,
) -> Result<StepResult> {
    let config = model.config().clone();
    if objective == Objective::Expert && !config.intuition_enabled {
        return Err(Error::Config("phase 2 needs a model with intuition enabled".into()));
    }
    let w = cfg.weights;
    let freeze = cfg.freeze_codebook;
    let pretrain = matches!(objective, Objective::Pretrain { .. });
    let mut tape = Tape::<f32>::new();
    let bound = model.bind(&mut tape, |name| {
        (!pretrain || is_pretrain_param(name)) && !(freeze && name == "codebook")
    });
    let opts = ForwardOptions {
        gate: match objective {
            Objective::Baseline { gate } => gate,
            _ => GateMode::Live,
        },
        depth: match objective {
            Objective::Pretrain { full_stack: false } => Some(1),
            _ => None,
        },
        ..ForwardOptions::default()
    };
    let ids: Vec<&[usize]> = batch.iter().map(|s| s.ids.as_slice()).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label.id()).collect();
    let out = model::forward(&config, &mut tape, &bound, &ids, &opts)?;

    let mut parts = LossBreakdown {
        weights: Some(w),
        ..Default::default()
    };
    let scalar = |tape: &Tape<f32>, v| tape.value(v).item() as f64;

    // VQ terms averaged over the blocks that quantized.
    let mut vq_var = None;
    if config.intuition_enabled {
        let cbs: Vec<_> = out.layers.iter().filter_map(|l| l.codebook_loss).collect();
        let cms: Vec<_> = out.layers.iter().filter_map(|l| l.commitment_loss).collect();
        let mut sum = tape.add(cbs[0], cms[0])?;
        for (&a, &b) in cbs.iter().zip(&cms).skip(1) {
            sum = tape.add(sum, a)?;
            sum = tape.add(sum, b)?;
        }
        vq_var = Some(tape.scale(sum, w.beta / cbs.len() as f64));
        parts.codebook = Some(mean_of(&cbs.iter().map(|&v| scalar(&tape, v)).collect::<Vec<_>>()));
        parts.commit = Some(mean_of(&cms.iter().map(|&v| scalar(&tape, v)).collect::<Vec<_>>()));
    } else {
        parts.codebook = Some(0.0);
        parts.commit = Some(0.0);
    }

    let mut correct = None;
    let loss = match objective {
        Objective::Pretrain { .. } => {
            let flat: Vec<usize> = ids.iter().flat_map(|s| s.iter().copied()).collect();
            let logits = model::reconstruction_logits(&mut tape, &bound, out.stream)?;
            let recon = objectives::reconstruction_loss(&mut tape, logits, &flat)?;
            parts.reconstruction = Some(scalar(&tape, recon));
            match vq_var {
                Some(v) => tape.add(recon, v)?,
                None => recon,
            }
        }
        Objective::Baseline { .. } | Objective::Expert => {
            let logits = out.logits.expect("full depth");
            let task = objectives::task_loss(&mut tape, logits, &labels)?;
            parts.task = Some(scalar(&tape, task));
            let preds: Vec<usize> = (0..batch.len())
                .map(|b| model::argmax(tape.value(logits).row(b)))
                .collect();
            let rewards: Vec<f64> = preds
                .iter()
                .zip(&labels)
                .map(|(p, y)| if p == y { 1.0 } else { 0.0 })
                .collect();
            correct = Some(rewards.iter().filter(|&&r| r == 1.0).count());
            if objective == Objective::Expert {
                let n_layers = out.layers.len() as f64;
                let mut raw = Vec::new();
                let mut surrogate = None;
                let mut gate_sum = None;
                for layer in &out.layers {
                    let symbols: Vec<usize> = (0..batch.len())
                        .map(|b| layer.symbol(b, config.sequence_length).expect("quantized"))
                        .collect();
                    raw.push(objectives::purity_loss(&symbols, &labels));
                    let probs = objectives::purity_probabilities(&symbols, &labels);
                    let s = objectives::purity_surrogate(
                        &mut tape,
                        &probs,
                        layer.sample_commitment.expect("quantized"),
                    )?;
                    surrogate = Some(match surrogate {
                        Some(acc) => tape.add(acc, s)?,
                        None => s,
                    });
                    let g = layer.gate.expect("gated");
                    gate_sum = Some(match gate_sum {
                        Some(acc) => tape.add(acc, g)?,
                        None => g,
                    });
                }
                let surrogate = tape.scale(surrogate.expect("layers"), 1.0 / n_layers);
                let mean_gate = tape.scale(gate_sum.expect("layers"), 1.0 / n_layers);
                let focus = objectives::focus_loss(&mut tape, mean_gate, &rewards)?;
                parts.purity = Some(mean_of(&raw));
                parts.purity_surrogate = Some(scalar(&tape, surrogate));
                parts.focus = Some(scalar(&tape, focus));
                let wp = tape.scale(surrogate, w.lambda_purity);
                let wf = tape.scale(focus, w.lambda_focus);
                let mut total = tape.add(task, wp)?;
                total = tape.add(total, wf)?;
                match vq_var.filter(|_| w.expert_vq) {
                    Some(v) => tape.add(total, v)?,
                    None => total,
                }
            } else {
                match vq_var {
                    Some(v) => tape.add(task, v)?,
                    None => task,
                }
            }
        }
    };
    parts.objective = scalar(&tape, loss);
    parts.total = phase_total(objective.phase(), &parts, &w)?;

    for layer in &out.layers {
        if let Some(ix) = &layer.indices {
            model.record_usage(ix);
        }
    }

    tape.backward(loss)?;
    let grads: BTreeMap<String, Tensor<f32>> = bound
        .iter()
        .filter_map(|(name, var)| tape.grad(var).map(|g| (name.to_string(), g)))
        .collect();
    adam.step(model.params_mut(), &grads, batch_index)?;
    Ok(StepResult {
        losses: parts,
        correct,
    })
}

/// Steps over shuffled batches for several epochs, appending to a loss log.
pub struct Stage<'a> {
    pub name: &'a str,
    pub objective: Objective,
    pub epochs: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub losses: Vec<LossBreakdown>,
    pub skipped_batches: Vec<usize>,
    /// Training accuracy of each epoch, when the objective classifies.
    pub epoch_accuracy: Vec<f64>,
}

pub struct Trainer {
    pub cfg: TrainRunConfig,
    adam: Adam,
    rng: rand_chacha::ChaCha8Rng,
    log: Option<BufWriter<File>>,
}

impl Trainer {
    pub fn new(cfg: TrainRunConfig) -> Result<Self> {
        cfg.validate()?;
        let log = match &cfg.loss_log {
            Some(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                Some(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
            }
            None => None,
        };
        Ok(Self {
            adam: Adam::new(cfg.learning_rate),
            rng: seed::rng(cfg.seed, Stream::Shuffle),
            log,
            cfg,
        })
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    pub fn run(&mut self, model: &mut Model, data: &[TokenizedSample], stage: &Stage) -> Result<StageReport> {
        let mut report = StageReport::default();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..stage.epochs {
            order.shuffle(&mut self.rng);
            let (mut correct, mut seen) = (0usize, 0usize);
            for (batch_index, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
                let batch: Vec<&TokenizedSample> = chunk.iter().map(|&i| &data[i]).collect();
                match train_step(model, &mut self.adam, &batch, stage.objective, &self.cfg, batch_index) {
                    Ok(step) => {
                        if let Some(c) = step.correct {
                            correct += c;
                            seen += batch.len();
                        }
                        if let Some(log) = &mut self.log {
                            let entry = LossLogEntry {
                                phase: stage.objective.phase(),
                                stage: stage.name.to_string(),
                                epoch,
                                step: self.adam.steps(),
                                batch: batch_index,
                                losses: step.losses.clone(),
                            };
                            let line = serde_json::to_string(&entry).expect("entry serializes");
                            writeln!(log, "{line}").map_err(|e| Error::io(self.cfg.loss_log.clone().unwrap_or_default(), e))?;
                        }
                        report.losses.push(step.losses);
                    }
                    Err(Error::NonFiniteGradient { param, batch }) => {
                        log::warn!("{}: epoch {epoch} batch {batch}: non-finite gradient in {param}, step skipped", stage.name);
                        report.skipped_batches.push(batch);
                    }
                    Err(e) => return Err(e),
                }
            }
            if seen > 0 {
                let acc = correct as f64 / seen as f64;
                log::info!("{} epoch {}/{}: train accuracy {acc:.4}", stage.name, epoch + 1, stage.epochs);
                report.epoch_accuracy.push(acc);
            }
        }
        if let Some(log) = &mut self.log {
            log.flush().map_err(|e| Error::io(self.cfg.loss_log.clone().unwrap_or_default(), e))?;
        }
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseOutcome {
    pub checkpoint: Checkpoint,
    pub report: StageReport,
}

fn require_data(data: &[TokenizedSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    Ok(())
}

fn check_compatible(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    let dims = |c: &ModelConfig| {
        (
            c.vocab_size,
            c.d_model,
            c.num_heads,
            c.num_layers,
            c.sequence_length,
            c.codebook_size,
            c.num_classes,
            c.ffn_hidden,
        )
    };
    if dims(expected) != dims(found) {
        return Err(Error::Dimension(format!(
            "checkpoint config {found:?} does not match run config {expected:?}"
        )));
    }
    Ok(())
}

/// Phase 0: labels are ignored; trains embeddings, the first block, the
/// codebook and the reconstruction head.
pub fn run_phase0(
    cfg: &TrainRunConfig,
    config: ModelConfig,
    data: &[TokenizedSample],
    vocab_hash: &str,
) -> Result<PhaseOutcome> {
    require_data(data)?;
    let mut model = Model::init(config, cfg.seed)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let report = trainer.run(
        &mut model,
        data,
        &Stage {
            name: "pretrain",
            objective: Objective::Pretrain {
                full_stack: cfg.recon_full_stack,
            },
            epochs: cfg.epochs,
        },
    )?;
    Ok(PhaseOutcome {
        checkpoint: Checkpoint {
            model,
            phase: Phase::Pretrain,
            seed: cfg.seed,
            step: trainer.steps(),
            vocab_hash: vocab_hash.to_string(),
        },
        report,
    })
}

/// Phase 1: stage (a) with gates detached, then stage (b) with gates live.
/// Starts from `init` when given, otherwise from a fresh model.
pub fn run_phase1(
    cfg: &TrainRunConfig,
    config: ModelConfig,
    data: &[TokenizedSample],
    init: Option<&Checkpoint>,
    vocab_hash: &str,
) -> Result<PhaseOutcome> {
    require_data(data)?;
    let mut model = match init {
        Some(ckpt) => {
            check_compatible(&config, ckpt.model.config())?;
            ckpt.check_vocab(vocab_hash)?;
            let m = ckpt.model.clone();
            Model::from_params(config, m.params().clone(), m.usage_counts().to_vec())?
        }
        None => Model::init(config, cfg.seed)?,
    };
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut report = trainer.run(
        &mut model,
        data,
        &Stage {
            name: "baseline",
            objective: Objective::Baseline {
                gate: GateMode::Detached,
            },
            epochs: cfg.epochs,
        },
    )?;
    let gated = trainer.run(
        &mut model,
        data,
        &Stage {
            name: "gated",
            objective: Objective::Baseline { gate: GateMode::Live },
            epochs: cfg.gated_epochs,
        },
    )?;
    report.losses.extend(gated.losses);
    report.skipped_batches.extend(gated.skipped_batches);
    report.epoch_accuracy.extend(gated.epoch_accuracy);
    Ok(PhaseOutcome {
        checkpoint: Checkpoint {
            model,
            phase: Phase::Baseline,
            seed: cfg.seed,
            step: init.map_or(0, |c| c.step) + trainer.steps(),
            vocab_hash: vocab_hash.to_string(),
        },
        report,
    })
}

/// Phase 2: trains on the original data followed by the filtered data.
pub fn run_phase2(
    cfg: &TrainRunConfig,
    data: &[TokenizedSample],
    filtered: &[TokenizedSample],
    init: &Checkpoint,
    vocab_hash: &str,
) -> Result<PhaseOutcome> {
    require_data(data)?;
    init.check_vocab(vocab_hash)?;
    if filtered.is_empty() {
        log::warn!("filtered set is empty; refining on the original data only");
    }
    let combined: Vec<TokenizedSample> = data.iter().chain(filtered).cloned().collect();
    let mut model = init.model.clone();
    let mut trainer = Trainer::new(cfg.clone())?;
    let report = trainer.run(
        &mut model,
        &combined,
        &Stage {
            name: "expert",
            objective: Objective::Expert,
            epochs: cfg.epochs,
        },
    )?;
    Ok(PhaseOutcome {
        checkpoint: Checkpoint {
            model,
            phase: Phase::Expert,
            seed: cfg.seed,
            step: init.step + trainer.steps(),
            vocab_hash: vocab_hash.to_string(),
        },
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_ignores_zero_gradients() {
        let mut params = ParamMap::new();
        params.insert("w".into(), Tensor::new([2], vec![1.0, -2.0]).unwrap());
        let before = params.clone();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros([2]));
        let mut adam = Adam::new(1e-3);
        adam.step(&mut params, &grads, 0).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // f(w) = (w − 3)², minimum at 3.
        let mut params = ParamMap::new();
        params.insert("w".into(), Tensor::new([1], vec![0.0]).unwrap());
        let mut adam = Adam::new(0.1);
        for _ in 0..200 {
            let w = params["w"].data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::new([1], vec![2.0 * (w - 3.0)]).unwrap());
            adam.step(&mut params, &grads, 0).unwrap();
        }
        assert!((params["w"].data()[0] - 3.0).abs() < 0.05);
    }

    #[test]
    fn adam_rejects_nan_without_changes() {
        let mut params = ParamMap::new();
        params.insert("a".into(), Tensor::new([1], vec![1.0]).unwrap());
        params.insert("b".into(), Tensor::new([1], vec![1.0]).unwrap());
        let before = params.clone();
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::new([1], vec![1.0]).unwrap());
        grads.insert("b".to_string(), Tensor::new([1], vec![f32::NAN]).unwrap());
        let mut adam = Adam::new(1e-3);
        let err = adam.step(&mut params, &grads, 4).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { batch: 4, .. }));
        assert_eq!(params, before);
        assert_eq!(adam.steps(), 0);
    }
}
