//! Loss functions and the per-phase totals.

use intuition_autograd::{Element, Reduce, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{Label, PAD_ID};
use crate::error::{Error, Result};
use crate::vq::DEFAULT_BETA;

/// Additive smoothing for within-batch symbol/label counts.
pub const PURITY_EPS: f64 = 1e-6;
/// Gates are clamped to `[GATE_CLAMP, 1 − GATE_CLAMP]` before taking logs.
pub const GATE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Phase {
    Pretrain = 0,
    Baseline = 1,
    Expert = 2,
}

impl From<Phase> for u8 {
    fn from(p: Phase) -> u8 {
        p as u8
    }
}

impl TryFrom<u8> for Phase {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Phase::Pretrain),
            1 => Ok(Phase::Baseline),
            2 => Ok(Phase::Expert),
            _ => Err(format!("phase {v} is not 0, 1 or 2")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda_purity: f64,
    pub lambda_focus: f64,
    /// Adds `β·(L_codebook + L_commit)` to the phase-2 total.
    #[serde(default)]
    pub expert_vq: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            lambda_purity: 0.5,
            lambda_focus: 0.5,
            expert_vq: false,
        }
    }
}

/// Scalar loss values of one step. Absent parts are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: Option<f64>,
    pub codebook: Option<f64>,
    pub commit: Option<f64>,
    pub purity: Option<f64>,
    pub focus: Option<f64>,
    pub reconstruction: Option<f64>,
    /// The phase formula evaluated on the parts above.
    pub total: f64,
    /// The value actually differentiated; differs from `total` in phase 2,
    /// where the purity term is replaced by its differentiable surrogate.
    pub objective: f64,
    pub purity_surrogate: Option<f64>,
    pub weights: Option<LossWeights>,
}

fn need(part: Option<f64>, phase: Phase, name: &'static str) -> Result<f64> {
    part.ok_or(Error::MissingLossPart {
        phase: phase as u8,
        part: name,
    })
}

/// Phase 0: `L_recon + β(L_cb + L_commit)`; phase 1: `L_task + β(L_cb +
/// L_commit)`; phase 2: `L_task + λ_p·L_purity + λ_f·L_focus`.
pub fn phase_total(phase: Phase, parts: &LossBreakdown, w: &LossWeights) -> Result<f64> {
    let vq = |p: &LossBreakdown| -> Result<f64> {
        Ok(w.beta * (need(p.codebook, phase, "codebook")? + need(p.commit, phase, "commit")?))
    };
    Ok(match phase {
        Phase::Pretrain => need(parts.reconstruction, phase, "reconstruction")? + vq(parts)?,
        Phase::Baseline => need(parts.task, phase, "task")? + vq(parts)?,
        Phase::Expert => {
            let base = need(parts.task, phase, "task")?
                + w.lambda_purity * need(parts.purity, phase, "purity")?
                + w.lambda_focus * need(parts.focus, phase, "focus")?;
            if w.expert_vq {
                base + vq(parts)?
            } else {
                base
            }
        }
    })
}

/// Mean cross-entropy of `[B, C]` logits against class ids.
pub fn task_loss<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "logits {shape:?} for {} labels",
            labels.len()
        )));
    }
    let c = shape[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Dimension(format!("label {bad} outside {c} classes")));
    }
    let onehot = Tensor::from_fn(shape.clone(), |i| {
        if labels[i / c] == i % c {
            T::one()
        } else {
            T::zero()
        }
    });
    let onehot = tape.constant(onehot);
    let logp = tape.log_softmax(logits);
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked, Reduce::All);
    Ok(tape.scale(total, -1.0 / labels.len() as f64))
}

/// Mean per-character cross-entropy over non-padding positions of a
/// `[N, V]` logit matrix. Returns a zero constant when every target is padding.
pub fn reconstruction_loss<T: Element>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Dimension(format!(
            "logits {shape:?} for {} targets",
            targets.len()
        )));
    }
    let v = shape[1];
    let n = targets.iter().filter(|&&t| t != PAD_ID).count();
    if n == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let onehot = Tensor::from_fn(shape.clone(), |i| {
        let t = targets[i / v];
        if t != PAD_ID && t == i % v {
            T::one()
        } else {
            T::zero()
        }
    });
    let onehot = tape.constant(onehot);
    let logp = tape.log_softmax(logits);
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked, Reduce::All);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Smoothed `P(y_i | k_i)` from the counts of this batch.
pub fn purity_probabilities(symbols: &[usize], labels: &[usize]) -> Vec<f64> {
    let mut counts: std::collections::HashMap<usize, [u64; Label::COUNT]> = Default::default();
    for (&k, &y) in symbols.iter().zip(labels) {
        counts.entry(k).or_default()[y] += 1;
    }
    let classes = Label::COUNT as f64;
    symbols
        .iter()
        .zip(labels)
        .map(|(k, &y)| {
            let row = &counts[k];
            let total: u64 = row.iter().sum();
            (row[y] as f64 + PURITY_EPS) / (total as f64 + classes * PURITY_EPS)
        })
        .collect()
}

/// `−mean log P(y_i | k_i)` over the batch.
pub fn purity_loss(symbols: &[usize], labels: &[usize]) -> f64 {
    let p = purity_probabilities(symbols, labels);
    -p.iter().map(|v| v.ln()).sum::<f64>() / p.len().max(1) as f64
}

/// `mean_i (1 − P(y_i|k_i)) · commit_i` for a `[B, 1]` column of per-sample
/// commitment losses.
pub fn purity_surrogate<T: Element>(tape: &mut Tape<T>, probs: &[f64], commitment: Var) -> Result<Var> {
    let w: Vec<T> = probs.iter().map(|p| T::cast_from(1.0 - p)).collect();
    let w = tape.constant(Tensor::new([probs.len(), 1], w)?);
    let weighted = tape.mul(commitment, w)?;
    Ok(tape.mean(weighted, Reduce::All))
}

fn clamp_gate(g: f64) -> f64 {
    g.clamp(GATE_CLAMP, 1.0 - GATE_CLAMP)
}

/// `−mean[r·log ḡ + (1−r)·log(1−ḡ)]` on plain values.
pub fn focus_loss_value(mean_gates: &[f64], rewards: &[f64]) -> f64 {
    let n = mean_gates.len().max(1) as f64;
    -mean_gates
        .iter()
        .zip(rewards)
        .map(|(&g, &r)| {
            let g = clamp_gate(g);
            r * g.ln() + (1.0 - r) * (1.0 - g).ln()
        })
        .sum::<f64>()
        / n
}

/// Focus loss on a `[B, 1]` column of mean gates. Clamped entries are
/// replaced by constants, so they pass no gradient.
pub fn focus_loss<T: Element>(tape: &mut Tape<T>, mean_gates: Var, rewards: &[f64]) -> Result<Var> {
    let n = rewards.len();
    if tape.value(mean_gates).numel() != n {
        return Err(Error::Dimension(format!(
            "{} gates for {n} rewards",
            tape.value(mean_gates).numel()
        )));
    }
    let values: Vec<f64> = tape.value(mean_gates).data().iter().map(|g| g.as_f64()).collect();
    let mut g = mean_gates;
    if values.iter().any(|&v| clamp_gate(v) != v) {
        let inside: Vec<T> = values
            .iter()
            .map(|&v| if clamp_gate(v) == v { T::one() } else { T::zero() })
            .collect();
        let fill: Vec<T> = values
            .iter()
            .map(|&v| if clamp_gate(v) == v { T::zero() } else { T::cast_from(clamp_gate(v)) })
            .collect();
        let inside = tape.constant(Tensor::new([n, 1], inside)?);
        let fill = tape.constant(Tensor::new([n, 1], fill)?);
        let kept = tape.mul(g, inside)?;
        g = tape.add(kept, fill)?;
    }
    let r = tape.constant(Tensor::new([n, 1], rewards.iter().map(|&r| T::cast_from(r)).collect())?);
    let not_r = tape.constant(Tensor::new(
        [n, 1],
        rewards.iter().map(|&r| T::cast_from(1.0 - r)).collect(),
    )?);
    let log_g = tape.log(g);
    let neg = tape.scale(g, -1.0);
    let one = tape.scalar(T::one());
    let one_minus = tape.add(neg, one)?;
    let log_1mg = tape.log(one_minus);
    let a = tape.mul(log_g, r)?;
    let b = tape.mul(log_1mg, not_r)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s, Reduce::All);
    Ok(tape.scale(m, -1.0))
}
