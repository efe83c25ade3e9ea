//! Finite-difference check of the task-loss gradient of a whole model.
//!
//! The quantizer is piecewise constant, so coordinates whose perturbation
//! changes any quantization index (or crosses a ReLU kink) have no
//! meaningful central difference and are skipped.

use intuition_autograd::{relative_error, Element, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PAD_ID;
use crate::error::Result;
use crate::model::{bind_params, forward, ForwardOptions, Model, ModelConfig, ParamMap, QuantizerGradient};
use crate::objectives::task_loss;
use crate::seed::{self, Stream};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst: Option<String>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < TOLERANCE
    }
}

/// Discrete state of a forward pass: every quantization index and the sign
/// of every ReLU input.
#[derive(PartialEq, Eq)]
struct Regime {
    indices: Vec<Vec<usize>>,
    relu: Vec<bool>,
}

struct Batch {
    ids: Vec<Vec<usize>>,
    labels: Vec<usize>,
}

impl Batch {
    fn random(config: &ModelConfig, size: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, Stream::Synthetic);
        let l = config.sequence_length;
        let ids = (0..size)
            .map(|_| {
                let len = rng.random_range(l / 2..=l);
                let mut ids: Vec<usize> = (0..len).map(|_| rng.random_range(1..config.vocab_size)).collect();
                ids.resize(l, PAD_ID);
                ids
            })
            .collect();
        let labels = (0..size).map(|_| rng.random_range(0..config.num_classes)).collect();
        Self { ids, labels }
    }
}

fn evaluate(
    config: &ModelConfig,
    params: &ParamMap<f64>,
    batch: &Batch,
    grads: bool,
) -> Result<(f64, Regime, Option<ParamMap<f64>>)> {
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, params, |_| grads);
    let refs: Vec<&[usize]> = batch.ids.iter().map(Vec::as_slice).collect();
    let opts = ForwardOptions {
        quantizer: QuantizerGradient::Exact,
        ..Default::default()
    };
    let out = forward(config, &mut tape, &bound, &refs, &opts)?;
    let logits = out.logits.expect("full depth");
    let loss = task_loss(&mut tape, logits, &batch.labels)?;
    let regime = Regime {
        indices: out.layers.iter().filter_map(|b| b.indices.clone()).collect(),
        relu: out
            .layers
            .iter()
            .flat_map(|b| tape.value(b.ffn_pre).data().iter().map(|v| v.as_f64() > 0.0))
            .collect(),
    };
    let value = tape.value(loss).item();
    if !grads {
        return Ok((value, regime, None));
    }
    tape.backward(loss)?;
    let g = bound
        .iter()
        .map(|(name, var)| {
            let grad = tape
                .grad(var)
                .unwrap_or_else(|| Tensor::zeros(params[name].shape().to_vec()));
            (name.to_string(), grad)
        })
        .collect();
    Ok((value, regime, Some(g)))
}

/// Compares the analytic task-loss gradient of `model` with central
/// differences of step `h` over every parameter coordinate, in f64.
pub fn check_model(model: &Model, batch_size: usize, seed: u64, h: f64) -> Result<GradCheckReport> {
    let config = model.config();
    let batch = Batch::random(config, batch_size, seed);
    let mut params: ParamMap<f64> = model.params().iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    let (_, base, grads) = evaluate(config, &params, &batch, true)?;
    let grads = grads.expect("requested");

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        for i in 0..params[&name].numel() {
            let original = params[&name].data()[i];
            let mut at = |v: f64| -> Result<(f64, Regime)> {
                params.get_mut(&name).expect("known").data_mut()[i] = v;
                let (loss, regime, _) = evaluate(config, &params, &batch, false)?;
                Ok((loss, regime))
            };
            let (plus, r_plus) = at(original + h)?;
            let (minus, r_minus) = at(original - h)?;
            params.get_mut(&name).expect("known").data_mut()[i] = original;
            if r_plus != base || r_minus != base {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grads[&name].data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(format!("{name}[{i}]"));
            }
        }
    }
    Ok(report)
}

/// The toy-model check: fresh toy parameters, a batch of four sequences.
pub fn check_toy(seed: u64) -> Result<GradCheckReport> {
    let model = Model::init(ModelConfig::toy(), seed)?;
    check_model(&model, 4, seed, STEP)
}
