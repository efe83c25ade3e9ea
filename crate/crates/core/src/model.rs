//! The dynamic transformer: token and position embeddings, a stack of
//! blocks that quantize, route and gate, a classification head on position
//! 0 and a per-position reconstruction head.
//!
//! Forward passes are written against a [`Tape`] of any [`Element`] so the
//! same graph trains in f32 and is gradient-checked in f64. Position-wise
//! work runs on the whole batch stacked as `[B·L, D]`; only attention is
//! sliced per sample.

use std::collections::BTreeMap;

use intuition_autograd::{Element, Reduce, Tape, Tensor, Var, LAYER_NORM_EPS};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Label, PAD_ID, SEQUENCE_LENGTH};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::vq::{self, Codebook, DEFAULT_CODEBOOK_SIZE};

/// Additive score for padding keys.
const PAD_SCORE: f64 = -1e9;
/// Added to masked row sums before renormalizing.
const RENORM_EPS: f64 = 1e-9;
/// Rows whose masked mass falls to this level use the unmasked attention.
pub const FALLBACK_MASS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub sequence_length: usize,
    pub codebook_size: usize,
    pub num_classes: usize,
    pub ffn_hidden: usize,
    pub intuition_enabled: bool,
}

impl ModelConfig {
    /// Full-size configuration: D=128, 4 heads, 2 layers, K=256.
    pub fn standard(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            num_heads: 4,
            num_layers: 2,
            sequence_length: SEQUENCE_LENGTH,
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            num_classes: Label::COUNT,
            ffn_hidden: 4 * 128,
            intuition_enabled: true,
        }
    }

    /// Small configuration used for gradient checks.
    pub fn toy() -> Self {
        Self {
            vocab_size: 10,
            d_model: 8,
            num_heads: 2,
            num_layers: 2,
            sequence_length: 6,
            codebook_size: 4,
            num_classes: Label::COUNT,
            ffn_hidden: 32,
            intuition_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("sequence_length", self.sequence_length),
            ("codebook_size", self.codebook_size),
            ("num_classes", self.num_classes),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Uniform(f64),
    Zeros,
    Ones,
}

/// Parameter names, shapes and initializers in draw order.
fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, l, v) = (c.d_model, c.ffn_hidden, c.sequence_length, c.vocab_size);
    let fan = |n: usize| Init::Uniform(1.0 / (n as f64).sqrt());
    let mut specs = vec![
        ("embed.token".to_string(), vec![v, d], Init::Normal(1.0)),
        ("embed.position".to_string(), vec![l, d], Init::Normal(1.0)),
        (
            "codebook".to_string(),
            vec![c.codebook_size, d],
            Init::Uniform(1.0 / c.codebook_size as f64),
        ),
    ];
    for layer in 0..c.num_layers {
        let p = |name: &str| format!("block{layer}.{name}");
        specs.extend([
            (p("router.wq"), vec![d, d], fan(d)),
            (p("router.wk"), vec![d, d], fan(d)),
            (p("router.bias"), vec![l, l], Init::Zeros),
            (p("gate.w"), vec![d, 1], fan(d)),
            (p("gate.b"), vec![1], fan(d)),
            (p("proj.w"), vec![d, d], fan(d)),
            (p("ln1.gamma"), vec![d], Init::Ones),
            (p("ln1.beta"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], fan(d)),
            (p("attn.wk"), vec![d, d], fan(d)),
            (p("attn.wv"), vec![d, d], fan(d)),
            (p("attn.wo"), vec![d, d], fan(d)),
            (p("attn.bo"), vec![d], fan(d)),
            (p("ln2.gamma"), vec![d], Init::Ones),
            (p("ln2.beta"), vec![d], Init::Zeros),
            (p("ffn.w1"), vec![d, f], fan(d)),
            (p("ffn.b1"), vec![f], fan(d)),
            (p("ffn.w2"), vec![f, d], fan(f)),
            (p("ffn.b2"), vec![d], fan(f)),
        ]);
    }
    specs.extend([
        ("final_ln.gamma".to_string(), vec![d], Init::Ones),
        ("final_ln.beta".to_string(), vec![d], Init::Zeros),
        ("head.w".to_string(), vec![d, c.num_classes], fan(d)),
        ("head.b".to_string(), vec![c.num_classes], fan(d)),
        ("recon.w".to_string(), vec![d, v], fan(d)),
        ("recon.b".to_string(), vec![v], fan(d)),
    ]);
    specs
}

/// Whether a parameter belongs to the part trained before classification:
/// embeddings, codebook, the first block and the reconstruction head.
pub fn is_pretrain_param(name: &str) -> bool {
    name.starts_with("embed.")
        || name == "codebook"
        || name.starts_with("block0.")
        || name.starts_with("recon.")
}

pub type ParamMap<T = f32> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamMap,
    usage_counts: Vec<u64>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, Stream::Init);
        let mut params = ParamMap::new();
        for (name, shape, init) in param_specs(&config) {
            if name == "codebook" {
                continue;
            }
            let t = match init {
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(shape, |_| dist.sample(&mut rng) as f32)
                }
                Init::Uniform(b) => Tensor::from_fn(shape, |_| rng.random_range(-b..=b) as f32),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
            };
            params.insert(name, t);
        }
        let codebook = Codebook::init(config.codebook_size, config.d_model, seed)?;
        params.insert("codebook".into(), codebook.vectors().clone());
        let usage_counts = vec![0; config.codebook_size];
        Ok(Self {
            config,
            params,
            usage_counts,
        })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamMap, usage_counts: Vec<u64>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Dimension(format!(
                "expected {} tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &specs {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Dimension(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        if usage_counts.len() != config.codebook_size {
            return Err(Error::Dimension(format!(
                "{} usage counts for codebook of size {}",
                usage_counts.len(),
                config.codebook_size
            )));
        }
        Ok(Self {
            config,
            params,
            usage_counts,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    /// Replaces one tensor; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Dimension(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "{name}: expected shape {:?}, found {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage_counts[i] += 1;
        }
    }

    pub fn codebook(&self) -> Codebook {
        let mut cb = Codebook::from_vectors(self.params["codebook"].clone()).expect("valid codebook");
        cb.set_usage_counts(self.usage_counts.clone()).expect("matching size");
        cb
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape`; those selected by `trainable`
    /// become gradient leaves, the rest constants.
    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        bind_params(tape, &self.params, trainable)
    }

    /// Checks that every id sequence has the configured length and
    /// indexes inside the vocabulary.
    pub fn validate_ids(&self, ids: &[usize]) -> Result<()> {
        validate_ids(&self.config, ids)
    }

    /// Gradient-free forward pass over a batch.
    pub fn infer_batch(&self, batch: &[&[usize]]) -> Result<Vec<Inference>> {
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, |_| false);
        let opts = ForwardOptions {
            capture_attention: true,
            ..ForwardOptions::default()
        };
        let out = forward(&self.config, &mut tape, &bound, batch, &opts)?;
        let logits = tape.value(out.logits.expect("full depth"));
        let c = self.config.num_classes;
        Ok((0..batch.len())
            .map(|b| Inference {
                logits: logits.row(b).to_vec(),
                traces: out
                    .layers
                    .iter()
                    .map(|layer| layer.trace(&tape, b, self.config.sequence_length))
                    .collect(),
            })
            .inspect(|inf| debug_assert_eq!(inf.logits.len(), c))
            .collect())
    }

    pub fn infer(&self, ids: &[usize]) -> Result<Inference> {
        Ok(self.infer_batch(&[ids])?.remove(0))
    }

    /// Per-position vocabulary logits `[L, V]` from the first block's
    /// output, or from the last block when `full_stack` is set.
    pub fn reconstruct(&self, ids: &[usize], full_stack: bool) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, |_| false);
        let depth = if full_stack { self.config.num_layers } else { 1 };
        let opts = ForwardOptions {
            depth: Some(depth),
            ..ForwardOptions::default()
        };
        let out = forward(&self.config, &mut tape, &bound, &[ids], &opts)?;
        let logits = reconstruction_logits(&mut tape, &bound, out.stream)?;
        Ok(tape.value(logits).clone())
    }
}

pub fn validate_ids(config: &ModelConfig, ids: &[usize]) -> Result<()> {
    if ids.len() != config.sequence_length {
        return Err(Error::Dimension(format!(
            "sequence has {} ids, expected {}",
            ids.len(),
            config.sequence_length
        )));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

/// Parameter handles on one tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn block(&self, layer: usize, name: &str) -> Var {
        self.get(&format!("block{layer}.{name}"))
    }
}

pub fn bind_params<T: Element, S: Element>(
    tape: &mut Tape<T>,
    params: &ParamMap<S>,
    trainable: impl Fn(&str) -> bool,
) -> Bound {
    let vars = params
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.cast(), trainable(name))))
        .collect();
    Bound { vars }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    /// Gate values scale the symbol projection and receive gradient.
    #[default]
    Live,
    /// Gate values are used in the forward pass but carry no gradient.
    Detached,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QuantizerGradient {
    /// Downstream gradient is copied to the pre-quantization input.
    #[default]
    StraightThrough,
    /// Downstream uses the selected codebook rows directly, so gradient
    /// reaches the codebook and nothing reaches the input. This is the
    /// true derivative of the piecewise-constant quantizer.
    Exact,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub gate: GateMode,
    pub quantizer: QuantizerGradient,
    /// Number of blocks to run; `None` runs all and applies the head.
    pub depth: Option<usize>,
    pub capture_attention: bool,
}

/// Per-block graph handles for a batch.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub output: Var,
    /// Quantization index of every position, row-major over `[B, L]`.
    pub indices: Option<Vec<usize>>,
    /// `[B, 1]` gate values.
    pub gate: Option<Var>,
    pub codebook_loss: Option<Var>,
    pub commitment_loss: Option<Var>,
    /// `[B, 1]` commitment loss of each sample.
    pub sample_commitment: Option<Var>,
    /// Head-averaged attention `[L, L]` per sample, when captured.
    pub attention: Vec<Vec<f32>>,
    /// Pre-activation of the feed-forward ReLU.
    pub ffn_pre: Var,
}

impl BlockVars {
    pub fn symbol(&self, sample: usize, seq_len: usize) -> Option<usize> {
        self.indices.as_ref().map(|ix| ix[sample * seq_len])
    }

    fn trace<T: Element>(&self, tape: &Tape<T>, b: usize, seq_len: usize) -> LayerTrace {
        LayerTrace {
            symbol_index: self.symbol(b, seq_len),
            gate_score: self.gate.map(|g| tape.value(g).data()[b].as_f64() as f32),
            attention: self.attention.get(b).cloned().unwrap_or_default(),
            vq_losses: match (self.codebook_loss, self.commitment_loss) {
                (Some(a), Some(c)) => Some((
                    tape.value(a).item().as_f64() as f32,
                    tape.value(c).item().as_f64() as f32,
                )),
                _ => None,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[B, C]` class logits, present when every block ran.
    pub logits: Option<Var>,
    pub layers: Vec<BlockVars>,
    /// `[B·L, D]` output of the last block that ran.
    pub stream: Var,
}

/// Internal state of one block for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub symbol_index: Option<usize>,
    pub gate_score: Option<f32>,
    /// Row-major `[L, L]` head-averaged attention after masking.
    pub attention: Vec<f32>,
    /// Codebook and commitment loss of the batch this input ran in.
    pub vq_losses: Option<(f32, f32)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub logits: Vec<f32>,
    pub traces: Vec<LayerTrace>,
}

impl Inference {
    /// Arg-max class, lowest index on ties.
    pub fn prediction(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn symbols(&self) -> Vec<Option<usize>> {
        self.traces.iter().map(|t| t.symbol_index).collect()
    }

    pub fn gates(&self) -> Vec<Option<f32>> {
        self.traces.iter().map(|t| t.gate_score).collect()
    }
}

pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn linear<T: Element>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

fn norm<T: Element>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = tape.layer_norm(x, LAYER_NORM_EPS);
    let n = tape.mul(n, gamma)?;
    Ok(tape.add(n, beta)?)
}

/// `sigmoid(q kᵀ + bias)` with `q = z W_q`, `k = z W_k`.
pub fn symbolic_route<T: Element>(
    tape: &mut Tape<T>,
    z: Var,
    w_q: Var,
    w_k: Var,
    bias: Var,
) -> Result<Var> {
    let q = tape.matmul(z, w_q)?;
    let k = tape.matmul(z, w_k)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.add(logits, bias)?;
    Ok(tape.sigmoid(logits))
}

/// `sigmoid(x_first W_g + b)`: one gate per row of `x_first`.
pub fn intuition_gate<T: Element>(tape: &mut Tape<T>, x_first: Var, w: Var, b: Var) -> Result<Var> {
    let logit = linear(tape, x_first, w, b)?;
    Ok(tape.sigmoid(logit))
}

/// `x + g · (z W_p)`; `g` broadcasts against the rows of `x`.
pub fn enhance<T: Element>(tape: &mut Tape<T>, x: Var, g: Var, z: Var, w_p: Var) -> Result<Var> {
    let proj = tape.matmul(z, w_p)?;
    let weighted = tape.mul(proj, g)?;
    Ok(tape.add(x, weighted)?)
}

/// Attention probabilities multiplied by `mask` and renormalized per row.
/// Rows left with almost no mass keep the unmasked probabilities.
pub fn apply_mask<T: Element>(tape: &mut Tape<T>, probs: Var, mask: Var) -> Result<Var> {
    let weighted = tape.mul(probs, mask)?;
    let mass = tape.sum(weighted, Reduce::LastKeepDim);
    let eps = tape.scalar(T::cast_from(RENORM_EPS));
    let denom = tape.add(mass, eps)?;
    let renormed = tape.div(weighted, denom)?;
    let masses = tape.value(mass).data();
    if masses.iter().all(|m| m.as_f64() > FALLBACK_MASS) {
        return Ok(renormed);
    }
    let keep: Vec<T> = masses
        .iter()
        .map(|m| if m.as_f64() > FALLBACK_MASS { T::one() } else { T::zero() })
        .collect();
    let rows = keep.len();
    let drop: Vec<T> = keep.iter().map(|&k| T::one() - k).collect();
    let keep = tape.constant(Tensor::new([rows, 1], keep)?);
    let drop = tape.constant(Tensor::new([rows, 1], drop)?);
    let kept = tape.mul(renormed, keep)?;
    let fallback = tape.mul(probs, drop)?;
    Ok(tape.add(kept, fallback)?)
}

/// Multi-head attention of one sample. Returns the `[L, D]` head outputs
/// (before the output projection) and each head's final probabilities.
#[allow(clippy::too_many_arguments)]
fn attend_sample<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_mask: Var,
    route: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, 1, lo, hi)?;
        let kh = tape.slice(k, 1, lo, hi)?;
        let vh = tape.slice(v, 1, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let scores = tape.add(scores, key_mask)?;
        let mut a = tape.softmax(scores);
        if let Some(m) = route {
            a = apply_mask(tape, a, m)?;
        }
        outs.push(tape.matmul(a, vh)?);
        probs.push(a);
    }
    let out = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 1)?
    };
    Ok((out, probs))
}

fn key_masks<T: Element>(tape: &mut Tape<T>, batch: &[&[usize]]) -> Vec<Var> {
    batch
        .iter()
        .map(|ids| {
            let row: Vec<T> = ids
                .iter()
                .map(|&id| T::cast_from(if id == PAD_ID { PAD_SCORE } else { 0.0 }))
                .collect();
            tape.constant(Tensor::new([row.len()], row).expect("row"))
        })
        .collect()
}

/// `[B, B·L]` matrix averaging each sample's `L` rows.
fn sample_mean_matrix<T: Element>(b: usize, l: usize) -> Tensor<T> {
    let w = T::cast_from(1.0 / l as f64);
    Tensor::from_fn([b, b * l], |i| {
        let (r, c) = (i / (b * l), i % (b * l));
        if c / l == r {
            w
        } else {
            T::zero()
        }
    })
}

struct BatchShape {
    b: usize,
    l: usize,
}

impl BatchShape {
    fn first_rows(&self) -> Vec<usize> {
        (0..self.b).map(|i| i * self.l).collect()
    }

    fn owner_rows(&self) -> Vec<usize> {
        (0..self.b * self.l).map(|i| i / self.l).collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn block_forward<T: Element>(
    config: &ModelConfig,
    tape: &mut Tape<T>,
    bound: &Bound,
    layer: usize,
    x: Var,
    shape: &BatchShape,
    key_mask: &[Var],
    opts: &ForwardOptions,
) -> Result<BlockVars> {
    let p = |name: &str| bound.block(layer, name);
    let (b, l) = (shape.b, shape.l);

    let mut indices = None;
    let mut gate = None;
    let mut losses = (None, None, None);
    let mut routed = None;
    let mut stream = x;

    if config.intuition_enabled {
        let vq = vq::quantize_on_tape(tape, x, bound.get("codebook"))?;
        let z = match opts.quantizer {
            QuantizerGradient::StraightThrough => tape.straight_through(x, vq.quantized)?,
            QuantizerGradient::Exact => vq.quantized,
        };

        let firsts = tape.gather(x, &shape.first_rows())?;
        let g = intuition_gate(tape, firsts, p("gate.w"), p("gate.b"))?;
        let g_used = match opts.gate {
            GateMode::Live => g,
            GateMode::Detached => tape.stop_gradient(g),
        };
        let g_rows = tape.gather(g_used, &shape.owner_rows())?;
        stream = enhance(tape, x, g_rows, z, p("proj.w"))?;

        let mut masks = Vec::with_capacity(b);
        for s in 0..b {
            let zs = tape.slice(z, 0, s * l, (s + 1) * l)?;
            masks.push(symbolic_route(
                tape,
                zs,
                p("router.wq"),
                p("router.wk"),
                p("router.bias"),
            )?);
        }
        routed = Some(masks);

        // Per-sample commitment: squared error averaged over D, then over L.
        let anchor = tape.stop_gradient(vq.quantized);
        let diff = tape.sub(x, anchor)?;
        let sq = tape.mul(diff, diff)?;
        let row_mean = tape.mean(sq, Reduce::LastKeepDim);
        let avg = tape.constant(sample_mean_matrix(b, l));
        let per_sample = tape.matmul(avg, row_mean)?;

        losses = (
            Some(vq.codebook_loss),
            Some(vq.commitment_loss),
            Some(per_sample),
        );
        indices = Some(vq.indices);
        gate = Some(g);
    }

    let normed = norm(tape, stream, p("ln1.gamma"), p("ln1.beta"))?;
    let q = tape.matmul(normed, p("attn.wq"))?;
    let k = tape.matmul(normed, p("attn.wk"))?;
    let v = tape.matmul(normed, p("attn.wv"))?;
    let mut per_sample = Vec::with_capacity(b);
    let mut attention = Vec::new();
    for s in 0..b {
        let rows = |t: &mut Tape<T>, var| t.slice(var, 0, s * l, (s + 1) * l);
        let (qs, ks, vs) = (rows(tape, q)?, rows(tape, k)?, rows(tape, v)?);
        let route = routed.as_ref().map(|m| m[s]);
        let (out, probs) = attend_sample(tape, qs, ks, vs, config.num_heads, key_mask[s], route)?;
        per_sample.push(out);
        if opts.capture_attention {
            attention.push(head_average(tape, &probs));
        }
    }
    let heads = if b == 1 {
        per_sample[0]
    } else {
        tape.concat(&per_sample, 0)?
    };
    let attn_out = linear(tape, heads, p("attn.wo"), p("attn.bo"))?;
    let h = tape.add(stream, attn_out)?;

    let normed = norm(tape, h, p("ln2.gamma"), p("ln2.beta"))?;
    let ffn_pre = linear(tape, normed, p("ffn.w1"), p("ffn.b1"))?;
    let act = tape.relu(ffn_pre);
    let ffn_out = linear(tape, act, p("ffn.w2"), p("ffn.b2"))?;
    let output = tape.add(h, ffn_out)?;

    Ok(BlockVars {
        output,
        indices,
        gate,
        codebook_loss: losses.0,
        commitment_loss: losses.1,
        sample_commitment: losses.2,
        attention,
        ffn_pre,
    })
}

fn head_average<T: Element>(tape: &Tape<T>, probs: &[Var]) -> Vec<f32> {
    let n = tape.value(probs[0]).numel();
    let mut acc = vec![0.0f64; n];
    for &p in probs {
        for (a, v) in acc.iter_mut().zip(tape.value(p).data()) {
            *a += v.as_f64();
        }
    }
    let h = probs.len() as f64;
    acc.into_iter().map(|a| (a / h) as f32).collect()
}

/// Runs the embedding and `depth` blocks over a batch of id sequences, then
/// the classification head when every block ran.
pub fn forward<T: Element>(
    config: &ModelConfig,
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &[&[usize]],
    opts: &ForwardOptions,
) -> Result<ForwardVars> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    for ids in batch {
        validate_ids(config, ids)?;
    }
    let depth = opts.depth.unwrap_or(config.num_layers);
    if depth == 0 || depth > config.num_layers {
        return Err(Error::Config(format!(
            "depth {depth} outside 1..={}",
            config.num_layers
        )));
    }
    let shape = BatchShape {
        b: batch.len(),
        l: config.sequence_length,
    };
    let flat: Vec<usize> = batch.iter().flat_map(|ids| ids.iter().copied()).collect();
    let positions: Vec<usize> = (0..flat.len()).map(|i| i % shape.l).collect();
    let tok = tape.gather(bound.get("embed.token"), &flat)?;
    let pos = tape.gather(bound.get("embed.position"), &positions)?;
    let mut x = tape.add(tok, pos)?;

    let key_mask = key_masks(tape, batch);
    let mut layers = Vec::with_capacity(depth);
    for layer in 0..depth {
        let block = block_forward(config, tape, bound, layer, x, &shape, &key_mask, opts)?;
        x = block.output;
        layers.push(block);
    }

    let logits = if depth == config.num_layers {
        let pooled = tape.gather(x, &shape.first_rows())?;
        let pooled = norm(
            tape,
            pooled,
            bound.get("final_ln.gamma"),
            bound.get("final_ln.beta"),
        )?;
        Some(linear(tape, pooled, bound.get("head.w"), bound.get("head.b"))?)
    } else {
        None
    };
    Ok(ForwardVars {
        logits,
        layers,
        stream: x,
    })
}

/// Per-position vocabulary logits from a `[B·L, D]` stream.
pub fn reconstruction_logits<T: Element>(tape: &mut Tape<T>, bound: &Bound, stream: Var) -> Result<Var> {
    linear(tape, stream, bound.get("recon.w"), bound.get("recon.b"))
}
