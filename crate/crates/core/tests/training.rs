use intuition_autograd::{Reduce, Tape, Tensor};
use intuition_core::checkpoint::Checkpoint;
use intuition_core::data::{Label, RawSample, TokenizedSample, Vocab};
use intuition_core::experience::record_all;
use intuition_core::model::ModelConfig;
use intuition_core::objectives::{LossWeights, Phase};
use intuition_core::synthetic;
use intuition_core::train::{run_phase0, run_phase1, run_phase2, Objective, Stage, TrainRunConfig, Trainer};
use intuition_core::vq::quantize_on_tape;

fn small(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        num_heads: 2,
        codebook_size: 16,
        ffn_hidden: 32,
        ..ModelConfig::standard(vocab.len())
    }
}

fn corpus(n: usize) -> (Vec<RawSample>, Vocab, Vec<TokenizedSample>) {
    let samples = synthetic::generate(n, 7);
    let vocab = Vocab::build(&samples).unwrap();
    let data = vocab.tokenize_all(&samples);
    (samples, vocab, data)
}

fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    xs.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn pretraining_loss_falls_over_two_hundred_steps() {
    let (_, vocab, data) = corpus(100);
    let cfg = TrainRunConfig {
        epochs: 20,
        batch_size: 10,
        learning_rate: 3e-3,
        ..Default::default()
    };
    let out = run_phase0(&cfg, small(&vocab), &data, &vocab.hash()).unwrap();
    let totals: Vec<f64> = out.report.losses.iter().map(|l| l.total).collect();
    assert_eq!(totals.len(), 200);
    let avg = moving_average(&totals, 20);
    assert!(avg.last().unwrap() < &avg[0], "{} -> {}", avg[0], avg.last().unwrap());
    assert!(out.report.losses.iter().all(|l| l.task.is_none() && l.reconstruction.is_some()));
}

#[test]
fn pretraining_ignores_labels() {
    let (_, vocab, data) = corpus(40);
    let permuted: Vec<TokenizedSample> = data
        .iter()
        .map(|s| TokenizedSample {
            ids: s.ids.clone(),
            label: Label::ALL[(s.label.id() + 1) % Label::COUNT],
        })
        .collect();
    let cfg = TrainRunConfig {
        epochs: 2,
        batch_size: 8,
        ..Default::default()
    };
    let a = run_phase0(&cfg, small(&vocab), &data, &vocab.hash()).unwrap();
    let b = run_phase0(&cfg, small(&vocab), &permuted, &vocab.hash()).unwrap();
    assert_eq!(a.checkpoint.model.params(), b.checkpoint.model.params());
}

#[test]
fn checkpoint_reload_reproduces_outputs() {
    let (samples, vocab, data) = corpus(40);
    let cfg = TrainRunConfig {
        epochs: 1,
        batch_size: 8,
        ..Default::default()
    };
    let ckpt = run_phase0(&cfg, small(&vocab), &data, &vocab.hash()).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back, ckpt);
    let probe = vocab.encode(&samples[3].text);
    assert_eq!(
        back.model.reconstruct(&probe, false).unwrap(),
        ckpt.model.reconstruct(&probe, false).unwrap()
    );
    assert_eq!(back.model.infer(&probe).unwrap(), ckpt.model.infer(&probe).unwrap());
    assert!(back.check_vocab("other").is_err());
}

#[test]
fn single_sample_is_memorized() {
    let samples = vec![RawSample::new("world leaders meet at the summit", Label::World)];
    let vocab = Vocab::build(&samples).unwrap();
    let data = vocab.tokenize_all(&samples);
    let cfg = TrainRunConfig {
        epochs: 400,
        batch_size: 1,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let out = run_phase0(&cfg, small(&vocab), &data, &vocab.hash()).unwrap();
    let last = out.report.losses.last().unwrap().reconstruction.unwrap();
    assert!(last < 0.01, "reconstruction loss {last}");
}

#[test]
fn phase1_is_deterministic_and_records_every_sample() {
    let (samples, vocab, data) = corpus(48);
    let cfg = TrainRunConfig {
        epochs: 1,
        gated_epochs: 1,
        batch_size: 16,
        ..Default::default()
    };
    let a = run_phase1(&cfg, small(&vocab), &data, None, &vocab.hash()).unwrap();
    let b = run_phase1(&cfg, small(&vocab), &data, None, &vocab.hash()).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.checkpoint.phase, Phase::Baseline);
    assert_eq!(a.report.epoch_accuracy.len(), 2);

    let db = record_all(&a.checkpoint.model, &vocab, &samples).unwrap();
    assert_eq!(db.len(), samples.len());
    for (i, r) in db.iter().enumerate() {
        assert_eq!(r.id, i);
        assert_eq!(r.quantized_indices.len(), 2);
        assert_eq!(r.gating_scores.len(), 2);
        assert_eq!(r.attention_weights.len(), 2);
        assert_eq!(r.reward == 1.0, r.prediction == r.label_text);
        assert!(r.gating_scores.iter().all(|&g| g > 0.0 && g < 1.0));
    }
}

#[test]
fn phase1_rejects_mismatched_checkpoint() {
    let (_, vocab, data) = corpus(16);
    let cfg = TrainRunConfig {
        epochs: 1,
        batch_size: 16,
        ..Default::default()
    };
    let p0 = run_phase0(&cfg, small(&vocab), &data, &vocab.hash()).unwrap().checkpoint;
    let wider = ModelConfig {
        d_model: 32,
        ..small(&vocab)
    };
    assert!(run_phase1(&cfg, wider, &data, Some(&p0), &vocab.hash()).is_err());
    assert!(run_phase1(&cfg, small(&vocab), &data, Some(&p0), "other").is_err());
}

#[test]
fn degenerate_phase2_equals_continued_gated_training() {
    let (_, vocab, data) = corpus(32);
    let base = TrainRunConfig {
        epochs: 1,
        gated_epochs: 0,
        batch_size: 16,
        ..Default::default()
    };
    let p1 = run_phase1(&base, small(&vocab), &data, None, &vocab.hash()).unwrap().checkpoint;

    let cfg = TrainRunConfig {
        weights: LossWeights {
            lambda_purity: 0.0,
            lambda_focus: 0.0,
            expert_vq: true,
            ..LossWeights::default()
        },
        ..base
    };
    let expert = run_phase2(&cfg, &data, &[], &p1, &vocab.hash()).unwrap();

    let mut model = p1.model.clone();
    Trainer::new(cfg.clone())
        .unwrap()
        .run(
            &mut model,
            &data,
            &Stage {
                name: "gated",
                objective: Objective::Baseline {
                    gate: Default::default(),
                },
                epochs: cfg.epochs,
            },
        )
        .unwrap();
    assert_eq!(expert.checkpoint.model.params(), model.params());
}

#[test]
fn phase2_refuses_models_without_symbols() {
    let (_, vocab, data) = corpus(16);
    let cfg = TrainRunConfig {
        epochs: 1,
        gated_epochs: 0,
        batch_size: 16,
        ..Default::default()
    };
    let ablated = ModelConfig {
        intuition_enabled: false,
        ..small(&vocab)
    };
    let p1 = run_phase1(&cfg, ablated, &data, None, &vocab.hash()).unwrap().checkpoint;
    assert!(run_phase2(&cfg, &data, &[], &p1, &vocab.hash()).is_err());
}

/// One scalar, two codewords: `x = 0.3` snaps to `c₀ = 0`.
#[test]
fn straight_through_scalar_case() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new([1, 1], vec![0.3]).unwrap());
    let codebook = tape.param(Tensor::new([2, 1], vec![0.0, 1.0]).unwrap());
    let vq = quantize_on_tape(&mut tape, x, codebook).unwrap();
    assert_eq!(vq.indices, vec![0]);
    let z = tape.straight_through(x, vq.quantized).unwrap();
    assert_eq!(tape.value(z).data()[0].to_bits(), 0.0f64.to_bits());
    let two = tape.constant(Tensor::full([1, 1], 2.0));
    let y = tape.mul(z, two).unwrap();
    let loss = tape.sum(y, Reduce::All);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
    let cb = tape.grad(codebook).map(|g| g.into_data()).unwrap_or(vec![0.0, 0.0]);
    assert_eq!(cb, vec![0.0, 0.0]);
}
