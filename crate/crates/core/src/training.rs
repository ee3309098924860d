//! Quantization-aware training.
//!
//! Each step samples a batch, runs the forward graph in the requested
//! [`Mode`] (weights are re-quantized on every pass in QAT mode), back-props
//! through the tape with straight-through quantizers, clips the global
//! gradient norm and applies AdamW under a two-stage linear schedule.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{forward_graph, qat_linear_on_tape, Mode, Model, ModelConfig, Planes};
use crate::tensor::{ComplexTensor, Tensor};

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub seq_len: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr_stage1: f64,
    pub peak_lr_stage2: f64,
    pub weight_decay_stage1: f64,
    pub weight_decay_stage2: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            batch_size: 8,
            seq_len: 128,
            total_steps: 500,
            warmup_steps: 10,
            peak_lr_stage1: 3e-3,
            peak_lr_stage2: 2e-3,
            weight_decay_stage1: 0.1,
            weight_decay_stage2: 0.0,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.warmup_steps > self.total_steps / 2 {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must not exceed half of total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        for (name, v) in [
            ("peak_lr_stage1", self.peak_lr_stage1),
            ("peak_lr_stage2", self.peak_lr_stage2),
            ("weight_decay_stage1", self.weight_decay_stage1),
            ("weight_decay_stage2", self.weight_decay_stage2),
            ("clip_norm", self.clip_norm),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        Ok(())
    }

    /// First step of the second stage.
    pub fn stage_boundary(&self) -> usize {
        self.total_steps / 2
    }

    pub fn stage_of(&self, step: usize) -> u8 {
        if step < self.stage_boundary() {
            1
        } else {
            2
        }
    }

    pub fn weight_decay_at(&self, step: usize) -> f64 {
        if self.stage_of(step) == 1 {
            self.weight_decay_stage1
        } else {
            self.weight_decay_stage2
        }
    }
}

/// Two-stage linear schedule: warm up to `peak_lr_stage1`, decay linearly
/// to zero at the midpoint, restart at `peak_lr_stage2` and decay to zero at
/// `total_steps`.
pub fn lr_at(step: usize, hp: &TrainHyper) -> f64 {
    let half = hp.stage_boundary();
    let total = hp.total_steps;
    let step = step.min(total);
    if step < hp.warmup_steps {
        hp.peak_lr_stage1 * step as f64 / hp.warmup_steps as f64
    } else if step < half {
        let span = (half - hp.warmup_steps).max(1);
        hp.peak_lr_stage1 * (half - step) as f64 / span as f64
    } else {
        let span = (total - half).max(1);
        hp.peak_lr_stage2 * (total - step) as f64 / span as f64
    }
}

/// Mutable optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub hyper: TrainHyper,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl TrainState {
    pub fn new(model: &Model, hyper: TrainHyper) -> Self {
        let mut m = Vec::new();
        model.visit_params(&mut |_, _, data| m.push(vec![0.0; data.len()]));
        let v = m.clone();
        Self { step: 0, hyper, m, v }
    }

    pub fn stage(&self) -> u8 {
        self.hyper.stage_of(self.step)
    }
}

/// `conj(x_q) W_q` with both operands quantize-dequantized: activations
/// per token to INT8, weights onto the four phases.
pub fn qat_linear_forward(x: &ComplexTensor, w: &ComplexTensor) -> Result<ComplexTensor> {
    let mut tape = Tape::new();
    let (xre, xim) = x.clone().into_planes();
    let (wre, wim) = w.clone().into_planes();
    let xv = Planes {
        re: tape.constant(xre),
        im: tape.constant(xim),
    };
    let wv = Planes {
        re: tape.constant(wre),
        im: tape.constant(wim),
    };
    let y = qat_linear_on_tape(&mut tape, xv, wv, w)?;
    ComplexTensor::from_planes(tape.value(y.re).clone(), tape.value(y.im).clone())
}

/// Mean cross-entropy of `[rows, vocab]` logits against `targets`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, targets)?;
    Ok(tape.value(loss).data()[0])
}

/// Loss and per-parameter gradients (in [`Model::visit_params`] order).
pub fn loss_and_grads(
    model: &Model,
    inputs: &[usize],
    targets: &[usize],
    batch: usize,
    seq: usize,
    mode: Mode,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if !matches!(mode, Mode::FullPrecision | Mode::Qat) {
        return Err(Error::Config(format!("cannot train in {} mode", mode.name())));
    }
    let g = forward_graph(model, inputs, batch, seq, mode, true)?;
    let mut tape = g.tape;
    let loss = tape.cross_entropy(g.logits, targets)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let out = g
        .params
        .iter()
        .map(|&p| {
            grads
                .take(p)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; tape.value(p).len()])
        })
        .collect();
    Ok((value, out))
}

/// Clips to `clip_norm`, then one AdamW update with bias correction and
/// decoupled weight decay. Returns the pre-clip global gradient norm.
pub fn adamw_step(model: &mut Model, grads: &[Vec<f64>], state: &mut TrainState, lr: f64) -> Result<f64> {
    if grads.len() != state.m.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} gradients for {} parameters", grads.len(), state.m.len()),
        ));
    }
    let hp = &state.hyper;
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    let clip = if norm > hp.clip_norm && norm > 0.0 {
        hp.clip_norm / norm
    } else {
        1.0
    };
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let wd = hp.weight_decay_at(state.step);
    let (b1, b2, eps) = (hp.beta1, hp.beta2, hp.adam_eps);
    let mut idx = 0;
    let mut shape_err = None;
    let (ms, vs) = (&mut state.m, &mut state.v);
    model.visit_params_mut(&mut |name, p| {
        let (g, m, v) = (&grads[idx], &mut ms[idx], &mut vs[idx]);
        idx += 1;
        if g.len() != p.len() || m.len() != p.len() {
            shape_err.get_or_insert_with(|| name.to_string());
            return;
        }
        for i in 0..p.len() {
            let gi = g[i] * clip;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            p[i] -= lr * (update + wd * p[i]);
        }
    });
    if let Some(name) = shape_err {
        return Err(Error::shape("adamw_step", format!("gradient shape mismatch for {name}")));
    }
    state.step += 1;
    Ok(norm)
}

/// One row of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub mode: String,
}

pub struct TrainOutput {
    pub model: Model,
    pub trace: Vec<LossRecord>,
}

/// Trains a freshly initialized model. Deterministic in `hyper.seed`: the
/// same seed initializes the weights and drives batch sampling.
pub fn train_loop(corpus: &Corpus, config: ModelConfig, hyper: TrainHyper, mode: Mode) -> Result<TrainOutput> {
    train_loop_with(corpus, config, hyper, mode, |_| {})
}

/// [`train_loop`] with a per-step callback.
pub fn train_loop_with(
    corpus: &Corpus,
    config: ModelConfig,
    hyper: TrainHyper,
    mode: Mode,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutput> {
    hyper.validate()?;
    if corpus.vocab_size() > config.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary {} exceeds model vocab_size {}",
            corpus.vocab_size(),
            config.vocab_size
        )));
    }
    if hyper.seq_len > config.max_seq {
        return Err(Error::Config(format!(
            "seq_len {} exceeds max_seq {}",
            hyper.seq_len, config.max_seq
        )));
    }
    if corpus.num_windows(hyper.seq_len) == 0 {
        return Err(Error::Config(format!(
            "corpus of {} tokens is shorter than one training window of {}",
            corpus.len(),
            hyper.seq_len + 1
        )));
    }
    let mut model = Model::init(config, hyper.seed)?;
    let mut state = TrainState::new(&model, hyper.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(0x5eed));
    let mut trace = Vec::with_capacity(hyper.total_steps);
    for step in 0..hyper.total_steps {
        let lr = lr_at(step, &hyper);
        let b = corpus.sample_batch(&mut rng, hyper.batch_size, hyper.seq_len)?;
        let (loss, grads) = loss_and_grads(&model, &b.inputs, &b.targets, b.batch, b.seq, mode)?;
        if !loss.is_finite() {
            return Err(Error::Config(format!("loss diverged at step {step}")));
        }
        let rec = LossRecord {
            step,
            lr,
            loss,
            mode: mode.name().to_string(),
        };
        on_step(&rec);
        trace.push(rec);
        adamw_step(&mut model, &grads, &mut state, lr)?;
    }
    Ok(TrainOutput { model, trace })
}

/// Writes `step,lr,loss,mode`.
pub fn write_loss_csv<W: Write>(trace: &[LossRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in trace {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<loss csv>", e))?;
    Ok(())
}
