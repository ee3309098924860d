//! The complex-valued decoder.
//!
//! Layout of one block (pre-norm):
//!
//! ```text
//! x -> norm -> Q,K,V (Hermitian projections) -> RoPE(Q,K) -> attention -> W_O -> + x
//!   -> norm -> relu2(W_Gate h) * (W_Up h) -> W_Down -> + x
//! ```
//!
//! Embeddings are two real tables, the LM head is a real projection of
//! `[H_re | H_im]`, and norms act on each plane separately. Only the seven
//! per-layer projections are ever quantized.
//!
//! Every forward pass is built on an [`autograd::Tape`](crate::autograd::Tape);
//! inference simply skips the backward sweep. The [`Mode`] decides how each
//! projection is evaluated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionDims, Tape, Var};
use crate::error::{Error, Result};
use crate::kernel;
use crate::quantize::{
    dequantize_weights, fake_quantize_plane, fake_quantize_weights, quantize_activation,
    quantize_weights, PackedQuantTensor,
};
use crate::tensor::{ComplexTensor, Tensor, DEFAULT_NORM_EPS};

/// Names of the quantized projections, in storage order.
pub const PROJECTION_NAMES: [&str; 7] = ["w_q", "w_k", "w_v", "w_o", "w_up", "w_gate", "w_down"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Complex feature count of the residual stream.
    pub d_model: usize,
    pub n_heads: usize,
    /// Complex features per head.
    pub d_head: usize,
    /// Complex hidden width of the FFN.
    pub d_ffn: usize,
    pub n_layers: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// Softmax scores are divided by `sqrt(attn_scale_dim)`; defaults to the
    /// concatenated per-head width `2 * d_head`.
    pub attn_scale_dim: usize,
}

impl ModelConfig {
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        n_heads: usize,
        d_ffn: usize,
        n_layers: usize,
        max_seq: usize,
    ) -> Self {
        let d_head = if n_heads == 0 { 0 } else { d_model / n_heads };
        Self {
            vocab_size,
            d_model,
            n_heads,
            d_head,
            d_ffn,
            n_layers,
            max_seq,
            rope_base: 10_000.0,
            norm_eps: DEFAULT_NORM_EPS,
            attn_scale_dim: 2 * d_head,
        }
    }

    /// Byte-level toy model: 2 layers, 64 complex features, 4 heads.
    pub fn toy() -> Self {
        Self::new(256, 64, 4, 128, 2, 128)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ffn", self.d_ffn),
            ("n_layers", self.n_layers),
            ("max_seq", self.max_seq),
            ("attn_scale_dim", self.attn_scale_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model ({}) must equal n_heads * d_head ({} * {})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(Error::Config("rope_base must be positive".into()));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config("norm_eps must be non-negative".into()));
        }
        Ok(())
    }

    fn attention_dims(&self, batch: usize, seq: usize) -> AttentionDims {
        AttentionDims {
            batch,
            seq,
            heads: self.n_heads,
            width: 2 * self.d_head,
            scale: 1.0 / (self.attn_scale_dim as f64).sqrt(),
            causal: true,
        }
    }
}

/// A projection weight `W` of shape `[in, out]`, either full precision or
/// packed to 2 bits.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Full(ComplexTensor),
    Packed(PackedQuantTensor),
}

impl Projection {
    /// `(in_features, out_features)`.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Projection::Full(w) => (w.shape()[0], w.shape()[1]),
            Projection::Packed(p) => (p.in_features(), p.out_features()),
        }
    }

    pub fn is_packed(&self) -> bool {
        matches!(self, Projection::Packed(_))
    }

    /// Full-precision weights, or the dequantized packed weights.
    pub fn dense(&self) -> Result<ComplexTensor> {
        match self {
            Projection::Full(w) => Ok(w.clone()),
            Projection::Packed(p) => dequantize_weights(p),
        }
    }

    /// The packed form, quantizing on the fly if needed.
    pub fn packed(&self) -> Result<std::borrow::Cow<'_, PackedQuantTensor>> {
        match self {
            Projection::Full(w) => Ok(std::borrow::Cow::Owned(quantize_weights(w)?)),
            Projection::Packed(p) => Ok(std::borrow::Cow::Borrowed(p)),
        }
    }
}

/// Separate RMSNorm gains for the real and imaginary planes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormGains {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl NormGains {
    pub fn ones(d: usize) -> Self {
        Self {
            re: vec![1.0; d],
            im: vec![1.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w_q: Projection,
    pub w_k: Projection,
    pub w_v: Projection,
    pub w_o: Projection,
    pub w_up: Projection,
    pub w_gate: Projection,
    pub w_down: Projection,
    pub attn_norm: NormGains,
    pub ffn_norm: NormGains,
}

impl Layer {
    /// Projections in [`PROJECTION_NAMES`] order.
    pub fn projections(&self) -> [&Projection; 7] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.w_up,
            &self.w_gate,
            &self.w_down,
        ]
    }

    pub fn projections_mut(&mut self) -> [&mut Projection; 7] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_up,
            &mut self.w_gate,
            &mut self.w_down,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed_re: Tensor,
    pub embed_im: Tensor,
    pub layers: Vec<Layer>,
    pub final_norm: NormGains,
    /// `[vocab, 2 * d_model]`, applied to `[H_re | H_im]`.
    pub w_out: Tensor,
}

/// How projections are evaluated during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Raw weights and activations (packed weights are dequantized).
    FullPrecision,
    /// Quantize-dequantize activations and weights, then a float Hermitian
    /// product; gradients pass straight through both quantizers.
    Qat,
    /// Integer multiplication-free kernel.
    Multfree,
    /// Integer LUT kernel.
    Lut,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::FullPrecision => "full_precision",
            Mode::Qat => "qat",
            Mode::Multfree => "multfree",
            Mode::Lut => "lut",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Mode::FullPrecision, Mode::Qat, Mode::Multfree, Mode::Lut]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

fn init_projection(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Projection {
    // per-plane std 1/sqrt(2 fan_in) => E|w|^2 = 1/fan_in
    let std = 1.0 / (2.0 * fan_in as f64).sqrt();
    Projection::Full(ComplexTensor::random_normal(vec![fan_in, fan_out], std, rng))
}

/// Std of the LM head initialization.
const LM_HEAD_INIT_STD: f64 = 0.02;

impl Model {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ffn);
        let embed_std = std::f64::consts::FRAC_1_SQRT_2;
        let embed_re = Tensor::random_normal(vec![v, d], embed_std, &mut rng);
        let embed_im = Tensor::random_normal(vec![v, d], embed_std, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                w_q: init_projection(&mut rng, d, d),
                w_k: init_projection(&mut rng, d, d),
                w_v: init_projection(&mut rng, d, d),
                w_o: init_projection(&mut rng, d, d),
                w_up: init_projection(&mut rng, d, f),
                w_gate: init_projection(&mut rng, d, f),
                w_down: init_projection(&mut rng, f, d),
                attn_norm: NormGains::ones(d),
                ffn_norm: NormGains::ones(d),
            })
            .collect();
        let w_out = Tensor::random_normal(vec![v, 2 * d], LM_HEAD_INIT_STD, &mut rng);
        Ok(Self {
            config,
            embed_re,
            embed_im,
            layers,
            final_norm: NormGains::ones(d),
            w_out,
        })
    }

    /// Checks that every tensor matches the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (v, d, f) = (c.vocab_size, c.d_model, c.d_ffn);
        let check = |name: &str, got: &[usize], want: &[usize]| -> Result<()> {
            if got != want {
                return Err(Error::Config(format!("{name}: shape {got:?}, expected {want:?}")));
            }
            Ok(())
        };
        check("embed.re", self.embed_re.shape(), &[v, d])?;
        check("embed.im", self.embed_im.shape(), &[v, d])?;
        check("lm_head", self.w_out.shape(), &[v, 2 * d])?;
        check("final_norm.re", &[self.final_norm.re.len()], &[d])?;
        check("final_norm.im", &[self.final_norm.im.len()], &[d])?;
        if self.layers.len() != c.n_layers {
            return Err(Error::Config(format!(
                "{} layers, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        let want = [(d, d), (d, d), (d, d), (d, d), (d, f), (d, f), (f, d)];
        for (i, layer) in self.layers.iter().enumerate() {
            for ((name, p), w) in PROJECTION_NAMES.iter().zip(layer.projections()).zip(want) {
                let (a, b) = p.dims();
                check(&format!("layers.{i}.{name}"), &[a, b], &[w.0, w.1])?;
            }
            for (name, g) in [("attn_norm", &layer.attn_norm), ("ffn_norm", &layer.ffn_norm)] {
                check(&format!("layers.{i}.{name}.re"), &[g.re.len()], &[d])?;
                check(&format!("layers.{i}.{name}.im"), &[g.im.len()], &[d])?;
            }
        }
        Ok(())
    }

    /// Visits every trainable real plane in a fixed order. Packed
    /// projections are not trainable and are skipped.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a [usize], &'a [f64])) {
        f("embed.re".into(), self.embed_re.shape(), self.embed_re.data());
        f("embed.im".into(), self.embed_im.shape(), self.embed_im.data());
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, p) in PROJECTION_NAMES.iter().zip(layer.projections()) {
                if let Projection::Full(w) = p {
                    f(format!("layers.{i}.{name}.re"), w.shape(), w.re());
                    f(format!("layers.{i}.{name}.im"), w.shape(), w.im());
                }
            }
            for (name, g) in [("attn_norm", &layer.attn_norm), ("ffn_norm", &layer.ffn_norm)] {
                f(format!("layers.{i}.{name}.re"), std::slice::from_ref(&self.config.d_model), &g.re);
                f(format!("layers.{i}.{name}.im"), std::slice::from_ref(&self.config.d_model), &g.im);
            }
        }
        let d = std::slice::from_ref(&self.config.d_model);
        f("final_norm.re".into(), d, &self.final_norm.re);
        f("final_norm.im".into(), d, &self.final_norm.im);
        f("lm_head".into(), self.w_out.shape(), self.w_out.data());
    }

    /// Mutable counterpart of [`Model::visit_params`], same order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("embed.re", self.embed_re.data_mut());
        f("embed.im", self.embed_im.data_mut());
        for layer in &mut self.layers {
            for p in layer.projections_mut() {
                if let Projection::Full(w) = p {
                    let (re, im) = w.planes_mut();
                    f("proj.re", re);
                    f("proj.im", im);
                }
            }
            for g in [&mut layer.attn_norm, &mut layer.ffn_norm] {
                f("norm.re", &mut g.re);
                f("norm.im", &mut g.im);
            }
        }
        f("final_norm.re", &mut self.final_norm.re);
        f("final_norm.im", &mut self.final_norm.im);
        f("lm_head", self.w_out.data_mut());
    }

    /// `(name, shape)` of every trainable plane, in visit order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, shape, _| out.push((name, shape.to_vec())));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, data| n += data.len());
        n
    }

    /// Rounds every floating-point parameter to the nearest f32, the
    /// precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        self.visit_params_mut(&mut |_, p| p.iter_mut().for_each(|x| *x = *x as f32 as f64));
    }

    /// True when any projection is stored packed.
    pub fn is_quantized(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.projections().iter().any(|p| p.is_packed()))
    }

    /// Copy of the model with all seven projection families packed.
    pub fn quantized(&self) -> Result<Self> {
        let mut out = self.clone();
        for layer in &mut out.layers {
            for p in layer.projections_mut() {
                if let Projection::Full(w) = p {
                    *p = Projection::Packed(quantize_weights(w)?);
                }
            }
        }
        Ok(out)
    }
}

/// Tape handles for the planes of one complex activation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Planes {
    pub(crate) re: Var,
    pub(crate) im: Var,
}

enum ProjVars {
    Full(Planes),
    Packed,
}

struct LayerVars {
    proj: Vec<ProjVars>,
    attn_norm: Planes,
    ffn_norm: Planes,
}

struct ModelVars {
    embed: Planes,
    layers: Vec<LayerVars>,
    final_norm: Planes,
    w_out: Var,
    /// Leaves in [`Model::visit_params`] order.
    ordered: Vec<Var>,
}

fn bind_params(tape: &mut Tape, model: &Model, trainable: bool) -> ModelVars {
    let mut ordered = Vec::new();
    let mut leaf = |tape: &mut Tape, shape: &[usize], data: &[f64]| {
        let t = Tensor::new(shape.to_vec(), data.to_vec()).expect("model tensors are well formed");
        let v = if trainable { tape.param(t) } else { tape.constant(t) };
        ordered.push(v);
        v
    };
    let embed = Planes {
        re: leaf(tape, model.embed_re.shape(), model.embed_re.data()),
        im: leaf(tape, model.embed_im.shape(), model.embed_im.data()),
    };
    let d = [model.config.d_model];
    let layers = model
        .layers
        .iter()
        .map(|layer| {
            let proj = layer
                .projections()
                .iter()
                .map(|p| match p {
                    Projection::Full(w) => ProjVars::Full(Planes {
                        re: leaf(tape, w.shape(), w.re()),
                        im: leaf(tape, w.shape(), w.im()),
                    }),
                    Projection::Packed(_) => ProjVars::Packed,
                })
                .collect();
            let attn_norm = Planes {
                re: leaf(tape, &d, &layer.attn_norm.re),
                im: leaf(tape, &d, &layer.attn_norm.im),
            };
            let ffn_norm = Planes {
                re: leaf(tape, &d, &layer.ffn_norm.re),
                im: leaf(tape, &d, &layer.ffn_norm.im),
            };
            LayerVars {
                proj,
                attn_norm,
                ffn_norm,
            }
        })
        .collect();
    let final_norm = Planes {
        re: leaf(tape, &d, &model.final_norm.re),
        im: leaf(tape, &d, &model.final_norm.im),
    };
    let w_out = leaf(tape, model.w_out.shape(), model.w_out.data());
    ModelVars {
        embed,
        layers,
        final_norm,
        w_out,
        ordered,
    }
}

fn complex_from_tape(tape: &Tape, x: Planes) -> Result<ComplexTensor> {
    ComplexTensor::from_planes(tape.value(x.re).clone(), tape.value(x.im).clone())
}

fn constant_planes(tape: &mut Tape, y: ComplexTensor) -> Planes {
    let (re, im) = y.into_planes();
    Planes {
        re: tape.constant(re),
        im: tape.constant(im),
    }
}

/// `conj(x) W` on the tape: four real matmuls.
pub(crate) fn hermitian_on_tape(tape: &mut Tape, x: Planes, w: Planes) -> Result<Planes> {
    let rr = tape.matmul(x.re, w.re, false)?;
    let ii = tape.matmul(x.im, w.im, false)?;
    let ri = tape.matmul(x.re, w.im, false)?;
    let ir = tape.matmul(x.im, w.re, false)?;
    Ok(Planes {
        re: tape.add(rr, ii)?,
        im: tape.sub(ri, ir)?,
    })
}

/// Per-token fake quantization of both activation planes, straight-through.
fn fake_quantize_input(tape: &mut Tape, x: Planes) -> Result<Planes> {
    let d = tape.value(x.re).cols();
    let xq_re = fake_quantize_plane(tape.value(x.re).data(), d);
    let xq_im = fake_quantize_plane(tape.value(x.im).data(), d);
    let shape = tape.value(x.re).shape().to_vec();
    Ok(Planes {
        re: tape.straight_through(x.re, Tensor::new(shape.clone(), xq_re)?)?,
        im: tape.straight_through(x.im, Tensor::new(shape, xq_im)?)?,
    })
}

/// QAT projection: both operands pass through quantize-dequantize in the
/// forward pass and straight through in the backward pass. `w` must hold
/// the current values of `wv`; weights are re-projected on every call.
pub(crate) fn qat_linear_on_tape(tape: &mut Tape, x: Planes, wv: Planes, w: &ComplexTensor) -> Result<Planes> {
    let xq = fake_quantize_input(tape, x)?;
    let (qre, qim) = fake_quantize_weights(w)?.into_planes();
    let wq = Planes {
        re: tape.straight_through(wv.re, qre)?,
        im: tape.straight_through(wv.im, qim)?,
    };
    hermitian_on_tape(tape, xq, wq)
}

/// One projection under the given mode. `weight` holds the bound planes
/// when the projection is full precision.
fn linear(
    tape: &mut Tape,
    x: Planes,
    proj: &Projection,
    weight: &ProjVars,
    mode: Mode,
) -> Result<Planes> {
    match mode {
        Mode::FullPrecision => {
            let w = match (proj, weight) {
                (_, ProjVars::Full(w)) => *w,
                (p, ProjVars::Packed) => constant_planes(tape, p.dense()?),
            };
            hermitian_on_tape(tape, x, w)
        }
        Mode::Qat => match (proj, weight) {
            (Projection::Full(w), ProjVars::Full(wv)) => qat_linear_on_tape(tape, x, *wv, w),
            (p, _) => {
                let xq = fake_quantize_input(tape, x)?;
                let wq = constant_planes(tape, p.dense()?);
                hermitian_on_tape(tape, xq, wq)
            }
        },
        Mode::Multfree | Mode::Lut => {
            let xc = complex_from_tape(tape, x)?;
            let leading = xc.shape()[..xc.shape().len() - 1].to_vec();
            let x2 = xc.reshape(vec![leading.iter().product(), tape.value(x.re).cols()])?;
            let act = quantize_activation(&x2);
            let packed = proj.packed()?;
            let y = if mode == Mode::Multfree {
                kernel::multfree_gemm(&act, &packed)?
            } else {
                kernel::lut_gemm(&act, &packed)?
            };
            let mut shape = leading;
            shape.push(packed.out_features());
            Ok(constant_planes(tape, y.reshape(shape)?))
        }
    }
}

/// `theta_j = base^(-j / d_head)` for `j = 0..d_head`.
pub fn rope_frequencies(d_head: usize, base: f64) -> Vec<f64> {
    (0..d_head)
        .map(|j| base.powf(-(j as f64) / d_head as f64))
        .collect()
}

/// `(cos, sin)` of `m * theta_j` laid out as `[rows, heads * d_head]`.
fn rope_tables(positions: &[usize], heads: usize, d_head: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let freqs = rope_frequencies(d_head, base);
    let width = heads * d_head;
    let mut cos = Vec::with_capacity(positions.len() * width);
    let mut sin = Vec::with_capacity(positions.len() * width);
    for &m in positions {
        for _ in 0..heads {
            for &theta in &freqs {
                let (s, c) = (m as f64 * theta).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
    }
    (cos, sin)
}

/// Multiplies each feature by `e^{i m theta_j}`.
fn rope_on_tape(tape: &mut Tape, x: Planes, cos: &[f64], sin: &[f64]) -> Result<Planes> {
    let rc = tape.mul_const(x.re, cos.to_vec())?;
    let rs = tape.mul_const(x.re, sin.to_vec())?;
    let ic = tape.mul_const(x.im, cos.to_vec())?;
    let is = tape.mul_const(x.im, sin.to_vec())?;
    Ok(Planes {
        re: tape.sub(rc, is)?,
        im: tape.add(rs, ic)?,
    })
}

/// Concatenate per head, run real attention, split back.
fn attention_on_tape(
    tape: &mut Tape,
    q: Planes,
    k: Planes,
    v: Planes,
    dims: AttentionDims,
) -> Result<Planes> {
    let qc = tape.head_concat(q.re, q.im, dims.heads)?;
    let kc = tape.head_concat(k.re, k.im, dims.heads)?;
    let vc = tape.head_concat(v.re, v.im, dims.heads)?;
    let o = tape.attention(qc, kc, vc, dims)?;
    Ok(Planes {
        re: tape.head_split(o, dims.heads, false)?,
        im: tape.head_split(o, dims.heads, true)?,
    })
}

fn norm_on_tape(tape: &mut Tape, x: Planes, gains: Planes, eps: f64) -> Result<Planes> {
    Ok(Planes {
        re: tape.rmsnorm(x.re, gains.re, eps)?,
        im: tape.rmsnorm(x.im, gains.im, eps)?,
    })
}

fn ffn_on_tape(
    tape: &mut Tape,
    x: Planes,
    layer: &Layer,
    vars: &LayerVars,
    mode: Mode,
) -> Result<Planes> {
    let gate = linear(tape, x, &layer.w_gate, &vars.proj[5], mode)?;
    let up = linear(tape, x, &layer.w_up, &vars.proj[4], mode)?;
    let r = Planes {
        re: tape.relu2(gate.re),
        im: tape.relu2(gate.im),
    };
    // complex product r * up
    let a = tape.mul(r.re, up.re)?;
    let b = tape.mul(r.im, up.im)?;
    let c = tape.mul(r.re, up.im)?;
    let e = tape.mul(r.im, up.re)?;
    let z = Planes {
        re: tape.sub(a, b)?,
        im: tape.add(c, e)?,
    };
    linear(tape, z, &layer.w_down, &vars.proj[6], mode)
}

/// A recorded forward pass.
pub struct ForwardGraph {
    pub tape: Tape,
    /// `[batch * seq, vocab]` logits.
    pub logits: Var,
    /// Parameter leaves in [`Model::visit_params`] order.
    pub params: Vec<Var>,
}

/// Builds the forward graph for `batch` sequences of `seq` tokens each
/// (`ids` is row-major `[batch, seq]`). With `trainable` the parameters are
/// gradient-tracked leaves.
pub fn forward_graph(
    model: &Model,
    ids: &[usize],
    batch: usize,
    seq: usize,
    mode: Mode,
    trainable: bool,
) -> Result<ForwardGraph> {
    let c = &model.config;
    if ids.len() != batch * seq {
        return Err(Error::shape("forward", format!("{} ids for batch {batch} x seq {seq}", ids.len())));
    }
    if seq == 0 || seq > c.max_seq {
        return Err(Error::Config(format!("sequence length {seq} outside 1..={}", c.max_seq)));
    }
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, model, trainable);
    let mut x = Planes {
        re: tape.gather(vars.embed.re, ids)?,
        im: tape.gather(vars.embed.im, ids)?,
    };
    let positions: Vec<usize> = (0..batch * seq).map(|r| r % seq).collect();
    let (cos, sin) = rope_tables(&positions, c.n_heads, c.d_head, c.rope_base);
    let dims = c.attention_dims(batch, seq);
    for (layer, lv) in model.layers.iter().zip(&vars.layers) {
        let h = norm_on_tape(&mut tape, x, lv.attn_norm, c.norm_eps)?;
        let q = linear(&mut tape, h, &layer.w_q, &lv.proj[0], mode)?;
        let k = linear(&mut tape, h, &layer.w_k, &lv.proj[1], mode)?;
        let v = linear(&mut tape, h, &layer.w_v, &lv.proj[2], mode)?;
        let q = rope_on_tape(&mut tape, q, &cos, &sin)?;
        let k = rope_on_tape(&mut tape, k, &cos, &sin)?;
        let o = attention_on_tape(&mut tape, q, k, v, dims)?;
        let a = linear(&mut tape, o, &layer.w_o, &lv.proj[3], mode)?;
        x = Planes {
            re: tape.add(x.re, a.re)?,
            im: tape.add(x.im, a.im)?,
        };
        let h = norm_on_tape(&mut tape, x, lv.ffn_norm, c.norm_eps)?;
        let f = ffn_on_tape(&mut tape, h, layer, lv, mode)?;
        x = Planes {
            re: tape.add(x.re, f.re)?,
            im: tape.add(x.im, f.im)?,
        };
    }
    let h = norm_on_tape(&mut tape, x, vars.final_norm, c.norm_eps)?;
    let hc = tape.concat_cols(h.re, h.im)?;
    let logits = tape.matmul(hc, vars.w_out, true)?;
    Ok(ForwardGraph {
        tape,
        logits,
        params: vars.ordered,
    })
}

/// Logits `[seq, vocab]` for one token sequence.
pub fn model_forward(ids: &[usize], model: &Model, mode: Mode) -> Result<Tensor> {
    let g = forward_graph(model, ids, 1, ids.len(), mode, false)?;
    Ok(g.tape.value(g.logits).clone())
}

/// Logits `[batch * seq, vocab]` for a row-major `[batch, seq]` id block.
pub fn forward_batch(model: &Model, ids: &[usize], batch: usize, seq: usize, mode: Mode) -> Result<Tensor> {
    let g = forward_graph(model, ids, batch, seq, mode, false)?;
    Ok(g.tape.value(g.logits).clone())
}

/// Row `t` is `embed_re[id_t] + i embed_im[id_t]`.
pub fn embed_tokens(ids: &[usize], model: &Model) -> Result<ComplexTensor> {
    let d = model.config.d_model;
    let vocab = model.config.vocab_size;
    let mut re = Vec::with_capacity(ids.len() * d);
    let mut im = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        re.extend_from_slice(&model.embed_re.data()[id * d..(id + 1) * d]);
        im.extend_from_slice(&model.embed_im.data()[id * d..(id + 1) * d]);
    }
    ComplexTensor::new(vec![ids.len(), d], re, im)
}

/// Complex RoPE on a `[seq, heads, d_head]` tensor: feature `j` at position
/// `positions[s]` is multiplied by `e^{i m theta_j}`.
pub fn apply_rope(x: &ComplexTensor, positions: &[usize], base: f64) -> Result<ComplexTensor> {
    let [seq, heads, d_head] = match x.shape() {
        &[a, b, c] => [a, b, c],
        s => return Err(Error::shape("apply_rope", format!("expected [seq, heads, d_head], got {s:?}"))),
    };
    if positions.len() != seq {
        return Err(Error::shape("apply_rope", format!("{} positions for seq {seq}", positions.len())));
    }
    let (cos, sin) = rope_tables(positions, heads, d_head, base);
    let mut out = ComplexTensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let (a, b) = x.get(i);
        out.set(i, (a * cos[i] - b * sin[i], a * sin[i] + b * cos[i]));
    }
    Ok(out)
}

/// `Re(conj(Q) K^T) = Q_re K_re^T + Q_im K_im^T` for `[sq, d]` and `[sk, d]`.
pub fn attention_scores(q: &ComplexTensor, k: &ComplexTensor) -> Result<Tensor> {
    if q.cols() != k.cols() {
        return Err(Error::shape(
            "attention_scores",
            format!("{:?} vs {:?}", q.shape(), k.shape()),
        ));
    }
    let (sq, sk, d) = (q.rows(), k.rows(), q.cols());
    let mut s = vec![0.0; sq * sk];
    crate::tensor::gemm(sq, d, sk, q.re(), false, k.re(), true, 0.0, &mut s);
    crate::tensor::gemm(sq, d, sk, q.im(), false, k.im(), true, 1.0, &mut s);
    Tensor::new(vec![sq, sk], s)
}

/// Complex self-attention over `[seq, heads, d_head]` tensors via the
/// concatenated real form, scaled by `1/sqrt(scale_dim)`.
pub fn attention_forward(
    q: &ComplexTensor,
    k: &ComplexTensor,
    v: &ComplexTensor,
    causal: bool,
    scale_dim: usize,
) -> Result<ComplexTensor> {
    let [seq, heads, d_head] = match q.shape() {
        &[a, b, c] => [a, b, c],
        s => return Err(Error::shape("attention_forward", format!("expected 3-D, got {s:?}"))),
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("attention_forward", "Q, K, V shapes differ"));
    }
    let mut tape = Tape::new();
    let flat = |t: &ComplexTensor| t.clone().reshape(vec![seq, heads * d_head]);
    let qv = constant_planes(&mut tape, flat(q)?);
    let kv = constant_planes(&mut tape, flat(k)?);
    let vv = constant_planes(&mut tape, flat(v)?);
    let dims = AttentionDims {
        batch: 1,
        seq,
        heads,
        width: 2 * d_head,
        scale: 1.0 / (scale_dim as f64).sqrt(),
        causal,
    };
    let o = attention_on_tape(&mut tape, qv, kv, vv, dims)?;
    complex_from_tape(&tape, o)?.reshape(vec![seq, heads, d_head])
}

/// `W_Down (relu2(W_Gate x) * W_Up x)` for `x` of shape `[seq, d_model]`.
pub fn ffn_forward(x: &ComplexTensor, layer: &Layer, mode: Mode) -> Result<ComplexTensor> {
    let mut tape = Tape::new();
    let xv = constant_planes(&mut tape, x.clone());
    let mut bind = |p: &Projection| match p {
        Projection::Full(w) => ProjVars::Full(constant_planes(&mut tape, w.clone())),
        Projection::Packed(_) => ProjVars::Packed,
    };
    let proj: Vec<ProjVars> = layer.projections().into_iter().map(&mut bind).collect();
    let d = x.cols();
    let norm = Planes {
        re: tape.constant(Tensor::full(vec![d], 1.0)),
        im: tape.constant(Tensor::full(vec![d], 1.0)),
    };
    let vars = LayerVars {
        proj,
        attn_norm: norm,
        ffn_norm: norm,
    };
    let y = ffn_on_tape(&mut tape, xv, layer, &vars, mode)?;
    complex_from_tape(&tape, y)
}

/// Real logits `[H_re | H_im] W_out^T`.
pub fn lm_head_forward(h: &ComplexTensor, w_out: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let hv = constant_planes(&mut tape, h.clone());
    let w = tape.constant(w_out.clone());
    let hc = tape.concat_cols(hv.re, hv.im)?;
    let logits = tape.matmul(hc, w, true)?;
    Ok(tape.value(logits).clone())
}
