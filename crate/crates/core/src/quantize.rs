//! Weight and activation quantization.
//!
//! Weights are projected by phase onto the fourth roots of unity
//! `{+1, +i, -1, -i}` and rescaled with one real-axis and one
//! imaginary-axis scale per matrix. Activations are quantized per token and
//! per component to signed 8-bit integers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ComplexTensor;

/// Class means below this are treated as empty and fall back to a unit scale.
pub const SCALE_MEAN_FLOOR: f64 = 1e-8;

/// Floor applied to the per-token max before computing `127 / max`.
pub const ACTIVATION_MAX_FLOOR: f64 = 1e-5;

/// One of the four codebook values; the discriminant `c` encodes `i^c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Codeword {
    PlusOne = 0,
    PlusI = 1,
    MinusOne = 2,
    MinusI = 3,
}

impl Codeword {
    pub const ALL: [Codeword; 4] = [
        Codeword::PlusOne,
        Codeword::PlusI,
        Codeword::MinusOne,
        Codeword::MinusI,
    ];

    /// Decodes the low two bits.
    #[inline]
    pub fn from_bits(bits: u8) -> Self {
        match bits & 0b11 {
            0 => Codeword::PlusOne,
            1 => Codeword::PlusI,
            2 => Codeword::MinusOne,
            _ => Codeword::MinusI,
        }
    }

    #[inline]
    pub fn bits(self) -> u8 {
        self as u8
    }

    /// `i^code` as `(re, im)`.
    #[inline]
    pub fn value(self) -> (f64, f64) {
        match self {
            Codeword::PlusOne => (1.0, 0.0),
            Codeword::PlusI => (0.0, 1.0),
            Codeword::MinusOne => (-1.0, 0.0),
            Codeword::MinusI => (0.0, -1.0),
        }
    }

    /// `"+1"`, `"+i"`, `"-1"` or `"-i"`.
    pub fn symbol(self) -> &'static str {
        ["+1", "+i", "-1", "-i"][self as usize]
    }

    /// True for `+1` and `-1`.
    #[inline]
    pub fn is_real(self) -> bool {
        matches!(self, Codeword::PlusOne | Codeword::MinusOne)
    }

    #[inline]
    pub fn conj(self) -> Self {
        match self {
            Codeword::PlusI => Codeword::MinusI,
            Codeword::MinusI => Codeword::PlusI,
            c => c,
        }
    }

    /// Principal argument of the codeword, in `(-pi, pi]`.
    pub fn phase(self) -> f64 {
        use std::f64::consts::{FRAC_PI_2, PI};
        match self {
            Codeword::PlusOne => 0.0,
            Codeword::PlusI => FRAC_PI_2,
            Codeword::MinusOne => PI,
            Codeword::MinusI => -FRAC_PI_2,
        }
    }
}

/// Maps `w = re + i im` to `i^floor(2 Arg(w)/pi + 1/2)`.
///
/// `Arg` is taken in `(-pi, pi]` and `Arg(0) = 0`. The sector tests are done
/// on the components directly so that points on the diagonals land exactly
/// where the floor rule puts them:
///
/// * `[-pi/4, pi/4)` -> `+1`
/// * `[pi/4, 3pi/4)` -> `+i`
/// * `[3pi/4, pi]` -> `-1`
/// * `[-3pi/4, -pi/4)` -> `-i`
#[inline]
pub fn phase_project(re: f64, im: f64) -> Codeword {
    if re > 0.0 && -re <= im && im < re {
        Codeword::PlusOne
    } else if im > 0.0 && -im < re && re <= im {
        Codeword::PlusI
    } else if re < 0.0 && re < im && im <= -re {
        Codeword::MinusOne
    } else if im < 0.0 && im <= re && re < -im {
        Codeword::MinusI
    } else {
        // Only the origin (and NaN) reach this point.
        Codeword::PlusOne
    }
}

/// Projects every entry of a tensor.
pub fn project_all(w: &ComplexTensor) -> Vec<Codeword> {
    w.re()
        .iter()
        .zip(w.im())
        .map(|(&r, &i)| phase_project(r, i))
        .collect()
}

/// Mean absolute components of the two codeword classes:
/// `(E|W_re| over {+-1}, E|W_im| over {+-i})`, each falling back to 1 when
/// its class is empty or the mean is below [`SCALE_MEAN_FLOOR`].
fn class_means(w: &ComplexTensor, codes: &[Codeword]) -> (f64, f64) {
    let (mut sum_re, mut n_re, mut sum_im, mut n_im) = (0.0, 0usize, 0.0, 0usize);
    for ((&r, &i), c) in w.re().iter().zip(w.im()).zip(codes) {
        if c.is_real() {
            sum_re += r.abs();
            n_re += 1;
        } else {
            sum_im += i.abs();
            n_im += 1;
        }
    }
    let mean = |s: f64, n: usize| {
        if n == 0 {
            return 1.0;
        }
        let m = s / n as f64;
        if m < SCALE_MEAN_FLOOR {
            1.0
        } else {
            m
        }
    };
    (mean(sum_re, n_re), mean(sum_im, n_im))
}

/// Returns `(gamma_re, gamma_im)`, the reciprocals of the class means.
pub fn compute_scales(w: &ComplexTensor) -> Result<(f64, f64)> {
    if w.is_empty() {
        return Err(Error::shape("compute_scales", "empty weight tensor"));
    }
    let codes = project_all(w);
    let (m_re, m_im) = class_means(w, &codes);
    Ok((1.0 / m_re, 1.0 / m_im))
}

/// A `k x n` weight matrix quantized to 2-bit codewords.
///
/// Codes are stored output-major: the `ceil(k/4)` bytes of output column `j`
/// are contiguous, and inside a byte the code for input row `t` occupies bits
/// `2*(t%4)..2*(t%4)+1`, lowest first. Padding codes in a partial trailing
/// byte are zero. In packed-matrix terms the tensor has `out_features` rows
/// of `in_features` columns, so one packed byte is exactly one LUT index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedQuantTensor {
    in_features: usize,
    out_features: usize,
    codes: Vec<u8>,
    dequant_re: f32,
    dequant_im: f32,
}

impl PackedQuantTensor {
    pub fn bytes_per_row(in_features: usize) -> usize {
        in_features.div_ceil(4)
    }

    /// Packs a row-major `k x n` code matrix (`codes[t * n + j]`).
    pub fn from_codes(
        in_features: usize,
        out_features: usize,
        codes: &[Codeword],
        dequant_re: f32,
        dequant_im: f32,
    ) -> Result<Self> {
        if codes.len() != in_features * out_features {
            return Err(Error::shape(
                "PackedQuantTensor::from_codes",
                format!(
                    "{} codes for a {in_features}x{out_features} matrix",
                    codes.len()
                ),
            ));
        }
        let bpr = Self::bytes_per_row(in_features);
        let mut packed = vec![0u8; bpr * out_features];
        for t in 0..in_features {
            for j in 0..out_features {
                packed[j * bpr + t / 4] |= codes[t * out_features + j].bits() << (2 * (t % 4));
            }
        }
        Self::from_raw(in_features, out_features, packed, dequant_re, dequant_im)
    }

    /// Wraps already-packed bytes after validating length, padding and scales.
    pub fn from_raw(
        in_features: usize,
        out_features: usize,
        codes: Vec<u8>,
        dequant_re: f32,
        dequant_im: f32,
    ) -> Result<Self> {
        let bpr = Self::bytes_per_row(in_features);
        if codes.len() != bpr * out_features {
            return Err(Error::format(
                "codes",
                format!(
                    "expected {} bytes for {in_features}x{out_features}, got {}",
                    bpr * out_features,
                    codes.len()
                ),
            ));
        }
        if !(dequant_re > 0.0 && dequant_re.is_finite()) {
            return Err(Error::format("dequant_re", format!("must be positive, got {dequant_re}")));
        }
        if !(dequant_im > 0.0 && dequant_im.is_finite()) {
            return Err(Error::format("dequant_im", format!("must be positive, got {dequant_im}")));
        }
        let tail = in_features % 4;
        if tail != 0 {
            let mask = !((1u8 << (2 * tail)) - 1);
            if codes.chunks_exact(bpr).any(|row| row[bpr - 1] & mask != 0) {
                return Err(Error::format("codes", "non-zero padding bits in trailing byte"));
            }
        }
        Ok(Self {
            in_features,
            out_features,
            codes,
            dequant_re,
            dequant_im,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn dequant_re(&self) -> f32 {
        self.dequant_re
    }

    pub fn dequant_im(&self) -> f32 {
        self.dequant_im
    }

    /// Packed bytes of output column `j`.
    pub fn column_bytes(&self, j: usize) -> &[u8] {
        let bpr = Self::bytes_per_row(self.in_features);
        &self.codes[j * bpr..(j + 1) * bpr]
    }

    /// Codeword for input row `t`, output column `j`.
    #[inline]
    pub fn code(&self, t: usize, j: usize) -> Codeword {
        let byte = self.column_bytes(j)[t / 4];
        Codeword::from_bits(byte >> (2 * (t % 4)))
    }

    /// Unpacks into a row-major `k x n` code matrix.
    pub fn unpack_codes(&self) -> Vec<Codeword> {
        let mut out = Vec::with_capacity(self.in_features * self.out_features);
        for t in 0..self.in_features {
            for j in 0..self.out_features {
                out.push(self.code(t, j));
            }
        }
        out
    }

    /// Occurrences of each codeword, indexed by code value.
    pub fn histogram(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for c in self.unpack_codes() {
            counts[c.bits() as usize] += 1;
        }
        counts
    }
}

/// Projects, scales and packs a `k x n` complex weight matrix.
pub fn quantize_weights(w: &ComplexTensor) -> Result<PackedQuantTensor> {
    if w.shape().len() != 2 {
        return Err(Error::shape(
            "quantize_weights",
            format!("expected a 2-D matrix, got {:?}", w.shape()),
        ));
    }
    if w.is_empty() {
        return Err(Error::shape("quantize_weights", "empty weight tensor"));
    }
    let codes = project_all(w);
    let (m_re, m_im) = class_means(w, &codes);
    PackedQuantTensor::from_codes(w.shape()[0], w.shape()[1], &codes, m_re as f32, m_im as f32)
}

/// Expands a packed matrix back to `k x n` complex values in
/// `{+-dequant_re, +-i dequant_im}`.
pub fn dequantize_weights(p: &PackedQuantTensor) -> Result<ComplexTensor> {
    // Revalidate: the fields may come straight from an untrusted file.
    let p = PackedQuantTensor::from_raw(
        p.in_features,
        p.out_features,
        p.codes.clone(),
        p.dequant_re,
        p.dequant_im,
    )?;
    let (dr, di) = (p.dequant_re as f64, p.dequant_im as f64);
    let (k, n) = (p.in_features, p.out_features);
    let mut out = ComplexTensor::zeros(vec![k, n]);
    for t in 0..k {
        for j in 0..n {
            let (vr, vi) = p.code(t, j).value();
            out.set(t * n + j, (vr * dr, vi * di));
        }
    }
    Ok(out)
}

/// `dequantize_weights(quantize_weights(w))`, the forward value of a
/// quantized projection during training.
pub fn fake_quantize_weights(w: &ComplexTensor) -> Result<ComplexTensor> {
    dequantize_weights(&quantize_weights(w)?)
}

/// Per-token INT8 activations for the real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantActivation {
    tokens: usize,
    dim: usize,
    q_re: Vec<i8>,
    q_im: Vec<i8>,
    scale_re: Vec<f64>,
    scale_im: Vec<f64>,
}

impl QuantActivation {
    pub fn new(
        tokens: usize,
        dim: usize,
        q_re: Vec<i8>,
        q_im: Vec<i8>,
        scale_re: Vec<f64>,
        scale_im: Vec<f64>,
    ) -> Result<Self> {
        if q_re.len() != tokens * dim || q_im.len() != tokens * dim {
            return Err(Error::shape("QuantActivation::new", "integer plane length"));
        }
        if scale_re.len() != tokens || scale_im.len() != tokens {
            return Err(Error::shape("QuantActivation::new", "scale vector length"));
        }
        if scale_re.iter().chain(&scale_im).any(|&s| !(s > 0.0)) {
            return Err(Error::shape("QuantActivation::new", "scales must be positive"));
        }
        Ok(Self {
            tokens,
            dim,
            q_re,
            q_im,
            scale_re,
            scale_im,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn q_re(&self) -> &[i8] {
        &self.q_re
    }

    pub fn q_im(&self) -> &[i8] {
        &self.q_im
    }

    pub fn scale_re(&self) -> &[f64] {
        &self.scale_re
    }

    pub fn scale_im(&self) -> &[f64] {
        &self.scale_im
    }
}

/// Symmetric per-row INT8 quantization of one real plane.
pub fn quantize_plane(x: &[f64], dim: usize) -> (Vec<i8>, Vec<f64>) {
    let rows = if dim == 0 { 0 } else { x.len() / dim };
    let mut q = Vec::with_capacity(x.len());
    let mut scales = Vec::with_capacity(rows);
    for row in x.chunks_exact(dim.max(1)).take(rows) {
        let max = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let s = 127.0 / max.max(ACTIVATION_MAX_FLOOR);
        scales.push(s);
        // f64::round is round-half-away-from-zero
        q.extend(row.iter().map(|&v| (s * v).clamp(-128.0, 127.0).round() as i8));
    }
    (q, scales)
}

/// `round(clamp(s x, -128, 127)) / s` for each row of one plane.
pub fn fake_quantize_plane(x: &[f64], dim: usize) -> Vec<f64> {
    let (q, scales) = quantize_plane(x, dim);
    q.chunks_exact(dim.max(1))
        .zip(&scales)
        .flat_map(|(row, &s)| row.iter().map(move |&v| v as f64 / s))
        .collect()
}

/// Quantizes a `[.., d]` activation; every leading index is one token.
pub fn quantize_activation(x: &ComplexTensor) -> QuantActivation {
    let (tokens, dim) = (x.rows(), x.cols());
    let (q_re, scale_re) = quantize_plane(x.re(), dim);
    let (q_im, scale_im) = quantize_plane(x.im(), dim);
    QuantActivation {
        tokens,
        dim,
        q_re,
        q_im,
        scale_re,
        scale_im,
    }
}

/// `q / scale` per token and component, as a `tokens x dim` tensor.
pub fn dequantize_activation(a: &QuantActivation) -> ComplexTensor {
    let d = a.dim.max(1);
    let expand = |q: &[i8], s: &[f64]| -> Vec<f64> {
        q.chunks_exact(d)
            .zip(s)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v as f64 / s))
            .collect()
    };
    ComplexTensor::new(
        vec![a.tokens, a.dim],
        expand(&a.q_re, &a.scale_re),
        expand(&a.q_im, &a.scale_im),
    )
    .expect("planes sized by construction")
}
