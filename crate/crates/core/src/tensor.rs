//! Split-plane complex tensors.
//!
//! A [`ComplexTensor`] keeps its real and imaginary components in two
//! separate contiguous row-major planes. Every operation here treats a
//! tensor as a matrix of `rows x last_dim`, where `rows` is the product of
//! all leading axes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default epsilon for component-wise RMS normalization.
pub const DEFAULT_NORM_EPS: f64 = 1e-6;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Real row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn random_normal<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..numel(&shape)).map(|_| normal.sample(rng)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        if self.cols() == 0 {
            0
        } else {
            self.data.len() / self.cols()
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::shape(
                "Tensor::reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Complex tensor stored as two real planes of identical shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: Vec<usize>, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n = numel(&shape);
        if re.len() != n || im.len() != n {
            return Err(Error::shape(
                "ComplexTensor::new",
                format!(
                    "shape {:?} needs {} values per plane, got re={} im={}",
                    shape,
                    n,
                    re.len(),
                    im.len()
                ),
            ));
        }
        Ok(Self { shape, re, im })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    /// Builds a tensor from `(re, im)` pairs.
    pub fn from_pairs(shape: Vec<usize>, values: &[(f64, f64)]) -> Result<Self> {
        let re = values.iter().map(|v| v.0).collect();
        let im = values.iter().map(|v| v.1).collect();
        Self::new(shape, re, im)
    }

    /// Both planes drawn i.i.d. from `N(0, std^2)`.
    pub fn random_normal<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let re = Tensor::random_normal(shape.clone(), std, rng).into_data();
        let im = Tensor::random_normal(shape.clone(), std, rng).into_data();
        Self { shape, re, im }
    }

    pub fn from_planes(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::shape(
                "ComplexTensor::from_planes",
                format!("re {:?} vs im {:?}", re.shape(), im.shape()),
            ));
        }
        let shape = re.shape().to_vec();
        Ok(Self {
            shape,
            re: re.into_data(),
            im: im.into_data(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [f64] {
        &mut self.im
    }

    /// Mutable access to both planes at once.
    pub fn planes_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.re, &mut self.im)
    }

    pub fn re_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.re.clone(),
        }
    }

    pub fn im_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.im.clone(),
        }
    }

    pub fn into_planes(self) -> (Tensor, Tensor) {
        (
            Tensor {
                shape: self.shape.clone(),
                data: self.re,
            },
            Tensor {
                shape: self.shape,
                data: self.im,
            },
        )
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        if self.cols() == 0 {
            0
        } else {
            self.re.len() / self.cols()
        }
    }

    /// Element `i` of the flattened tensor as `(re, im)`.
    pub fn get(&self, i: usize) -> (f64, f64) {
        (self.re[i], self.im[i])
    }

    pub fn set(&mut self, i: usize, value: (f64, f64)) {
        self.re[i] = value.0;
        self.im[i] = value.1;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.re.len() {
            return Err(Error::shape(
                "ComplexTensor::reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Multiplies both planes by a real scalar.
    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            re: self.re.iter().map(|v| v * alpha).collect(),
            im: self.im.iter().map(|v| v * alpha).collect(),
        }
    }

    /// Elementwise complex conjugate.
    pub fn conj(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            re: self.re.clone(),
            im: self.im.iter().map(|v| -v).collect(),
        }
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-D, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Self::zeros(vec![c, r]);
        for i in 0..r {
            for j in 0..c {
                out.re[j * r + i] = self.re[i * c + j];
                out.im[j * r + i] = self.im[i * c + j];
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| (a.0 + b.0, a.1 + b.1))
    }

    fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn((f64, f64), (f64, f64)) -> (f64, f64),
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let mut out = Self::zeros(self.shape.clone());
        for i in 0..self.len() {
            out.set(i, f(self.get(i), other.get(i)));
        }
        Ok(out)
    }
}

/// Row-major real GEMM: `c = beta * c + op(a) * op(b)`.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`
/// when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the slices checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Hermitian projection `Y = conj(x) W`.
///
/// `x` is `[.., k]` (all leading axes flattened into rows), `W` is `[k, n]`.
/// The result keeps the leading axes of `x` and ends in `n`.
pub fn hermitian_matmul(x: &ComplexTensor, w: &ComplexTensor) -> Result<ComplexTensor> {
    if w.shape().len() != 2 || x.cols() != w.shape()[0] {
        return Err(Error::shape(
            "hermitian_matmul",
            format!("x {:?} incompatible with W {:?}", x.shape(), w.shape()),
        ));
    }
    let (m, k, n) = (x.rows(), x.cols(), w.shape()[1]);
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = n;
    let mut out = ComplexTensor::zeros(out_shape);
    let (yre, yim) = out.planes_mut();
    // Y_re = x_re W_re + x_im W_im
    gemm(m, k, n, x.re(), false, w.re(), false, 0.0, yre);
    gemm(m, k, n, x.im(), false, w.im(), false, 1.0, yre);
    // Y_im = x_re W_im - x_im W_re
    gemm(m, k, n, x.im(), false, w.re(), false, 0.0, yim);
    yim.iter_mut().for_each(|v| *v = -*v);
    gemm(m, k, n, x.re(), false, w.im(), false, 1.0, yim);
    Ok(out)
}

/// Elementwise complex product `(ac - bd) + i(ad + bc)`.
pub fn complex_elementwise_mul(a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
    a.zip_with(b, "complex_elementwise_mul", |(ar, ai), (br, bi)| {
        (ar * br - ai * bi, ar * bi + ai * br)
    })
}

#[inline]
pub fn relu2_scalar(x: f64) -> f64 {
    let r = x.max(0.0);
    r * r
}

/// Squared ReLU applied independently to each plane.
pub fn relu2(z: &ComplexTensor) -> ComplexTensor {
    ComplexTensor {
        shape: z.shape.clone(),
        re: z.re.iter().map(|&v| relu2_scalar(v)).collect(),
        im: z.im.iter().map(|&v| relu2_scalar(v)).collect(),
    }
}

/// RMS-normalizes each row of one real plane, then applies `gain`.
pub fn rmsnorm_plane(x: &[f64], d: usize, gain: &[f64], eps: f64, out: &mut [f64]) {
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let denom = (ms + eps).sqrt();
        let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        for ((o, &v), &g) in orow.iter_mut().zip(row).zip(gain) {
            *o = v * inv * g;
        }
    }
}

/// RMSNorm applied to the real and imaginary planes separately over the
/// trailing axis.
pub fn rmsnorm_componentwise(
    x: &ComplexTensor,
    gain_re: &[f64],
    gain_im: &[f64],
    eps: f64,
) -> Result<ComplexTensor> {
    let d = x.cols();
    if gain_re.len() != d || gain_im.len() != d {
        return Err(Error::shape(
            "rmsnorm_componentwise",
            format!("feature dim {d}, gains {} / {}", gain_re.len(), gain_im.len()),
        ));
    }
    let mut out = ComplexTensor::zeros(x.shape().to_vec());
    if d == 0 {
        return Ok(out);
    }
    let (ore, oim) = out.planes_mut();
    rmsnorm_plane(x.re(), d, gain_re, eps, ore);
    rmsnorm_plane(x.im(), d, gain_im, eps, oim);
    Ok(out)
}
