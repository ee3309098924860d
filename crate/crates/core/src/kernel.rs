//! Integer inference kernels for 2-bit complex weights.
//!
//! Against a codeword, `conj(x) * w` reduces to a negation and/or a swap of
//! the activation components:
//!
//! | w  | conj(x) * w        |
//! |----|--------------------|
//! | +1 | x_re - i x_im      |
//! | -1 | -x_re + i x_im     |
//! | +i | x_im + i x_re      |
//! | -i | -x_im - i x_re     |
//!
//! Both kernels accumulate these terms in `i32` and apply floating-point
//! scales once per output element. Real-codeword and imaginary-codeword
//! contributions go to separate accumulator pairs because they pick up
//! different activation scales (`+-1` keeps `x_re` in the real output, `+-i`
//! moves `x_im` there) and different weight scales.

use std::ops::{Add, Neg};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::quantize::{
    dequantize_activation, dequantize_weights, quantize_weights, Codeword, PackedQuantTensor,
    QuantActivation,
};
use crate::tensor::{hermitian_matmul, ComplexTensor};

/// Largest inner dimension for which `k * 128` fits in an `i32`.
pub const MAX_INNER_DIM: usize = 1 << 15;

/// `conj(x) * w` for a codeword `w`, using only negation and component swaps.
///
/// Generic over the lane type so the absence of multiplication is enforced by
/// the trait bounds rather than by inspection.
#[inline(always)]
pub fn multfree_term<T>(x: (T, T), code: Codeword) -> (T, T)
where
    T: Copy + Neg<Output = T>,
{
    let (re, im) = x;
    match code {
        Codeword::PlusOne => (re, -im),
        Codeword::MinusOne => (-re, im),
        Codeword::PlusI => (im, re),
        Codeword::MinusI => (-im, -re),
    }
}

/// Integer partial sums for one output element.
///
/// `*_real` collect terms from `+-1` weights, `*_imag` from `+-i` weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ComplexAccumulator {
    pub re_real: i32,
    pub im_real: i32,
    pub re_imag: i32,
    pub im_imag: i32,
}

impl ComplexAccumulator {
    /// Adds the term for activation `x` against codeword `code`.
    ///
    /// Branch-free form of [`multfree_term`]: bit 0 of the code swaps the
    /// planes and routes to the imaginary-codeword lanes, bit 1 negates the
    /// real output, and the imaginary output is negated when the two bits
    /// agree. Negation is `(v ^ m) - m` with an all-ones or all-zeros mask.
    #[inline(always)]
    pub fn push(&mut self, x: (i32, i32), code: Codeword) {
        self.push_bits(x.0, x.1, code.bits());
    }

    #[inline(always)]
    fn push_bits(&mut self, re: i32, im: i32, bits: u8) {
        let swap = -((bits & 1) as i32);
        let neg = -((bits >> 1) as i32);
        let a = (re & !swap) | (im & swap);
        let b = (im & !swap) | (re & swap);
        let out_re = (a ^ neg) - neg;
        let flip = !(swap ^ neg);
        let out_im = (b ^ flip) - flip;
        self.re_real += out_re & !swap;
        self.im_real += out_im & !swap;
        self.re_imag += out_re & swap;
        self.im_imag += out_im & swap;
    }

    /// Combined `(re, im)` sum, i.e. the unscaled `sum conj(x) * w`.
    pub fn total(&self) -> (i32, i32) {
        (self.re_real + self.re_imag, self.im_real + self.im_imag)
    }

    /// Applies activation and weight scales:
    /// `re = re_real*dr/s_re + re_imag*di/s_im`,
    /// `im = im_real*dr/s_im + im_imag*di/s_re`.
    #[inline]
    pub fn scale(&self, s_re: f64, s_im: f64, dr: f64, di: f64) -> (f64, f64) {
        (
            self.re_real as f64 * (dr / s_re) + self.re_imag as f64 * (di / s_im),
            self.im_real as f64 * (dr / s_im) + self.im_imag as f64 * (di / s_re),
        )
    }
}

impl Add for ComplexAccumulator {
    type Output = Self;

    #[inline(always)]
    fn add(self, o: Self) -> Self {
        Self {
            re_real: self.re_real + o.re_real,
            im_real: self.im_real + o.im_real,
            re_imag: self.re_imag + o.re_imag,
            im_imag: self.im_imag + o.im_imag,
        }
    }
}

/// 256-entry table of 4-term partial sums for one group of four activations,
/// indexed by a packed weight byte.
#[derive(Debug, Clone, PartialEq)]
pub struct Lut256 {
    entries: Box<[ComplexAccumulator; 256]>,
}

impl Lut256 {
    #[inline(always)]
    pub fn get(&self, byte: u8) -> ComplexAccumulator {
        self.entries[byte as usize]
    }

    pub fn entries(&self) -> &[ComplexAccumulator; 256] {
        &self.entries
    }
}

/// Builds the table by doubling: after step `k` the first `4^(k+1)` entries
/// hold every combination of the first `k+1` codes. Additions only.
pub fn build_lut(group: &[(i8, i8); 4]) -> Lut256 {
    let mut entries = Box::new([ComplexAccumulator::default(); 256]);
    let mut len = 1usize;
    for (k, &(re, im)) in group.iter().enumerate() {
        let x = (re as i32, im as i32);
        let mut terms = [ComplexAccumulator::default(); 4];
        for c in Codeword::ALL {
            terms[c.bits() as usize].push(x, c);
        }
        // fill the upper blocks from the lower one before overwriting it
        for c in (0..4usize).rev() {
            for low in 0..len {
                entries[(c << (2 * k)) | low] = entries[low] + terms[c];
            }
        }
        len *= 4;
    }
    Lut256 { entries }
}

fn check_dims(a: &QuantActivation, w: &PackedQuantTensor) -> Result<()> {
    if a.dim() != w.in_features() {
        return Err(Error::shape(
            "gemm",
            format!(
                "activation dim {} vs weight in_features {}",
                a.dim(),
                w.in_features()
            ),
        ));
    }
    if a.dim() > MAX_INNER_DIM {
        return Err(Error::Config(format!(
            "inner dimension {} exceeds the i32 accumulator bound {MAX_INNER_DIM}",
            a.dim()
        )));
    }
    Ok(())
}

/// Direct kernel: walks the inner axis and pushes one term per weight.
/// Returns `m x n` accumulators.
pub fn multfree_accumulate(
    a: &QuantActivation,
    w: &PackedQuantTensor,
) -> Result<Vec<ComplexAccumulator>> {
    check_dims(a, w)?;
    let (k, n) = (a.dim(), w.out_features());
    let mut out = vec![ComplexAccumulator::default(); a.tokens() * n];
    if n == 0 {
        return Ok(out);
    }
    out.par_chunks_mut(n).enumerate().for_each(|(row, acc_row)| {
        let xr = &a.q_re()[row * k..(row + 1) * k];
        let xi = &a.q_im()[row * k..(row + 1) * k];
        for (j, acc) in acc_row.iter_mut().enumerate() {
            let bytes = w.column_bytes(j);
            for (g, &byte) in bytes.iter().enumerate() {
                let base = 4 * g;
                for s in 0..4.min(k - base) {
                    let t = base + s;
                    acc.push_bits(xr[t] as i32, xi[t] as i32, (byte >> (2 * s)) & 0b11);
                }
            }
        }
    });
    Ok(out)
}

/// LUT kernel: one table per group of four activations, one lookup per
/// packed weight byte. The inner axis is padded with zero activations.
pub fn lut_accumulate(
    a: &QuantActivation,
    w: &PackedQuantTensor,
) -> Result<Vec<ComplexAccumulator>> {
    check_dims(a, w)?;
    let (k, n) = (a.dim(), w.out_features());
    let groups = k.div_ceil(4);
    let mut out = vec![ComplexAccumulator::default(); a.tokens() * n];
    if n == 0 {
        return Ok(out);
    }
    out.par_chunks_mut(n).enumerate().for_each(|(row, acc_row)| {
        let xr = &a.q_re()[row * k..(row + 1) * k];
        let xi = &a.q_im()[row * k..(row + 1) * k];
        let luts: Vec<Lut256> = (0..groups)
            .map(|g| {
                let mut group = [(0i8, 0i8); 4];
                for (s, slot) in group.iter_mut().enumerate() {
                    let t = 4 * g + s;
                    if t < k {
                        *slot = (xr[t], xi[t]);
                    }
                }
                build_lut(&group)
            })
            .collect();
        for (j, acc) in acc_row.iter_mut().enumerate() {
            *acc = w
                .column_bytes(j)
                .iter()
                .zip(&luts)
                .fold(ComplexAccumulator::default(), |s, (&b, lut)| s + lut.get(b));
        }
    });
    Ok(out)
}

fn scale_accumulators(
    acc: &[ComplexAccumulator],
    a: &QuantActivation,
    w: &PackedQuantTensor,
) -> ComplexTensor {
    let (m, n) = (a.tokens(), w.out_features());
    let (dr, di) = (w.dequant_re() as f64, w.dequant_im() as f64);
    let mut out = ComplexTensor::zeros(vec![m, n]);
    for row in 0..m {
        let (s_re, s_im) = (a.scale_re()[row], a.scale_im()[row]);
        for j in 0..n {
            out.set(row * n + j, acc[row * n + j].scale(s_re, s_im, dr, di));
        }
    }
    out
}

/// Multiplication-free quantized GEMM `conj(A) W`.
pub fn multfree_gemm(a: &QuantActivation, w: &PackedQuantTensor) -> Result<ComplexTensor> {
    let acc = multfree_accumulate(a, w)?;
    Ok(scale_accumulators(&acc, a, w))
}

/// LUT-accelerated quantized GEMM `conj(A) W`.
pub fn lut_gemm(a: &QuantActivation, w: &PackedQuantTensor) -> Result<ComplexTensor> {
    let acc = lut_accumulate(a, w)?;
    Ok(scale_accumulators(&acc, a, w))
}

/// Float reference: `hermitian_matmul` over the dequantized operands.
pub fn float_reference_gemm(a: &QuantActivation, w: &PackedQuantTensor) -> Result<ComplexTensor> {
    check_dims(a, w)?;
    hermitian_matmul(&dequantize_activation(a), &dequantize_weights(w)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelPath {
    FloatRef,
    Multfree,
    Lut,
}

impl KernelPath {
    pub const ALL: [KernelPath; 3] = [KernelPath::FloatRef, KernelPath::Multfree, KernelPath::Lut];

    pub fn name(self) -> &'static str {
        match self {
            KernelPath::FloatRef => "float_ref",
            KernelPath::Multfree => "multfree",
            KernelPath::Lut => "lut",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// True when the inner loop of this path contains no multiplications.
    pub fn multiply_free(self) -> bool {
        !matches!(self, KernelPath::FloatRef)
    }

    /// Estimated additions per call for an `m x k` by `k x n` product.
    pub fn additions(self, m: usize, k: usize, n: usize) -> u64 {
        let (m, k, n) = (m as u64, k as u64, n as u64);
        let groups = k.div_ceil(4);
        match self {
            // four real products summed per complex MAC
            KernelPath::FloatRef => 4 * m * n * k,
            // two integer lanes per term
            KernelPath::Multfree => 2 * m * n * k,
            // table construction (4 lanes, 255 new entries) plus 4 lanes per lookup
            KernelPath::Lut => m * groups * 4 * 255 + 4 * m * n * groups,
        }
    }
}

/// One benchmark measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub path: &'static str,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub reps: usize,
    pub ns_per_call: f64,
    pub weight_bytes: usize,
    pub additions: u64,
    pub multiply_free: bool,
}

/// Times each requested path on random operands of the given size.
pub fn bench(
    m: usize,
    k: usize,
    n: usize,
    reps: usize,
    paths: &[KernelPath],
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if m == 0 || k == 0 || n == 0 || reps == 0 {
        return Err(Error::Config(format!(
            "bench sizes and reps must be positive (m={m} k={k} n={n} reps={reps})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = ComplexTensor::random_normal(vec![k, n], 1.0, &mut rng);
    let packed = quantize_weights(&w)?;
    let expected_bytes = n * k.div_ceil(4);
    if packed.codes().len() != expected_bytes {
        return Err(Error::format(
            "codes",
            format!(
                "packed length {} != n*ceil(k/4) = {expected_bytes}",
                packed.codes().len()
            ),
        ));
    }
    let q = |rng: &mut ChaCha8Rng| -> Vec<i8> { (0..m * k).map(|_| rng.gen_range(-127..=127)).collect() };
    let (q_re, q_im) = (q(&mut rng), q(&mut rng));
    let scales: Vec<f64> = (0..m).map(|_| rng.gen_range(10.0..200.0)).collect();
    let act = QuantActivation::new(m, k, q_re, q_im, scales.clone(), scales)?;
    let x_deq = dequantize_activation(&act);
    let w_deq = dequantize_weights(&packed)?;

    let mut rows = Vec::with_capacity(paths.len());
    for &path in paths {
        let call = || -> Result<ComplexTensor> {
            match path {
                KernelPath::FloatRef => hermitian_matmul(&x_deq, &w_deq),
                KernelPath::Multfree => multfree_gemm(&act, &packed),
                KernelPath::Lut => lut_gemm(&act, &packed),
            }
        };
        // warm-up
        std::hint::black_box(call()?);
        let start = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(call()?);
        }
        let ns = start.elapsed().as_nanos() as f64 / reps as f64;
        rows.push(BenchRow {
            path: path.name(),
            m,
            k,
            n,
            reps,
            ns_per_call: ns,
            weight_bytes: packed.codes().len(),
            additions: path.additions(m, k, n),
            multiply_free: path.multiply_free(),
        });
    }
    Ok(rows)
}

/// Writes the normative benchmark columns:
/// `path,m,k,n,reps,ns_per_call,weight_bytes`.
pub fn write_bench_csv<W: std::io::Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path", "m", "k", "n", "reps", "ns_per_call", "weight_bytes"])?;
    for r in rows {
        w.write_record([
            r.path.to_string(),
            r.m.to_string(),
            r.k.to_string(),
            r.n.to_string(),
            r.reps.to_string(),
            format!("{:.1}", r.ns_per_call),
            r.weight_bytes.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<bench csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branch_free_push_matches_table_exhaustively() {
        for re in i8::MIN..=i8::MAX {
            for im in i8::MIN..=i8::MAX {
                let x = (re as i32, im as i32);
                for code in Codeword::ALL {
                    let mut acc = ComplexAccumulator::default();
                    acc.push(x, code);
                    let (tr, ti) = multfree_term(x, code);
                    let want = if code.is_real() {
                        (tr, ti, 0, 0)
                    } else {
                        (0, 0, tr, ti)
                    };
                    assert_eq!((acc.re_real, acc.im_real, acc.re_imag, acc.im_imag), want);
                }
            }
        }
    }

    fn brute_force_entry(group: &[(i8, i8); 4], byte: u8) -> ComplexAccumulator {
        let mut acc = ComplexAccumulator::default();
        for (s, &(re, im)) in group.iter().enumerate() {
            acc.push((re as i32, im as i32), Codeword::from_bits(byte >> (2 * s)));
        }
        acc
    }

    fn random_activation(m: usize, k: usize, rng: &mut ChaCha8Rng) -> QuantActivation {
        let q = |rng: &mut ChaCha8Rng| -> Vec<i8> { (0..m * k).map(|_| rng.gen_range(-128..=127)).collect() };
        let (a, b) = (q(rng), q(rng));
        let s_re = (0..m).map(|_| rng.gen_range(1.0..300.0)).collect();
        let s_im = (0..m).map(|_| rng.gen_range(1.0..300.0)).collect();
        QuantActivation::new(m, k, a, b, s_re, s_im).unwrap()
    }

    fn random_packed(k: usize, n: usize, rng: &mut ChaCha8Rng) -> PackedQuantTensor {
        let codes: Vec<_> = (0..k * n).map(|_| Codeword::from_bits(rng.gen())).collect();
        PackedQuantTensor::from_codes(k, n, &codes, rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0))
            .unwrap()
    }

    #[test]
    fn multfree_term_table_rows() {
        let x = (3i32, 4i32);
        assert_eq!(multfree_term(x, Codeword::PlusOne), (3, -4));
        assert_eq!(multfree_term(x, Codeword::MinusOne), (-3, 4));
        assert_eq!(multfree_term(x, Codeword::PlusI), (4, 3));
        assert_eq!(multfree_term(x, Codeword::MinusI), (-4, -3));
    }

    #[test]
    fn lut_entry_zero_and_symmetry() {
        let group = [(3, 4), (-7, 2), (127, -128), (0, 5)];
        let lut = build_lut(&group);
        let expected = group
            .iter()
            .fold((0, 0), |s, &(r, i)| (s.0 + r as i32, s.1 - i as i32));
        assert_eq!(lut.get(0).total(), expected);
        let neg = lut.get(0xAA).total();
        assert_eq!(neg, (-expected.0, -expected.1));
    }

    #[test]
    fn lut_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let group: [(i8, i8); 4] = std::array::from_fn(|_| (rng.gen(), rng.gen()));
            let lut = build_lut(&group);
            for b in 0..=255u8 {
                assert_eq!(lut.get(b), brute_force_entry(&group, b), "byte {b:#04x}");
            }
        }
    }

    #[test]
    fn single_group_lut_gemm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_activation(1, 4, &mut rng);
        let w = random_packed(4, 1, &mut rng);
        let group: [(i8, i8); 4] = std::array::from_fn(|t| (a.q_re()[t], a.q_im()[t]));
        let entry = build_lut(&group).get(w.codes()[0]);
        let acc = lut_accumulate(&a, &w).unwrap();
        assert_eq!(acc, vec![entry]);
    }

    #[test]
    fn hand_traced_1x4_by_4x1() {
        // x = [(10, 0), (0, 20), (-5, 5), (127, -1)], scales 127 on both planes
        // w = [+1, +i, -1, -i], dequant_re = 2, dequant_im = 0.5
        let a = QuantActivation::new(
            1,
            4,
            vec![10, 0, -5, 127],
            vec![0, 20, 5, -1],
            vec![127.0],
            vec![127.0],
        )
        .unwrap();
        let codes = [Codeword::PlusOne, Codeword::PlusI, Codeword::MinusOne, Codeword::MinusI];
        let w = PackedQuantTensor::from_codes(4, 1, &codes, 2.0, 0.5).unwrap();
        // +1: (10, -0)      -> re_real 10,  im_real 0
        // +i: (20, 0)       -> re_imag 20,  im_imag 0
        // -1: (5, 5)        -> re_real +5,  im_real +5
        // -i: (1, -127)     -> re_imag +1,  im_imag -127
        let acc = multfree_accumulate(&a, &w).unwrap()[0];
        assert_eq!(
            acc,
            ComplexAccumulator { re_real: 15, im_real: 5, re_imag: 21, im_imag: -127 }
        );
        let y = multfree_gemm(&a, &w).unwrap();
        let expect_re = 15.0 * 2.0 / 127.0 + 21.0 * 0.5 / 127.0;
        let expect_im = 5.0 * 2.0 / 127.0 - 127.0 * 0.5 / 127.0;
        assert!((y.re()[0] - expect_re).abs() < 1e-12);
        assert!((y.im()[0] - expect_im).abs() < 1e-12);
        let f = float_reference_gemm(&a, &w).unwrap();
        assert!((f.re()[0] - expect_re).abs() < 1e-12);
        assert!((f.im()[0] - expect_im).abs() < 1e-12);
    }

    #[test]
    fn all_plus_one_weights_sum_conjugates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (3, 9, 2);
        let a = random_activation(m, k, &mut rng);
        let w = PackedQuantTensor::from_codes(k, n, &vec![Codeword::PlusOne; k * n], 1.5, 1.0).unwrap();
        let y = lut_gemm(&a, &w).unwrap();
        let x = dequantize_activation(&a);
        for row in 0..m {
            let sr: f64 = x.re()[row * k..(row + 1) * k].iter().sum::<f64>() * 1.5;
            let si: f64 = -x.im()[row * k..(row + 1) * k].iter().sum::<f64>() * 1.5;
            for j in 0..n {
                assert!((y.re()[row * n + j] - sr).abs() < 1e-9);
                assert!((y.im()[row * n + j] - si).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unpadded_inner_dims_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in [1, 2, 3, 5, 7, 13] {
            let a = random_activation(4, k, &mut rng);
            let w = random_packed(k, 3, &mut rng);
            assert_eq!(multfree_accumulate(&a, &w).unwrap(), lut_accumulate(&a, &w).unwrap());
        }
    }

    #[test]
    fn zero_activations_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = QuantActivation::new(2, 8, vec![0; 16], vec![0; 16], vec![1.0; 2], vec![1.0; 2]).unwrap();
        let w = random_packed(8, 5, &mut rng);
        let y = lut_gemm(&a, &w).unwrap();
        assert!(y.re().iter().chain(y.im()).all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_activation(1, 8, &mut rng);
        let w = random_packed(4, 2, &mut rng);
        assert!(matches!(multfree_gemm(&a, &w), Err(Error::Shape { .. })));
        assert!(matches!(lut_gemm(&a, &w), Err(Error::Shape { .. })));

        let k = MAX_INNER_DIM + 4;
        let big = QuantActivation::new(1, k, vec![0; k], vec![0; k], vec![1.0], vec![1.0]).unwrap();
        let wb = PackedQuantTensor::from_codes(k, 1, &vec![Codeword::PlusOne; k], 1.0, 1.0).unwrap();
        assert!(matches!(multfree_gemm(&big, &wb), Err(Error::Config(_))));
        assert!(matches!(lut_gemm(&big, &wb), Err(Error::Config(_))));
    }

    #[test]
    fn bench_rows_and_weight_bytes() {
        let rows = bench(2, 16, 8, 2, &KernelPath::ALL, 0).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert_eq!(r.weight_bytes, 8 * 4);
            assert_eq!(r.reps, 2);
        }
        assert!(rows.iter().filter(|r| r.path != "float_ref").all(|r| r.multiply_free));
        let mut buf = Vec::new();
        write_bench_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("path,m,k,n,reps,ns_per_call,weight_bytes\n"));
        assert_eq!(text.lines().count(), 4);
        assert!(bench(0, 4, 4, 1, &KernelPath::ALL, 0).is_err());
    }

    #[test]
    fn packed_size_for_1024_square() {
        let p = PackedQuantTensor::from_codes(
            1024,
            1024,
            &vec![Codeword::PlusOne; 1024 * 1024],
            1.0,
            1.0,
        )
        .unwrap();
        assert_eq!(p.codes().len(), 262_144);
    }
}
