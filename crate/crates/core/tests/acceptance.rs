//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::f64::consts::{FRAC_PI_4, PI};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use phase2bit_core::checkpoint::{decode_checkpoint, decode_header, encode_checkpoint, SaveMode, TensorKind};
use phase2bit_core::corpus::{synthetic_text, Corpus, Tokenizer};
use phase2bit_core::kernel::{lut_accumulate, lut_gemm, multfree_accumulate, multfree_gemm, multfree_term};
use phase2bit_core::model::{apply_rope, attention_forward, attention_scores, forward_batch, model_forward, Mode};
use phase2bit_core::quantize::{
    dequantize_activation, dequantize_weights, phase_project, quantize_activation, quantize_weights,
};
use phase2bit_core::tensor::hermitian_matmul;
use phase2bit_core::training::{loss_and_grads, train_loop, TrainHyper, TrainOutput};
use phase2bit_core::{analysis, Codeword, ComplexTensor, Model, ModelConfig, PackedQuantTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PHASE_SAMPLES: usize = 100_000;
const PHASE_BUDGET: Duration = Duration::from_secs(1);
const TABLE_SAMPLES: usize = 10_000;
const KERNEL_RTOL: f64 = 1e-5;
const KERNEL_BUDGET: Duration = Duration::from_secs(30);
const QAT_LUT_RTOL: f64 = 1e-4;
const QAT_LUT_BUDGET: Duration = Duration::from_secs(10);
const FD_STEP: f64 = 1e-5;
const FD_MAX_REL: f64 = 1e-4;
const FD_MIN_PARAMS: usize = 50;
const ROPE_RTOL: f64 = 1e-6;
const ROPE_MAG_TOL: f64 = 1e-12;
const CONCAT_RTOL: f64 = 1e-5;
const CONCAT_INSTANCES: usize = 20;
const TRAIN_CORPUS_BYTES: usize = 100_000;
const TRAIN_STEPS: usize = 500;
const TRAIN_LOSS_RATIO: f64 = 0.8;
const TRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const HIST_SUM_TOL: f64 = 1e-12;
const ACT_TOKENS: usize = 10_000;

/// Absolute slack for comparisons against values that are zero up to
/// rounding; far below every relative tolerance above.
const ROUNDING_FLOOR: f64 = 1e-12;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Worst ratio `|a - b| / (rtol * |b| + ROUNDING_FLOOR)` over paired
/// elements; the comparison passes when it is at most 1.
fn allclose_ratio(a: &[f64], b: &[f64], rtol: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (rtol * y.abs() + ROUNDING_FLOOR))
        .fold(0.0, f64::max)
}

fn complex_allclose_ratio(a: &ComplexTensor, b: &ComplexTensor, rtol: f64) -> f64 {
    allclose_ratio(a.re(), b.re(), rtol).max(allclose_ratio(a.im(), b.im(), rtol))
}

fn toy_model(seed: u64) -> Model {
    Model::init(ModelConfig::new(256, 64, 4, 128, 2, 128), seed).unwrap()
}

// 1 ---------------------------------------------------------------------

fn sector_oracle(re: f64, im: f64) -> Codeword {
    let theta = im.atan2(re);
    let k = (2.0 * theta / PI + 0.5).floor() as i64;
    Codeword::from_bits(k.rem_euclid(4) as u8)
}

fn phase_projection() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..PHASE_SAMPLES {
        let scale = 10f64.powi(rng.gen_range(-6..=6));
        let (re, im) = (rng.gen_range(-1.0..1.0) * scale, rng.gen_range(-1.0..1.0) * scale);
        if phase_project(re, im) != sector_oracle(re, im) {
            mismatches += 1;
        }
    }
    let mut boundary = Vec::new();
    for j in 0..8 {
        let angle = j as f64 * FRAC_PI_4 - if j > 4 { 2.0 * PI } else { 0.0 };
        let (re, im) = match j {
            0 => (1.0, 0.0),
            1 => (1.0, 1.0),
            2 => (0.0, 1.0),
            3 => (-1.0, 1.0),
            4 => (-1.0, 0.0),
            5 => (-1.0, -1.0),
            6 => (0.0, -1.0),
            _ => (1.0, -1.0),
        };
        check((f64::atan2(im, re) - angle).abs() < 1e-15, "boundary table")?;
        let got = phase_project(re, im);
        if got != sector_oracle(re, im) {
            mismatches += 1;
        }
        boundary.push(got.symbol());
    }
    let elapsed = start.elapsed();
    check(mismatches == 0, format!("{mismatches} mismatches"))?;
    check(elapsed < PHASE_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!(
        "{PHASE_SAMPLES} random + 8 boundary angles exact; boundaries -> {} ({elapsed:.2?})",
        boundary.join(" ")
    ))
}

// 2 ---------------------------------------------------------------------

fn multfree_rows() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..TABLE_SAMPLES {
        let x: (i32, i32) = (rng.gen::<i8>() as i32, rng.gen::<i8>() as i32);
        for code in Codeword::ALL {
            let (wr, wi) = code.value();
            let (wr, wi) = (wr as i32, wi as i32);
            // conj(x) * w with ordinary integer multiplication
            let want = (x.0 * wr + x.1 * wi, x.0 * wi - x.1 * wr);
            let got = multfree_term(x, code);
            check(got == want, format!("x={x:?} w={} -> {got:?}, want {want:?}", code.symbol()))?;
        }
    }
    check(multfree_term((3, 4), Codeword::PlusOne) == (3, -4), "row +1")?;
    check(multfree_term((3, 4), Codeword::PlusI) == (4, 3), "row +i")?;
    check(multfree_term((3, 4), Codeword::MinusI) == (-4, -3), "row -i")?;
    check(multfree_term((3, 4), Codeword::MinusOne) == (-3, 4), "row -1")?;
    Ok(format!("{TABLE_SAMPLES} activations x 4 rows exact"))
}

// 3 ---------------------------------------------------------------------

fn float_reference(a: &phase2bit_core::QuantActivation, w: &PackedQuantTensor) -> ComplexTensor {
    hermitian_matmul(&dequantize_activation(a), &dequantize_weights(w).unwrap()).unwrap()
}

fn kernel_chain() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;

    // k = 4: one column per weight byte
    let all_bytes: Vec<u8> = (0..=255).collect();
    let w = PackedQuantTensor::from_raw(4, 256, all_bytes, 0.37, 1.21).unwrap();
    for _ in 0..16 {
        let x = ComplexTensor::random_normal(vec![8, 4], 1.0, &mut rng);
        let a = quantize_activation(&x);
        check(
            multfree_accumulate(&a, &w).unwrap() == lut_accumulate(&a, &w).unwrap(),
            "k=4 accumulators differ",
        )?;
        let reference = float_reference(&a, &w);
        worst = worst.max(complex_allclose_ratio(&lut_gemm(&a, &w).unwrap(), &reference, KERNEL_RTOL));
        worst = worst.max(complex_allclose_ratio(&multfree_gemm(&a, &w).unwrap(), &reference, KERNEL_RTOL));
    }

    let mut instances = 0;
    for k in [32, 128] {
        for _ in 0..10 {
            let m = rng.gen_range(1..=16);
            let n = rng.gen_range(1..=48);
            let x = ComplexTensor::random_normal(vec![m, k], rng.gen_range(0.1..10.0), &mut rng);
            let wf = ComplexTensor::random_normal(vec![k, n], 0.05, &mut rng);
            let a = quantize_activation(&x);
            let w = quantize_weights(&wf).unwrap();
            check(
                multfree_accumulate(&a, &w).unwrap() == lut_accumulate(&a, &w).unwrap(),
                format!("k={k} accumulators differ"),
            )?;
            let reference = float_reference(&a, &w);
            worst = worst.max(complex_allclose_ratio(&lut_gemm(&a, &w).unwrap(), &reference, KERNEL_RTOL));
            worst = worst.max(complex_allclose_ratio(&multfree_gemm(&a, &w).unwrap(), &reference, KERNEL_RTOL));
            instances += 1;
        }
    }
    let elapsed = start.elapsed();
    check(worst <= 1.0, format!("float reference outside rtol {KERNEL_RTOL:e} (ratio {worst:.2})"))?;
    check(elapsed < KERNEL_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!(
        "lut == multfree bit-exact (all 256 bytes at k=4, {instances} random at k in {{32,128}}); \
         float reference within rtol {KERNEL_RTOL:e} (worst ratio {worst:.1e}) ({elapsed:.2?})"
    ))
}

// 4 ---------------------------------------------------------------------

fn qat_vs_lut() -> Outcome {
    let start = Instant::now();
    let model = toy_model(4);
    let packed = model.quantized().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids: Vec<usize> = (0..64).map(|_| rng.gen_range(0..256)).collect();
    let qat = model_forward(&ids, &model, Mode::Qat).map_err(|e| e.to_string())?;
    let lut = model_forward(&ids, &packed, Mode::Lut).map_err(|e| e.to_string())?;
    let rel = allclose_ratio(qat.data(), lut.data(), QAT_LUT_RTOL);
    let elapsed = start.elapsed();
    check(rel <= 1.0, format!("outside rtol {QAT_LUT_RTOL:e} (ratio {rel:.2})"))?;
    check(elapsed < QAT_LUT_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!("2-layer toy model, 64 tokens within rtol {QAT_LUT_RTOL:e} (worst ratio {rel:.1e}) ({elapsed:.2?})"))
}

// 5 ---------------------------------------------------------------------

fn set_param(model: &mut Model, param: usize, index: usize, value: f64) {
    let mut i = 0;
    model.visit_params_mut(&mut |_, p| {
        if i == param {
            p[index] = value;
        }
        i += 1;
    });
}

fn gradient_check() -> Outcome {
    let config = ModelConfig::new(16, 8, 2, 16, 2, 16);
    let mut model = Model::init(config, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // move gains off 1 so their gradients are not special
    model.visit_params_mut(&mut |name, p| {
        if name.contains("norm") {
            p.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
        }
    });
    let (batch, seq) = (2, 6);
    let inputs: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..16)).collect();
    let targets: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..16)).collect();
    let (_, grads) = loss_and_grads(&model, &inputs, &targets, batch, seq, Mode::FullPrecision).unwrap();
    let specs = model.param_specs();
    let values: Vec<Vec<f64>> = {
        let mut v = Vec::new();
        model.visit_params(&mut |_, _, d| v.push(d.to_vec()));
        v
    };

    let loss_at = |m: &Model| -> f64 {
        let logits = forward_batch(m, &inputs, batch, seq, Mode::FullPrecision).unwrap();
        phase2bit_core::training::cross_entropy(&logits, &targets).unwrap()
    };

    // every family, three entries each; embedding rows restricted to used tokens
    let mut checked = 0;
    let mut worst = (0.0f64, String::new());
    for (p, (name, shape)) in specs.iter().enumerate() {
        let numel: usize = shape.iter().product();
        for _ in 0..3 {
            let index = if name.starts_with("embed") {
                inputs[rng.gen_range(0..inputs.len())] * shape[1] + rng.gen_range(0..shape[1])
            } else {
                rng.gen_range(0..numel)
            };
            let x0 = values[p][index];
            set_param(&mut model, p, index, x0 + FD_STEP);
            let up = loss_at(&model);
            set_param(&mut model, p, index, x0 - FD_STEP);
            let down = loss_at(&model);
            set_param(&mut model, p, index, x0);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads[p][index];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{index}]"));
            }
            checked += 1;
        }
    }
    check(checked >= FD_MIN_PARAMS, format!("only {checked} parameters"))?;
    check(worst.0 < FD_MAX_REL, format!("max rel err {:.2e} at {}", worst.0, worst.1))?;
    Ok(format!(
        "{checked} parameters over {} tensors, max rel err {:.1e}",
        specs.len(),
        worst.0
    ))
}

// 6 ---------------------------------------------------------------------

fn head(x: &ComplexTensor, h: usize) -> ComplexTensor {
    let s = x.shape();
    let (seq, heads, dh) = (s[0], s[1], s[2]);
    let mut re = Vec::with_capacity(seq * dh);
    let mut im = Vec::with_capacity(seq * dh);
    for t in 0..seq {
        let off = (t * heads + h) * dh;
        re.extend_from_slice(&x.re()[off..off + dh]);
        im.extend_from_slice(&x.im()[off..off + dh]);
    }
    ComplexTensor::new(vec![seq, dh], re, im).unwrap()
}

fn rope_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (seq, heads, dh, base) = (12, 2, 8, 10_000.0);
    let q = ComplexTensor::random_normal(vec![seq, heads, dh], 1.0, &mut rng);
    let k = ComplexTensor::random_normal(vec![seq, heads, dh], 1.0, &mut rng);
    let pos: Vec<usize> = (0..seq).collect();
    let mut worst_shift = 0.0f64;
    let mut worst_mag = 0.0f64;
    let (q0, k0) = (apply_rope(&q, &pos, base).unwrap(), apply_rope(&k, &pos, base).unwrap());
    for x in [(&q, &q0), (&k, &k0)] {
        for i in 0..x.0.len() {
            let before = x.0.re()[i].hypot(x.0.im()[i]);
            let after = x.1.re()[i].hypot(x.1.im()[i]);
            worst_mag = worst_mag.max((before - after).abs());
        }
    }
    for delta in [1usize, 7, 100] {
        let shifted: Vec<usize> = pos.iter().map(|p| p + delta).collect();
        let qs = apply_rope(&q, &shifted, base).unwrap();
        let ks = apply_rope(&k, &shifted, base).unwrap();
        for h in 0..heads {
            let a = attention_scores(&head(&q0, h), &head(&k0, h)).unwrap();
            let b = attention_scores(&head(&qs, h), &head(&ks, h)).unwrap();
            worst_shift = worst_shift.max(allclose_ratio(b.data(), a.data(), ROPE_RTOL));
        }
    }
    check(worst_shift <= 1.0, format!("shifted scores outside rtol {ROPE_RTOL:e} (ratio {worst_shift:.2})"))?;
    check(worst_mag <= ROPE_MAG_TOL, format!("magnitude change {worst_mag:.2e}"))?;
    Ok(format!(
        "shift 1/7/100 within rtol {ROPE_RTOL:e} (worst ratio {worst_shift:.1e}); max magnitude change {worst_mag:.1e}"
    ))
}

// 7 ---------------------------------------------------------------------

/// Attention computed with complex arithmetic throughout: the score is
/// `Re(sum conj(q) k)`, the output a complex weighted sum of values.
fn direct_attention(q: &ComplexTensor, k: &ComplexTensor, v: &ComplexTensor, scale_dim: usize) -> ComplexTensor {
    let s = q.shape();
    let (seq, heads, dh) = (s[0], s[1], s[2]);
    let at = |x: &ComplexTensor, t: usize, h: usize, d: usize| {
        let i = (t * heads + h) * dh + d;
        (x.re()[i], x.im()[i])
    };
    let mut re = vec![0.0; seq * heads * dh];
    let mut im = vec![0.0; seq * heads * dh];
    for h in 0..heads {
        for i in 0..seq {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    let mut z = (0.0, 0.0);
                    for d in 0..dh {
                        let (a, b) = at(q, i, h, d);
                        let (c, e) = at(k, j, h, d);
                        // (a - ib)(c + ie)
                        z.0 += a * c + b * e;
                        z.1 += a * e - b * c;
                    }
                    z.0 / (scale_dim as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for d in 0..dh {
                let o = (i * heads + h) * dh + d;
                for (j, e) in ex.iter().enumerate() {
                    let (vr, vi) = at(v, j, h, d);
                    re[o] += e / z * vr;
                    im[o] += e / z * vi;
                }
            }
        }
    }
    ComplexTensor::new(vec![seq, heads, dh], re, im).unwrap()
}

fn concat_trick() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..CONCAT_INSTANCES {
        let seq = rng.gen_range(1..=10);
        let heads = rng.gen_range(1..=3);
        let dh = rng.gen_range(1..=6);
        let shape = vec![seq, heads, dh];
        let q = ComplexTensor::random_normal(shape.clone(), 1.0, &mut rng);
        let k = ComplexTensor::random_normal(shape.clone(), 1.0, &mut rng);
        let v = ComplexTensor::random_normal(shape, 1.0, &mut rng);
        let got = attention_forward(&q, &k, &v, true, 2 * dh).unwrap();
        let want = direct_attention(&q, &k, &v, 2 * dh);
        worst = worst.max(complex_allclose_ratio(&got, &want, CONCAT_RTOL));
    }
    check(worst <= 1.0, format!("outside rtol {CONCAT_RTOL:e} (ratio {worst:.2})"))?;
    Ok(format!("{CONCAT_INSTANCES} random instances within rtol {CONCAT_RTOL:e} (worst ratio {worst:.1e})"))
}

// 8 ---------------------------------------------------------------------

fn storage() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (k, n) in [(4, 1), (64, 64), (128, 48), (1024, 1024)] {
        let w = quantize_weights(&ComplexTensor::random_normal(vec![k, n], 1.0, &mut rng)).unwrap();
        check(w.codes().len() == (k * n).div_ceil(4), format!("{k}x{n}: {} code bytes", w.codes().len()))?;
    }
    let mut model = toy_model(8);
    model.round_to_f32();
    let q = encode_checkpoint(&model, SaveMode::Quantized).unwrap();
    let header = decode_header(&q).unwrap();
    let mut packed = 0;
    for e in &header.entries {
        if e.kind == TensorKind::PackedQ2 {
            let want = (e.dims[0] * e.dims[1]).div_ceil(4) + 8;
            check(e.length as usize == want, format!("{}: {} payload bytes, want {want}", e.name, e.length))?;
            packed += 1;
        }
    }
    check(packed == 14, format!("{packed} packed tensors"))?;
    let back = decode_checkpoint(&q).unwrap();
    check(back == model.quantized().unwrap(), "quantized roundtrip differs")?;
    check(encode_checkpoint(&back, SaveMode::Quantized).unwrap() == q, "quantized re-save differs")?;
    let full = encode_checkpoint(&model, SaveMode::Full).unwrap();
    let back = decode_checkpoint(&full).unwrap();
    check(back == model, "full roundtrip differs")?;
    check(encode_checkpoint(&back, SaveMode::Full).unwrap() == full, "full re-save differs")?;
    Ok(format!(
        "payload = ceil(kn/4) + 8 for all {packed} packed tensors; 1024x1024 -> 262144 code bytes; \
         full and quantized roundtrips bit-identical"
    ))
}

// 9, 10 -----------------------------------------------------------------

fn tail_mean(out: &TrainOutput, n: usize) -> f64 {
    let t = &out.trace[out.trace.len() - n..];
    t.iter().map(|r| r.loss).sum::<f64>() / n as f64
}

struct Trained {
    qat: TrainOutput,
}

fn desk_training() -> (Outcome, Option<Trained>) {
    let start = Instant::now();
    let text = synthetic_text(9, TRAIN_CORPUS_BYTES);
    let corpus = Corpus::from_bytes(&text, &Tokenizer::Bytes).unwrap();
    let config = ModelConfig::new(256, 64, 4, 128, 2, 128);
    let hyper = TrainHyper {
        total_steps: TRAIN_STEPS,
        warmup_steps: TRAIN_STEPS / 50,
        seed: 9,
        ..TrainHyper::default()
    };
    let qat = match train_loop(&corpus, config.clone(), hyper.clone(), Mode::Qat) {
        Ok(o) => o,
        Err(e) => return (Err(e.to_string()), None),
    };
    let fp = match train_loop(&corpus, config, hyper, Mode::FullPrecision) {
        Ok(o) => o,
        Err(e) => return (Err(e.to_string()), None),
    };
    let elapsed = start.elapsed();
    let initial = qat.trace[0].loss;
    let qat_final = tail_mean(&qat, 10);
    let fp_final = tail_mean(&fp, 10);
    let summary = format!(
        "qat {initial:.3} -> {qat_final:.3} (ratio {:.3}); full precision final {fp_final:.3}; {elapsed:.1?} for both runs",
        qat_final / initial
    );
    let outcome = (|| {
        check(qat_final < TRAIN_LOSS_RATIO * initial, format!("(a) failed: {summary}"))?;
        check(fp_final <= qat_final, format!("(b) failed: {summary}"))?;
        check(elapsed < TRAIN_BUDGET, format!("over budget: {summary}"))?;
        Ok(summary.clone())
    })();
    (outcome, Some(Trained { qat }))
}

fn codebook_report(trained: Option<&Trained>) -> Outcome {
    let trained = trained.ok_or("no trained model (criterion 9 did not run)")?;
    let q = trained.qat.model.quantized().map_err(|e| e.to_string())?;
    let report = analysis::analyze(&q).map_err(|e| e.to_string())?;
    for m in &report.matrices {
        let s: f64 = m.histogram.frequencies.iter().sum();
        check((s - 1.0).abs() <= HIST_SUM_TOL, format!("layer {} {}: sum {s}", m.layer, m.matrix))?;
        check(
            m.histogram.total() == m.in_features * m.out_features,
            format!("layer {} {}: count mismatch", m.layer, m.matrix),
        )?;
    }
    let f = report.overall.frequencies;
    check(f.iter().all(|&p| p > 0.0), format!("unused codeword: {f:?}"))?;
    Ok(format!(
        "sums exact; overall +1 {:.4} +i {:.4} -1 {:.4} -i {:.4}, entropy {:.4} bits",
        f[0], f[1], f[2], f[3], report.overall_entropy_bits
    ))
}

// 11 --------------------------------------------------------------------

fn activation_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 16;
    let mut re = Vec::with_capacity(ACT_TOKENS * dim);
    let mut im = Vec::with_capacity(ACT_TOKENS * dim);
    for _ in 0..ACT_TOKENS {
        let scale = 10f64.powi(rng.gen_range(-4..=4));
        for _ in 0..dim {
            re.push(rng.gen_range(-1.0..1.0) * scale);
            im.push(rng.gen_range(-1.0..1.0) * scale);
        }
    }
    let x = ComplexTensor::new(vec![ACT_TOKENS, dim], re, im).unwrap();
    let a = quantize_activation(&x);
    let y = dequantize_activation(&a);
    let mut worst = 0.0f64;
    for t in 0..ACT_TOKENS {
        for d in 0..dim {
            let i = t * dim + d;
            let er = (x.re()[i] - y.re()[i]).abs() * a.scale_re()[t];
            let ei = (x.im()[i] - y.im()[i]).abs() * a.scale_im()[t];
            worst = worst.max(er).max(ei);
            check(
                (x.re()[i] - y.re()[i]).abs() <= 0.5 / a.scale_re()[t]
                    && (x.im()[i] - y.im()[i]).abs() <= 0.5 / a.scale_im()[t],
                format!("token {t} dim {d} exceeds 0.5/scale"),
            )?;
        }
    }
    Ok(format!("{ACT_TOKENS} tokens, worst error {worst:.6} / scale"))
}

// 12 --------------------------------------------------------------------

fn greedy(model: &Model, prompt: &[usize], n: usize) -> Vec<usize> {
    let mut ids = prompt.to_vec();
    let v = model.config.vocab_size;
    for _ in 0..n {
        let logits = model_forward(&ids, model, Mode::Lut).unwrap();
        let last = &logits.data()[logits.len() - v..];
        let next = (0..v).fold(0, |b, i| if last[i] > last[b] { i } else { b });
        ids.push(next);
    }
    ids
}

fn determinism() -> Outcome {
    let text = synthetic_text(12, 20_000);
    let corpus = Corpus::from_bytes(&text, &Tokenizer::Bytes).unwrap();
    let config = ModelConfig::new(256, 32, 4, 64, 2, 64);
    let hyper = TrainHyper {
        batch_size: 4,
        seq_len: 64,
        total_steps: 20,
        warmup_steps: 1,
        seed: 12,
        ..TrainHyper::default()
    };
    let run = || {
        let out = train_loop(&corpus, config.clone(), hyper.clone(), Mode::Qat).unwrap();
        let mut model = out.model;
        model.round_to_f32();
        let ckpt = encode_checkpoint(&model, SaveMode::Quantized).unwrap();
        let text = greedy(&decode_checkpoint(&ckpt).unwrap(), &text[..8].iter().map(|&b| b as usize).collect::<Vec<_>>(), 24);
        (out.trace, ckpt, text)
    };
    let a = run();
    let b = run();
    check(a.0 == b.0, "loss traces differ")?;
    check(a.1 == b.1, "checkpoints differ")?;
    check(a.2 == b.2, "generated text differs")?;
    Ok(format!(
        "two runs: {} loss records, {}-byte checkpoint, {} generated tokens identical",
        a.0.len(),
        a.1.len(),
        a.2.len() - 8
    ))
}

// -----------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn report(n: usize, title: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(detail) => println!("criterion {n:>2} PASS  {title}: {detail}"),
        Err(detail) => println!("criterion {n:>2} FAIL  {title}: {detail}"),
    }
    outcome.is_ok()
}

fn main() {
    let mut passed = Vec::new();
    passed.push(report(1, "phase projection vs sector oracle", &guarded(phase_projection)));
    passed.push(report(2, "multiplication-free terms", &guarded(multfree_rows)));
    passed.push(report(3, "kernel equivalence chain", &guarded(kernel_chain)));
    passed.push(report(4, "qat forward vs lut inference", &guarded(qat_vs_lut)));
    passed.push(report(5, "gradients vs central differences", &guarded(gradient_check)));
    passed.push(report(6, "rope relative-position invariance", &guarded(rope_invariance)));
    passed.push(report(7, "attention concat trick", &guarded(concat_trick)));
    passed.push(report(8, "2-bit storage and checkpoint roundtrip", &guarded(storage)));
    let (outcome, trained) = match catch_unwind(desk_training) {
        Ok(r) => r,
        Err(_) => (Err("panicked".into()), None),
    };
    passed.push(report(9, "desk-scale training", &outcome));
    passed.push(report(10, "codebook utilization", &guarded(|| codebook_report(trained.as_ref()))));
    passed.push(report(11, "activation quantization bound", &guarded(activation_bound)));
    passed.push(report(12, "determinism", &guarded(determinism)));
    let ok = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {ok}/{} criteria passed", passed.len());
    if ok != passed.len() {
        std::process::exit(1);
    }
}
