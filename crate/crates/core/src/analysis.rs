//! Statistics over quantized models: codebook utilization, weight norms and
//! embedding exports.
//!
//! CSV schemas:
//!
//! - histograms: `layer,matrix,symbol,count,frequency` (one row per codeword)
//! - norms: `layer,matrix,l2_norm`; per-layer totals use `matrix = "all"`
//! - embeddings: `token,dim,re,im`, rows mean-centered over tokens

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, Projection, PROJECTION_NAMES};
use crate::quantize::{Codeword, PackedQuantTensor};

/// Codeword counts in code order `+1, +i, -1, -i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Histogram {
    pub counts: [usize; 4],
    pub frequencies: [f64; 4],
}

impl Histogram {
    pub fn from_counts(counts: [usize; 4]) -> Self {
        let total: usize = counts.iter().sum();
        let frequencies = if total == 0 {
            [0.0; 4]
        } else {
            counts.map(|c| c as f64 / total as f64)
        };
        Self { counts, frequencies }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Entropy in bits; 2.0 for a perfectly balanced codebook.
    pub fn entropy_bits(&self) -> f64 {
        self.frequencies
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| -p * p.log2())
            .sum()
    }
}

pub fn codeword_histogram(w: &PackedQuantTensor) -> Histogram {
    Histogram::from_counts(w.histogram())
}

/// l2 norm of the dequantized matrix: every real-codeword entry has magnitude
/// `dequant_re`, every imaginary one `dequant_im`.
pub fn dequantized_l2_norm(w: &PackedQuantTensor) -> f64 {
    let c = w.histogram();
    let dr = w.dequant_re() as f64;
    let di = w.dequant_im() as f64;
    ((c[0] + c[2]) as f64 * dr * dr + (c[1] + c[3]) as f64 * di * di).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixStats {
    pub layer: usize,
    pub matrix: &'static str,
    pub in_features: usize,
    pub out_features: usize,
    pub dequant_re: f32,
    pub dequant_im: f32,
    pub histogram: Histogram,
    pub l2_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStats {
    pub layer: usize,
    /// Norm over all seven projections of the layer.
    pub l2_norm: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub matrices: Vec<MatrixStats>,
    pub layers: Vec<LayerStats>,
    pub overall: Histogram,
    pub overall_entropy_bits: f64,
}

/// Requires every projection to be packed.
pub fn analyze(model: &Model) -> Result<AnalysisReport> {
    let mut matrices = Vec::new();
    let mut layers = Vec::new();
    let mut overall = [0usize; 4];
    for (i, layer) in model.layers.iter().enumerate() {
        let mut layer_counts = [0usize; 4];
        let mut sq = 0.0;
        for (name, p) in PROJECTION_NAMES.iter().zip(layer.projections()) {
            let Projection::Packed(w) = p else {
                return Err(Error::Config(format!(
                    "layers.{i}.{name} is full precision; codebook histograms need a quantized \
                     checkpoint (run `quantize` first)"
                )));
            };
            let h = codeword_histogram(w);
            let norm = dequantized_l2_norm(w);
            sq += norm * norm;
            for c in 0..4 {
                layer_counts[c] += h.counts[c];
                overall[c] += h.counts[c];
            }
            matrices.push(MatrixStats {
                layer: i,
                matrix: name,
                in_features: w.in_features(),
                out_features: w.out_features(),
                dequant_re: w.dequant_re(),
                dequant_im: w.dequant_im(),
                histogram: h,
                l2_norm: norm,
            });
        }
        layers.push(LayerStats {
            layer: i,
            l2_norm: sq.sqrt(),
            histogram: Histogram::from_counts(layer_counts),
        });
    }
    let overall = Histogram::from_counts(overall);
    Ok(AnalysisReport {
        matrices,
        layers,
        overall_entropy_bits: overall.entropy_bits(),
        overall,
    })
}

pub fn write_histogram_csv<W: Write>(report: &AnalysisReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "matrix", "symbol", "count", "frequency"])?;
    for m in &report.matrices {
        for (c, code) in Codeword::ALL.iter().enumerate() {
            w.write_record([
                m.layer.to_string(),
                m.matrix.to_string(),
                code.symbol().to_string(),
                m.histogram.counts[c].to_string(),
                m.histogram.frequencies[c].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<histogram csv>", e))?;
    Ok(())
}

pub fn write_norms_csv<W: Write>(report: &AnalysisReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "matrix", "l2_norm"])?;
    for m in &report.matrices {
        w.write_record([m.layer.to_string(), m.matrix.to_string(), m.l2_norm.to_string()])?;
    }
    for l in &report.layers {
        w.write_record([l.layer.to_string(), "all".to_string(), l.l2_norm.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<norms csv>", e))?;
    Ok(())
}

/// Token embeddings with the per-dimension mean over the vocabulary
/// subtracted, as `(re, im)` planes of shape `[vocab, d_model]`.
pub fn centered_embeddings(model: &Model) -> (Vec<f64>, Vec<f64>) {
    let (v, d) = (model.config.vocab_size, model.config.d_model);
    let center = |plane: &[f64]| {
        let mut mean = vec![0.0; d];
        for row in plane.chunks_exact(d) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= v as f64);
        let mut out = plane.to_vec();
        for row in out.chunks_exact_mut(d) {
            for (x, m) in row.iter_mut().zip(&mean) {
                *x -= m;
            }
        }
        out
    };
    (center(model.embed_re.data()), center(model.embed_im.data()))
}

pub fn write_embeddings_csv<W: Write>(model: &Model, out: W) -> Result<()> {
    let d = model.config.d_model;
    let (re, im) = centered_embeddings(model);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["token", "dim", "re", "im"])?;
    for (i, (r, m)) in re.iter().zip(&im).enumerate() {
        w.write_record([(i / d).to_string(), (i % d).to_string(), r.to_string(), m.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<embedding csv>", e))?;
    Ok(())
}
