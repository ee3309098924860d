//! Single-file checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      b"IFRY"
//! version    u32
//! config     u32 byte length, then the ModelConfig as JSON
//! count      u32
//! directory  count x { name: u16 length + UTF-8, kind: u8, ndim: u8,
//!                      dims: ndim x u64, offset: u64, length: u64 }
//! payload    tensors at their absolute offsets, in directory order
//! ```
//!
//! Kinds: `real_fp` (one f32 plane), `complex_fp` (f32 re plane then f32 im
//! plane), `packed_q2` (dequant_re f32, dequant_im f32, then the packed code
//! bytes of a [`PackedQuantTensor`]). Floating-point parameters are stored as
//! f32, so a roundtrip is exact for models whose parameters are already
//! f32-representable (see [`Model::round_to_f32`]).

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Layer, Model, ModelConfig, NormGains, Projection, PROJECTION_NAMES};
use crate::quantize::{quantize_weights, PackedQuantTensor};
use crate::tensor::{ComplexTensor, Tensor};

pub const MAGIC: [u8; 4] = *b"IFRY";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaveMode {
    /// Every tensor as floating point; packed projections are dequantized.
    Full,
    /// The seven projection families packed to 2 bits, everything else
    /// floating point.
    Quantized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum TensorKind {
    RealFp = 0,
    ComplexFp = 1,
    PackedQ2 = 2,
}

impl TensorKind {
    pub fn name(self) -> &'static str {
        match self {
            TensorKind::RealFp => "real_fp",
            TensorKind::ComplexFp => "complex_fp",
            TensorKind::PackedQ2 => "packed_q2",
        }
    }

    fn from_u8(b: u8) -> Option<Self> {
        match b {
            0 => Some(TensorKind::RealFp),
            1 => Some(TensorKind::ComplexFp),
            2 => Some(TensorKind::PackedQ2),
            _ => None,
        }
    }

    /// Payload bytes for a tensor of this kind and shape.
    pub fn payload_len(self, dims: &[usize]) -> usize {
        let numel: usize = dims.iter().product();
        match self {
            TensorKind::RealFp => 4 * numel,
            TensorKind::ComplexFp => 8 * numel,
            TensorKind::PackedQ2 => {
                let (k, n) = (dims[0], dims[1]);
                8 + n * PackedQuantTensor::bytes_per_row(k)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirEntry {
    pub name: String,
    pub kind: TensorKind,
    pub dims: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub entries: Vec<DirEntry>,
    pub file_len: u64,
}

enum Payload<'a> {
    Real(&'a [f64]),
    Complex(&'a [f64], &'a [f64]),
    Packed(std::borrow::Cow<'a, PackedQuantTensor>),
}

fn push_f32s(buf: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Serializes a checkpoint into memory.
pub fn encode_checkpoint(model: &Model, mode: SaveMode) -> Result<Vec<u8>> {
    model.validate()?;
    let c = &model.config;
    let d = c.d_model;
    let mut tensors: Vec<(String, Vec<usize>, Payload)> = Vec::new();
    tensors.push((
        "embed".into(),
        vec![c.vocab_size, d],
        Payload::Complex(model.embed_re.data(), model.embed_im.data()),
    ));
    let mut dense_cache: Vec<ComplexTensor> = Vec::new();
    let mut packed_cache: Vec<PackedQuantTensor> = Vec::new();
    // materialize conversions first so payloads can borrow them
    for layer in &model.layers {
        for p in layer.projections() {
            match (mode, p) {
                (SaveMode::Full, Projection::Packed(_)) => dense_cache.push(p.dense()?),
                (SaveMode::Quantized, Projection::Full(w)) => packed_cache.push(quantize_weights(w)?),
                _ => {}
            }
        }
    }
    let (mut di, mut pi) = (0, 0);
    for (i, layer) in model.layers.iter().enumerate() {
        for (name, p) in PROJECTION_NAMES.iter().zip(layer.projections()) {
            let (k, n) = p.dims();
            let key = format!("layers.{i}.{name}");
            let payload = match (mode, p) {
                (SaveMode::Full, Projection::Full(w)) => Payload::Complex(w.re(), w.im()),
                (SaveMode::Full, Projection::Packed(_)) => {
                    di += 1;
                    let w = &dense_cache[di - 1];
                    Payload::Complex(w.re(), w.im())
                }
                (SaveMode::Quantized, Projection::Packed(q)) => Payload::Packed(std::borrow::Cow::Borrowed(q)),
                (SaveMode::Quantized, Projection::Full(_)) => {
                    pi += 1;
                    Payload::Packed(std::borrow::Cow::Borrowed(&packed_cache[pi - 1]))
                }
            };
            tensors.push((key, vec![k, n], payload));
        }
        for (name, g) in [("attn_norm", &layer.attn_norm), ("ffn_norm", &layer.ffn_norm)] {
            tensors.push((format!("layers.{i}.{name}"), vec![d], Payload::Complex(&g.re, &g.im)));
        }
    }
    tensors.push((
        "final_norm".into(),
        vec![d],
        Payload::Complex(&model.final_norm.re, &model.final_norm.im),
    ));
    tensors.push((
        "lm_head".into(),
        model.w_out.shape().to_vec(),
        Payload::Real(model.w_out.data()),
    ));

    let config = serde_json::to_vec(c)?;
    let mut header_len = 4 + 4 + 4 + config.len() + 4;
    for (name, dims, _) in &tensors {
        header_len += 2 + name.len() + 1 + 1 + 8 * dims.len() + 8 + 8;
    }
    let mut buf = Vec::with_capacity(header_len);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = header_len as u64;
    for (name, dims, payload) in &tensors {
        let kind = match payload {
            Payload::Real(_) => TensorKind::RealFp,
            Payload::Complex(..) => TensorKind::ComplexFp,
            Payload::Packed(_) => TensorKind::PackedQ2,
        };
        let len = kind.payload_len(dims) as u64;
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(kind as u8);
        buf.push(dims.len() as u8);
        for &dim in dims {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        buf.extend_from_slice(&len.to_le_bytes());
        offset += len;
    }
    debug_assert_eq!(buf.len(), header_len);
    for (_, _, payload) in &tensors {
        match payload {
            Payload::Real(x) => push_f32s(&mut buf, x),
            Payload::Complex(re, im) => {
                push_f32s(&mut buf, re);
                push_f32s(&mut buf, im);
            }
            Payload::Packed(q) => {
                buf.extend_from_slice(&q.dequant_re().to_le_bytes());
                buf.extend_from_slice(&q.dequant_im().to_le_bytes());
                buf.extend_from_slice(q.codes());
            }
        }
    }
    debug_assert_eq!(buf.len() as u64, offset);
    Ok(buf)
}

pub fn save_checkpoint(model: &Model, mode: SaveMode, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, mode)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                field,
                format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Parses and validates the header and directory.
pub fn decode_header(buf: &[u8]) -> Result<CheckpointHeader> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "not a checkpoint file (expected \"IFRY\")"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let config_len = r.u32("config")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len, "config")?)
        .map_err(|e| Error::format("config", e.to_string()))?;
    config.validate().map_err(|e| Error::format("config", e.to_string()))?;
    let count = r.u32("tensor_count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16("directory.name")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "directory.name")?)
            .map_err(|_| Error::format("directory.name", "not UTF-8"))?
            .to_string();
        let kind_byte = r.u8("directory.kind")?;
        let kind = TensorKind::from_u8(kind_byte)
            .ok_or_else(|| Error::format("directory.kind", format!("{name}: unknown kind {kind_byte}")))?;
        let ndim = r.u8("directory.shape")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let dim = usize::try_from(r.u64("directory.shape")?)
                .map_err(|_| Error::format("directory.shape", format!("{name}: dimension too large")))?;
            dims.push(dim);
        }
        if kind == TensorKind::PackedQ2 && ndim != 2 {
            return Err(Error::format("directory.shape", format!("{name}: packed tensors are 2-D")));
        }
        let offset = r.u64("directory.offset")?;
        let length = r.u64("directory.length")?;
        let expected = dims
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .and_then(|_| {
                dims.iter().all(|&d| d < (1 << 40)).then(|| kind.payload_len(&dims) as u64)
            })
            .ok_or_else(|| Error::format("directory.shape", format!("{name}: shape too large")))?;
        if length != expected {
            return Err(Error::format(
                "directory.length",
                format!("{name}: {length} bytes, {} {:?} needs {expected}", kind.name(), dims),
            ));
        }
        entries.push(DirEntry {
            name,
            kind,
            dims,
            offset,
            length,
        });
    }
    let header_end = r.pos as u64;
    let file_len = buf.len() as u64;
    let mut spans: Vec<(u64, u64, &str)> = entries
        .iter()
        .map(|e| (e.offset, e.offset.saturating_add(e.length), e.name.as_str()))
        .collect();
    spans.sort();
    let mut cursor = header_end;
    for (start, end, name) in spans {
        if start < cursor {
            return Err(Error::format("directory.offset", format!("{name}: overlaps header or another tensor")));
        }
        if end > file_len {
            return Err(Error::format(
                "payload",
                format!("truncated: {name} ends at {end}, file has {file_len} bytes"),
            ));
        }
        cursor = end;
    }
    Ok(CheckpointHeader {
        version,
        config,
        entries,
        file_len,
    })
}

/// Reads only the header and directory of a checkpoint file.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_header(&buf)
}

fn f32s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect()
}

/// Deserializes a checkpoint. Packed projections stay packed.
pub fn decode_checkpoint(buf: &[u8]) -> Result<Model> {
    let header = decode_header(buf)?;
    let config = header.config.clone();
    let mut by_name = std::collections::HashMap::new();
    for e in &header.entries {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(Error::format("directory.name", format!("duplicate tensor {}", e.name)));
        }
    }
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ffn);
    let mut used = 0usize;
    let mut fetch = |name: &str, kinds: &[TensorKind], dims: &[usize]| -> Result<(&DirEntry, &[u8])> {
        let e = by_name
            .get(name)
            .ok_or_else(|| Error::format("directory.name", format!("missing tensor {name}")))?;
        if !kinds.contains(&e.kind) {
            return Err(Error::format("directory.kind", format!("{name}: unexpected kind {}", e.kind.name())));
        }
        if e.dims != dims {
            return Err(Error::format(
                "directory.shape",
                format!("{name}: shape {:?}, config implies {:?}", e.dims, dims),
            ));
        }
        used += 1;
        let start = e.offset as usize;
        Ok((e, &buf[start..start + e.length as usize]))
    };
    let complex = |bytes: &[u8], shape: Vec<usize>| -> Result<ComplexTensor> {
        let half = bytes.len() / 2;
        ComplexTensor::from_planes(
            Tensor::new(shape.clone(), f32s(&bytes[..half]))?,
            Tensor::new(shape, f32s(&bytes[half..]))?,
        )
    };
    let norm = |bytes: &[u8]| {
        let half = bytes.len() / 2;
        NormGains {
            re: f32s(&bytes[..half]),
            im: f32s(&bytes[half..]),
        }
    };
    let cf = [TensorKind::ComplexFp];
    let (_, bytes) = fetch("embed", &cf, &[v, d])?;
    let (embed_re, embed_im) = complex(bytes, vec![v, d])?.into_planes();
    let shapes = [(d, d), (d, d), (d, d), (d, d), (d, f), (d, f), (f, d)];
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let mut proj = Vec::with_capacity(7);
        for (name, (k, n)) in PROJECTION_NAMES.iter().zip(shapes) {
            let key = format!("layers.{i}.{name}");
            let (e, bytes) = fetch(&key, &[TensorKind::ComplexFp, TensorKind::PackedQ2], &[k, n])?;
            proj.push(match e.kind {
                TensorKind::PackedQ2 => {
                    let dr = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
                    let di = f32::from_le_bytes(bytes[4..8].try_into().unwrap());
                    Projection::Packed(PackedQuantTensor::from_raw(k, n, bytes[8..].to_vec(), dr, di)?)
                }
                _ => Projection::Full(complex(bytes, vec![k, n])?),
            });
        }
        let (_, an) = fetch(&format!("layers.{i}.attn_norm"), &cf, &[d])?;
        let attn_norm = norm(an);
        let (_, fnb) = fetch(&format!("layers.{i}.ffn_norm"), &cf, &[d])?;
        let ffn_norm = norm(fnb);
        let mut it = proj.into_iter();
        let mut next = || it.next().unwrap();
        layers.push(Layer {
            w_q: next(),
            w_k: next(),
            w_v: next(),
            w_o: next(),
            w_up: next(),
            w_gate: next(),
            w_down: next(),
            attn_norm,
            ffn_norm,
        });
    }
    let (_, fb) = fetch("final_norm", &cf, &[d])?;
    let final_norm = norm(fb);
    let (_, hb) = fetch("lm_head", &[TensorKind::RealFp], &[v, 2 * d])?;
    let w_out = Tensor::new(vec![v, 2 * d], f32s(hb))?;
    if used != header.entries.len() {
        let known: Vec<&str> = header.entries.iter().map(|e| e.name.as_str()).collect();
        return Err(Error::format(
            "directory.name",
            format!("unexpected extra tensors among {known:?}"),
        ));
    }
    let model = Model {
        config,
        embed_re,
        embed_im,
        layers,
        final_norm,
        w_out,
    };
    model.validate()?;
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}
