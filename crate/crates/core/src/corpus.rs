//! Text corpora, tokenizers and next-token batches.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Byte-level (256 ids) or a fixed vocabulary of byte strings encoded by
/// greedy longest match.
#[derive(Debug, Clone, PartialEq)]
pub enum Tokenizer {
    Bytes,
    Vocab(Vec<Vec<u8>>),
}

impl Tokenizer {
    /// Reads a vocabulary with one token per line. Escapes: `\n`, `\t`,
    /// `\r`, `\\` and `\xHH`.
    pub fn from_vocab_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let tok = unescape(line).map_err(|d| Error::format("vocab", format!("line {}: {d}", lineno + 1)))?;
            if tok.is_empty() {
                return Err(Error::format("vocab", format!("line {}: empty token", lineno + 1)));
            }
            if tokens.contains(&tok) {
                return Err(Error::format("vocab", format!("line {}: duplicate token", lineno + 1)));
            }
            tokens.push(tok);
        }
        if tokens.is_empty() {
            return Err(Error::format("vocab", "no tokens"));
        }
        Ok(Tokenizer::Vocab(tokens))
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bytes => 256,
            Tokenizer::Vocab(v) => v.len(),
        }
    }

    pub fn encode(&self, bytes: &[u8]) -> Result<Vec<usize>> {
        match self {
            Tokenizer::Bytes => Ok(bytes.iter().map(|&b| b as usize).collect()),
            Tokenizer::Vocab(vocab) => {
                let mut out = Vec::new();
                let mut pos = 0;
                while pos < bytes.len() {
                    let rest = &bytes[pos..];
                    let best = vocab
                        .iter()
                        .enumerate()
                        .filter(|(_, t)| rest.starts_with(t))
                        .max_by_key(|(i, t)| (t.len(), std::cmp::Reverse(*i)));
                    match best {
                        Some((id, t)) => {
                            out.push(id);
                            pos += t.len();
                        }
                        None => {
                            return Err(Error::format(
                                "text",
                                format!("byte {:#04x} at offset {pos} not covered by vocabulary", bytes[pos]),
                            ))
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Ids outside the vocabulary are an error.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let vocab = self.vocab_size();
        let mut out = Vec::new();
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            match self {
                Tokenizer::Bytes => out.push(id as u8),
                Tokenizer::Vocab(v) => out.extend_from_slice(&v[id]),
            }
        }
        Ok(out)
    }
}

fn unescape(line: &str) -> std::result::Result<Vec<u8>, String> {
    let b = line.as_bytes();
    let mut out = Vec::with_capacity(b.len());
    let mut i = 0;
    while i < b.len() {
        if b[i] != b'\\' {
            out.push(b[i]);
            i += 1;
            continue;
        }
        match b.get(i + 1) {
            Some(b'n') => out.push(b'\n'),
            Some(b't') => out.push(b'\t'),
            Some(b'r') => out.push(b'\r'),
            Some(b'\\') => out.push(b'\\'),
            Some(b'x') => {
                let hex = line.get(i + 2..i + 4).ok_or("truncated \\x escape")?;
                out.push(u8::from_str_radix(hex, 16).map_err(|_| format!("bad hex escape `{hex}`"))?);
                i += 2;
            }
            _ => return Err("unknown escape".into()),
        }
        i += 2;
    }
    Ok(out)
}

/// A tokenized corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    tokens: Vec<usize>,
    vocab_size: usize,
}

/// Row-major `[batch, seq]` inputs and their next-token targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8], tokenizer: &Tokenizer) -> Result<Self> {
        Ok(Self {
            tokens: tokenizer.encode(bytes)?,
            vocab_size: tokenizer.vocab_size(),
        })
    }

    pub fn load(path: &Path, tokenizer: &Tokenizer) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, tokenizer)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of distinct window start offsets for length `seq`.
    pub fn num_windows(&self, seq: usize) -> usize {
        self.tokens.len().saturating_sub(seq)
    }

    /// Window starting at `start`: `seq` inputs and the `seq` tokens after each.
    pub fn window(&self, start: usize, seq: usize) -> (&[usize], &[usize]) {
        (
            &self.tokens[start..start + seq],
            &self.tokens[start + 1..start + seq + 1],
        )
    }

    /// Draws `batch` windows uniformly at random.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize, seq: usize) -> Result<Batch> {
        if seq == 0 || batch == 0 {
            return Err(Error::Config("batch size and sequence length must be positive".into()));
        }
        let n = self.num_windows(seq);
        if n == 0 {
            return Err(Error::Config(format!(
                "corpus of {} tokens is shorter than one window of {} tokens",
                self.tokens.len(),
                seq + 1
            )));
        }
        let mut inputs = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            let (x, y) = self.window(rng.gen_range(0..n), seq);
            inputs.extend_from_slice(x);
            targets.extend_from_slice(y);
        }
        Ok(Batch {
            inputs,
            targets,
            batch,
            seq,
        })
    }
}

const SUBJECTS: &[&str] = &[
    "the cat", "a dog", "the old man", "my sister", "the farmer", "a small bird", "the teacher",
    "our neighbour", "the king", "a young girl",
];
const VERBS: &[&str] = &[
    "sees", "likes", "finds", "follows", "watches", "carries", "paints", "remembers",
];
const OBJECTS: &[&str] = &[
    "the river", "a red apple", "the green hill", "an open door", "the quiet house", "a long road",
    "the bright moon", "a wooden boat",
];
const ENDINGS: &[&str] = &[
    "in the morning", "after the rain", "every day", "near the market", "before dinner",
    "at night",
];

/// Deterministic English-like text of exactly `n_bytes` bytes, built from a
/// small grammar. Used as a stand-in training corpus.
pub fn synthetic_text(seed: u64, n_bytes: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 128);
    while out.len() < n_bytes {
        let s = SUBJECTS.choose(&mut rng).unwrap();
        let v = VERBS.choose(&mut rng).unwrap();
        let o = OBJECTS.choose(&mut rng).unwrap();
        let mut sentence = format!("{s} {v} {o}");
        if rng.gen_bool(0.5) {
            sentence.push(' ');
            sentence.push_str(ENDINGS.choose(&mut rng).unwrap());
        }
        sentence.push_str(if rng.gen_bool(0.2) { ".\n" } else { ". " });
        let mut chars = sentence.chars();
        if let Some(first) = chars.next() {
            out.push(first.to_ascii_uppercase());
            out.push_str(chars.as_str());
        }
    }
    out.truncate(n_bytes);
    out.into_bytes()
}
