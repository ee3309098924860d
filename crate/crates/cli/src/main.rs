mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use phase2bit_core::analysis;
use phase2bit_core::checkpoint::{load_checkpoint, save_checkpoint, SaveMode};
use phase2bit_core::corpus::{synthetic_text, Corpus, Tokenizer};
use phase2bit_core::kernel::{self, KernelPath};
use phase2bit_core::model::{model_forward, Mode};
use phase2bit_core::training::{train_loop_with, write_loss_csv};
use phase2bit_core::Model;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "phase2bit", version, about = "2-bit complex-valued language models")]
struct Cli {
    /// Seed for initialization, batch sampling and benchmark operands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write a checkpoint plus a loss trace.
    Train {
        /// Flat key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training text.
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        corpus: Option<PathBuf>,
        /// Use N bytes of generated text instead of a corpus file.
        #[arg(long, value_name = "BYTES")]
        synthetic: Option<usize>,
        /// Vocabulary file (default: bytes).
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Overrides `mode` from the config.
        #[arg(long, value_enum)]
        mode: Option<TrainMode>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: PathBuf,
        /// Store the packed 2-bit checkpoint instead of full precision.
        #[arg(long)]
        quantized: bool,
    },
    /// Pack the projections of a full-precision checkpoint to 2 bits.
    Quantize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy decoding.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, short = 'n', default_value_t = 32)]
        tokens: usize,
        #[arg(long, value_enum, default_value_t = InferKernel::Lut)]
        kernel: InferKernel,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Write the logits of every decoding step as CSV (step,token,logit).
        #[arg(long)]
        logits: Option<PathBuf>,
    },
    /// Time the GEMM paths.
    Bench {
        /// Comma-separated MxKxN sizes.
        #[arg(long, default_value = "64x1024x1024")]
        sizes: String,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Comma-separated subset of float_ref, multfree, lut.
        #[arg(long, default_value = "float_ref,multfree,lut")]
        paths: String,
        /// CSV destination (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Codebook histograms, weight norms and embedding exports.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum TrainMode {
    Qat,
    FullPrecision,
}

#[derive(Clone, Copy, ValueEnum)]
enum InferKernel {
    /// Quantize-dequantize with a float product.
    Float,
    Multfree,
    Lut,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let head: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .take_while(|l| !l.is_empty() && !l.starts_with("Usage"))
                .collect();
            eprintln!("{}", head.join(" "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Train {
            config,
            corpus,
            synthetic,
            vocab,
            mode,
            out,
            loss_csv,
            quantized,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.hyper.seed = s;
            }
            if let Some(m) = mode {
                cfg.mode = match m {
                    TrainMode::Qat => Mode::Qat,
                    TrainMode::FullPrecision => Mode::FullPrecision,
                };
            }
            let tokenizer = load_tokenizer(vocab.as_deref())?;
            let corpus = match (corpus, synthetic) {
                (Some(p), _) => Corpus::load(&p, &tokenizer)?,
                (None, Some(n)) => Corpus::from_bytes(&synthetic_text(cfg.hyper.seed, n), &tokenizer)?,
                (None, None) => unreachable!("clap enforces a corpus source"),
            };
            cmd_train(&cfg, &corpus, &out, &loss_csv, quantized)
        }
        Cmd::Quantize { input, out } => {
            let model = load_checkpoint(&input)?;
            save_checkpoint(&model, SaveMode::Quantized, &out)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Infer {
            checkpoint,
            prompt,
            tokens,
            kernel,
            vocab,
            logits,
        } => {
            let tokenizer = load_tokenizer(vocab.as_deref())?;
            let model = load_checkpoint(&checkpoint)?;
            let prompt_ids = tokenizer.encode(prompt.as_bytes())?;
            let (ids, rows) = generate(&model, &prompt_ids, tokens, kernel)?;
            if let Some(path) = logits {
                write_logits(&path, &rows, prompt_ids.len())?;
            }
            let text = tokenizer.decode(&ids)?;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(&text)?;
            stdout.write_all(b"\n")?;
            Ok(())
        }
        Cmd::Bench {
            sizes,
            reps,
            paths,
            out,
        } => {
            let paths = paths
                .split(',')
                .map(|p| KernelPath::parse(p.trim()).with_context(|| format!("unknown kernel path `{p}`")))
                .collect::<Result<Vec<_>>>()?;
            let mut rows = Vec::new();
            for spec in sizes.split(',') {
                let (m, k, n) = parse_size(spec.trim())?;
                rows.extend(kernel::bench(m, k, n, reps, &paths, seed.unwrap_or(0))?);
            }
            match out {
                Some(p) => kernel::write_bench_csv(&rows, create(&p)?)?,
                None => kernel::write_bench_csv(&rows, std::io::stdout().lock())?,
            }
            Ok(())
        }
        Cmd::Analyze { checkpoint, out_dir } => {
            let model = load_checkpoint(&checkpoint)?;
            let report = analysis::analyze(&model).with_context(|| format!("analyzing {}", checkpoint.display()))?;
            std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            serde_json::to_writer_pretty(create(&out_dir.join("analysis.json"))?, &report)?;
            analysis::write_histogram_csv(&report, create(&out_dir.join("codebook_histogram.csv"))?)?;
            analysis::write_norms_csv(&report, create(&out_dir.join("weight_norms.csv"))?)?;
            analysis::write_embeddings_csv(&model, create(&out_dir.join("embeddings.csv"))?)?;
            let f = report.overall.frequencies;
            println!(
                "codeword frequencies +1 {:.4}  +i {:.4}  -1 {:.4}  -i {:.4}  entropy {:.4} bits",
                f[0], f[1], f[2], f[3], report.overall_entropy_bits
            );
            Ok(())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_tokenizer(vocab: Option<&Path>) -> Result<Tokenizer> {
    Ok(match vocab {
        Some(p) => Tokenizer::from_vocab_file(p)?,
        None => Tokenizer::Bytes,
    })
}

fn parse_size(spec: &str) -> Result<(usize, usize, usize)> {
    let dims: Vec<usize> = spec
        .split('x')
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad size `{spec}`, expected MxKxN"))?;
    match dims[..] {
        [m, k, n] => Ok((m, k, n)),
        _ => bail!("bad size `{spec}`, expected MxKxN"),
    }
}

fn cmd_train(cfg: &RunConfig, corpus: &Corpus, out: &Path, loss_csv: &Path, quantized: bool) -> Result<()> {
    let every = (cfg.hyper.total_steps / 20).max(1);
    let trained = train_loop_with(corpus, cfg.model.clone(), cfg.hyper.clone(), cfg.mode, |r| {
        if r.step % every == 0 {
            eprintln!("step {:>6}  lr {:.3e}  loss {:.4}", r.step, r.lr, r.loss);
        }
    })?;
    let mut model = trained.model;
    model.round_to_f32();
    let mode = if quantized { SaveMode::Quantized } else { SaveMode::Full };
    save_checkpoint(&model, mode, out)?;
    write_loss_csv(&trained.trace, create(loss_csv)?)?;
    if let Some(last) = trained.trace.last() {
        eprintln!("final loss {:.4}; wrote {} and {}", last.loss, out.display(), loss_csv.display());
    }
    Ok(())
}

/// Greedy decoding with full recomputation over the last `max_seq` tokens.
/// Returns all ids (prompt first) and the logit row of every step.
fn generate(model: &Model, prompt: &[usize], n: usize, kernel: InferKernel) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let (model, mode) = match kernel {
        InferKernel::Float => (std::borrow::Cow::Borrowed(model), Mode::Qat),
        InferKernel::Multfree | InferKernel::Lut => {
            let mode = if matches!(kernel, InferKernel::Lut) { Mode::Lut } else { Mode::Multfree };
            let m = if model.is_quantized() {
                std::borrow::Cow::Borrowed(model)
            } else {
                std::borrow::Cow::Owned(model.quantized()?)
            };
            (m, mode)
        }
    };
    if n > 0 && prompt.is_empty() {
        bail!("an empty prompt cannot be continued; pass --prompt");
    }
    let vocab = model.config.vocab_size;
    let mut ids = prompt.to_vec();
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let start = ids.len().saturating_sub(model.config.max_seq);
        let logits = model_forward(&ids[start..], &model, mode)?;
        let last = &logits.data()[logits.len() - vocab..];
        let next = last
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        rows.push(last.to_vec());
        ids.push(next);
    }
    Ok((ids, rows))
}

fn write_logits(path: &Path, rows: &[Vec<f64>], offset: usize) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "step,token,logit")?;
    for (s, row) in rows.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            writeln!(w, "{},{t},{v}", s + offset)?;
        }
    }
    w.flush()?;
    Ok(())
}
