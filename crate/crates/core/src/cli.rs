//! The `pat` command line.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error,
//! 3 numerical abort.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::autodiff::Float;
use crate::checkpoint::{load_model, load_pruned, read_manifest, save_model, save_pruned};
use crate::config::RunConfig;
use crate::data::{Corpus, DataSpec, Split, Task};
use crate::error::{Error, Result};
use crate::evalbench::{
    accuracy, bench_forward, perplexity, speedup, verify_equivalence, BenchResult, BenchTarget, DenseView,
    LanguageModel, ModeView, EQUIVALENCE_TOLERANCE,
};
use crate::model::{ModelState, PrunedModel};
use crate::pruner::{merge_all, slice_model, PruneReport};
use crate::sparsify::finalize_mask;
use crate::trainer::{train, StepMetrics, TrainObserver};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Random sequences used when `prune` checks its own output.
const PRUNE_CHECK_INPUTS: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "pat", version, about = "Pruning-aware tuning of a toy decoder")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(short = 'c', long = "config", global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Compute in 64-bit floats.
    #[arg(long = "f64", global = true)]
    pub f64: bool,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from the configuration given with -c.
    Train,
    /// Merge adapters and sparsifiers, slice the hidden dimension and save
    /// the smaller model (default output: `<checkpoint>/../pruned`).
    Prune { checkpoint: PathBuf },
    /// Compare a trained checkpoint with its pruned counterpart.
    Verify {
        base: PathBuf,
        pruned: PathBuf,
        #[arg(long, default_value_t = 32)]
        n_inputs: usize,
        /// Sequence length (default: the model's maximum, capped at 64).
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Print held-out perplexity, plus accuracy for synthetic tasks.
    Eval {
        checkpoint: PathBuf,
        /// Data spec; defaults to the data section of -c.
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Time dense forwards; with --out, rows are appended to bench.csv.
    Bench {
        checkpoint: PathBuf,
        /// Second checkpoint to time; prints speedup = t_baseline / t_checkpoint.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,8")]
        batch: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        seq: usize,
        #[arg(long, default_value_t = 9)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
    /// Gate statistics of a checkpoint's mask over the whole schedule.
    MaskTrace {
        checkpoint: PathBuf,
        /// Last step to trace (default: the run length stored in the checkpoint).
        #[arg(long)]
        steps: Option<usize>,
    },
}

/// Maps an error onto the exit-code contract.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` and runs the command. Messages go to stderr; results to
/// stdout.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = if cli.f64 {
        dispatch::<f64>(&cli)
    } else {
        dispatch::<f32>(&cli)
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch<T: Float>(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Train => cmd_train::<T>(cli),
        Command::Prune { checkpoint } => cmd_prune::<T>(cli, checkpoint),
        Command::Verify {
            base,
            pruned,
            n_inputs,
            seq_len,
        } => cmd_verify::<T>(cli, base, pruned, *n_inputs, *seq_len),
        Command::Eval {
            checkpoint,
            data,
            seq_len,
            batch_size,
        } => cmd_eval::<T>(cli, checkpoint, data.as_deref(), *seq_len, *batch_size),
        Command::Bench {
            checkpoint,
            baseline,
            batch,
            seq,
            reps,
            warmup,
        } => cmd_bench::<T>(cli, checkpoint, baseline.as_deref(), batch, *seq, *reps, *warmup),
        Command::MaskTrace { checkpoint, steps } => cmd_mask_trace::<T>(cli, checkpoint, *steps),
    }
}

fn load_config(cli: &Cli) -> Result<(RunConfig, String)> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::config("this command needs -c/--config"))?;
    let (mut cfg, text) = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    // echo the file verbatim unless flags changed it
    let echo = if cli.seed.is_some() || cli.out.is_some() {
        cfg.to_json()
    } else {
        text
    };
    Ok((cfg, echo))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn write_row<W: std::io::Write, R: Serialize>(w: &mut csv::Writer<W>, path: &Path, row: &R) -> Result<()> {
    w.serialize(row).map_err(|e| csv_err(path, e))
}

fn flush<W: std::io::Write>(w: &mut csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

struct RunWriter {
    out: PathBuf,
    metrics: csv::Writer<File>,
    trace: csv::Writer<File>,
    total_steps: usize,
    quiet: bool,
    report_every: usize,
}

impl RunWriter {
    fn metrics_path(&self) -> PathBuf {
        self.out.join("metrics.csv")
    }

    fn trace_path(&self) -> PathBuf {
        self.out.join("mask_trace.csv")
    }

    fn flush_all(&mut self) -> Result<()> {
        let (m, t) = (self.metrics_path(), self.trace_path());
        flush(&mut self.metrics, &m)?;
        flush(&mut self.trace, &t)
    }
}

impl<T: Float> TrainObserver<T> for RunWriter {
    fn on_step(&mut self, m: &StepMetrics, model: &ModelState<T>) -> Result<()> {
        let (mp, tp) = (self.metrics_path(), self.trace_path());
        write_row(&mut self.metrics, &mp, m)?;
        write_row(&mut self.trace, &tp, &model.mask.trace_row(m.step))?;
        if !self.quiet && (m.step % self.report_every == 0 || m.step + 1 == self.total_steps) {
            eprintln!(
                "step {:>6}  loss {:.4}  instruct {:.4}  active {}  tau {:.1}  count {}",
                m.step, m.loss_total, m.loss_instruct, m.loss_active, m.tau, m.active_count
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, step: usize, model: &ModelState<T>) -> Result<()> {
        self.flush_all()?;
        let dir = self.out.join("checkpoints").join(format!("step_{step}"));
        save_model(&dir, model, Some(self.total_steps))?;
        Ok(())
    }
}

/// Builds the initial model of a run, optionally starting from the base
/// weights of another checkpoint.
pub fn initial_model<T: Float>(cfg: &RunConfig) -> Result<ModelState<T>> {
    let mut model = ModelState::<T>::init(&cfg.model, &cfg.pat_options(), cfg.model.seed)?;
    if let Some(path) = &cfg.init_from {
        let (base, _) = load_model::<T>(path)?;
        if base.weights.hidden() != cfg.model.d_model
            || base.config.n_layers != cfg.model.n_layers
            || base.config.d_ff != cfg.model.d_ff
            || base.config.vocab_size != cfg.model.vocab_size
            || base.config.max_seq_len != cfg.model.max_seq_len
        {
            return Err(Error::config(format!(
                "init_from: {} does not match the model section",
                path.display()
            )));
        }
        model.weights = base.weights;
    }
    Ok(model)
}

fn cmd_train<T: Float>(cli: &Cli) -> Result<i32> {
    let (cfg, echo) = load_config(cli)?;
    let corpus = cfg.data.source.ingest(cfg.data_seed())?;
    let mut model = initial_model::<T>(&cfg)?;
    let out = cfg.output.clone();
    create_dir(&out)?;
    let echo_path = out.join("config.json");
    fs::write(&echo_path, echo).map_err(|e| Error::io(&echo_path, e))?;
    let mut writer = RunWriter {
        metrics: csv_writer(&out.join("metrics.csv"))?,
        trace: csv_writer(&out.join("mask_trace.csv"))?,
        out: out.clone(),
        total_steps: cfg.train.total_steps,
        quiet: cli.quiet,
        report_every: (cfg.train.total_steps / 20).max(1),
    };
    let result = train(&mut model, &corpus, &cfg.train, &mut writer);
    writer.flush_all()?;
    result?;
    let final_dir = out.join("final");
    save_model(&final_dir, &model, Some(cfg.train.total_steps))?;
    if !cli.quiet {
        eprintln!("saved {}", final_dir.display());
    }
    Ok(EXIT_OK)
}

/// Output of `prune`: the sliced model, its report, and the merged model it
/// came from.
pub struct Pruned<T> {
    pub merged: ModelState<T>,
    pub pruned: PrunedModel<T>,
    pub report: PruneReport,
}

/// Snaps the mask, merges everything, slices, and measures the residual
/// against the snapped-masked merged model.
pub fn prune_model<T: Float>(mut model: ModelState<T>, check_seed: u64) -> Result<Pruned<T>> {
    let fin = finalize_mask(&model.mask, model.mask.step);
    merge_all(&mut model, &fin.mask)?;
    let (pruned, mut report) = slice_model(&model, &fin.mask)?;
    report.snap_disagreements = fin.snap_disagreements;
    let seq = model.config.max_seq_len;
    report.max_residual = Some(verify_equivalence(
        &ModeView::masked(&model),
        &pruned,
        PRUNE_CHECK_INPUTS,
        seq,
        check_seed,
    )?);
    Ok(Pruned {
        merged: model,
        pruned,
        report,
    })
}

fn cmd_prune<T: Float>(cli: &Cli, checkpoint: &Path) -> Result<i32> {
    let (model, _) = load_model::<T>(checkpoint)?;
    let out = match &cli.out {
        Some(o) => o.clone(),
        None => checkpoint
            .parent()
            .map(|p| p.join("pruned"))
            .unwrap_or_else(|| PathBuf::from("pruned")),
    };
    let p = prune_model(model, cli.seed.unwrap_or(0))?;
    save_pruned(&out, &p.pruned)?;
    let report_path = out.join("prune_report.json");
    let json = serde_json::to_string_pretty(&p.report)?;
    fs::write(&report_path, &json).map_err(|e| Error::io(&report_path, e))?;
    println!("{json}");
    if !cli.quiet {
        eprintln!(
            "d {} -> {}  params {} -> {}  ratio {:.4}",
            p.report.d, p.report.d_kept, p.report.params_before, p.report.params_after, p.report.ratio
        );
    }
    Ok(EXIT_OK)
}

fn cmd_verify<T: Float>(
    cli: &Cli,
    base: &Path,
    pruned: &Path,
    n_inputs: usize,
    seq_len: Option<usize>,
) -> Result<i32> {
    let (mut model, _) = load_model::<T>(base)?;
    let (sliced, _) = load_pruned::<T>(pruned)?;
    if sliced.source.d_model != model.config.d_model {
        return Err(Error::config(format!(
            "width mismatch: {} has d {}, {} was sliced from d {}",
            base.display(),
            model.config.d_model,
            pruned.display(),
            sliced.source.d_model
        )));
    }
    match &model.snapped {
        None => merge_all(&mut model, &sliced.kept)?,
        Some(m) if m == &sliced.kept => {}
        Some(_) => return Err(Error::config("the two checkpoints were snapped to different masks")),
    }
    let seq = seq_len.unwrap_or(model.config.max_seq_len.min(64));
    let residual = verify_equivalence(&ModeView::masked(&model), &sliced, n_inputs, seq, cli.seed.unwrap_or(0))?;
    let pass = residual <= EQUIVALENCE_TOLERANCE;
    println!(
        "max residual {residual:.3e} ({}, tolerance {EQUIVALENCE_TOLERANCE:e})",
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

/// A checkpoint opened for inference, whichever kind it holds.
pub enum Loaded<T> {
    Trained(ModelState<T>),
    Pruned(PrunedModel<T>),
}

impl<T: Float> Loaded<T> {
    pub fn open(dir: &Path) -> Result<Self> {
        if read_manifest(dir)?.pruned {
            Ok(Loaded::Pruned(load_pruned(dir)?.0))
        } else {
            Ok(Loaded::Trained(load_model(dir)?.0))
        }
    }

    /// The deployed form: masked forward for trained models, plain forward
    /// for sliced ones.
    pub fn deployed(&self) -> Box<dyn LanguageModel<T> + '_> {
        match self {
            Loaded::Trained(m) => Box::new(ModeView::masked(m)),
            Loaded::Pruned(p) => Box::new(p),
        }
    }

    /// Plain dense forward over the stored base weights.
    pub fn dense(&self) -> Box<dyn LanguageModel<T> + '_> {
        match self {
            Loaded::Trained(m) => Box::new(DenseView {
                weights: &m.weights,
                n_heads: m.config.n_heads,
                rms_eps: m.config.rms_eps,
            }),
            Loaded::Pruned(p) => Box::new(p),
        }
    }

    pub fn widths(&self) -> (usize, usize) {
        match self {
            Loaded::Trained(m) => (m.d_model(), m.d_model()),
            Loaded::Pruned(p) => (p.source.d_model, p.d_kept()),
        }
    }
}

fn cmd_eval<T: Float>(
    cli: &Cli,
    checkpoint: &Path,
    data: Option<&str>,
    seq_len: Option<usize>,
    batch_size: usize,
) -> Result<i32> {
    let (spec, seed) = match data {
        Some(s) => (s.parse::<DataSpec>()?, cli.seed.unwrap_or(0)),
        None => {
            let (cfg, _) = load_config(cli)?;
            (cfg.data.source.clone(), cfg.data_seed())
        }
    };
    let corpus: Corpus = spec.ingest(seed)?;
    let loaded = Loaded::<T>::open(checkpoint)?;
    let model = loaded.deployed();
    if corpus.vocab > model.vocab_size() {
        return Err(Error::config(format!(
            "data needs {} tokens, model has {}",
            corpus.vocab,
            model.vocab_size()
        )));
    }
    let seq = seq_len.unwrap_or(model.max_seq_len().min(64));
    let ppl = perplexity(model.as_ref(), &corpus, Split::HeldOut, seq, batch_size)?;
    println!("perplexity {ppl:.6}");
    if corpus.task != Task::Text {
        let acc = accuracy(model.as_ref(), &corpus, Split::HeldOut, seq, batch_size)?;
        println!("accuracy {acc:.6}");
    }
    Ok(EXIT_OK)
}

fn model_id(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Appends rows to `path`, writing the header only when the file is new.
pub fn append_bench_csv(path: &Path, rows: &[BenchResult]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        write_row(&mut w, path, r)?;
    }
    flush(&mut w, path)
}

fn bench_one<T: Float>(path: &Path, batch: &[usize], seq: usize, reps: usize, warmup: usize) -> Result<Vec<BenchResult>> {
    let loaded = Loaded::<T>::open(path)?;
    let (d, d_kept) = loaded.widths();
    let target = BenchTarget {
        model_id: model_id(path),
        d,
        d_kept,
    };
    let model = loaded.dense();
    bench_forward(model.as_ref(), &target, batch, seq, reps, warmup)
}

fn cmd_bench<T: Float>(
    cli: &Cli,
    checkpoint: &Path,
    baseline: Option<&Path>,
    batch: &[usize],
    seq: usize,
    reps: usize,
    warmup: usize,
) -> Result<i32> {
    let rows = bench_one::<T>(checkpoint, batch, seq, reps, warmup)?;
    let base_rows = baseline
        .map(|b| bench_one::<T>(b, batch, seq, reps, warmup))
        .transpose()?;
    let all: Vec<BenchResult> = base_rows.iter().flatten().chain(&rows).cloned().collect();
    match &cli.out {
        Some(dir) => {
            create_dir(dir)?;
            append_bench_csv(&dir.join("bench.csv"), &all)?;
        }
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &all {
                write_row(&mut w, Path::new("<stdout>"), r)?;
            }
            flush(&mut w, Path::new("<stdout>"))?;
        }
    }
    if let Some(base) = base_rows {
        for (b, p) in base.iter().zip(&rows) {
            println!(
                "batch {}: speedup {:.3} (median {:.3} ms -> {:.3} ms)",
                p.batch,
                speedup(b, p),
                b.median_ms,
                p.median_ms
            );
        }
    }
    Ok(EXIT_OK)
}

fn cmd_mask_trace<T: Float>(cli: &Cli, checkpoint: &Path, steps: Option<usize>) -> Result<i32> {
    let (model, manifest) = load_model::<T>(checkpoint)?;
    let last = steps
        .or(manifest.meta.total_steps)
        .unwrap_or(model.mask.step)
        .max(model.mask.s0);
    let rows = (0..=last).map(|s| model.mask.trace_row(s));
    match &cli.out {
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join("mask_trace.csv");
            let mut w = csv_writer(&path)?;
            for r in rows {
                write_row(&mut w, &path, &r)?;
            }
            flush(&mut w, &path)?;
        }
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in rows {
                write_row(&mut w, Path::new("<stdout>"), &r)?;
            }
            flush(&mut w, Path::new("<stdout>"))?;
        }
    }
    Ok(EXIT_OK)
}
