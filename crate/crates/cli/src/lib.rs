//! The `sigvae` command-line tool.
//!
//! Every command is a pure function of its config file, flags and input
//! files: reruns produce byte-identical CSVs and images.

pub mod config;
pub mod csvout;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sigvae::data::{encode_image_grid, Dataset};
use sigvae::metrics::{beta_sweep, evaluate_model, mi_marginal_kl, sharing_sweep, MetricsRecord};
use sigvae::numerics::Tensor;
use sigvae::training::{load_checkpoint, save_checkpoint, Checkpoint, Trainer};
use sigvae::vae::{generate, reconstruct};
use sigvae::{Error, ObjectiveMode, Result, Rng, SampleMode, VaeModel};

use config::RunConfig;
use csvout::{write_file, MetricsRow, Table, METRIC_COLUMNS, MI_COLUMNS, SWEEP_COLUMNS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const SAMPLE_STREAM: u64 = 0x5341_4d50;
const RECON_STREAM: u64 = 0x5245_434f;
const MI_STREAM: u64 = 0x3141;

#[derive(Parser, Debug)]
#[command(name = "sigvae", version, about = "Train and evaluate VAEs with calibrated decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model; writes metrics.csv, model.ckpt and image grids.
    Train(RunFlags),
    /// Evaluate a checkpoint on its test split; writes eval.csv.
    Eval(CheckpointFlags),
    /// Decode prior samples from a checkpoint; writes samples.pgm.
    Sample(CheckpointFlags),
    /// One β-VAE per β plus an optimal-σ run; writes sweep_beta.csv.
    SweepBeta(RunFlags),
    /// One optimal-σ run per sharing scheme; writes sweep_sharing.csv.
    ShareSweep(RunFlags),
    /// Mutual information and marginal KL of a checkpoint; writes mi.csv.
    Mi(CheckpointFlags),
}

#[derive(Args, Debug)]
struct RunFlags {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated β values for sweep-beta.
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    /// Number of images in the sample grid.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug)]
struct CheckpointFlags {
    checkpoint: PathBuf,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for sampling or estimation noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Sample count (sample) or evaluation-set size (mi).
    #[arg(long)]
    n: Option<usize>,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Checkpoint(_) => EXIT_IO,
        e if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Train(f) => resolve(&f).and_then(|(cfg, out)| cmd_train(&cfg, &out)),
        Command::SweepBeta(f) => resolve(&f).and_then(|(cfg, out)| cmd_sweep_beta(&cfg, &out)),
        Command::ShareSweep(f) => resolve(&f).and_then(|(cfg, out)| cmd_share_sweep(&cfg, &out)),
        Command::Eval(f) => cmd_eval(&f.checkpoint, f.out.as_deref()),
        Command::Sample(f) => cmd_sample(&f.checkpoint, f.out.as_deref(), f.n, f.seed),
        Command::Mi(f) => cmd_mi(&f.checkpoint, f.out.as_deref(), f.n, f.seed),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Config file plus flag overrides, validated.
fn resolve(f: &RunFlags) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &f.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &f.out {
        cfg.out = Some(out.clone());
    }
    if let Some(seed) = f.seed {
        cfg.train.seed = seed;
    }
    if let Some(b) = &f.betas {
        cfg.sweep.betas = b.clone();
    }
    if let Some(n) = f.n {
        cfg.eval.samples = n;
    }
    cfg.validate()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.into(),
        source: e,
    })?;
    write_file(&out.join("config.json"), format!("{}\n", cfg.to_json()).as_bytes())
}

fn write_grid(path: &Path, images: &Tensor, columns: usize) -> Result<()> {
    if images.shape()[0] == 0 {
        return Ok(());
    }
    write_file(path, &encode_image_grid(images, columns)?)
}

/// Test images in the first grid row, their reconstructions in the second.
fn reconstruction_grid(model: &VaeModel, test: &Dataset, count: usize, seed: u64, mode: SampleMode) -> Result<Tensor> {
    let idx: Vec<usize> = (0..count.min(test.len())).collect();
    let x = test.batch(&idx);
    let rec = reconstruct(model, &x, &mut Rng::with_stream(seed, RECON_STREAM), mode)?;
    Tensor::concat(&[&x, &rec], 0)
}

fn evaluate(model: &VaeModel, cfg: &RunConfig, test: &Dataset) -> Result<MetricsRecord> {
    evaluate_model(model, &cfg.train.objective, test, &cfg.eval.settings(), cfg.train.seed)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = cfg.load_data()?;
    cfg.train.validate(data.train.len())?;
    prepare_out(cfg, out)?;
    let start = Instant::now();
    let wall = |row: &mut MetricsRow| {
        if cfg.record_wall_time {
            row.wall_ms = Some(start.elapsed().as_millis() as u64);
        }
    };
    let mut table = Table::create(&out.join("metrics.csv"), &METRIC_COLUMNS)?;
    let beta_vae = matches!(cfg.train.objective, ObjectiveMode::BetaVae { .. });
    let mut trainer = Trainer::new(cfg.train.clone(), &data.train)?;
    let spe = trainer.steps_per_epoch();
    let mut last_eval = None;
    trainer.run(|t, rec| {
        let mut row = MetricsRow::from_step(rec, beta_vae);
        wall(&mut row);
        table.metrics(&row)?;
        if t.eval_due() {
            let mut row = MetricsRow::from_eval(t.step(), t.step() / spe, &evaluate(t.model(), cfg, &data.test)?);
            wall(&mut row);
            table.metrics(&row)?;
            last_eval = Some(t.step());
        }
        Ok(())
    })?;
    let step = trainer.step();
    if last_eval != Some(step) {
        let mut row = MetricsRow::from_eval(step, step / spe, &evaluate(trainer.model(), cfg, &data.test)?);
        wall(&mut row);
        table.metrics(&row)?;
    }

    let echo = serde_json::to_value(cfg).expect("config serializes");
    save_checkpoint(&out.join("model.ckpt"), &trainer.checkpoint(echo))?;
    let model = trainer.model();
    let seed = cfg.train.seed;
    let mode = cfg.eval.sample_mode;
    let samples = generate(model, cfg.eval.samples, &mut Rng::with_stream(seed, SAMPLE_STREAM), mode)?;
    write_grid(&out.join("samples.pgm"), &samples, cfg.eval.grid_columns)?;
    if cfg.eval.reconstructions > 0 {
        let grid = reconstruction_grid(model, &data.test, cfg.eval.reconstructions, seed, mode)?;
        let cols = grid.shape()[0] / 2;
        write_grid(&out.join("reconstructions.pgm"), &grid, cols)?;
    }
    println!("trained {} steps; outputs in {}", step, out.display());
    Ok(())
}

fn open_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ckpt = load_checkpoint(path)?;
    let cfg: RunConfig = serde_json::from_value(ckpt.echo.clone())
        .map_err(|e| Error::Checkpoint(format!("stored run config: {e}")))?;
    Ok((ckpt, cfg))
}

fn checkpoint_out(ckpt: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let dir = match out {
        Some(o) => o.to_path_buf(),
        None => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
    }
    Ok(dir)
}

pub fn cmd_eval(path: &Path, out: Option<&Path>) -> Result<()> {
    let (ckpt, cfg) = open_checkpoint(path)?;
    let data = cfg.load_data()?;
    let spe = cfg.train.steps_per_epoch(data.train.len()).max(1);
    let rec = evaluate(&ckpt.model, &cfg, &data.test)?;
    let dir = checkpoint_out(path, out)?;
    let mut table = Table::create(&dir.join("eval.csv"), &METRIC_COLUMNS)?;
    table.metrics(&MetricsRow::from_eval(ckpt.step, ckpt.step / spe, &rec))?;
    println!("{}", serde_json::to_string(&rec).expect("record serializes"));
    Ok(())
}

pub fn cmd_sample(path: &Path, out: Option<&Path>, n: Option<usize>, seed: Option<u64>) -> Result<()> {
    let (ckpt, cfg) = open_checkpoint(path)?;
    let n = n.unwrap_or(cfg.eval.samples);
    let seed = seed.unwrap_or(cfg.train.seed);
    let imgs = generate(&ckpt.model, n, &mut Rng::with_stream(seed, SAMPLE_STREAM), cfg.eval.sample_mode)?;
    let dir = checkpoint_out(path, out)?;
    write_grid(&dir.join("samples.pgm"), &imgs, cfg.eval.grid_columns)?;
    println!("wrote {n} samples to {}", dir.join("samples.pgm").display());
    Ok(())
}

pub fn cmd_mi(path: &Path, out: Option<&Path>, n: Option<usize>, seed: Option<u64>) -> Result<()> {
    let (ckpt, cfg) = open_checkpoint(path)?;
    let data = cfg.load_data()?;
    let n = n.unwrap_or(cfg.eval.mi_samples);
    let seed = seed.unwrap_or(cfg.train.seed);
    let est = mi_marginal_kl(&ckpt.model, &data.test, n, &mut Rng::with_stream(seed, MI_STREAM))?;
    let dir = checkpoint_out(path, out)?;
    Table::create(&dir.join("mi.csv"), &MI_COLUMNS)?.mi(&est)?;
    println!("{}", serde_json::to_string(&est).expect("estimate serializes"));
    Ok(())
}

fn report_failures(rows: &[sigvae::metrics::SweepRow]) {
    for r in rows.iter().filter(|r| r.record.is_none()) {
        eprintln!("row {} FAILED: {}", r.label, r.error.as_deref().unwrap_or(""));
    }
}

pub fn cmd_sweep_beta(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = cfg.load_data()?;
    prepare_out(cfg, out)?;
    let rows = beta_sweep(&data.train, &data.test, &cfg.sweep.betas, &cfg.train, &cfg.eval.settings())?;
    let mut table = Table::create(&out.join("sweep_beta.csv"), &SWEEP_COLUMNS)?;
    for r in &rows {
        table.sweep(r)?;
    }
    report_failures(&rows);
    println!("{} rows in {}", rows.len(), out.join("sweep_beta.csv").display());
    Ok(())
}

pub fn cmd_share_sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = cfg.load_data()?;
    prepare_out(cfg, out)?;
    let rows = sharing_sweep(&data.train, &data.test, &cfg.sweep.schemes, &cfg.train, &cfg.eval.settings())?;
    let mut table = Table::create(&out.join("sweep_sharing.csv"), &SWEEP_COLUMNS)?;
    for r in &rows {
        table.sweep(r)?;
    }
    report_failures(&rows);
    println!("{} rows in {}", rows.len(), out.join("sweep_sharing.csv").display());
    Ok(())
}
