//! The `mfds` command line.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime failures (I/O, non-finite loss, fold mismatch).

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use mfds_core::checkpoint::{self, CheckpointMeta};
use mfds_core::metrics::{binarize, compute_metrics, render_overlay, tally, ConfusionCounts, MetricsReport};
use mfds_core::model::Model;
use mfds_core::train::{self, Trainer};
use mfds_core::Tensor;
use mfds_data::io::{self as dio, save_png};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Largest tolerated deviation between folded and unfolded logits.
pub const FOLD_TOLERANCE: f32 = 1e-4;
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Parser)]
#[command(name = "mfds", version, about = "Bi-temporal change detection")]
struct Cli {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `section.key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset in the A/B/label layout.
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and keep the best checkpoint by validation F1.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from a checkpoint; epoch numbering carries on.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report F1, IoU, precision, recall and OA of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        overlay_dir: Option<PathBuf>,
        /// Directory receiving the metrics record.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replace every over-parameterized convolution by its folded kernel.
    Fold {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        probes: usize,
        #[arg(long, default_value_t = 64)]
        probe_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Change mask and probability heatmap for one image pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        /// Output directory for mask.png and heatmap.png.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Print every configuration key with its value.
    PrintConfig,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io(e: std::io::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Maps `MFDS_NUM_THREADS` onto the matrix kernel's thread setting. The
/// default is one thread.
fn configure_threads() {
    if std::env::var_os("MATMUL_NUM_THREADS").is_none() {
        let n = std::env::var("MFDS_NUM_THREADS").unwrap_or_else(|_| "1".into());
        std::env::set_var("MATMUL_NUM_THREADS", n);
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{}", e.render()) } else { write!(out, "{}", e.render()) };
            return code;
        }
    };
    configure_threads();
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn base_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    let pairs = cli
        .set
        .iter()
        .map(|s| s.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`"))))
        .collect::<CliResult<Vec<_>>>()?;
    cfg.apply(pairs).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn require(p: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    p.ok_or_else(|| CliError::Usage(format!("{what} is required (flag or config)")))
}

fn execute(cli: Cli, out: &mut dyn Write) -> CliResult {
    let mut cfg = base_config(&cli)?;
    match cli.command {
        Command::PrintConfig => {
            write!(out, "{}", cfg.dump()).map_err(io)?;
            Ok(())
        }
        Command::Generate { out: dir, count, seed, size, split } => {
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            if let Some(s) = size {
                cfg.synth.size = s;
            }
            let split = split.unwrap_or(cfg.paths.split.clone());
            let dir = require(dir.or(cfg.paths.out.clone()), "--out")?;
            cmd_generate(&cfg, &dir, &split, count, out)
        }
        Command::Train { data, split, out: dir, epochs, lr, seed, batch_size, resume } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(l) = lr {
                cfg.train.learning_rate = l;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.model.init_seed = s;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            let data = require(data.or(cfg.paths.data.clone()), "--data")?;
            let dir = require(dir.or(cfg.paths.out.clone()), "--out")?;
            let split = split.unwrap_or(cfg.paths.split.clone());
            cmd_train(&cfg, &data, &split, &dir, resume.as_deref(), out)
        }
        Command::Eval { checkpoint, data, split, threshold, overlay_dir, out: dir } => {
            if let Some(t) = threshold {
                cfg.train.threshold = t;
            }
            let data = require(data.or(cfg.paths.data.clone()), "--data")?;
            let split = split.unwrap_or(cfg.paths.split.clone());
            let dir = dir.or(cfg.paths.out.clone());
            cmd_eval(&cfg, &checkpoint, &data, &split, overlay_dir.as_deref(), dir.as_deref(), out).map(|_| ())
        }
        Command::Fold { checkpoint, out: dest, probes, probe_size, seed } => {
            cmd_fold(&checkpoint, &dest, probes, probe_size, seed, out).map(|_| ())
        }
        Command::Predict { checkpoint, image_a, image_b, out: dir, threshold } => {
            if let Some(t) = threshold {
                cfg.train.threshold = t;
            }
            cmd_predict(&cfg, &checkpoint, &image_a, &image_b, &dir, out)
        }
    }
}

pub fn cmd_generate(cfg: &RunConfig, dir: &Path, split: &str, count: usize, out: &mut dyn Write) -> CliResult {
    cfg.synth.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let samples = mfds_data::synth::pairs(mfds_data::generate(&cfg.synth, count).map_err(rt)?);
    dio::write_dataset(dir, split, &samples).map_err(rt)?;
    let changed: usize = samples.iter().map(|s| s.changed_pixels()).sum();
    let total: usize = samples.iter().map(|s| s.height() * s.width()).sum();
    writeln!(
        out,
        "generated {count} samples of {0}x{0} seed {1}\nchange_fraction {2}",
        cfg.synth.size,
        cfg.synth.seed,
        changed as f64 / total as f64
    )
    .map_err(io)?;
    Ok(())
}

fn load_samples(data: &Path, split: &str) -> CliResult<Vec<mfds_core::sample::SamplePair>> {
    let ds = dio::load_dataset(data, split).map_err(rt)?;
    if ds.is_empty() {
        return Err(CliError::Runtime(format!("no samples under {}", data.join(split).display())));
    }
    ds.load_all().map_err(rt)
}

pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    split: &str,
    dir: &Path,
    resume: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult {
    cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let samples = load_samples(data, split)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(checkpoint::load::<f32>(p).map_err(rt)?, cfg.train.clone()),
        None => Trainer::new(Model::<f32>::new(cfg.model.clone()).map_err(rt)?, cfg.train.clone()),
    }
    .map_err(rt)?;
    let mut write_err = None;
    let report = trainer
        .train_with(&samples, Some(dir), |r| {
            if let Err(e) = writeln!(
                out,
                "epoch {:>4}  loss {:.6}  val F1 {:.3}  IoU {:.3}  {:.1}s",
                r.epoch,
                r.train_loss,
                100.0 * r.val_f1,
                100.0 * r.val_iou,
                r.wall_seconds
            ) {
                write_err.get_or_insert(e);
            }
        })
        .map_err(rt)?;
    if let Some(e) = write_err {
        return Err(io(e));
    }
    if let (Some(f1), Some(ep)) = (report.best_f1, report.best_epoch) {
        writeln!(out, "best val F1 {:.3} at epoch {ep}", 100.0 * f1).map_err(io)?;
    }
    Ok(())
}

pub fn format_metrics(m: &MetricsReport) -> String {
    format!(
        "{:<10}{:<10}{:<10}{:<10}{:<10}\n{:<10.3}{:<10.3}{:<10.3}{:<10.3}{:<10.3}\n",
        "F1",
        "IoU",
        "Precision",
        "Recall",
        "OA",
        100.0 * m.f1,
        100.0 * m.iou,
        100.0 * m.precision,
        100.0 * m.recall,
        100.0 * m.oa
    )
}

pub fn cmd_eval(
    cfg: &RunConfig,
    ckpt: &Path,
    data: &Path,
    split: &str,
    overlay_dir: Option<&Path>,
    record_dir: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<MetricsReport> {
    let model = checkpoint::load::<f32>(ckpt).map_err(rt)?.model;
    let samples = load_samples(data, split)?;
    let logits = train::predict_logits(&model, &samples, cfg.train.batch_size).map_err(rt)?;
    let mut counts = ConfusionCounts::default();
    for (l, s) in logits.iter().zip(&samples) {
        let pred = binarize(l, cfg.train.threshold);
        counts += tally(&pred, &s.gt).map_err(rt)?;
        if let Some(dir) = overlay_dir {
            let ov = render_overlay(&pred, &s.gt).map_err(rt)?.remove(0);
            let img = image_from_raw(ov.width, ov.height, ov.to_raw());
            save_png(&dir.join(format!("{}.png", s.id)), &img).map_err(rt)?;
        }
    }
    let m = compute_metrics(&counts).map_err(rt)?;
    write!(out, "{}", format_metrics(&m)).map_err(io)?;
    let record = serde_json::to_string(&m).map_err(rt)?;
    writeln!(out, "{record}").map_err(io)?;
    if let Some(dir) = record_dir {
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(METRICS_FILE))
            .map_err(io)?;
        writeln!(f, "{record}").map_err(io)?;
    }
    Ok(m)
}

fn image_from_raw(w: usize, h: usize, raw: Vec<u8>) -> dio::RgbImage {
    dio::RgbImage::from_raw(w as u32, h as u32, raw).expect("raster size")
}

/// Largest deviation of final logits between two models over seeded
/// random image pairs.
pub fn probe_deviation(a: &Model<f32>, b: &Model<f32>, probes: usize, size: usize, seed: u64) -> CliResult<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    for _ in 0..probes {
        let x = Tensor::rand_uniform([1, 3, size, size], 0.0, 1.0, &mut rng);
        let y = Tensor::rand_uniform([1, 3, size, size], 0.0, 1.0, &mut rng);
        let pa = a.infer(&x, &y).map_err(rt)?.final_logits;
        let pb = b.infer(&x, &y).map_err(rt)?.final_logits;
        let d = pa.max_abs_diff(&pb);
        worst = if d.is_nan() { f32::INFINITY } else { worst.max(d) };
    }
    Ok(worst)
}

pub fn cmd_fold(src: &Path, dest: &Path, probes: usize, size: usize, seed: u64, out: &mut dyn Write) -> CliResult<f32> {
    let ckpt = checkpoint::load::<f32>(src).map_err(rt)?;
    let m = ckpt.model.net.size_multiple();
    if size == 0 || size % m != 0 {
        return Err(CliError::Usage(format!("--probe-size must be a positive multiple of {m}")));
    }
    let folded = ckpt.model.folded();
    let dev = probe_deviation(&ckpt.model, &folded, probes, size, seed)?;
    writeln!(out, "max deviation {dev:e} over {probes} probes").map_err(io)?;
    if !(dev <= FOLD_TOLERANCE) {
        return Err(CliError::Runtime(format!("fold verification failed: deviation {dev:e} exceeds {FOLD_TOLERANCE:e}")));
    }
    let meta = CheckpointMeta { adam_step: 0, ..ckpt.meta };
    checkpoint::save(dest, &folded, &meta, None).map_err(rt)?;
    writeln!(out, "wrote {}", dest.display()).map_err(io)?;
    Ok(dev)
}

/// 8-bit probability that agrees with the binary decision at `threshold`.
pub fn heat_value(p: f64, positive: bool, threshold: f64) -> u8 {
    let mut q = (p.clamp(0.0, 1.0) * 255.0).round();
    if positive {
        while q / 255.0 < threshold {
            q += 1.0;
        }
    } else {
        while q / 255.0 >= threshold {
            q -= 1.0;
        }
    }
    q as u8
}

pub fn cmd_predict(
    cfg: &RunConfig,
    ckpt: &Path,
    image_a: &Path,
    image_b: &Path,
    dir: &Path,
    out: &mut dyn Write,
) -> CliResult {
    let model = checkpoint::load::<f32>(ckpt).map_err(rt)?.model;
    let a = dio::read_rgb(image_a).map_err(rt)?;
    let b = dio::read_rgb(image_b).map_err(rt)?;
    if a.shape() != b.shape() {
        return Err(CliError::Runtime(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let logits = model.infer(&a, &b).map_err(rt)?.final_logits;
    let thr = cfg.train.threshold;
    let mask = binarize(&logits, thr);
    let (h, w) = (logits.height(), logits.width());
    let heat: Vec<u8> = logits
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&z, &m)| heat_value(1.0 / (1.0 + (-(z as f64)).exp()), m == 1.0, thr))
        .collect();
    save_png(&dir.join("mask.png"), &dio::mask_image(&mask)).map_err(rt)?;
    let heat_img = dio::GrayImage::from_raw(w as u32, h as u32, heat).expect("raster size");
    save_png(&dir.join("heatmap.png"), &heat_img).map_err(rt)?;
    writeln!(out, "wrote mask.png and heatmap.png ({w}x{h}) to {}", dir.display()).map_err(io)?;
    Ok(())
}
