//! `relight`: enhancement, training, evaluation and serving from the shell.
//!
//! Every failure prints one JSON object on standard error,
//! `{"error": kind, "path": path-or-null, "message": text}`, and exits with
//! status 2.

mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relight::checkpoint::load_model;
use relight::data::synth::{write_lol_layout, SynthConfig};
use relight::data::{load_lol_with_split, AugmentConfig, ImagePair, LOL_TRAIN_COUNT};
use relight::eval::{evaluate_model, hsv_recombination_check, literature_table};
use relight::imaging::{load_image, mean_value, save_image, write_atomic, MetricReport};
use relight::losses::calibrate_margin;
use relight::model::{enhance, ArchSpec};
use relight::training::{train, TrainConfig};
use relight::{Error, Result};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "relight", version, about = "Reference-guided low-light image enhancement")]
struct Cli {
    /// Log progress to standard error.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Enhance one image to the brightness of a reference.
    Enhance(EnhanceArgs),
    /// Enhance one image once per reference in a directory.
    Multilevel(MultilevelArgs),
    /// Train a model on a LoL-layout directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split (reference = ground truth).
    Eval(EvalArgs),
    /// Diagnostics.
    #[command(subcommand)]
    Diag(Diag),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write a synthetic paired dataset in the LoL layout.
    Synth(SynthArgs),
    /// Mean squared luminance-span distance between low and normal images.
    Calibrate(CalibrateArgs),
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[arg(long)]
    low: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ground truth; prints `psnr_db=<x> ssim=<y>` for the output.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Accepted for config compatibility; inference is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct MultilevelArgs {
    #[arg(long)]
    low: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory; receives `<low>__<ref>.png` and `summary.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Accepted for config compatibility; inference is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct ArchArgs {
    #[arg(long, default_value_t = ArchSpec::default().depth)]
    depth: usize,
    #[arg(long, default_value_t = ArchSpec::default().base_channels)]
    base_channels: usize,
    #[arg(long, default_value_t = ArchSpec::default().latent_dim)]
    latent_dim: usize,
    #[arg(long, default_value_t = ArchSpec::default().luminance_dim)]
    luminance_dim: usize,
}

impl ArchArgs {
    fn spec(&self) -> ArchSpec {
        ArchSpec {
            depth: self.depth,
            base_channels: self.base_channels,
            latent_dim: self.latent_dim,
            luminance_dim: self.luminance_dim,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    epochs: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.08)]
    alpha: f64,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    checkpoint_every: u64,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Loss log; defaults to `<out>/train_log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = LOL_TRAIN_COUNT)]
    train_count: usize,
    #[arg(long, default_value_t = 0.5)]
    patch_prob: f64,
    #[arg(long, default_value_t = 100)]
    patch_size: usize,
    #[arg(long)]
    no_flip: bool,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum SplitName {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    #[arg(long, default_value_t = LOL_TRAIN_COUNT)]
    train_count: usize,
}

impl SplitArgs {
    fn load(&self) -> Result<Vec<ImagePair>> {
        let s = load_lol_with_split(&self.data, self.train_count)?;
        let pairs = match self.split {
            SplitName::Train => s.train,
            SplitName::Test => s.test,
            SplitName::All => s.train.into_iter().chain(s.test).collect(),
        };
        if pairs.is_empty() {
            return Err(Error::Argument(format!(
                "the {:?} split of {} is empty",
                self.split,
                self.data.display()
            )));
        }
        Ok(pairs)
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    /// Also print published LoL scores next to this run's mean.
    #[arg(long)]
    literature: bool,
}

#[derive(Subcommand, Debug)]
enum Diag {
    /// PSNR of (H_low, S_low, V_gt) against the ground truth.
    HsvRecombine(SplitArgs),
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = relight_service::DEFAULT_MAX_UPLOAD_MB)]
    max_upload_mb: usize,
    /// Allowed browser origin; any origin when omitted.
    #[arg(long)]
    cors_origin: Option<String>,
    /// Keep this many recent results for `GET /session`.
    #[arg(long, default_value_t = 0)]
    session_cache: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = 400)]
    height: usize,
    #[arg(long, default_value_t = 600)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value_t = 20)]
    pairs: usize,
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::Argument(format!("{} has no usable file name", path.display())))
}

fn cmd_enhance(a: &EnhanceArgs) -> Result<()> {
    let params = load_model(&a.ckpt)?;
    let low = load_image(&a.low)?;
    let reference = load_image(&a.reference)?;
    let gt = a.gt.as_ref().map(load_image).transpose()?;
    let out = enhance(&low, &reference, &params)?;
    save_image(&out, &a.out)?;
    if let Some(gt) = gt {
        // Score what was written, not the unquantized output.
        let written = load_image(&a.out)?;
        let m = MetricReport::measure(&written, &gt)?;
        println!("psnr_db={:.4} ssim={:.4}", m.psnr_db, m.ssim);
    }
    Ok(())
}

/// Image files in `dir`, sorted by name.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn cmd_multilevel(a: &MultilevelArgs) -> Result<()> {
    let refs = list_images(&a.refs)?;
    if refs.is_empty() {
        return Err(Error::Argument(format!("no reference images in {}", a.refs.display())));
    }
    let params = load_model(&a.ckpt)?;
    let low = load_image(&a.low)?;
    let low_stem = stem(&a.low)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut csv = String::from("ref,ref_mean_v,output_mean_v,output\n");
    println!("{:<24} {:>10} {:>10}", "reference", "ref mean V", "out mean V");
    for path in refs {
        let reference = load_image(&path)?;
        let ref_stem = stem(&path)?;
        let out = enhance(&low, &reference, &params)?;
        let name = format!("{low_stem}__{ref_stem}.png");
        save_image(&out, a.out.join(&name))?;
        let (rv, ov) = (mean_value(&reference), mean_value(&out));
        println!("{ref_stem:<24} {rv:>10.4} {ov:>10.4}");
        csv.push_str(&format!("{ref_stem},{rv},{ov},{name}\n"));
    }
    write_atomic(&a.out.join("summary.csv"), csv.as_bytes())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        lambda_f: a.lambda,
        alpha_margin: a.alpha,
        seed: a.seed,
        crop: a.crop,
        checkpoint_every: a.checkpoint_every,
        log_path: a.log.clone().unwrap_or_else(|| a.out.join("train_log.jsonl")),
        data_root: a.data.clone(),
        out_dir: a.out.clone(),
        arch: a.arch.spec(),
        augment: AugmentConfig { flip: !a.no_flip, patch_swap_prob: a.patch_prob, patch_size: a.patch_size },
        train_count: a.train_count,
        max_steps: a.max_steps,
        resume: a.resume.clone(),
    };
    let path = train(&cfg)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let params = load_model(&a.ckpt)?;
    let report = evaluate_model(&params, &a.split.load()?)?;
    report.write_csv(&a.out)?;
    print!("{}", report.to_table());
    if a.literature {
        print!("\n{}", literature_table(&report));
    }
    Ok(())
}

fn cmd_hsv(a: &SplitArgs) -> Result<()> {
    let d = hsv_recombination_check(&a.load()?)?;
    println!("{:<12} {:>14} {:>12}", "id", "recombined dB", "raw low dB");
    for ((id, r), l) in d.ids.iter().zip(&d.recombined_psnr).zip(&d.low_psnr) {
        println!("{id:<12} {r:>14.4} {l:>12.4}");
    }
    println!("recombined_median_db={:.4} low_median_db={:.4}", d.recombined_median(), d.low_median());
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let cfg = relight_service::ServeConfig {
        ckpt: a.ckpt.clone(),
        refs: a.refs.clone(),
        host: a.host.clone(),
        port: a.port,
        max_upload_bytes: a.max_upload_mb << 20,
        cors_origin: a.cors_origin.clone(),
        session_cache: a.session_cache,
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io { path: PathBuf::from("<runtime>"), source: e })?;
    rt.block_on(relight_service::serve(cfg))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig { height: a.height, width: a.width, seed: a.seed, ..SynthConfig::default() };
    write_lol_layout(&a.out, &cfg, a.count)?;
    println!("wrote {} pairs to {}", a.count, a.out.display());
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let params = load_model(&a.ckpt)?;
    let pairs: Vec<_> = a.split.load()?.into_iter().take(a.pairs).map(|p| (p.low, p.reference)).collect();
    println!("alpha={}", calibrate_margin(&pairs, &params)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Enhance(a) => cmd_enhance(a),
        Command::Multilevel(a) => cmd_multilevel(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Diag(Diag::HsvRecombine(a)) => cmd_hsv(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    }
}

fn report(kind: &str, path: Option<&Path>, message: &str) -> ExitCode {
    let line = json!({
        "error": kind,
        "path": path.map(|p| p.display().to_string()),
        "message": message,
    });
    let _ = writeln!(std::io::stderr(), "{line}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let args: Vec<OsString> = std::env::args_os().collect();
    let args = match config::apply(args) {
        Ok(a) => a,
        Err(e) => return report(e.kind(), e.path(), &e.to_string()),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return report("usage", None, first);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e.kind(), e.path(), &e.to_string()),
    }
}
