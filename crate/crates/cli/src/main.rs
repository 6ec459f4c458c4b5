//! `mixtrain`: synthesize datasets, train the attention backbone with the
//! paired uncertainty loss, evaluate checkpoints, and verify gradients.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mixtrain_core::backbone::BackboneConfig;
use mixtrain_core::checkpoint::load_checkpoint;
use mixtrain_core::config::{load_config, parse_usize_list, RunConfig};
use mixtrain_core::data::{load_dataset, save_dataset, synth_generate, Dataset, SynthSpec};
use mixtrain_core::loss::{LossMode, WeightScheme};
use mixtrain_core::metrics::{confusion_csv, report_from_json, report_to_json, EvalReport};
use mixtrain_core::train::{evaluate_params, train, HISTORY_HEADER};
use mixtrain_core::verify::run_gradient_suite;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mixtrain", version, about = "Imbalance-aware training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest + tensor files)
    Synth(SynthArgs),
    /// Train a model; writes history.csv, best.cuck, final.cuck
    Train(TrainArgs),
    /// Load a checkpoint and report metrics on a dataset
    Eval(EvalArgs),
    /// Run the numeric gradient verification suite
    Gradcheck,
    /// Render confusion CSV and metrics JSON from saved artifacts
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Path to a `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for training and dataset synthesis
    #[arg(long)]
    seed: Option<u64>,
    /// Loss: ce | wce | mix | cucn
    #[arg(long, value_parser = parse_loss_mode)]
    loss_mode: Option<LossMode>,
    /// Class weights: none | inv-freq | manual:<w1,w2,...>
    #[arg(long, value_parser = parse_weights_scheme)]
    weights_scheme: Option<WeightScheme>,
    /// Attention on the residual branch: on | off
    #[arg(long, value_parser = parse_on_off)]
    cbam: Option<bool>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Per-class sample counts, e.g. 200,100,40,20
    #[arg(long)]
    counts: Option<String>,
    /// Square image size in pixels
    #[arg(long)]
    size: Option<usize>,
    /// Gaussian pixel noise standard deviation
    #[arg(long)]
    noise: Option<f64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training manifest; synthesized from config when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluation manifest; balanced synthetic split when omitted
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation manifest; balanced synthetic split when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for report.json and confusion.csv; stdout only when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics JSON written by `eval --out`
    #[arg(long)]
    eval: PathBuf,
    /// Training history CSV written by `train`
    #[arg(long)]
    history: Option<PathBuf>,
    /// Directory for confusion.csv and metrics.json; stdout only when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_loss_mode(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: mixtrain_core::Error| e.to_string())
}

fn parse_weights_scheme(s: &str) -> Result<WeightScheme, String> {
    s.parse().map_err(|e: mixtrain_core::Error| e.to_string())
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(mode) = common.loss_mode {
        cfg.train.loss_mode = mode;
    }
    if let Some(scheme) = &common.weights_scheme {
        cfg.train.weights_scheme = scheme.clone();
    }
    if let Some(on) = common.cbam {
        cfg.train.cbam_on = on;
        cfg.backbone.cbam_on = on;
    }
    Ok(cfg)
}

/// Balanced sibling of a synthesis spec: every class at the majority count,
/// offset seed so train and eval never share noise.
fn eval_spec(synth: &SynthSpec, num_classes: usize) -> SynthSpec {
    let per_class = synth.class_counts.iter().copied().max().unwrap_or(100).max(1);
    SynthSpec {
        class_counts: vec![per_class; num_classes],
        image_size: synth.image_size,
        noise_std: synth.noise_std,
        seed: synth.seed.wrapping_add(0x5EED),
    }
}

fn check_dims(ds: &Dataset, arch: &BackboneConfig, what: &str) -> Result<()> {
    let (ch, h, w) = ds.image_dims();
    if ch != arch.in_channels || h != arch.input_size || w != arch.input_size {
        bail!(
            "{what} dataset is {ch}x{h}x{w} but the model expects {}x{}x{}",
            arch.in_channels,
            arch.input_size,
            arch.input_size
        );
    }
    if ds.num_classes() != arch.num_classes {
        bail!(
            "{what} dataset has {} classes but the model expects {}",
            ds.num_classes(),
            arch.num_classes
        );
    }
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let mut spec = cfg.synth;
    if let Some(counts) = &args.counts {
        spec.class_counts = parse_usize_list("counts", counts)?;
    }
    if let Some(size) = args.size {
        spec.image_size = size;
    }
    if let Some(noise) = args.noise {
        spec.noise_std = noise;
    }
    let ds = synth_generate(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    let manifest = save_dataset(&ds, &args.out)?;
    println!(
        "wrote {} images across {} classes to {}",
        ds.len(),
        ds.num_classes(),
        manifest.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let train_ds = match &args.data {
        Some(manifest) => load_dataset(manifest, Some(cfg.backbone.num_classes))
            .with_context(|| format!("loading {}", manifest.display()))?,
        None => synth_generate(&cfg.synth)?,
    };
    let eval_ds = match &args.eval_data {
        Some(manifest) => load_dataset(manifest, Some(cfg.backbone.num_classes))
            .with_context(|| format!("loading {}", manifest.display()))?,
        None => synth_generate(&eval_spec(&cfg.synth, cfg.backbone.num_classes))?,
    };
    check_dims(&train_ds, &cfg.backbone, "training")?;
    check_dims(&eval_ds, &cfg.backbone, "evaluation")?;
    std::fs::create_dir_all(&args.out)?;
    let outcome = train(&cfg.train, &cfg.backbone, &train_ds, &eval_ds, &args.out)?;
    println!(
        "trained {} epochs; best eval accuracy {:.4} at epoch {}",
        outcome.history.len(),
        outcome.best_acc,
        outcome.best_epoch
    );
    println!("history: {}", outcome.history_path.display());
    println!("best checkpoint: {}", outcome.best_path.display());
    println!("final checkpoint: {}", outcome.final_path.display());
    Ok(())
}

fn write_report(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    let json = report_to_json(report)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let json_path = dir.join("report.json");
        let csv_path = dir.join("confusion.csv");
        std::fs::write(&json_path, &json)?;
        std::fs::write(&csv_path, confusion_csv(&report.confusion))?;
        println!("report: {}", json_path.display());
        println!("confusion: {}", csv_path.display());
    } else {
        println!("{json}");
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let (params, arch, _) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let ds = match &args.data {
        Some(manifest) => load_dataset(manifest, Some(arch.num_classes))
            .with_context(|| format!("loading {}", manifest.display()))?,
        None => {
            let mut spec = eval_spec(&cfg.synth, arch.num_classes);
            spec.image_size = arch.input_size;
            synth_generate(&spec)?
        }
    };
    check_dims(&ds, &arch, "evaluation")?;
    let report = evaluate_params(&params, &arch, &ds, cfg.train.batch_size)?;
    write_report(&report, args.out.as_deref())
}

fn run_gradcheck() -> Result<i32> {
    let outcomes = run_gradient_suite()?;
    let mut failures = 0;
    for o in &outcomes {
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<18} max_rel_err {:11.3e}  tol {:.0e}",
            o.name, o.max_rel_err, o.tolerance
        );
        if !o.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        eprintln!("{failures} of {} gradient checks failed", outcomes.len());
        return Ok(1);
    }
    println!("all {} gradient checks passed", outcomes.len());
    Ok(0)
}

fn run_report(args: &ReportArgs) -> Result<()> {
    let json = std::fs::read_to_string(&args.eval)
        .with_context(|| format!("reading {}", args.eval.display()))?;
    let report = report_from_json(&json)?;
    if let Some(history) = &args.history {
        let text = std::fs::read_to_string(history)
            .with_context(|| format!("reading {}", history.display()))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == HISTORY_HEADER => {}
            _ => bail!("{} is not a training history file", history.display()),
        }
        let epochs = lines.clone().count();
        println!("epochs trained: {epochs}");
        if let Some(last) = lines.last() {
            println!("last epoch: {last}");
        }
    }
    println!(
        "overall {:.4}  max {:.4}  min {:.4}  gap {:.4}",
        report.overall_acc, report.max_class_acc, report.min_class_acc, report.acc_gap
    );
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join("confusion.csv");
        let json_path = dir.join("metrics.json");
        std::fs::write(&csv_path, confusion_csv(&report.confusion))?;
        std::fs::write(&json_path, report_to_json(&report)?)?;
        println!("confusion: {}", csv_path.display());
        println!("metrics: {}", json_path.display());
    } else {
        print!("{}", confusion_csv(&report.confusion));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth(args) => run_synth(args).map(|_| 0),
        Command::Train(args) => run_train(args).map(|_| 0),
        Command::Eval(args) => run_eval(args).map(|_| 0),
        Command::Gradcheck => run_gradcheck(),
        Command::Report(args) => run_report(args).map(|_| 0),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
