//! `marl` command-line surface: dataset generation, prior pretraining,
//! training, evaluation, the ablation grid, ε sweeps, and attention export.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, bad config,
//! missing inputs), 2 runtime failure.

mod grids;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use marl_core::data::{generate_synthetic, load_manifest, DatasetStats, SyntheticConfig};
use marl_core::error::Error;
use marl_core::eval::{evaluate, export_attention, EvalOptions};
use marl_core::model::Model;
use marl_core::train::{
    load_model_params, pretrain_priors, train, Checkpoint, RunConfig,
};

/// Environment variable naming the default root for relative output paths.
const OUT_ROOT_ENV: &str = "MARL_OUT_ROOT";

#[derive(Parser)]
#[command(name = "marl", version, about = "Multi-agent RL for multi-label image classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic multi-label benchmark dataset.
    GenSynthetic(GenArgs),
    /// Train only the prior agents on a domain and write priors.ckpt.
    PretrainPriors(RunArgs),
    /// Train the full framework per the run config.
    Train(RunArgs),
    /// Evaluate a checkpoint on a manifest (ε = 0, no augmentation).
    Eval(EvalArgs),
    /// Run the 9-row ablation grid and emit a Markdown + CSV table.
    Ablate(grids::AblateArgs),
    /// Train at several eps_min values and emit an AUC-vs-ε table.
    SweepEpsilon(grids::SweepArgs),
    /// Export decoder attention maps and the position map for one sample.
    ExportAttn(ExportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory (manifest.csv, images/, dataset_meta.json).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 2500)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Per-class presence probability (applied to every class).
    #[arg(long, default_value_t = 0.4)]
    class_prob: f64,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the config's eps_min.
    #[arg(long)]
    eps_min: Option<f64>,
    /// Allow replacing an existing run directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write metrics.json (defaults next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Sample index within the manifest.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Resolve a possibly relative path under `MARL_OUT_ROOT`.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn apply_overrides(cfg: &mut RunConfig, args: &RunArgs) {
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(d) = &args.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(e) = args.eps_min {
        cfg.eps_min = e;
    }
    if args.overwrite {
        cfg.overwrite = true;
    }
    cfg.out_dir = resolve_out(&cfg.out_dir);
}

/// Rebuild the model a checkpoint was trained with, from its config echo.
fn model_from_checkpoint(ck: &Checkpoint) -> Result<(Model<f32>, RunConfig, DatasetStats), Error> {
    let rec = ck
        .get("config")
        .ok_or_else(|| Error::Format("checkpoint has no config record".to_string()))?;
    let marl_core::train::Payload::Bytes(raw) = &rec.payload else {
        return Err(Error::Format("config record is not a byte blob".to_string()));
    };
    let text = std::str::from_utf8(raw)
        .map_err(|e| Error::Format(format!("config record not UTF-8: {e}")))?;
    let cfg = RunConfig::from_json(text)?;
    let model = Model::new(&cfg.model_config(), cfg.toggles(), cfg.seed)?;
    load_model_params(&model, ck)?;
    let stats = DatasetStats {
        mean: ck
            .f64_value("meta/data_mean")
            .ok_or_else(|| Error::Format("checkpoint missing meta/data_mean".to_string()))?,
        std: ck
            .f64_value("meta/data_std")
            .ok_or_else(|| Error::Format("checkpoint missing meta/data_std".to_string()))?,
    };
    Ok((model, cfg, stats))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Command::GenSynthetic(args) => {
            let out = resolve_out(&args.out);
            let classes = args.classes;
            let cfg = SyntheticConfig {
                classes,
                image_size: args.size,
                samples: args.samples,
                class_probs: vec![args.class_prob; classes],
                contrasts: (0..classes)
                    .map(|c| 0.55 + 0.30 * c as f64 / (classes.max(2) - 1) as f64)
                    .collect(),
                noise_rate: args.noise,
                seed: args.seed,
            };
            let ds = generate_synthetic(&cfg, &out)?;
            println!(
                "wrote {} samples ({} classes, {}x{}) to {}",
                ds.len(),
                ds.classes,
                ds.width,
                ds.height,
                out.display()
            );
            Ok(())
        }
        Command::PretrainPriors(args) => {
            let mut cfg = RunConfig::load(&args.config)?;
            apply_overrides(&mut cfg, &args);
            let path = pretrain_priors::<f32>(&cfg)?;
            println!("prior checkpoint written to {}", path.display());
            Ok(())
        }
        Command::Train(args) => {
            let mut cfg = RunConfig::load(&args.config)?;
            apply_overrides(&mut cfg, &args);
            let out = train::<f32>(&cfg)?;
            println!("run directory: {}", out.run_dir.display());
            for row in &out.epochs {
                println!(
                    "epoch {:>3}: val mean AUC {}  losses p={:.4} ptd={:.4} td={:.4} d={:.4}",
                    row.epoch,
                    row.val
                        .mean_auc
                        .map_or("undefined".to_string(), |a| format!("{a:.4}")),
                    row.loss_p,
                    row.loss_ptd,
                    row.loss_td,
                    row.loss_d
                );
            }
            if let (Some(auc), Some(ep)) = (out.best_val_auc, out.best_epoch) {
                println!("best val mean AUC {auc:.4} at epoch {ep}");
            }
            Ok(())
        }
        Command::Eval(args) => {
            let ck = Checkpoint::load(&args.checkpoint)?;
            let (model, cfg, stats) = model_from_checkpoint(&ck)?;
            let root = args.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
            let ds = load_manifest(&args.manifest, &root)?;
            if ds.classes != cfg.classes {
                return Err(Error::Config(format!(
                    "manifest has {} classes, checkpoint model has {}",
                    ds.classes, cfg.classes
                )));
            }
            let report = evaluate(
                &model,
                &ds,
                stats,
                &EvalOptions {
                    batch_size: 32,
                    bootstrap_resamples: args.resamples,
                    seed: args.seed,
                },
            )?;
            let out = args.out.map(|p| resolve_out(&p)).unwrap_or_else(|| {
                args.checkpoint
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_default()
            });
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join("metrics.json");
            let envelope = serde_json::json!({
                "checkpoint": args.checkpoint,
                "manifest": args.manifest,
                "resamples": args.resamples,
                "seed": args.seed,
                "report": report,
            });
            std::fs::write(&path, serde_json::to_string_pretty(&envelope).unwrap())
                .map_err(|e| Error::io(&path, e))?;
            let per_class: Vec<String> = report
                .per_class_auc
                .iter()
                .map(|a| a.map_or("undefined".to_string(), |v| format!("{v:.4}")))
                .collect();
            match report.mean_auc {
                Some(m) => println!(
                    "mean AUC {m:.4}{} over {} samples; per-class [{}]",
                    report
                        .mean_ci
                        .map_or(String::new(), |(lo, hi)| format!(" (95% CI {lo:.4}-{hi:.4})")),
                    report.samples,
                    per_class.join(", ")
                ),
                None => println!("mean AUC undefined on this split"),
            }
            println!("metrics written to {}", path.display());
            Ok(())
        }
        Command::Ablate(args) => grids::run_ablation(args),
        Command::SweepEpsilon(args) => grids::run_sweep(args),
        Command::ExportAttn(args) => {
            let ck = Checkpoint::load(&args.checkpoint)?;
            let (model, _cfg, stats) = model_from_checkpoint(&ck)?;
            let root = args.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
            let ds = load_manifest(&args.manifest, &root)?;
            let out = resolve_out(&args.out);
            let files = export_attention(&model, &ds, args.index, stats, &out)?;
            println!("wrote {files} files to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
