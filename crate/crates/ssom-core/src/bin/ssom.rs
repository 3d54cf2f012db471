//! Command-line driver: dataset generation, training, evaluation, single-image
//! prediction, rank inspection, and gradient self-checks.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssom_core::adalora::RankAllocator;
use ssom_core::checkpoint::{self, load_full, save_base};
use ssom_core::config::RunConfig;
use ssom_core::data::{generate_synthetic, read_ppm, write_pgm_mask, DatasetManifest};
use ssom_core::error::SsomError;
use ssom_core::metrics::{adaptive_threshold, evaluate_dataset, ThresholdMode};
use ssom_core::model::{binarize, predict_logits, SsomModel};
use ssom_core::tape::sigmoid;
use ssom_core::tensor::Tensor;
use ssom_core::trainer::{param_report, Trainer};

#[derive(Parser)]
#[command(name = "ssom", about = "Saliency segmentation with budgeted low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes-on-noise dataset with ground-truth masks
    GenData {
        /// Output directory (one dataset per directory)
        #[arg(long)]
        out: PathBuf,
        /// Number of samples
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Square image side in pixels
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Split label recorded in the manifest
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Initialize a model and save its frozen backbone as a base checkpoint
    InitBase {
        #[arg(long)]
        out: PathBuf,
        /// Optional `key = value` config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides, highest precedence
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train on a generated dataset
    Train {
        /// Dataset directory containing manifest.tsv
        #[arg(long)]
        data: PathBuf,
        /// Output directory for logs and checkpoints
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Resume from a full checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `adaptive` or `fixed:<t>`
        #[arg(long, default_value = "adaptive")]
        threshold: String,
        /// Write the per-sample CSV here (stdout gets the summary)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a binary mask for one image
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "adaptive")]
        threshold: String,
    },
    /// Show per-adapter retained ranks and importance scores
    InspectRanks {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run finite-difference gradient checks on the core operators
    GradCheck {
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
}

fn parse_threshold(s: &str) -> Result<ThresholdMode, SsomError> {
    if s == "adaptive" {
        return Ok(ThresholdMode::Adaptive);
    }
    if let Some(v) = s.strip_prefix("fixed:") {
        let t: f64 = v
            .parse()
            .map_err(|_| SsomError::Config(format!("invalid threshold {s:?}")))?;
        if !(0.0..=1.0).contains(&t) {
            return Err(SsomError::Config(format!("threshold {t} outside [0,1]")));
        }
        return Ok(ThresholdMode::Fixed(t));
    }
    Err(SsomError::Config(format!(
        "invalid threshold {s:?} (expected adaptive or fixed:<t>)"
    )))
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<RunConfig, SsomError> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| SsomError::Config(format!("--set expects key=value, found {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.encoder.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), SsomError> {
    match cli.command {
        Command::GenData {
            out,
            n,
            image_size,
            seed,
            split,
        } => {
            let manifest = generate_synthetic(&out, n, image_size, seed, &split)?;
            println!(
                "wrote {} samples ({}x{}) to {}",
                manifest.entries.len(),
                image_size,
                image_size,
                out.display()
            );
        }
        Command::InitBase { out, config, set, seed } => {
            let cfg = load_config(&config, &set)?;
            // schedule placeholder: base checkpoints carry no training state
            let schedule = cfg.resolve_schedule(100, cfg.encoder.adapter_slots())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = SsomModel::new(cfg.encoder.clone(), RankAllocator::new(schedule), &mut rng)?;
            save_base(&out, &model)?;
            let report = param_report(&model);
            println!(
                "base checkpoint: {} ({} frozen of {} total parameters)",
                out.display(),
                report.frozen,
                report.total
            );
        }
        Command::Train {
            data,
            out,
            config,
            set,
            resume,
        } => {
            let manifest = DatasetManifest::load(&data)?;
            let samples = manifest.load_samples()?;
            let (mut model, mut trainer) = match resume {
                Some(ckpt) => load_full(&ckpt)?,
                None => {
                    let cfg = load_config(&config, &set)?;
                    let mut trainer = Trainer::new(cfg.train.clone())?;
                    let total = trainer.total_steps(samples.len());
                    let schedule = match &cfg.train.schedule {
                        Some(s) => s.clone(),
                        None => cfg.resolve_schedule(total, cfg.encoder.adapter_slots())?,
                    };
                    trainer.config.schedule = Some(schedule.clone());
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
                    let model =
                        SsomModel::new(cfg.encoder.clone(), RankAllocator::new(schedule), &mut rng)?;
                    (model, trainer)
                }
            };
            let side = model.config().image_size;
            for s in &samples {
                if s.image.shape() != [side, side, 3] {
                    return Err(SsomError::Data(format!(
                        "sample {} has shape {:?} but the model expects {side}x{side}",
                        s.id,
                        s.image.shape()
                    )));
                }
            }
            let report_counts = param_report(&model);
            println!(
                "training {} samples, {} steps, {} trainable / {} total parameters",
                samples.len(),
                trainer.total_steps(samples.len()),
                report_counts.trainable,
                report_counts.total
            );
            let report = trainer.train(&mut model, &samples, &out)?;
            println!(
                "done: loss {:.6} -> {:.6}, checkpoint {}",
                report.initial_total,
                report.final_total,
                report.final_checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            threshold,
            out,
        } => {
            let mode = parse_threshold(&threshold)?;
            let (model, _) = load_full(&checkpoint)?;
            let manifest = DatasetManifest::load(&data)?;
            let samples = manifest.load_samples()?;
            let items: Vec<(String, Tensor, Tensor)> = samples
                .into_iter()
                .map(|s| (s.id, s.image, s.mask))
                .collect();
            let report = evaluate_dataset(&model, &items, mode)?;
            if let Some(path) = out {
                std::fs::write(&path, report.to_csv())?;
            }
            println!(
                "n={} threshold={} f_beta={:.6} mae={:.6}",
                report.per_sample.len(),
                report.threshold_mode,
                report.f_beta,
                report.mae
            );
        }
        Command::Predict {
            checkpoint,
            image,
            out,
            threshold,
        } => {
            let mode = parse_threshold(&threshold)?;
            let (model, _) = load_full(&checkpoint)?;
            let img = read_ppm(&image)?;
            let logits = predict_logits(&model, &img)?;
            let probs = Tensor::new(
                logits.shape().to_vec(),
                logits.data().iter().map(|v| sigmoid(*v)).collect(),
            )?;
            let t = match mode {
                ThresholdMode::Fixed(t) => t,
                ThresholdMode::Adaptive => adaptive_threshold(&probs),
            };
            let mask = binarize(&logits, t);
            write_pgm_mask(&out, &mask)?;
            let area: f64 = mask.data().iter().sum::<f64>() / mask.len() as f64;
            println!("wrote {} (threshold {t:.4}, salient area {:.1}%)", out.display(), 100.0 * area);
        }
        Command::InspectRanks { checkpoint } => {
            let ckpt = checkpoint::load(&checkpoint)?;
            if ckpt.header.kind != "full" {
                return Err(SsomError::Checkpoint(
                    "inspect-ranks needs a full checkpoint".into(),
                ));
            }
            println!("step {}", ckpt.header.step);
            println!("adapter\tretained\trank\t|lambda|");
            let mut lambda_entries: Vec<_> = ckpt
                .header
                .directory
                .iter()
                .filter(|e| e.name.ends_with(".adapter.lambda") && !e.name.starts_with("optim."))
                .collect();
            lambda_entries.sort_by_key(|e| e.offset);
            for e in &lambda_entries {
                let values = &ckpt.payload[e.offset..e.offset + e.len];
                let nnz = values.iter().filter(|v| **v != 0.0).count();
                let scores: Vec<String> = values.iter().map(|v| format!("{:.3e}", v.abs())).collect();
                let base = e.name.trim_end_matches(".adapter.lambda");
                println!("{base}\t{nnz}\t{}\t[{}]", e.len, scores.join(","));
            }
        }
        Command::GradCheck { eps } => {
            let results = ssom_core::gradcheck::standard_suite(eps)?;
            let mut worst: f64 = 0.0;
            for (name, err) in &results {
                println!("{name}: max rel err {err:.3e}");
                worst = worst.max(*err);
            }
            println!("worst: {worst:.3e}");
            if !worst.is_finite() || worst > 1e-4 {
                return Err(SsomError::Numeric(format!(
                    "gradient check failed: worst error {worst:.3e} > 1e-4"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // clap exits with code 2 on usage errors
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                SsomError::Config { .. } => 2,
                SsomError::Data { .. } | SsomError::Io { .. } | SsomError::Checkpoint { .. } => 3,
                _ => 4,
            };
            ExitCode::from(code)
        }
    }
}
