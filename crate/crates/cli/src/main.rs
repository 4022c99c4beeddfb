//! Command-line front end for the two-stage thigh-muscle segmentation
//! pipeline.
//!
//! A run directory (`--out-dir`) collects everything a run produces:
//! `config.toml`, `run.json`, `plg/`, `records/`, `pld/`, `eval/` and
//! `predictions/`. Later subcommands read the artefacts of earlier ones from
//! the same directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use imfseg::data_model::TrainingConfig;
use imfseg::evaluation::{evaluate_model, save_overlay};
use imfseg::par::Execution;
use imfseg::phantom::{generate_dataset, DatasetSpec, PhantomSpec};
use imfseg::pipeline::{
    parse_axes, pld_samples, pld_train, plg_train, predict, pseudo_generate, run_ablation, Dataset, RunDir,
    TrainOptions, CHECKPOINT_FILE,
};
use imfseg::preprocessing_io::{self as pio, Checkpoint, DatasetManifest, DATA_ROOT_ENV};
use imfseg::pseudolabel::RecordStore;

#[derive(Parser)]
#[command(
    name = "imfseg",
    version,
    about = "Few-shot thigh muscle segmentation that excludes intramuscular fat"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML training config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (or dataset directory for `phantom-generate`).
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    /// Root that manifest paths are relative to.
    #[arg(long, global = true, env = DATA_ROOT_ENV, default_value = ".")]
    data_root: PathBuf,
    /// Manifest file; defaults to `<data-root>/manifest.csv`.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with exact ground truth.
    PhantomGenerate {
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_test: usize,
        #[arg(long, default_value_t = 2)]
        n_labeled: usize,
        #[arg(long, default_value_t = 10)]
        slices_per_subject: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Stage 1: train on precise labels plus cross-decoder consistency.
    PlgTrain {
        /// Stop after this many epochs (resume later by rerunning).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Build corrected pseudo-labels for every train slice.
    PseudoGenerate {
        /// Defaults to `<out-dir>/plg/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Stage 2: retrain on corrected pseudo-labels with gated losses.
    PldTrain {
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Predict masks for the manifest's test split, or for explicit images.
    Predict {
        /// Defaults to `<out-dir>/pld/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image files to segment instead of the test split.
        images: Vec<PathBuf>,
        /// Also write boundary overlays.
        #[arg(long)]
        overlays: bool,
    },
    /// Score a checkpoint on the test split (Dice on muscle and on IMF).
    Evaluate {
        /// Defaults to `<out-dir>/pld/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the full pipeline for every on/off combination of the given axes.
    Ablate {
        /// Comma-separated subset of `ce,lr,aug,contrast`.
        #[arg(long, default_value = "ce,lr")]
        axes: String,
        /// Comma-separated seeds to average over.
        #[arg(long, default_value = "0", value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

impl Common {
    fn config(&self) -> Result<TrainingConfig> {
        let mut config = match &self.config {
            Some(path) => {
                TrainingConfig::load(path).with_context(|| format!("loading {}", path.display()))?
            }
            None => TrainingConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate().into_result()?;
        Ok(config)
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        let path = self
            .manifest
            .clone()
            .unwrap_or_else(|| self.data_root.join("manifest.csv"));
        DatasetManifest::load(&path).with_context(|| format!("loading manifest {}", path.display()))
    }

    fn run_dir(&self) -> RunDir {
        RunDir::new(&self.out_dir)
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let common = &cli.common;
    match &cli.command {
        Command::PhantomGenerate {
            n_train,
            n_test,
            n_labeled,
            slices_per_subject,
            image_size,
        } => {
            let ds = DatasetSpec {
                n_train: *n_train,
                n_test: *n_test,
                slices_per_subject: *slices_per_subject,
                n_labeled: *n_labeled,
                phantom: PhantomSpec {
                    image_size: *image_size,
                    ..PhantomSpec::default()
                },
                seed: common.seed.unwrap_or(0),
            };
            let manifest = generate_dataset(&common.out_dir, &ds, Execution::Parallel)?;
            info!(
                "wrote {} slices ({} precisely labeled) to {}",
                manifest.entries.len(),
                manifest.labeled_count(),
                common.out_dir.display()
            );
        }
        Command::PlgTrain { stop_after } => {
            let config = common.config()?;
            let manifest = common.manifest()?;
            let run = common.run_dir();
            run.init(&config, &manifest)?;
            let data = Dataset::load(&manifest, &common.data_root, &config)?;
            let outcome = plg_train(
                &config,
                &data,
                &TrainOptions {
                    out_dir: Some(run.plg()),
                    stop_after: *stop_after,
                },
            )?;
            info!(
                "PLG finished {} epochs; checkpoint in {}",
                outcome.checkpoint.epochs_completed,
                run.plg().display()
            );
        }
        Command::PseudoGenerate { checkpoint } => {
            let run = common.run_dir();
            let ck = load_checkpoint(
                &checkpoint
                    .clone()
                    .unwrap_or_else(|| run.plg().join(CHECKPOINT_FILE)),
            )?;
            let config = match &common.config {
                Some(_) => common.config()?,
                None => ck.config.clone(),
            };
            let manifest = common.manifest()?;
            let data = Dataset::load(&manifest, &common.data_root, &config)?;
            let records = pseudo_generate(&ck.params, &data, &config)?;
            RecordStore::new(run.records()).save(&records)?;
            let eligible = records.iter().filter(|r| r.eligible).count();
            info!(
                "{} records ({eligible} eligible) written to {}",
                records.len(),
                run.records().display()
            );
        }
        Command::PldTrain { stop_after } => {
            let config = common.config()?;
            let manifest = common.manifest()?;
            let run = common.run_dir();
            let data = Dataset::load(&manifest, &common.data_root, &config)?;
            let records = RecordStore::new(run.records())
                .load()
                .with_context(|| format!("loading records from {}", run.records().display()))?;
            let samples = pld_samples(&data, &records, &config)?;
            let plg_path = run.plg().join(CHECKPOINT_FILE);
            let plg = if config.pld_warm_start {
                Some(load_checkpoint(&plg_path)?.params)
            } else {
                None
            };
            let outcome = pld_train(
                &config,
                &samples,
                plg.as_ref(),
                &TrainOptions {
                    out_dir: Some(run.pld()),
                    stop_after: *stop_after,
                },
            )?;
            info!(
                "PLD finished {} epochs; checkpoint in {}",
                outcome.checkpoint.epochs_completed,
                run.pld().display()
            );
        }
        Command::Predict {
            checkpoint,
            images,
            overlays,
        } => {
            let run = common.run_dir();
            let ck = load_checkpoint(
                &checkpoint
                    .clone()
                    .unwrap_or_else(|| run.pld().join(CHECKPOINT_FILE)),
            )?;
            let slices = if images.is_empty() {
                let manifest = common.manifest()?;
                manifest
                    .test()
                    .map(|e| {
                        Ok(
                            pio::load_image(&common.data_root.join(&e.image_path), &ck.config)?
                                .with_source_id(e.source_id()),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                images
                    .iter()
                    .map(|p| {
                        pio::load_image(p, &ck.config).with_context(|| format!("loading {}", p.display()))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let masks = predict(&ck, &slices, Some(&run.predictions()))?;
            if *overlays {
                for (img, mask) in slices.iter().zip(&masks) {
                    save_overlay(
                        &run.predictions().join(format!("{}_overlay.png", img.source_id())),
                        img,
                        mask,
                    )?;
                }
            }
            info!("{} masks written to {}", masks.len(), run.predictions().display());
        }
        Command::Evaluate { checkpoint } => {
            let run = common.run_dir();
            let path = checkpoint
                .clone()
                .unwrap_or_else(|| run.pld().join(CHECKPOINT_FILE));
            let ck = load_checkpoint(&path)?;
            let method = match ck.stage {
                pio::Stage::Plg => "PLG",
                pio::Stage::Pld => "PLD",
            };
            let report = evaluate_model(
                method,
                &ck.params,
                &common.manifest()?,
                &common.data_root,
                &ck.config,
            )?;
            if report.slices.is_empty() {
                bail!("no test slice with ground truth to evaluate");
            }
            let out = run.eval().join(format!("{}.csv", method.to_lowercase()));
            report.write_csv(&out)?;
            println!(
                "{method}: Dice_TM {:.4}  Dice_IMF {:.4}  ({} slices, {} skipped) -> {}",
                report.mean_dice_tm,
                report.mean_dice_imf,
                report.slices.len(),
                report.skipped,
                out.display()
            );
        }
        Command::Ablate { axes, seeds } => {
            let config = common.config()?;
            let axes = parse_axes(axes)?;
            let manifest = common.manifest()?;
            let run = common.run_dir();
            run.init(&config, &manifest)?;
            let data = Dataset::load(&manifest, &common.data_root, &config)?;
            let report = run_ablation(&config, &data, &axes, seeds)?;
            let out = run.eval().join("ablation.csv");
            report.write_csv(&out)?;
            for row in &report.rows {
                println!(
                    "{:<28} Dice_TM {:.4}  Dice_IMF {:.4}",
                    row.label(),
                    row.mean_dice_tm(),
                    row.mean_dice_imf()
                );
            }
            println!("report -> {}", out.display());
        }
    }
    Ok(())
}
