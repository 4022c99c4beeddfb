//! Two-stage orchestration: PLG training, pseudo-label build, PLD training,
//! prediction, evaluation and ablation grids.
//!
//! Training is deterministic for a fixed config and seed: batch order comes
//! from `(seed, stage, epoch)`, augmentation from `(seed, sample, epoch)`, and
//! per-sample gradients are summed in batch order whichever execution path is
//! used. A checkpoint is written after every epoch so a run can resume at any
//! epoch boundary and finish with the same parameters.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment_pair, derive_seed, draw_spec};
use crate::data_model::{BinaryMask, ImageSlice, LrSchedule, PseudoLabelRecord, TrainingConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_pairs, EvalReport};
use crate::losses::{pld_objective, plg_objective_weighted, LossBreakdown};
use crate::network::{backward, forward_with_tape, Adam, Architecture, NetworkParameters, ParamState};
use crate::par::{self, Execution};
use crate::preprocessing_io::{self as pio, Checkpoint, DatasetManifest, Stage};
use crate::pseudolabel::{build_records_for, generate_pseudo, RecordStore};

/// One training slice: the image, its supervision target (a precise label in
/// PLG, a corrected pseudo-label in PLD) and the target's confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: ImageSlice,
    pub target: Option<BinaryMask>,
    pub s: f64,
}

/// Loaded train and test slices of a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Train images with their precise label, if the slice is precisely labeled.
    pub train: Vec<(ImageSlice, Option<BinaryMask>)>,
    /// Test images with ground truth.
    pub test: Vec<(ImageSlice, BinaryMask)>,
}

impl Dataset {
    /// Loads every train slice and every test slice with a ground truth.
    /// Unreadable test entries are skipped with a warning; unreadable train
    /// entries are errors.
    pub fn load(manifest: &DatasetManifest, data_root: &Path, config: &TrainingConfig) -> Result<Self> {
        manifest.check()?;
        let mut train = Vec::new();
        for entry in manifest.train() {
            let image = pio::load_image(&data_root.join(&entry.image_path), config)?
                .with_source_id(entry.source_id());
            let label = match (&entry.label_path, entry.precisely_labeled) {
                (Some(path), true) => Some(pio::load_mask(&data_root.join(path), Some(image.shape()))?),
                _ => None,
            };
            train.push((image, label));
        }
        let mut test = Vec::new();
        for entry in manifest.test() {
            let Some(label) = &entry.label_path else {
                warn!("no ground truth for {}, skipping", entry.image_path.display());
                continue;
            };
            let loaded = pio::load_image(&data_root.join(&entry.image_path), config).and_then(|img| {
                let truth = pio::load_mask(&data_root.join(label), Some(img.shape()))?;
                Ok((img.with_source_id(entry.source_id()), truth))
            });
            match loaded {
                Ok(pair) => test.push(pair),
                Err(e) => warn!("skipping {}: {e}", entry.image_path.display()),
            }
        }
        Ok(Self { train, test })
    }

    pub fn labeled_count(&self) -> usize {
        self.train.iter().filter(|(_, l)| l.is_some()).count()
    }
}

/// One row of a metrics log: the loss terms of one sample at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    pub sample_id: String,
    pub l_seg: f64,
    pub l_c: f64,
    pub l_r: f64,
    pub total: f64,
    pub s: f64,
    pub seg_active: bool,
}

impl MetricRow {
    fn new(step: u64, epoch: usize, sample_id: &str, b: &LossBreakdown) -> Self {
        Self {
            step,
            epoch,
            sample_id: sample_id.to_string(),
            l_seg: b.l_seg,
            l_c: b.l_c,
            l_r: b.l_r,
            total: b.total,
            s: b.s,
            seg_active: b.seg_active,
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    pio::atomic_write_with(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for row in rows {
            csv.serialize(row)?;
        }
        csv.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Mean total loss of each epoch, in epoch order.
pub fn epoch_mean_totals(rows: &[MetricRow]) -> Vec<f64> {
    let epochs = rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); epochs];
    for r in rows {
        sums[r.epoch].0 += r.total;
        sums[r.epoch].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
}

/// Where a training run persists its state and when it stops.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `checkpoint.bin` and `metrics.csv`. If it already holds a
    /// checkpoint of the same stage, training resumes from it.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed epochs, as if interrupted.
    pub stop_after: Option<usize>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Plg => "plg",
        Stage::Pld => "pld",
    }
}

fn architecture(config: &TrainingConfig) -> Result<Architecture> {
    let arch = Architecture::new(config.depth, config.base_channels);
    arch.check_input(config.slice_size, config.slice_size)?;
    Ok(arch)
}

/// Sample order of one epoch, grouped into batches. In PLG, a batch without a
/// precisely labeled sample gets one appended, cycling through the labeled
/// set.
fn epoch_batches(
    stage: Stage,
    config: &TrainingConfig,
    samples: &[TrainSample],
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stage_name(stage), epoch as u64));
    order.shuffle(&mut rng);
    let labeled: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].target.is_some())
        .collect();
    let batch_size = match stage {
        Stage::Plg => config.batch_size,
        Stage::Pld => config.pld_batch_size.unwrap_or(config.batch_size),
    }
    .max(1);
    let batches_per_epoch = order.len().div_ceil(batch_size);
    order
        .chunks(batch_size)
        .enumerate()
        .map(|(b, chunk)| {
            let mut batch = chunk.to_vec();
            if stage == Stage::Plg
                && !labeled.is_empty()
                && batch.iter().all(|&i| samples[i].target.is_none())
            {
                batch.push(labeled[(epoch * batches_per_epoch + b) % labeled.len()]);
            }
            batch
        })
        .collect()
}

fn learning_rate(stage: Stage, config: &TrainingConfig, epoch: usize, total_epochs: usize) -> f64 {
    let base = match stage {
        Stage::Plg => config.learning_rate,
        Stage::Pld => config.pld_learning_rate.unwrap_or(config.learning_rate),
    };
    match config.lr_schedule {
        LrSchedule::Constant => base,
        LrSchedule::Linear => base * (1.0 - epoch as f64 / total_epochs.max(1) as f64),
    }
}

fn sample_gradient(
    stage: Stage,
    params: &NetworkParameters,
    sample: &TrainSample,
    epoch: usize,
    config: &TrainingConfig,
    seg_weight: f64,
) -> Result<(Vec<f64>, LossBreakdown)> {
    let spec = draw_spec(config.seed, sample.image.source_id(), epoch as u64, config);
    let (image, target) = augment_pair(&spec, &sample.image, sample.target.as_ref(), config);
    let (out, tape) = forward_with_tape(params, &image)?;
    let objective = match stage {
        Stage::Plg => plg_objective_weighted(&out, target.as_ref(), config, seg_weight),
        Stage::Pld => pld_objective(
            &out,
            target.as_ref().expect("PLD samples carry targets"),
            sample.s,
            config,
        ),
    };
    let grad = backward(params, &tape, &objective.d_p_a, &objective.d_p_b);
    Ok((grad, objective.breakdown))
}

/// Shared epoch loop of both stages.
fn train_stage(
    stage: Stage,
    config: &TrainingConfig,
    samples: &[TrainSample],
    initial: NetworkParameters,
    total_epochs: usize,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let exec = Execution::from_flag(config.parallel);
    let ckpt_path = options.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let metrics_path = options.out_dir.as_ref().map(|d| d.join(METRICS_FILE));
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let resumed = match &ckpt_path {
        Some(p) if p.exists() => {
            let ck = Checkpoint::load(p)?;
            if ck.stage != stage {
                return Err(Error::Checkpoint(format!(
                    "{} holds a {} checkpoint, expected {}",
                    p.display(),
                    stage_name(ck.stage),
                    stage_name(stage)
                )));
            }
            Some(ck)
        }
        _ => None,
    };
    let (mut params, mut adam, start_epoch, mut metrics) = match resumed {
        Some(ck) => {
            let rows = match &metrics_path {
                Some(p) if p.exists() => read_metrics(p)?,
                _ => Vec::new(),
            };
            let rows = rows
                .into_iter()
                .filter(|r| r.epoch < ck.epochs_completed)
                .collect();
            info!("resuming {} at epoch {}", stage_name(stage), ck.epochs_completed);
            let adam = ck
                .optimizer
                .unwrap_or_else(|| Adam::new(ck.params.len(), config.beta1, config.beta2));
            (ck.params, adam, ck.epochs_completed, rows)
        }
        None => {
            let adam = Adam::new(initial.len(), config.beta1, config.beta2);
            (initial, adam, 0, Vec::new())
        }
    };

    let stop = options.stop_after.unwrap_or(total_epochs).min(total_epochs);
    let mut grad_sum = vec![0.0; params.len()];
    for epoch in start_epoch..stop {
        let lr = learning_rate(stage, config, epoch, total_epochs);
        for batch in epoch_batches(stage, config, samples, epoch) {
            // Segmentation terms are averaged over the labeled part of the
            // batch, consistency over the whole batch.
            let labeled = batch.iter().filter(|&&i| samples[i].target.is_some()).count();
            let seg_weight = batch.len() as f64 / labeled.max(1) as f64;
            let results = par::map(exec, &batch, |&i| {
                sample_gradient(stage, &params, &samples[i], epoch, config, seg_weight)
            });
            grad_sum.iter_mut().for_each(|g| *g = 0.0);
            let step = adam.step;
            for (&i, result) in batch.iter().zip(results) {
                let (grad, breakdown) = result?;
                for (acc, g) in grad_sum.iter_mut().zip(&grad) {
                    *acc += g;
                }
                metrics.push(MetricRow::new(
                    step,
                    epoch,
                    samples[i].image.source_id(),
                    &breakdown,
                ));
            }
            let scale = 1.0 / batch.len() as f64;
            grad_sum.iter_mut().for_each(|g| *g *= scale);
            adam.update(params.values_mut(), &grad_sum, lr);
        }
        params.set_state(ParamState::Trained);
        let mean = epoch_mean_totals(&metrics)
            .get(epoch)
            .copied()
            .unwrap_or(f64::NAN);
        info!(
            "{} epoch {}/{}: mean loss {mean:.5}",
            stage_name(stage),
            epoch + 1,
            total_epochs
        );
        if let (Some(cp), Some(mp)) = (&ckpt_path, &metrics_path) {
            write_metrics(mp, &metrics)?;
            Checkpoint {
                stage,
                epochs_completed: epoch + 1,
                config: config.clone(),
                params: params.clone(),
                optimizer: Some(adam.clone()),
            }
            .save(cp)?;
        }
    }
    let checkpoint = Checkpoint {
        stage,
        epochs_completed: stop.max(start_epoch),
        config: config.clone(),
        params,
        optimizer: Some(adam),
    };
    Ok(TrainOutcome { checkpoint, metrics })
}

fn initial_params(config: &TrainingConfig, stage: Stage) -> Result<NetworkParameters> {
    let seed = derive_seed(config.seed, &format!("{}-init", stage_name(stage)), 0);
    Ok(NetworkParameters::init(architecture(config)?, seed))
}

/// First stage: `L_seg` on precisely labeled slices plus weighted `L_c` on
/// every slice.
pub fn plg_train(config: &TrainingConfig, data: &Dataset, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate().into_result()?;
    if data.labeled_count() == 0 {
        return Err(Error::NoPreciseLabels);
    }
    let samples: Vec<TrainSample> = data
        .train
        .iter()
        .map(|(image, label)| TrainSample {
            image: image.clone(),
            target: label.clone(),
            s: 1.0,
        })
        .collect();
    train_stage(
        Stage::Plg,
        config,
        &samples,
        initial_params(config, Stage::Plg)?,
        config.plg_epochs,
        options,
    )
}

/// PLD training targets: each slice's corrected pseudo-label with its
/// confidence, or, when configured, its precise label with confidence 1.
pub fn pld_samples(
    data: &Dataset,
    records: &[PseudoLabelRecord],
    config: &TrainingConfig,
) -> Result<Vec<TrainSample>> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let by_id: HashMap<&str, &PseudoLabelRecord> =
        records.iter().map(|r| (r.source_id.as_str(), r)).collect();
    let mut samples = Vec::with_capacity(data.train.len());
    for (image, label) in &data.train {
        let sample = match (label, by_id.get(image.source_id())) {
            (Some(y), _) if config.pld_use_precise => TrainSample {
                image: image.clone(),
                target: Some(y.clone()),
                s: 1.0,
            },
            (_, Some(r)) => TrainSample {
                image: image.clone(),
                target: Some(r.y_corrected.clone()),
                s: r.confidence,
            },
            (_, None) => {
                warn!("no pseudo-label record for {}, skipping", image.source_id());
                continue;
            }
        };
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::EmptyRecords);
    }
    Ok(samples)
}

/// Second stage: gated `S·L_seg`, `L_r` and weighted `L_c` per sample.
/// Starts from fresh weights unless `pld_warm_start` is set.
pub fn pld_train(
    config: &TrainingConfig,
    samples: &[TrainSample],
    plg: Option<&NetworkParameters>,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate().into_result()?;
    if samples.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let initial = match plg {
        Some(p) if config.pld_warm_start => {
            let mut p = p.clone();
            p.set_state(ParamState::Initialized);
            p
        }
        _ => initial_params(config, Stage::Pld)?,
    };
    train_stage(Stage::Pld, config, samples, initial, config.pld_epochs, options)
}

/// Pseudo-label records for every train slice of `data`.
pub fn pseudo_generate(
    params: &NetworkParameters,
    data: &Dataset,
    config: &TrainingConfig,
) -> Result<Vec<PseudoLabelRecord>> {
    let images: Vec<ImageSlice> = data.train.iter().map(|(img, _)| img.clone()).collect();
    build_records_for(params, &images, config)
}

/// Ensemble masks for `images`, written as `<source_id>.png` under `out_dir`
/// when given.
pub fn predict(
    checkpoint: &Checkpoint,
    images: &[ImageSlice],
    out_dir: Option<&Path>,
) -> Result<Vec<BinaryMask>> {
    let config = &checkpoint.config;
    for img in images {
        if img.shape() != (config.slice_size, config.slice_size) {
            return Err(Error::ShapeMismatch {
                expected: (config.slice_size, config.slice_size),
                found: img.shape(),
            });
        }
    }
    let exec = Execution::from_flag(config.parallel);
    let masks = par::map(exec, images, |img| {
        generate_pseudo(&checkpoint.params, img, config)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (img, mask) in images.iter().zip(&masks) {
            pio::save_mask(&dir.join(format!("{}.png", img.source_id())), mask)?;
        }
    }
    Ok(masks)
}

/// Self-describing metadata stored as `run.json` in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub manifest_hash: String,
    pub code_version: String,
    pub seed: u64,
}

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn info(&self) -> PathBuf {
        self.root.join("run.json")
    }
    pub fn plg(&self) -> PathBuf {
        self.root.join("plg")
    }
    pub fn records(&self) -> PathBuf {
        self.root.join("records")
    }
    pub fn pld(&self) -> PathBuf {
        self.root.join("pld")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }

    /// Writes the config snapshot and run metadata.
    pub fn init(&self, config: &TrainingConfig, manifest: &DatasetManifest) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        pio::atomic_write_bytes(&self.config(), config.to_toml_string()?.as_bytes())?;
        let info = RunInfo {
            manifest_hash: manifest.hash()?,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
        };
        pio::atomic_write_bytes(&self.info(), &serde_json::to_vec_pretty(&info)?)
    }
}

/// Reports of one full pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub plg: TrainOutcome,
    pub records: Vec<PseudoLabelRecord>,
    pub pld: TrainOutcome,
    pub plg_report: EvalReport,
    pub pld_report: EvalReport,
}

/// Runs both stages end to end on `data` and evaluates both checkpoints on
/// its test split. With `run_dir`, every artefact is persisted there.
pub fn run_pipeline(
    config: &TrainingConfig,
    data: &Dataset,
    run_dir: Option<&RunDir>,
) -> Result<PipelineResult> {
    let plg = plg_train(
        config,
        data,
        &TrainOptions {
            out_dir: run_dir.map(RunDir::plg),
            ..TrainOptions::default()
        },
    )?;
    let records = pseudo_generate(&plg.checkpoint.params, data, config)?;
    if let Some(rd) = run_dir {
        RecordStore::new(rd.records()).save(&records)?;
    }
    run_from_plg(config, data, plg, records, run_dir)
}

fn run_from_plg(
    config: &TrainingConfig,
    data: &Dataset,
    plg: TrainOutcome,
    records: Vec<PseudoLabelRecord>,
    run_dir: Option<&RunDir>,
) -> Result<PipelineResult> {
    let samples = pld_samples(data, &records, config)?;
    let pld = pld_train(
        config,
        &samples,
        Some(&plg.checkpoint.params),
        &TrainOptions {
            out_dir: run_dir.map(RunDir::pld),
            ..TrainOptions::default()
        },
    )?;
    let plg_report = evaluate_pairs("PLG", &plg.checkpoint.params, &data.test, config)?;
    let pld_report = evaluate_pairs("PLD", &pld.checkpoint.params, &data.test, config)?;
    if let Some(rd) = run_dir {
        plg_report.write_csv(&rd.eval().join("plg.csv"))?;
        pld_report.write_csv(&rd.eval().join("pld.csv"))?;
    }
    Ok(PipelineResult {
        plg,
        records,
        pld,
        plg_report,
        pld_report,
    })
}

/// A switch varied by [`run_ablation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Confidence gating of `L_seg`.
    Ce,
    /// Noise-robust loss.
    Lr,
    /// Geometric augmentation.
    Aug,
    /// Contrast adjustment.
    Contrast,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Ce => "ce",
            Axis::Lr => "lr",
            Axis::Aug => "aug",
            Axis::Contrast => "contrast",
        }
    }

    fn apply(self, config: &mut TrainingConfig, on: bool) {
        match self {
            Axis::Ce => config.confidence_gating = on,
            Axis::Lr => config.noise_robust = on,
            Axis::Aug => config.augment = on,
            Axis::Contrast => config.contrast_adjust = on,
        }
    }

    /// Whether the axis changes the first stage.
    fn affects_plg(self) -> bool {
        matches!(self, Axis::Aug | Axis::Contrast)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ce" => Ok(Axis::Ce),
            "lr" | "l_r" => Ok(Axis::Lr),
            "aug" | "augmentation" => Ok(Axis::Aug),
            "contrast" => Ok(Axis::Contrast),
            other => Err(Error::UnknownAxis(other.to_string())),
        }
    }
}

/// Parses a comma-separated axis list, e.g. `"ce,lr"`.
pub fn parse_axes(text: &str) -> Result<Vec<Axis>> {
    let mut axes: Vec<Axis> = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    axes.sort();
    axes.dedup();
    Ok(axes)
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `None` for the PLG-only baseline row.
    pub settings: Option<Vec<(Axis, bool)>>,
    pub dice_tm: Vec<f64>,
    pub dice_imf: Vec<f64>,
}

impl AblationRow {
    pub fn label(&self) -> String {
        match &self.settings {
            None => "PLG only".to_string(),
            Some(s) if s.is_empty() => "full".to_string(),
            Some(s) => s
                .iter()
                .map(|(a, on)| format!("{}{}", if *on { "" } else { "w/o " }, a.name().to_uppercase()))
                .collect::<Vec<_>>()
                .join(" + "),
        }
    }

    pub fn mean_dice_tm(&self) -> f64 {
        mean(&self.dice_tm)
    }

    pub fn mean_dice_imf(&self) -> f64 {
        mean(&self.dice_imf)
    }

    /// Whether this row has `axis` switched to `on`.
    pub fn has(&self, axis: Axis, on: bool) -> bool {
        self.settings
            .as_ref()
            .is_some_and(|s| s.iter().any(|&(a, v)| a == axis && v == on))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axes: Vec<Axis>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Table-shaped CSV: one row per cell with seed-mean scores.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        pio::atomic_write_with(path, |w| {
            let io = |e| Error::io(path, e);
            let mut header = vec!["method".to_string()];
            header.extend(self.axes.iter().map(|a| a.name().to_string()));
            header.extend(["dice_tm_mean", "dice_imf_mean", "n_seeds"].map(String::from));
            writeln!(w, "{}", header.join(",")).map_err(io)?;
            for row in &self.rows {
                let mut cells = vec![row.label()];
                for axis in &self.axes {
                    cells.push(match &row.settings {
                        None => String::new(),
                        Some(_) => if row.has(*axis, true) { "on" } else { "off" }.to_string(),
                    });
                }
                cells.push(format!("{:.6}", row.mean_dice_tm()));
                cells.push(format!("{:.6}", row.mean_dice_imf()));
                cells.push(row.dice_tm.len().to_string());
                writeln!(w, "{}", cells.join(",")).map_err(io)?;
            }
            Ok(())
        })
    }
}

/// A trained first stage and the records it produced.
type FirstStage = (TrainOutcome, Vec<PseudoLabelRecord>);

/// One full pipeline per cell of the on/off grid over `axes`, repeated for
/// each seed. First-stage models are shared between cells that differ only
/// in second-stage switches.
pub fn run_ablation(
    config: &TrainingConfig,
    data: &Dataset,
    axes: &[Axis],
    seeds: &[u64],
) -> Result<AblationReport> {
    let mut axes = axes.to_vec();
    axes.sort();
    axes.dedup();
    let cells: Vec<Vec<(Axis, bool)>> = (0..1usize << axes.len())
        .map(|bits| {
            axes.iter()
                .enumerate()
                .map(|(k, &a)| (a, bits & (1 << (axes.len() - 1 - k)) == 0))
                .collect()
        })
        .collect();
    let mut rows: Vec<AblationRow> = cells
        .iter()
        .map(|c| AblationRow {
            settings: Some(c.clone()),
            dice_tm: Vec::new(),
            dice_imf: Vec::new(),
        })
        .collect();
    let mut baseline = AblationRow {
        settings: None,
        dice_tm: Vec::new(),
        dice_imf: Vec::new(),
    };

    for &seed in seeds {
        let mut plg_cache: HashMap<Vec<(Axis, bool)>, FirstStage> = HashMap::new();
        for (cell, row) in cells.iter().zip(&mut rows) {
            let mut cfg = TrainingConfig {
                seed,
                ..config.clone()
            };
            for &(axis, on) in cell {
                axis.apply(&mut cfg, on);
            }
            let plg_key: Vec<(Axis, bool)> = cell.iter().copied().filter(|(a, _)| a.affects_plg()).collect();
            if !plg_cache.contains_key(&plg_key) {
                info!("ablation seed {seed}: training first stage for {plg_key:?}");
                let plg = plg_train(&cfg, data, &TrainOptions::default())?;
                let records = pseudo_generate(&plg.checkpoint.params, data, &cfg)?;
                if plg_key.iter().all(|&(_, on)| on) {
                    let report = evaluate_pairs("PLG", &plg.checkpoint.params, &data.test, &cfg)?;
                    baseline.dice_tm.push(report.mean_dice_tm);
                    baseline.dice_imf.push(report.mean_dice_imf);
                }
                plg_cache.insert(plg_key.clone(), (plg, records));
            }
            let (plg, records) = plg_cache[&plg_key].clone();
            info!("ablation seed {seed}: second stage for {cell:?}");
            let result = run_from_plg(&cfg, data, plg, records, None)?;
            row.dice_tm.push(result.pld_report.mean_dice_tm);
            row.dice_imf.push(result.pld_report.mean_dice_imf);
        }
    }
    rows.push(baseline);
    Ok(AblationReport {
        axes,
        seeds: seeds.to_vec(),
        rows,
    })
}
