//! Bridge between the two training stages: ensemble pseudo-labels, coarse
//! intensity masks, their intersection, and the Dice-style confidence score
//! that decides which corrected masks may supervise segmentation.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data_model::{
    ensure_same_shape, sigmoid, BinaryMask, ImageSlice, PseudoFusion, PseudoLabelRecord, TrainingConfig,
};
use crate::error::{Error, Result};
use crate::network::{self, NetworkParameters, ParamState};
use crate::par::{self, Execution};
use crate::preprocessing_io::{self as pio, atomic_write_with};

/// Fuses the two decoders' logits into one mask.
///
/// With [`PseudoFusion::Logits`] this is `sigmoid(0.5·(a + b)) > threshold`;
/// with [`PseudoFusion::Probabilities`] the decoder probabilities are averaged.
pub fn pseudo_from_logits(
    height: usize,
    width: usize,
    logits_a: &[f64],
    logits_b: &[f64],
    threshold: f64,
    fusion: PseudoFusion,
) -> BinaryMask {
    let pixels = logits_a
        .iter()
        .zip(logits_b)
        .map(|(&a, &b)| {
            let p = match fusion {
                PseudoFusion::Logits => sigmoid(0.5 * (a + b)),
                PseudoFusion::Probabilities => 0.5 * (sigmoid(a) + sigmoid(b)),
            };
            u8::from(p > threshold)
        })
        .collect();
    BinaryMask::from_raw(height, width, pixels)
}

/// Ensemble prediction of a trained network on one slice.
pub fn generate_pseudo(
    params: &NetworkParameters,
    image: &ImageSlice,
    config: &TrainingConfig,
) -> Result<BinaryMask> {
    if params.state() == ParamState::Uninitialized {
        return Err(Error::UninitializedParameters);
    }
    let out = network::forward(params, image)?;
    Ok(pseudo_from_logits(
        image.height(),
        image.width(),
        &out.logits_a,
        &out.logits_b,
        config.prob_threshold,
        config.pseudo_fusion,
    ))
}

/// `1` where `low < intensity < high`.
pub fn coarse_mask(image: &ImageSlice, low: f64, high: f64) -> BinaryMask {
    BinaryMask::from_raw(
        image.height(),
        image.width(),
        image
            .pixels()
            .iter()
            .map(|&v| u8::from(low < v && v < high))
            .collect(),
    )
}

/// Corrected pseudo-label: pixelwise AND.
pub fn correct(y_pseudo: &BinaryMask, y_coarse: &BinaryMask) -> Result<BinaryMask> {
    y_pseudo.and(y_coarse)
}

/// `2·|pseudo ∩ coarse| / (|pseudo| + |coarse|)`; two empty masks agree (1).
pub fn confidence(y_pseudo: &BinaryMask, y_coarse: &BinaryMask) -> Result<f64> {
    ensure_same_shape(y_pseudo.shape(), y_coarse.shape())?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&a, &b) in y_pseudo.pixels().iter().zip(y_coarse.pixels()) {
        inter += usize::from(a & b);
        total += usize::from(a) + usize::from(b);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Builds the full record for one slice given its pseudo-label.
pub fn make_record(
    image: &ImageSlice,
    y_pseudo: BinaryMask,
    config: &TrainingConfig,
) -> Result<PseudoLabelRecord> {
    let y_coarse = coarse_mask(image, config.coarse_low, config.coarse_high);
    let y_corrected = correct(&y_pseudo, &y_coarse)?;
    let s = confidence(&y_pseudo, &y_coarse)?;
    Ok(PseudoLabelRecord {
        source_id: image.source_id().to_string(),
        y_pseudo,
        y_coarse,
        y_corrected,
        confidence: s,
        eligible: s >= config.confidence_threshold,
        threshold: config.confidence_threshold,
    })
}

/// One record per slice, computed in parallel when the config allows.
pub fn build_records_for(
    params: &NetworkParameters,
    images: &[ImageSlice],
    config: &TrainingConfig,
) -> Result<Vec<PseudoLabelRecord>> {
    let exec = Execution::from_flag(config.parallel);
    par::map(exec, images, |img| {
        let pseudo = generate_pseudo(params, img, config)?;
        make_record(img, pseudo, config)
    })
    .into_iter()
    .collect()
}

/// Loads every train slice in the manifest, builds its record and persists
/// the store under `out_dir`. Unreadable slices are skipped with a warning;
/// the call fails only when nothing could be read.
pub fn build_records(
    params: &NetworkParameters,
    manifest: &pio::DatasetManifest,
    data_root: &Path,
    config: &TrainingConfig,
    out_dir: &Path,
) -> Result<Vec<PseudoLabelRecord>> {
    let train: Vec<_> = manifest.train().collect();
    let mut images = Vec::with_capacity(train.len());
    let mut first_err = None;
    for entry in &train {
        match pio::load_image(&data_root.join(&entry.image_path), config) {
            Ok(img) => images.push(img.with_source_id(entry.source_id())),
            Err(e) => {
                warn!("skipping {}: {e}", entry.image_path.display());
                first_err.get_or_insert(e);
            }
        }
    }
    if images.is_empty() {
        return Err(first_err.unwrap_or(Error::EmptyRecords));
    }
    let records = build_records_for(params, &images, config)?;
    RecordStore::new(out_dir).save(&records)?;
    Ok(records)
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    source_id: String,
    confidence: f64,
    eligible: bool,
    threshold: f64,
}

/// On-disk record store: three mask files per slice plus `index.csv`.
#[derive(Debug, Clone)]
pub struct RecordStore {
    dir: std::path::PathBuf,
}

impl RecordStore {
    pub const INDEX: &'static str = "index.csv";

    pub fn new(dir: impl Into<std::path::PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn mask_path(&self, source_id: &str, kind: &str) -> std::path::PathBuf {
        self.dir.join(format!("{source_id}_{kind}.png"))
    }

    pub fn save(&self, records: &[PseudoLabelRecord]) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        for r in records {
            pio::save_mask(&self.mask_path(&r.source_id, "pseudo"), &r.y_pseudo)?;
            pio::save_mask(&self.mask_path(&r.source_id, "coarse"), &r.y_coarse)?;
            pio::save_mask(&self.mask_path(&r.source_id, "corrected"), &r.y_corrected)?;
        }
        atomic_write_with(&self.dir.join(Self::INDEX), |w| {
            let mut csv = csv::Writer::from_writer(w);
            for r in records {
                csv.serialize(IndexRow {
                    source_id: r.source_id.clone(),
                    confidence: r.confidence,
                    eligible: r.eligible,
                    threshold: r.threshold,
                })?;
            }
            csv.flush().map_err(|e| Error::io(&self.dir, e))?;
            Ok(())
        })
    }

    pub fn load(&self) -> Result<Vec<PseudoLabelRecord>> {
        let index = self.dir.join(Self::INDEX);
        let mut reader = csv::Reader::from_path(&index)?;
        let mut records = Vec::new();
        for row in reader.deserialize() {
            let row: IndexRow = row?;
            let load = |kind| pio::load_mask(&self.mask_path(&row.source_id, kind), None);
            records.push(PseudoLabelRecord {
                y_pseudo: load("pseudo")?,
                y_coarse: load("coarse")?,
                y_corrected: load("corrected")?,
                source_id: row.source_id,
                confidence: row.confidence,
                eligible: row.eligible,
                threshold: row.threshold,
            });
        }
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Validate;
    use crate::network::Architecture;

    fn m(v: &[u8]) -> BinaryMask {
        BinaryMask::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn zero_logits_give_empty_mask() {
        let z = vec![0.0; 16];
        let mask = pseudo_from_logits(4, 4, &z, &z, 0.5, PseudoFusion::Logits);
        assert!(mask.is_empty());
        let four = vec![4.0; 16];
        let mask = pseudo_from_logits(4, 4, &four, &four, 0.5, PseudoFusion::Logits);
        assert_eq!(mask.count_ones(), 16);
    }

    #[test]
    fn fusion_modes_agree_when_decoders_agree() {
        let a: Vec<f64> = (0..32).map(|i| i as f64 / 4.0 - 4.0).collect();
        let l = pseudo_from_logits(4, 8, &a, &a, 0.5, PseudoFusion::Logits);
        let p = pseudo_from_logits(4, 8, &a, &a, 0.5, PseudoFusion::Probabilities);
        assert_eq!(l, p);
    }

    #[test]
    fn uninitialized_parameters_are_refused() {
        let params = NetworkParameters::zeros(Architecture::new(1, 2));
        let img = ImageSlice::new("x", 4, 4, vec![0.3; 16]).unwrap();
        let err = generate_pseudo(&params, &img, &TrainingConfig::default()).unwrap_err();
        assert!(matches!(err, Error::UninitializedParameters));
    }

    #[test]
    fn coarse_mask_interval_is_open() {
        let img = ImageSlice::new("x", 1, 5, vec![0.2, 0.3, 0.6, 0.7, 0.59999]).unwrap();
        assert_eq!(coarse_mask(&img, 0.2, 0.6).pixels(), &[0, 1, 0, 0, 1]);
    }

    #[test]
    fn correct_identity_and_disjoint() {
        let coarse = m(&[1, 0, 1, 1, 0]);
        assert_eq!(correct(&m(&[1; 5]), &coarse).unwrap(), coarse);
        assert!(correct(&m(&[0, 1, 0, 0, 1]), &coarse).unwrap().is_empty());
        assert!(correct(&m(&[1; 4]), &coarse).is_err());
    }

    #[test]
    fn confidence_cases() {
        assert_eq!(confidence(&m(&[1, 1, 1, 0]), &m(&[1, 1, 0, 0])).unwrap(), 0.8);
        assert_eq!(confidence(&m(&[1, 0, 1, 0]), &m(&[1, 0, 1, 0])).unwrap(), 1.0);
        assert_eq!(confidence(&m(&[1, 0, 0, 0]), &m(&[0, 1, 0, 0])).unwrap(), 0.0);
        assert_eq!(confidence(&m(&[0; 4]), &m(&[0; 4])).unwrap(), 1.0);
        assert_eq!(confidence(&m(&[0; 4]), &m(&[0, 1, 0, 0])).unwrap(), 0.0);
    }

    #[test]
    fn records_satisfy_invariants_and_round_trip() {
        let cfg = TrainingConfig::default();
        let px: Vec<f64> = (0..64).map(|i| (i as f64 * 0.173).fract()).collect();
        let img = ImageSlice::new("slice_007", 8, 8, px).unwrap();
        let pseudo = BinaryMask::from_fn(8, 8, |r, c| r > 1 && c < 6);
        let record = make_record(&img, pseudo, &cfg).unwrap();
        assert!(record.validate().is_ok());

        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::new(dir.path());
        store.save(std::slice::from_ref(&record)).unwrap();
        assert_eq!(store.load().unwrap(), vec![record]);
    }
}
