//! Dice scores for the muscle mask and for the intra-muscular fat it leaves
//! out, where the fat mask is what a binary closing adds back to a muscle
//! mask.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data_model::{ensure_same_shape, BinaryMask, ImageSlice, TrainingConfig};
use crate::error::{Error, Result};
use crate::network::NetworkParameters;
use crate::par::{self, Execution};
use crate::preprocessing_io::{self as pio, atomic_write_with, DatasetManifest};
use crate::pseudolabel::generate_pseudo;

/// `2|a∩b| / (|a|+|b|)`; two empty masks score 1.
pub fn dice_similarity(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    ensure_same_shape(a.shape(), b.shape())?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
        inter += usize::from(x & y);
        total += usize::from(x) + usize::from(y);
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Offsets `(dy, dx)` of a discrete disk: `dy² + dx² ≤ r²`.
pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                offsets.push((dy, dx));
            }
        }
    }
    offsets
}

/// Dilation by a symmetric structuring element; the outside is background.
pub fn dilate(mask: &BinaryMask, se: &[(isize, isize)]) -> BinaryMask {
    let (h, w) = mask.shape();
    BinaryMask::from_fn(h, w, |r, c| {
        se.iter().any(|&(dy, dx)| {
            let (y, x) = (r as isize + dy, c as isize + dx);
            y >= 0 && x >= 0 && y < h as isize && x < w as isize && mask.get(y as usize, x as usize) == 1
        })
    })
}

/// Erosion adjoint to [`dilate`]: offsets falling outside the grid are
/// ignored, which keeps closing extensive and idempotent at the border.
pub fn erode(mask: &BinaryMask, se: &[(isize, isize)]) -> BinaryMask {
    let (h, w) = mask.shape();
    BinaryMask::from_fn(h, w, |r, c| {
        se.iter().all(|&(dy, dx)| {
            let (y, x) = (r as isize + dy, c as isize + dx);
            y < 0 || x < 0 || y >= h as isize || x >= w as isize || mask.get(y as usize, x as usize) == 1
        })
    })
}

pub fn close(mask: &BinaryMask, radius: usize) -> Result<BinaryMask> {
    if radius < 1 {
        return Err(Error::InvalidRadius(radius));
    }
    let se = disk(radius);
    Ok(erode(&dilate(mask, &se), &se))
}

/// Pixels a closing with `disk(radius)` adds to the muscle mask.
pub fn extract_imf(y: &BinaryMask, radius: usize) -> Result<BinaryMask> {
    close(y, radius)?.and_not(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub source_id: String,
    pub dice_tm: f64,
    pub dice_imf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub slices: Vec<SliceScore>,
    pub mean_dice_tm: f64,
    pub mean_dice_imf: f64,
    /// Test entries without ground truth or with unreadable files.
    pub skipped: usize,
}

impl EvalReport {
    pub fn from_scores(method: impl Into<String>, slices: Vec<SliceScore>, skipped: usize) -> Self {
        let n = slices.len().max(1) as f64;
        let mean_dice_tm = slices.iter().map(|s| s.dice_tm).sum::<f64>() / n;
        let mean_dice_imf = slices.iter().map(|s| s.dice_imf).sum::<f64>() / n;
        Self {
            method: method.into(),
            slices,
            mean_dice_tm,
            mean_dice_imf,
            skipped,
        }
    }

    /// Summary table followed by a per-slice appendix.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        atomic_write_with(path, |w| {
            let io = |e| Error::io(path, e);
            writeln!(w, "method,dice_tm_mean,dice_imf_mean,n_slices,skipped").map_err(io)?;
            writeln!(
                w,
                "{},{:.6},{:.6},{},{}",
                self.method,
                self.mean_dice_tm,
                self.mean_dice_imf,
                self.slices.len(),
                self.skipped
            )
            .map_err(io)?;
            writeln!(w).map_err(io)?;
            writeln!(w, "source_id,dice_tm,dice_imf").map_err(io)?;
            for s in &self.slices {
                writeln!(w, "{},{:.6},{:.6}", s.source_id, s.dice_tm, s.dice_imf).map_err(io)?;
            }
            Ok(())
        })
    }
}

/// Scores one predicted mask against ground truth.
pub fn score_slice(
    source_id: &str,
    prediction: &BinaryMask,
    truth: &BinaryMask,
    radius: usize,
) -> Result<SliceScore> {
    Ok(SliceScore {
        source_id: source_id.to_string(),
        dice_tm: dice_similarity(prediction, truth)?,
        dice_imf: dice_similarity(&extract_imf(prediction, radius)?, &extract_imf(truth, radius)?)?,
    })
}

/// Evaluates a model on in-memory (image, truth) pairs.
pub fn evaluate_pairs(
    method: &str,
    params: &NetworkParameters,
    pairs: &[(ImageSlice, BinaryMask)],
    config: &TrainingConfig,
) -> Result<EvalReport> {
    let radius = config.imf_struct_radius();
    let exec = Execution::from_flag(config.parallel);
    let scores = par::map(exec, pairs, |(img, truth)| {
        let pred = generate_pseudo(params, img, config)?;
        score_slice(img.source_id(), &pred, truth, radius)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scores(method, scores, 0))
}

/// Evaluates on every test entry of the manifest. Entries without a readable
/// ground truth are skipped and counted.
pub fn evaluate_model(
    method: &str,
    params: &NetworkParameters,
    manifest: &DatasetManifest,
    data_root: &Path,
    config: &TrainingConfig,
) -> Result<EvalReport> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for entry in manifest.test() {
        let Some(label) = &entry.label_path else {
            warn!("no ground truth for {}, skipping", entry.image_path.display());
            skipped += 1;
            continue;
        };
        let loaded = pio::load_image(&data_root.join(&entry.image_path), config).and_then(|img| {
            let truth = pio::load_mask(&data_root.join(label), Some(img.shape()))?;
            Ok((img.with_source_id(entry.source_id()), truth))
        });
        match loaded {
            Ok(pair) => pairs.push(pair),
            Err(e) => {
                warn!("skipping {}: {e}", entry.image_path.display());
                skipped += 1;
            }
        }
    }
    let mut report = evaluate_pairs(method, params, &pairs, config)?;
    report.skipped = skipped;
    Ok(report)
}

/// RGB overlay of the prediction boundary (red) on the input slice.
pub fn save_overlay(path: &Path, image: &ImageSlice, prediction: &BinaryMask) -> Result<()> {
    let (h, w) = image.shape();
    let inner = erode(prediction, &disk(1));
    let boundary = prediction.and_not(&inner)?;
    let mut rgb = Vec::with_capacity(h * w * 3);
    for (i, &v) in image.pixels().iter().enumerate() {
        let g = (v * 255.0).round() as u8;
        if boundary.pixels()[i] == 1 {
            rgb.extend_from_slice(&[255, 0, 0]);
        } else {
            rgb.extend_from_slice(&[g, g, g]);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, rgb).expect("length matches shape");
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))?;
    pio::atomic_write_bytes(path, &bytes)
}
