//! Slice loading and normalization, dataset manifests, the labeled-subset
//! draw, and persistence of masks, probability maps and checkpoints.
//!
//! On-disk conventions:
//! - images: 16-bit grayscale PNG plus `<file>.range.json` holding the
//!   original intensity range;
//! - masks: 8-bit grayscale PNG, `{0, 255}` on disk, `{0, 1}` in memory;
//! - probability maps: `PMAP` magic, `u32` height and width, `f64` LE data;
//! - checkpoints: `IMFSEGCK` magic, `u32` format version, `u64` JSON header
//!   length, JSON header, then `f64` LE parameter and optimizer arrays.
//!
//! Every writer goes through [`atomic_write_with`].

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_model::{
    BinaryMask, ImageSlice, Normalization, ProbabilityMap, TrainingConfig, Validate, ValidationReport,
    Violation,
};
use crate::error::{Error, Result};
use crate::network::{Adam, Architecture, NetworkParameters, ParamState};

/// Environment variable overriding the data root directory.
pub const DATA_ROOT_ENV: &str = "IMFSEG_DATA_ROOT";

/// Writes through a temporary file in the target directory, then renames.
pub fn atomic_write_with(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn atomic_write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write_with(path, |w| w.write_all(bytes).map_err(|e| Error::io(path, e)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalizeMethod {
    MinMax,
    /// Clip to the given percentiles (0–100) before min-max scaling.
    Percentile {
        low: f64,
        high: f64,
    },
}

impl NormalizeMethod {
    pub fn from_config(config: &TrainingConfig) -> Self {
        match config.normalization {
            Normalization::MinMax => NormalizeMethod::MinMax,
            Normalization::Percentile => NormalizeMethod::Percentile {
                low: config.percentile_low,
                high: config.percentile_high,
            },
        }
    }
}

/// Linear-interpolated percentile of already sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Maps raw intensities onto [0, 1].
pub fn normalize(
    source_id: impl Into<String>,
    height: usize,
    width: usize,
    raw: &[f64],
    method: NormalizeMethod,
) -> Result<ImageSlice> {
    if raw.len() != height * width {
        return Err(Error::Invalid(ValidationReport {
            violations: vec![Violation::LengthMismatch {
                expected: height * width,
                found: raw.len(),
            }],
        }));
    }
    if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invalid(ValidationReport {
            violations: vec![Violation::NonFinite { index }],
        }));
    }
    let (lo, hi) = match method {
        NormalizeMethod::MinMax => raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            }),
        NormalizeMethod::Percentile { low, high } => {
            let mut sorted = raw.to_vec();
            sorted.sort_by(f64::total_cmp);
            (percentile_sorted(&sorted, low), percentile_sorted(&sorted, high))
        }
    };
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return Err(Error::DegenerateIntensity);
    }
    let span = hi - lo;
    let pixels = raw
        .iter()
        .map(|&v| ((v.clamp(lo, hi) - lo) / span).clamp(0.0, 1.0))
        .collect();
    ImageSlice::new(source_id, height, width, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub subject_id: String,
    pub split: Split,
    pub precisely_labeled: bool,
}

impl ManifestEntry {
    /// File stem of the image, used as the slice's source id.
    pub fn source_id(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Dataset index. Stored as CSV with header
/// `image_path,label_path,subject_id,split,precisely_labeled`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    pub fn train(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Test)
    }

    pub fn labeled_count(&self) -> usize {
        self.train().filter(|e| e.precisely_labeled).count()
    }

    /// Subject ids present in both splits.
    pub fn leaked_subjects(&self) -> Vec<String> {
        let train: std::collections::BTreeSet<_> = self.train().map(|e| &e.subject_id).collect();
        let test: std::collections::BTreeSet<_> = self.test().map(|e| &e.subject_id).collect();
        train.intersection(&test).map(|s| s.to_string()).collect()
    }

    pub fn check(&self) -> Result<()> {
        let leaked = self.leaked_subjects();
        if !leaked.is_empty() {
            return Err(Error::Manifest(format!(
                "subjects in both train and test: {}",
                leaked.join(", ")
            )));
        }
        if self.test().any(|e| e.precisely_labeled) {
            return Err(Error::Manifest("test entries cannot be precisely labeled".into()));
        }
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.into_inner()
            .map_err(|e| Error::Manifest(format!("csv buffer: {e}")))
    }

    pub fn from_csv_reader(reader: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let expected = [
            "image_path",
            "label_path",
            "subject_id",
            "split",
            "precisely_labeled",
        ];
        if headers.iter().ne(expected.iter().copied()) {
            return Err(Error::Manifest(format!(
                "header must be `{}`",
                expected.join(",")
            )));
        }
        let entries = r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
        let manifest = Self { entries };
        manifest.check()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write_bytes(path, &self.to_csv_bytes()?)
    }

    /// SHA-256 of the CSV serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_csv_bytes()?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Randomly assigns whole subjects to the test split.
pub fn split_by_subject(manifest: &DatasetManifest, test_subjects: usize, seed: u64) -> DatasetManifest {
    let mut subjects: Vec<String> = manifest.entries.iter().map(|e| e.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let test: std::collections::HashSet<_> = subjects.into_iter().take(test_subjects).collect();
    let entries = manifest
        .entries
        .iter()
        .map(|e| {
            let is_test = test.contains(&e.subject_id);
            ManifestEntry {
                split: if is_test { Split::Test } else { Split::Train },
                precisely_labeled: e.precisely_labeled && !is_test,
                ..e.clone()
            }
        })
        .collect();
    DatasetManifest { entries }
}

/// Marks exactly `round(fraction × N_train)` labeled train entries as precise
/// annotations. Deterministic per seed; any earlier marks are cleared.
pub fn select_labeled_subset(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Manifest(format!("fraction {fraction} outside (0, 1]")));
    }
    let train: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].split == Split::Train)
        .collect();
    let count = (fraction * train.len() as f64).round() as usize;
    if count == 0 {
        return Err(Error::EmptyLabeledSet);
    }
    let mut candidates: Vec<usize> = train
        .iter()
        .copied()
        .filter(|&i| manifest.entries[i].label_path.is_some())
        .collect();
    if candidates.len() < count {
        return Err(Error::Manifest(format!(
            "{count} labeled slices requested but only {} train entries have labels",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let chosen: std::collections::HashSet<usize> = candidates.into_iter().take(count).collect();
    let entries = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| ManifestEntry {
            precisely_labeled: chosen.contains(&i),
            ..e.clone()
        })
        .collect();
    Ok(DatasetManifest { entries })
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    mask.validate().into_result()?;
    let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.pixels().iter().map(|&p| p * 255).collect(),
    )
    .expect("buffer length matches shape");
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))?;
    atomic_write_bytes(path, &bytes)
}

/// Reads a `{0,255}` PNG. With `expected` set, any other shape is an error.
pub fn load_mask(path: &Path, expected: Option<(usize, usize)>) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    if let Some(exp) = expected {
        if exp != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: exp,
                found: (h, w),
            });
        }
    }
    let mut pixels = Vec::with_capacity(w * h);
    for &v in gray.as_raw() {
        pixels.push(match v {
            0 => 0,
            255 => 1,
            other => {
                return Err(Error::MaskFormat {
                    path: path.to_path_buf(),
                    reason: format!("raster value {other} is neither 0 nor 255"),
                })
            }
        });
    }
    Ok(BinaryMask::from_raw(h, w, pixels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityRange {
    pub min: f64,
    pub max: f64,
}

fn range_sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".range.json");
    PathBuf::from(name)
}

/// Writes raw intensities as a 16-bit PNG plus the range sidecar.
pub fn save_raw_image(path: &Path, height: usize, width: usize, raw: &[f64]) -> Result<()> {
    assert_eq!(raw.len(), height * width);
    let (min, max) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if max > min { max - min } else { 1.0 };
    let quantized: Vec<u16> = raw
        .iter()
        .map(|&v| (((v - min) / span) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, quantized).expect("length matches shape");
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))?;
    atomic_write_bytes(path, &bytes)?;
    let sidecar = serde_json::to_vec(&IntensityRange { min, max: min + span })?;
    atomic_write_bytes(&range_sidecar(path), &sidecar)
}

/// Reads a 16-bit PNG back into raw intensities (using the sidecar range when
/// present, otherwise [0, 1]).
pub fn load_raw_image(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let gray = img.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let sidecar = range_sidecar(path);
    let range = if sidecar.exists() {
        let bytes = std::fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        serde_json::from_slice(&bytes)?
    } else {
        IntensityRange { min: 0.0, max: 1.0 }
    };
    let span = range.max - range.min;
    let raw = gray
        .as_raw()
        .iter()
        .map(|&q| range.min + f64::from(q) / 65535.0 * span)
        .collect();
    Ok((h, w, raw))
}

/// Loads and normalizes one slice per the config, checking its size.
pub fn load_image(path: &Path, config: &TrainingConfig) -> Result<ImageSlice> {
    let (h, w, raw) = load_raw_image(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let slice = normalize(id, h, w, &raw, NormalizeMethod::from_config(config))?;
    slice.validate_size(config.slice_size).into_result()?;
    Ok(slice)
}

const PMAP_MAGIC: &[u8; 4] = b"PMAP";

pub fn save_probability_map(path: &Path, map: &ProbabilityMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 8 * map.pixels().len());
    bytes.extend_from_slice(PMAP_MAGIC);
    bytes.extend_from_slice(&(map.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for v in map.pixels() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write_bytes(path, &bytes)
}

pub fn load_probability_map(path: &Path) -> Result<ProbabilityMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::MaskFormat {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != PMAP_MAGIC {
        return Err(bad("missing PMAP header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 12 + 8 * h * w {
        return Err(bad("truncated probability map"));
    }
    let pixels = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ProbabilityMap::new(h, w, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Plg,
    Pld,
}

/// Network weights with everything needed to resume or reproduce training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub epochs_completed: usize,
    pub config: TrainingConfig,
    pub params: NetworkParameters,
    pub optimizer: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    stage: Stage,
    epochs_completed: usize,
    config: TrainingConfig,
    arch: Architecture,
    param_state: ParamState,
    n_params: usize,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    beta1: f64,
    beta2: f64,
    step: u64,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"IMFSEGCK";

impl Checkpoint {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format_version: Self::FORMAT_VERSION,
            stage: self.stage,
            epochs_completed: self.epochs_completed,
            config: self.config.clone(),
            arch: self.params.arch(),
            param_state: self.params.state(),
            n_params: self.params.len(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                beta1: o.beta1,
                beta2: o.beta2,
                step: o.step,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        atomic_write_with(path, |w| {
            let io = |e| Error::io(path, e);
            w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
            w.write_all(&Self::FORMAT_VERSION.to_le_bytes()).map_err(io)?;
            w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&json).map_err(io)?;
            let mut arrays = vec![self.params.values()];
            if let Some(opt) = &self.optimizer {
                let (m, v) = opt.moments();
                arrays.extend([m, v]);
            }
            for arr in arrays {
                for x in arr {
                    w.write_all(&x.to_le_bytes()).map_err(io)?;
                }
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != Self::FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: Self::FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        if header.format_version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        let floats: Vec<f64> = body[hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let n = header.n_params;
        let arrays = if header.optimizer.is_some() { 3 } else { 1 };
        if floats.len() != n * arrays || !(body.len() - hlen).is_multiple_of(8) {
            return Err(bad("array section has the wrong length"));
        }
        let params = NetworkParameters::from_values(header.arch, header.param_state, floats[..n].to_vec())?;
        let optimizer = header.optimizer.map(|o| {
            Adam::from_state(
                o.beta1,
                o.beta2,
                o.step,
                floats[n..2 * n].to_vec(),
                floats[2 * n..].to_vec(),
            )
        });
        Ok(Self {
            stage: header.stage,
            epochs_completed: header.epochs_completed,
            config: header.config,
            params,
            optimizer,
        })
    }
}
