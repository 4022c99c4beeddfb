//! Shared domain types: image slices, binary masks, probability maps and the
//! per-slice pseudo-label bundle.
//!
//! Values are immutable after construction. Constructors named `new` reject
//! data that breaks an invariant; `from_raw` accepts anything of the right
//! length so untrusted input can be inspected with [`Validate::validate`].

mod config;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{ContrastMode, LrSchedule, NormKind, Normalization, PseudoFusion, TrainingConfig};

/// One violated invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonBinaryPixel {
        index: usize,
        value: u8,
    },
    OutOfUnitRange {
        index: usize,
        value: f64,
    },
    NonFinite {
        index: usize,
    },
    LengthMismatch {
        expected: usize,
        found: usize,
    },
    NotSquare {
        height: usize,
        width: usize,
    },
    WrongSliceSize {
        expected: usize,
        found: usize,
    },
    CorrectedNotIntersection {
        index: usize,
    },
    EligibilityMismatch {
        confidence: f64,
        threshold: f64,
        eligible: bool,
    },
    ConfidenceOutOfRange(f64),
    MaskShapeMismatch,
    Config(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonBinaryPixel { index, value } => {
                write!(f, "non-binary pixel {value} at index {index}")
            }
            Violation::OutOfUnitRange { index, value } => {
                write!(f, "out of [0,1]: {value} at index {index}")
            }
            Violation::NonFinite { index } => write!(f, "non-finite value at index {index}"),
            Violation::LengthMismatch { expected, found } => {
                write!(f, "pixel buffer holds {found} values, shape needs {expected}")
            }
            Violation::NotSquare { height, width } => {
                write!(f, "slice is {height}x{width}, expected square")
            }
            Violation::WrongSliceSize { expected, found } => {
                write!(f, "slice size {found} differs from configured {expected}")
            }
            Violation::CorrectedNotIntersection { index } => {
                write!(
                    f,
                    "corrected mask differs from pseudo AND coarse at index {index}"
                )
            }
            Violation::EligibilityMismatch {
                confidence,
                threshold,
                eligible,
            } => write!(
                f,
                "eligible={eligible} inconsistent with confidence {confidence} and threshold {threshold}"
            ),
            Violation::ConfidenceOutOfRange(s) => write!(f, "confidence {s} outside [0,1]"),
            Violation::MaskShapeMismatch => write!(f, "record masks have different shapes"),
            Violation::Config(msg) => f.write_str(msg),
        }
    }
}

/// Outcome of [`Validate::validate`]; empty means the value is well formed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Invalid(self))
        }
    }

    fn push(&mut self, v: Violation) {
        self.violations.push(v);
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        // Long reports get truncated; the first few violations say enough.
        for (i, v) in self.violations.iter().take(5).enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        if self.violations.len() > 5 {
            write!(f, "; ... {} more", self.violations.len() - 5)?;
        }
        Ok(())
    }
}

/// Invariant check that reports instead of failing.
pub trait Validate {
    fn validate(&self) -> ValidationReport;
}

/// One 2D grayscale slice with intensities normalized to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSlice {
    source_id: String,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageSlice {
    pub fn new(source_id: impl Into<String>, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        let slice = Self::from_raw(source_id, height, width, pixels);
        slice.validate().into_result()?;
        Ok(slice)
    }

    pub fn from_raw(source_id: impl Into<String>, height: usize, width: usize, pixels: Vec<f64>) -> Self {
        Self {
            source_id: source_id.into(),
            height,
            width,
            pixels,
        }
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn with_source_id(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    /// Checks the configured-size invariant on top of the intrinsic ones.
    pub fn validate_size(&self, slice_size: usize) -> ValidationReport {
        let mut report = self.validate();
        if self.height != self.width {
            report.push(Violation::NotSquare {
                height: self.height,
                width: self.width,
            });
        } else if self.height != slice_size {
            report.push(Violation::WrongSliceSize {
                expected: slice_size,
                found: self.height,
            });
        }
        report
    }
}

impl Validate for ImageSlice {
    fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        check_len(&mut report, self.height * self.width, self.pixels.len());
        check_unit_range(&mut report, &self.pixels);
        report
    }
}

/// Per-pixel {0,1} label map, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        let mask = Self::from_raw(height, width, pixels);
        mask.validate().into_result()?;
        Ok(mask)
    }

    pub fn from_raw(height: usize, width: usize, pixels: Vec<u8>) -> Self {
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_raw(height, width, vec![0; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::from_raw(height, width, vec![1; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(u8::from(f(r, c)));
            }
        }
        Self::from_raw(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn count_ones(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }

    /// `true` when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape() && self.pixels.iter().zip(&other.pixels).all(|(&a, &b)| a <= b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a | b)
    }

    /// Pixels set in `self` but not in `other`.
    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p)).collect()
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> Result<BinaryMask> {
        ensure_same_shape(self.shape(), other.shape())?;
        let pixels = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(BinaryMask::from_raw(self.height, self.width, pixels))
    }
}

impl Validate for BinaryMask {
    fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        check_len(&mut report, self.height * self.width, self.pixels.len());
        for (index, &value) in self.pixels.iter().enumerate() {
            if value > 1 {
                report.push(Violation::NonBinaryPixel { index, value });
            }
        }
        report
    }
}

/// Per-pixel probabilities in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        let map = Self::from_raw(height, width, pixels);
        map.validate().into_result()?;
        Ok(map)
    }

    pub fn from_raw(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        Self {
            height,
            width,
            pixels,
        }
    }

    /// Elementwise logistic sigmoid of `logits`.
    pub fn from_logits(height: usize, width: usize, logits: &[f64]) -> Self {
        Self::from_raw(height, width, logits.iter().map(|&z| sigmoid(z)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

impl Validate for ProbabilityMap {
    fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        check_len(&mut report, self.height * self.width, self.pixels.len());
        check_unit_range(&mut report, &self.pixels);
        report
    }
}

/// Per-slice pseudo-label bundle produced between the two training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub source_id: String,
    pub y_pseudo: BinaryMask,
    pub y_coarse: BinaryMask,
    pub y_corrected: BinaryMask,
    pub confidence: f64,
    pub eligible: bool,
    /// Threshold `eligible` was decided against.
    pub threshold: f64,
}

impl Validate for PseudoLabelRecord {
    fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        for mask in [&self.y_pseudo, &self.y_coarse, &self.y_corrected] {
            report.violations.extend(mask.validate().violations);
        }
        if self.y_pseudo.shape() != self.y_coarse.shape() || self.y_pseudo.shape() != self.y_corrected.shape()
        {
            report.push(Violation::MaskShapeMismatch);
        } else {
            let p = self.y_pseudo.pixels();
            let c = self.y_coarse.pixels();
            for (index, &v) in self.y_corrected.pixels().iter().enumerate() {
                if v != (p[index] & c[index]) {
                    report.push(Violation::CorrectedNotIntersection { index });
                    break;
                }
            }
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            report.push(Violation::ConfidenceOutOfRange(self.confidence));
        }
        if self.eligible != (self.confidence >= self.threshold) {
            report.push(Violation::EligibilityMismatch {
                confidence: self.confidence,
                threshold: self.threshold,
                eligible: self.eligible,
            });
        }
        report
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn ensure_same_shape(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, found })
    }
}

fn check_len(report: &mut ValidationReport, expected: usize, found: usize) {
    if expected != found {
        report.push(Violation::LengthMismatch { expected, found });
    }
}

fn check_unit_range(report: &mut ValidationReport, values: &[f64]) {
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() {
            report.push(Violation::NonFinite { index });
        } else if !(0.0..=1.0).contains(&value) {
            report.push(Violation::OutOfUnitRange { index, value });
        }
    }
}
