use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ValidationReport, Violation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Per-slice min-max scaling.
    MinMax,
    /// Clip to the `percentile_low`..`percentile_high` range, then min-max.
    Percentile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    /// `x ↦ x^γ`.
    Power,
    /// `x ↦ γ·x + (1−γ)·mean(x)`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Mean of squared residuals.
    Mse,
    /// Unsquared Euclidean norm of the residual.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoFusion {
    /// Average decoder logits, then sigmoid.
    Logits,
    /// Average decoder probabilities.
    Probabilities,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear decay to zero over the stage's epochs.
    Linear,
}

/// Every hyperparameter of a run. Loaded from a flat TOML file; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub labeled_fraction: f64,
    pub slice_size: usize,
    pub plg_epochs: usize,
    pub pld_epochs: usize,
    pub confidence_threshold: f64,
    pub coarse_low: f64,
    pub coarse_high: f64,
    pub prob_threshold: f64,
    pub consistency_weight: f64,
    pub gamma_range: [f64; 2],
    pub seed: u64,

    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    /// Second-stage learning rate; `None` reuses `learning_rate`.
    pub pld_learning_rate: Option<f64>,
    /// Second-stage batch size; `None` reuses `batch_size`.
    pub pld_batch_size: Option<usize>,

    pub depth: usize,
    pub base_channels: usize,

    pub normalization: Normalization,
    pub percentile_low: f64,
    pub percentile_high: f64,

    pub augment: bool,
    pub contrast_adjust: bool,
    pub contrast_mode: ContrastMode,
    pub rotation_deg: f64,
    pub scale_range: [f64; 2],
    pub shear_deg: f64,
    pub translate_px: f64,

    /// Confidence evaluation: gate `L_seg` on `S >= confidence_threshold`.
    pub confidence_gating: bool,
    /// Include the noise-robust term in the second stage.
    pub noise_robust: bool,
    pub norm_kind: NormKind,
    pub pseudo_fusion: PseudoFusion,
    pub pld_warm_start: bool,
    /// Precisely labeled slices supervise the second stage with `S = 1`.
    pub pld_use_precise: bool,
    /// Closing radius for IMF extraction; `None` scales 5 px at 256 to the slice size.
    pub imf_radius: Option<usize>,
    /// Fan per-sample work out over the rayon pool.
    pub parallel: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            labeled_fraction: 0.01,
            slice_size: 256,
            plg_epochs: 20,
            pld_epochs: 10,
            confidence_threshold: 0.8,
            coarse_low: 0.2,
            coarse_high: 0.6,
            prob_threshold: 0.5,
            consistency_weight: 0.5,
            gamma_range: [0.5, 0.7],
            seed: 0,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lr_schedule: LrSchedule::Constant,
            batch_size: 8,
            pld_learning_rate: None,
            pld_batch_size: None,
            depth: 4,
            base_channels: 16,
            normalization: Normalization::MinMax,
            percentile_low: 1.0,
            percentile_high: 99.0,
            augment: true,
            contrast_adjust: true,
            contrast_mode: ContrastMode::Power,
            rotation_deg: 15.0,
            scale_range: [0.9, 1.1],
            shear_deg: 8.0,
            translate_px: 10.0,
            confidence_gating: true,
            noise_robust: true,
            norm_kind: NormKind::Mse,
            pseudo_fusion: PseudoFusion::Logits,
            pld_warm_start: false,
            pld_use_precise: true,
            imf_radius: None,
            parallel: true,
        }
    }
}

impl TrainingConfig {
    /// Desk-scale configuration for 64×64 phantom data.
    pub fn phantom() -> Self {
        Self {
            slice_size: 64,
            depth: 3,
            base_channels: 8,
            learning_rate: 5e-4,
            batch_size: 4,
            pld_learning_rate: Some(1e-3),
            pld_batch_size: Some(2),
            translate_px: 3.0,
            augment: false,
            contrast_adjust: false,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate().into_result()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Structuring-element radius used for IMF extraction.
    pub fn imf_struct_radius(&self) -> usize {
        self.imf_radius
            .unwrap_or_else(|| ((5.0 * self.slice_size as f64 / 256.0).ceil() as usize).max(1))
    }

    pub fn validate(&self) -> ValidationReport {
        let mut errors = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                errors.push(Violation::Config(msg.to_string()));
            }
        };
        check(
            0.0 < self.coarse_low && self.coarse_low < self.coarse_high && self.coarse_high < 1.0,
            "need 0 < coarse_low < coarse_high < 1",
        );
        check(
            0.0 < self.confidence_threshold && self.confidence_threshold <= 1.0,
            "need 0 < confidence_threshold <= 1",
        );
        check(
            0.0 < self.prob_threshold && self.prob_threshold < 1.0,
            "need 0 < prob_threshold < 1",
        );
        check(
            0.0 < self.labeled_fraction && self.labeled_fraction <= 1.0,
            "need 0 < labeled_fraction <= 1",
        );
        check(
            0.0 < self.gamma_range[0] && self.gamma_range[0] <= self.gamma_range[1],
            "need 0 < gamma_range[0] <= gamma_range[1]",
        );
        check(
            0.0 < self.scale_range[0] && self.scale_range[0] <= self.scale_range[1],
            "need 0 < scale_range[0] <= scale_range[1]",
        );
        check(
            self.rotation_deg >= 0.0 && self.shear_deg >= 0.0 && self.translate_px >= 0.0,
            "augmentation ranges must be non-negative",
        );
        check(self.shear_deg < 90.0, "shear_deg must be below 90");
        check(self.consistency_weight >= 0.0, "consistency_weight must be >= 0");
        check(
            self.batch_size > 0 && self.pld_batch_size != Some(0),
            "batch sizes must be positive",
        );
        check(
            self.pld_learning_rate.is_none_or(|lr| lr > 0.0),
            "pld_learning_rate must be positive",
        );
        check(
            self.depth > 0 && self.base_channels > 0,
            "depth and base_channels must be positive",
        );
        check(
            self.slice_size > 0 && self.slice_size.is_multiple_of(1 << self.depth),
            "slice_size must be divisible by 2^depth",
        );
        check(
            self.learning_rate > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "need learning_rate > 0 and betas in [0,1)",
        );
        check(
            0.0 <= self.percentile_low
                && self.percentile_low < self.percentile_high
                && self.percentile_high <= 100.0,
            "need 0 <= percentile_low < percentile_high <= 100",
        );
        check(self.imf_radius != Some(0), "imf_radius must be >= 1");
        ValidationReport { violations: errors }
    }
}
