//! Training objectives: soft Dice segmentation loss, cross-decoder
//! consistency, the noise-robust loss on corrected pseudo-labels, and the
//! confidence-gated combination used by the denoising stage.
//!
//! Each loss has a value-only form taking domain types and a `*_grad` form on
//! raw slices that also returns the gradient with respect to the
//! probabilities. Thresholded targets are constants (no gradient).

use serde::{Deserialize, Serialize};

use crate::data_model::{ensure_same_shape, BinaryMask, NormKind, ProbabilityMap, TrainingConfig};
use crate::error::Result;
use crate::network::{binarize_values, DecoderOutputs};

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// `1 − (2·Σpy + ε) / (Σp + Σy + ε)`.
pub fn dice_loss(p: &ProbabilityMap, y: &BinaryMask) -> Result<f64> {
    ensure_same_shape(y.shape(), p.shape())?;
    Ok(dice_loss_grad(p.pixels(), y.pixels()).0)
}

pub fn dice_loss_grad(p: &[f64], y: &[u8]) -> (f64, Vec<f64>) {
    assert_eq!(p.len(), y.len());
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_y = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let yi = f64::from(yi);
        inter += pi * yi;
        sum_p += pi;
        sum_y += yi;
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = sum_p + sum_y + DICE_EPS;
    let loss = 1.0 - num / den;
    let grad = y
        .iter()
        .map(|&yi| -(2.0 * f64::from(yi) * den - num) / (den * den))
        .collect();
    (loss, grad)
}

/// Norm of `residual(i)` with `d residual / d p_i = slope(i)`.
fn residual_norm(
    n: usize,
    norm: NormKind,
    residual: impl Fn(usize) -> f64,
    slope: impl Fn(usize) -> f64,
) -> (f64, Vec<f64>) {
    let r: Vec<f64> = (0..n).map(&residual).collect();
    let sq: f64 = r.iter().map(|v| v * v).sum();
    match norm {
        NormKind::Mse => {
            let scale = 2.0 / n as f64;
            let grad = r.iter().enumerate().map(|(i, v)| scale * v * slope(i)).collect();
            (sq / n as f64, grad)
        }
        NormKind::L2 => {
            let value = sq.sqrt();
            let grad = if value > 0.0 {
                r.iter().enumerate().map(|(i, v)| v * slope(i) / value).collect()
            } else {
                vec![0.0; n]
            };
            (value, grad)
        }
    }
}

/// `‖p_a − pl_b‖ + ‖p_b − pl_a‖` under the mean-squared interpretation.
pub fn consistency_loss(
    p_a: &ProbabilityMap,
    p_b: &ProbabilityMap,
    pl_a: &BinaryMask,
    pl_b: &BinaryMask,
) -> Result<f64> {
    consistency_loss_with(p_a, p_b, pl_a, pl_b, NormKind::Mse)
}

pub fn consistency_loss_with(
    p_a: &ProbabilityMap,
    p_b: &ProbabilityMap,
    pl_a: &BinaryMask,
    pl_b: &BinaryMask,
    norm: NormKind,
) -> Result<f64> {
    for shape in [p_b.shape(), pl_a.shape(), pl_b.shape()] {
        ensure_same_shape(p_a.shape(), shape)?;
    }
    Ok(consistency_grad(p_a.pixels(), p_b.pixels(), pl_a.pixels(), pl_b.pixels(), norm).0)
}

/// Returns the loss and its gradients with respect to `p_a` and `p_b`.
pub fn consistency_grad(
    p_a: &[f64],
    p_b: &[f64],
    pl_a: &[u8],
    pl_b: &[u8],
    norm: NormKind,
) -> (f64, Vec<f64>, Vec<f64>) {
    let n = p_a.len();
    let (la, ga) = residual_norm(n, norm, |i| p_a[i] - f64::from(pl_b[i]), |_| 1.0);
    let (lb, gb) = residual_norm(n, norm, |i| p_b[i] - f64::from(pl_a[i]), |_| 1.0);
    (la + lb, ga, gb)
}

/// `‖p_a·y − y‖ + ‖p_b·y − y‖`; pixels outside `y` contribute nothing.
pub fn noise_robust_loss(
    p_a: &ProbabilityMap,
    p_b: &ProbabilityMap,
    y_corrected: &BinaryMask,
) -> Result<f64> {
    noise_robust_loss_with(p_a, p_b, y_corrected, NormKind::Mse)
}

pub fn noise_robust_loss_with(
    p_a: &ProbabilityMap,
    p_b: &ProbabilityMap,
    y_corrected: &BinaryMask,
    norm: NormKind,
) -> Result<f64> {
    ensure_same_shape(p_a.shape(), p_b.shape())?;
    ensure_same_shape(p_a.shape(), y_corrected.shape())?;
    Ok(noise_robust_grad(p_a.pixels(), p_b.pixels(), y_corrected.pixels(), norm).0)
}

pub fn noise_robust_grad(p_a: &[f64], p_b: &[f64], y: &[u8], norm: NormKind) -> (f64, Vec<f64>, Vec<f64>) {
    let n = p_a.len();
    let yf = |i: usize| f64::from(y[i]);
    let (la, ga) = residual_norm(n, norm, |i| p_a[i] * yf(i) - yf(i), yf);
    let (lb, gb) = residual_norm(n, norm, |i| p_b[i] * yf(i) - yf(i), yf);
    (la + lb, ga, gb)
}

/// Unweighted loss terms of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l_seg: f64,
    pub l_c: f64,
    pub l_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_seg: f64,
    pub l_c: f64,
    pub l_r: f64,
    pub total: f64,
    pub s: f64,
    pub seg_active: bool,
}

/// Weights and switches of the denoising-stage objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub threshold: f64,
    pub consistency_weight: f64,
    /// When off, `S·L_seg` is applied to every sample.
    pub confidence_gating: bool,
    pub noise_robust: bool,
}

impl From<&TrainingConfig> for GateConfig {
    fn from(c: &TrainingConfig) -> Self {
        Self {
            threshold: c.confidence_threshold,
            consistency_weight: c.consistency_weight,
            confidence_gating: c.confidence_gating,
            noise_robust: c.noise_robust,
        }
    }
}

impl GateConfig {
    pub fn seg_active(&self, s: f64) -> bool {
        !self.confidence_gating || s >= self.threshold
    }

    /// Coefficients `(seg, r, c)` multiplying each term in the total.
    pub fn weights(&self, s: f64) -> (f64, f64, f64) {
        let seg = if self.seg_active(s) { s } else { 0.0 };
        let r = if self.noise_robust { 1.0 } else { 0.0 };
        (seg, r, self.consistency_weight)
    }
}

/// `S·L_seg + L_r + w_c·L_c` when `S ≥ threshold`, else `L_r + w_c·L_c`.
pub fn combined_pld_loss(parts: LossParts, s: f64, config: &GateConfig) -> LossBreakdown {
    let seg_active = config.seg_active(s);
    let (ws, wr, wc) = config.weights(s);
    let mut total = wr * parts.l_r + wc * parts.l_c;
    if seg_active {
        total += ws * parts.l_seg;
    }
    LossBreakdown {
        l_seg: parts.l_seg,
        l_c: parts.l_c,
        l_r: parts.l_r,
        total,
        s,
        seg_active,
    }
}

/// One sample's loss and the gradient with respect to both decoders'
/// probabilities.
#[derive(Debug, Clone)]
pub struct SampleObjective {
    pub breakdown: LossBreakdown,
    pub d_p_a: Vec<f64>,
    pub d_p_b: Vec<f64>,
}

fn consistency_for(out: &DecoderOutputs, prob_threshold: f64, norm: NormKind) -> (f64, Vec<f64>, Vec<f64>) {
    let (h, w) = out.p_a.shape();
    let pl_a = binarize_values(h, w, out.p_a.pixels(), prob_threshold);
    let pl_b = binarize_values(h, w, out.p_b.pixels(), prob_threshold);
    consistency_grad(
        out.p_a.pixels(),
        out.p_b.pixels(),
        pl_a.pixels(),
        pl_b.pixels(),
        norm,
    )
}

fn seg_for(out: &DecoderOutputs, y: &BinaryMask) -> (f64, Vec<f64>, Vec<f64>) {
    let (la, ga) = dice_loss_grad(out.p_a.pixels(), y.pixels());
    let (lb, gb) = dice_loss_grad(out.p_b.pixels(), y.pixels());
    (la + lb, ga, gb)
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    if alpha == 0.0 {
        return;
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// First-stage objective: `L_seg + w_c·L_c` with a precise label, `w_c·L_c`
/// without one.
pub fn plg_objective(
    out: &DecoderOutputs,
    label: Option<&BinaryMask>,
    config: &TrainingConfig,
) -> SampleObjective {
    plg_objective_weighted(out, label, config, 1.0)
}

/// [`plg_objective`] with the gradient of `L_seg` scaled by `seg_weight`.
/// The reported loss values are unscaled.
pub fn plg_objective_weighted(
    out: &DecoderOutputs,
    label: Option<&BinaryMask>,
    config: &TrainingConfig,
    seg_weight: f64,
) -> SampleObjective {
    let n = out.p_a.pixels().len();
    let wc = config.consistency_weight;
    let (l_c, gca, gcb) = consistency_for(out, config.prob_threshold, config.norm_kind);
    let mut d_p_a = vec![0.0; n];
    let mut d_p_b = vec![0.0; n];
    axpy(&mut d_p_a, wc, &gca);
    axpy(&mut d_p_b, wc, &gcb);
    let mut total = wc * l_c;
    let mut l_seg = 0.0;
    if let Some(y) = label {
        let (ls, gsa, gsb) = seg_for(out, y);
        l_seg = ls;
        total += ls;
        axpy(&mut d_p_a, seg_weight, &gsa);
        axpy(&mut d_p_b, seg_weight, &gsb);
    }
    SampleObjective {
        breakdown: LossBreakdown {
            l_seg,
            l_c,
            l_r: 0.0,
            total,
            s: if label.is_some() { 1.0 } else { 0.0 },
            seg_active: label.is_some(),
        },
        d_p_a,
        d_p_b,
    }
}

/// Second-stage objective for one sample supervised by `target` with
/// confidence `s`.
pub fn pld_objective(
    out: &DecoderOutputs,
    target: &BinaryMask,
    s: f64,
    config: &TrainingConfig,
) -> SampleObjective {
    let gate = GateConfig::from(config);
    let n = out.p_a.pixels().len();
    let (l_c, gca, gcb) = consistency_for(out, config.prob_threshold, config.norm_kind);
    let (l_r, gra, grb) = noise_robust_grad(
        out.p_a.pixels(),
        out.p_b.pixels(),
        target.pixels(),
        config.norm_kind,
    );
    let (ws, wr, wc) = gate.weights(s);
    let mut d_p_a = vec![0.0; n];
    let mut d_p_b = vec![0.0; n];
    let mut l_seg = 0.0;
    if gate.seg_active(s) {
        let (ls, gsa, gsb) = seg_for(out, target);
        l_seg = ls;
        axpy(&mut d_p_a, ws, &gsa);
        axpy(&mut d_p_b, ws, &gsb);
    }
    axpy(&mut d_p_a, wr, &gra);
    axpy(&mut d_p_b, wr, &grb);
    axpy(&mut d_p_a, wc, &gca);
    axpy(&mut d_p_b, wc, &gcb);
    SampleObjective {
        breakdown: combined_pld_loss(LossParts { l_seg, l_c, l_r }, s, &gate),
        d_p_a,
        d_p_b,
    }
}
