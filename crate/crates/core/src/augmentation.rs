//! Training-time augmentation: flips, rotation and affine warps applied
//! identically to an image and its mask, followed by a contrast adjustment
//! of the image alone.
//!
//! Every draw is a pure function of `(seed, sample id, epoch)`, so the
//! augmented stream can be replayed from the run seed and manifest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_model::{BinaryMask, ContrastMode, ImageSlice, TrainingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: f64,
    pub shear_deg: f64,
    pub translate_px: (f64, f64),
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        scale: 1.0,
        shear_deg: 0.0,
        translate_px: (0.0, 0.0),
    };

    fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Inputs the spec was drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawRecord {
    pub seed: u64,
    pub sample_id: String,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Counter-clockwise, in degrees.
    pub rotation_deg: f64,
    pub affine: Affine,
    pub gamma: f64,
    pub draw: Option<DrawRecord>,
}

impl AugmentationSpec {
    /// No geometric change and `γ = 1`.
    pub fn identity() -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            rotation_deg: 0.0,
            affine: Affine::IDENTITY,
            gamma: 1.0,
            draw: None,
        }
    }
}

/// Stable 64-bit stream id for one (seed, sample, epoch) triple.
pub fn derive_seed(seed: u64, sample_id: &str, epoch: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((sample_id.len() as u64).to_le_bytes());
    h.update(sample_id.as_bytes());
    h.update(epoch.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn symmetric(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

fn closed(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

pub fn draw_spec(seed: u64, sample_id: &str, epoch: u64, config: &TrainingConfig) -> AugmentationSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, sample_id, epoch));
    let flip_h = rng.random_bool(0.5);
    let flip_v = rng.random_bool(0.5);
    let rotation_deg = symmetric(&mut rng, config.rotation_deg);
    let scale = closed(&mut rng, config.scale_range);
    let shear_deg = symmetric(&mut rng, config.shear_deg);
    let tx = symmetric(&mut rng, config.translate_px);
    let ty = symmetric(&mut rng, config.translate_px);
    let gamma = closed(&mut rng, config.gamma_range);
    AugmentationSpec {
        flip_h,
        flip_v,
        rotation_deg,
        affine: Affine {
            scale,
            shear_deg,
            translate_px: (tx, ty),
        },
        gamma,
        draw: Some(DrawRecord {
            seed,
            sample_id: sample_id.to_string(),
            epoch,
        }),
    }
}

/// Row-major grid with the two operations warping needs.
trait Raster: Sized {
    type Px: Copy + Default;
    fn dims(&self) -> (usize, usize);
    fn px(&self) -> &[Self::Px];
    fn rebuild(&self, px: Vec<Self::Px>) -> Self;
}

impl Raster for ImageSlice {
    type Px = f64;
    fn dims(&self) -> (usize, usize) {
        self.shape()
    }
    fn px(&self) -> &[f64] {
        self.pixels()
    }
    fn rebuild(&self, px: Vec<f64>) -> Self {
        ImageSlice::from_raw(self.source_id(), self.height(), self.width(), px)
    }
}

impl Raster for BinaryMask {
    type Px = u8;
    fn dims(&self) -> (usize, usize) {
        self.shape()
    }
    fn px(&self) -> &[u8] {
        self.pixels()
    }
    fn rebuild(&self, px: Vec<u8>) -> Self {
        BinaryMask::from_raw(self.height(), self.width(), px)
    }
}

fn permute<R: Raster>(img: &R, src_index: impl Fn(usize, usize) -> usize) -> R {
    let (h, w) = img.dims();
    let src = img.px();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            out.push(src[src_index(r, c)]);
        }
    }
    img.rebuild(out)
}

fn flip_h<R: Raster>(img: &R) -> R {
    let (_, w) = img.dims();
    permute(img, |r, c| r * w + (w - 1 - c))
}

fn flip_v<R: Raster>(img: &R) -> R {
    let (h, w) = img.dims();
    permute(img, |r, c| (h - 1 - r) * w + c)
}

/// Counter-clockwise quarter turns of a square raster.
fn rot90<R: Raster>(img: &R, quarter_turns: u32) -> R {
    let (_, n) = img.dims();
    match quarter_turns % 4 {
        0 => permute(img, |r, c| r * n + c),
        1 => permute(img, |r, c| c * n + (n - 1 - r)),
        2 => permute(img, |r, c| (n - 1 - r) * n + (n - 1 - c)),
        _ => permute(img, |r, c| (n - 1 - c) * n + r),
    }
}

/// Inverse of the forward map `p' = A·(p − centre) + centre + t`.
#[derive(Debug, Clone, Copy)]
struct InverseMap {
    inv: [[f64; 2]; 2],
    cx: f64,
    cy: f64,
    tx: f64,
    ty: f64,
}

impl InverseMap {
    fn new(h: usize, w: usize, rotation_deg: f64, affine: &Affine) -> Self {
        // x to the right, y down; a positive angle turns the picture
        // counter-clockwise on screen.
        let th = rotation_deg.to_radians();
        let (s, c) = th.sin_cos();
        let rot = [[c, s], [-s, c]];
        let k = affine.shear_deg.to_radians().tan();
        let sh = [[1.0, k], [0.0, 1.0]];
        let sc = affine.scale;
        let mul = |a: [[f64; 2]; 2], b: [[f64; 2]; 2]| {
            [
                [
                    a[0][0] * b[0][0] + a[0][1] * b[1][0],
                    a[0][0] * b[0][1] + a[0][1] * b[1][1],
                ],
                [
                    a[1][0] * b[0][0] + a[1][1] * b[1][0],
                    a[1][0] * b[0][1] + a[1][1] * b[1][1],
                ],
            ]
        };
        let m = mul(rot, mul(sh, [[sc, 0.0], [0.0, sc]]));
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        Self {
            inv,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            tx: affine.translate_px.0,
            ty: affine.translate_px.1,
        }
    }

    /// Source (x, y) sampled for output pixel (col, row).
    fn source(&self, col: usize, row: usize) -> (f64, f64) {
        let dx = col as f64 - self.cx - self.tx;
        let dy = row as f64 - self.cy - self.ty;
        (
            self.inv[0][0] * dx + self.inv[0][1] * dy + self.cx,
            self.inv[1][0] * dx + self.inv[1][1] * dy + self.cy,
        )
    }
}

fn warp_bilinear(img: &ImageSlice, map: &InverseMap) -> ImageSlice {
    let (h, w) = img.shape();
    let src = img.pixels();
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = map.source(c, r);
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + at(x0 + 1, y0) * fx * (1.0 - fy)
                + at(x0, y0 + 1) * (1.0 - fx) * fy
                + at(x0 + 1, y0 + 1) * fx * fy;
            out.push(v.clamp(0.0, 1.0));
        }
    }
    img.rebuild(out)
}

fn warp_nearest(mask: &BinaryMask, map: &InverseMap) -> BinaryMask {
    let (h, w) = mask.shape();
    let src = mask.pixels();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = map.source(c, r);
            let (xi, yi) = (x.round(), y.round());
            let v = if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                0
            } else {
                src[yi as usize * w + xi as usize]
            };
            out.push(v);
        }
    }
    mask.rebuild(out)
}

/// Quarter-turn count when `deg` is an exact multiple of 90.
fn exact_quarter_turns(deg: f64) -> Option<u32> {
    let q = deg / 90.0;
    (q == q.round()).then(|| q.round().rem_euclid(4.0) as u32)
}

/// Applies flips, then rotation and the affine warp. Images are resampled
/// bilinearly and clamped to [0, 1]; masks use nearest-neighbour so they stay
/// binary. Axis-aligned turns with an identity affine are exact permutations.
pub fn apply_geometric(
    spec: &AugmentationSpec,
    image: &ImageSlice,
    mask: Option<&BinaryMask>,
) -> (ImageSlice, Option<BinaryMask>) {
    if let Some(m) = mask {
        assert_eq!(m.shape(), image.shape(), "image and mask shapes differ");
    }
    let mut img = image.clone();
    let mut msk = mask.cloned();
    if spec.flip_h {
        img = flip_h(&img);
        msk = msk.as_ref().map(flip_h);
    }
    if spec.flip_v {
        img = flip_v(&img);
        msk = msk.as_ref().map(flip_v);
    }
    let (h, w) = img.shape();
    match exact_quarter_turns(spec.rotation_deg) {
        Some(q) if spec.affine.is_identity() && (h == w || q % 2 == 0) => {
            if q != 0 {
                img = rot90(&img, q);
                msk = msk.as_ref().map(|m| rot90(m, q));
            }
        }
        _ => {
            let map = InverseMap::new(h, w, spec.rotation_deg, &spec.affine);
            img = warp_bilinear(&img, &map);
            msk = msk.as_ref().map(|m| warp_nearest(m, &map));
        }
    }
    (img, msk)
}

/// Contrast adjustment of the image only, per `mode`.
pub fn apply_contrast_with(spec: &AugmentationSpec, image: &ImageSlice, mode: ContrastMode) -> ImageSlice {
    let g = spec.gamma;
    let px = image.pixels();
    let out = match mode {
        ContrastMode::Power => px.iter().map(|&x| x.powf(g).clamp(0.0, 1.0)).collect(),
        ContrastMode::Linear => {
            let mean = px.iter().sum::<f64>() / px.len().max(1) as f64;
            px.iter()
                .map(|&x| (g * x + (1.0 - g) * mean).clamp(0.0, 1.0))
                .collect()
        }
    };
    image.rebuild(out)
}

/// Power-law contrast `x ↦ x^γ`.
pub fn apply_contrast(spec: &AugmentationSpec, image: &ImageSlice) -> ImageSlice {
    apply_contrast_with(spec, image, ContrastMode::Power)
}

/// Full training-time transform honouring the config's on/off switches:
/// geometry first, then contrast.
pub fn augment_pair(
    spec: &AugmentationSpec,
    image: &ImageSlice,
    mask: Option<&BinaryMask>,
    config: &TrainingConfig,
) -> (ImageSlice, Option<BinaryMask>) {
    let (mut img, msk) = if config.augment {
        apply_geometric(spec, image, mask)
    } else {
        (image.clone(), mask.cloned())
    };
    if config.contrast_adjust {
        img = apply_contrast_with(spec, &img, config.contrast_mode);
    }
    (img, msk)
}
