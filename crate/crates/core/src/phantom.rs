//! Synthetic thigh-like slices with exact ground truth.
//!
//! A slice is an elliptical thigh: a bright subcutaneous fat ring around a
//! mid-intensity muscle region containing a dark bone disc. Bright fat
//! branches (random-walk polylines) run through the muscle. The image gets a
//! smooth multiplicative bias field and additive Gaussian noise, then is
//! min-max normalized. Ground truth is the muscle region minus bone and
//! branches.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augmentation::derive_seed;
use crate::data_model::{BinaryMask, ImageSlice};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::preprocessing_io::{
    self as pio, normalize, DatasetManifest, ManifestEntry, NormalizeMethod, Split,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub muscle_intensity_range: (f64, f64),
    pub fat_intensity_range: (f64, f64),
    pub bone_intensity_range: (f64, f64),
    pub imf_branch_count: usize,
    /// Upper bound on branch width; each branch draws a width in `1..=max`.
    pub imf_branch_width_px: usize,
    pub inhomogeneity_amplitude: f64,
    /// Weight each 4-neighbour contributes to a pixel's intensity, blurring
    /// tissue boundaries as finite voxel size does; 0 keeps edges sharp.
    pub partial_volume: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            muscle_intensity_range: (0.25, 0.50),
            fat_intensity_range: (0.85, 0.95),
            bone_intensity_range: (0.03, 0.10),
            imf_branch_count: 4,
            imf_branch_width_px: 3,
            inhomogeneity_amplitude: 0.15,
            partial_volume: 0.0,
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn check(&self) -> Result<()> {
        let (m0, m1) = self.muscle_intensity_range;
        let (f0, f1) = self.fat_intensity_range;
        let (b0, b1) = self.bone_intensity_range;
        let bad = |m: &str| Err(Error::Phantom(m.to_string()));
        if self.image_size < 16 {
            return bad("image_size must be at least 16");
        }
        if !(0.0 <= b0 && b0 <= b1 && b1 < m0 && m0 <= m1 && m1 < f0 && f0 <= f1 && f1 <= 1.0) {
            return bad("need bone < muscle < fat intensity ranges, disjoint and within [0, 1]");
        }
        if self.imf_branch_count > 0 && self.imf_branch_width_px == 0 {
            return bad("imf_branch_width_px must be >= 1");
        }
        if !(0.0..=0.2).contains(&self.partial_volume) {
            return bad("partial_volume must lie in [0, 0.2]");
        }
        if !(0.0..1.0).contains(&self.inhomogeneity_amplitude) || self.noise_sigma < 0.0 {
            return bad("need 0 <= inhomogeneity_amplitude < 1 and noise_sigma >= 0");
        }
        Ok(())
    }
}

/// One generated slice and its label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: ImageSlice,
    /// Raw intensities before normalization.
    pub raw: Vec<f64>,
    /// Ground-truth muscle, IMF excluded.
    pub muscle: BinaryMask,
    /// IMF branch pixels inside the muscle region.
    pub imf: BinaryMask,
}

impl Phantom {
    /// Annotation that wrongly counts IMF as muscle.
    pub fn degraded_label(&self) -> BinaryMask {
        self.muscle.or(&self.imf).expect("same shape")
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Fat,
    Muscle,
    Bone,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.ax).powi(2) + (v / self.ay).powi(2) <= 1.0
    }
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.check()?;
    let n = spec.image_size;
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut uni = |lo: f64, hi: f64| rng.random_range(lo..=hi);

    let angle = uni(-0.3, 0.3);
    let (sin, cos) = angle.sin_cos();
    let cx = nf / 2.0 - 0.5 + uni(-0.03, 0.03) * nf;
    let cy = nf / 2.0 - 0.5 + uni(-0.03, 0.03) * nf;
    let ax = uni(0.40, 0.46) * nf;
    let ay = uni(0.34, 0.40) * nf;
    let fat_thickness = uni(0.06, 0.10) * nf;
    let outer = Ellipse {
        cx,
        cy,
        ax,
        ay,
        cos,
        sin,
    };
    let inner = Ellipse {
        ax: ax - fat_thickness,
        ay: ay - fat_thickness,
        ..outer
    };
    let bone_r = uni(0.07, 0.10) * nf;
    let bone_x = cx + uni(-0.08, 0.08) * nf;
    let bone_y = cy + uni(-0.05, 0.05) * nf;

    let muscle_i = uni(spec.muscle_intensity_range.0, spec.muscle_intensity_range.1);
    let fat_i = uni(spec.fat_intensity_range.0, spec.fat_intensity_range.1);
    let bone_i = uni(spec.bone_intensity_range.0, spec.bone_intensity_range.1);

    let tissue: Vec<Tissue> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            if !outer.contains(x, y) {
                Tissue::Background
            } else if !inner.contains(x, y) {
                Tissue::Fat
            } else if (x - bone_x).powi(2) + (y - bone_y).powi(2) <= bone_r * bone_r {
                Tissue::Bone
            } else {
                Tissue::Muscle
            }
        })
        .collect();
    let muscle_area = tissue.iter().filter(|&&t| t == Tissue::Muscle).count();

    let mut imf = vec![0u8; n * n];
    for _ in 0..spec.imf_branch_count {
        let width = rng.random_range(1..=spec.imf_branch_width_px);
        let (sx, sy) = loop {
            let i = rng.random_range(0..n * n);
            if tissue[i] == Tissue::Muscle {
                break ((i % n) as f64, (i / n) as f64);
            }
        };
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let length = rng.random_range(0.25..0.5) * nf;
        random_walk(
            &mut rng,
            &tissue,
            n,
            &mut imf,
            (sx, sy),
            heading,
            length,
            width,
            2,
        );
    }
    let imf_count = imf.iter().filter(|&&v| v == 1).count();
    if imf_count * 2 > muscle_area {
        return Err(Error::Phantom(format!(
            "branches exceeding muscle area: {imf_count} IMF pixels vs {muscle_area} muscle pixels"
        )));
    }

    let bias = bias_field(&mut rng, n, spec.inhomogeneity_amplitude);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let sharp: Vec<f64> = (0..n * n)
        .map(|i| {
            if imf[i] == 1 {
                fat_i
            } else {
                match tissue[i] {
                    Tissue::Background => 0.0,
                    Tissue::Fat => fat_i,
                    Tissue::Muscle => muscle_i,
                    Tissue::Bone => bone_i,
                }
            }
        })
        .collect();
    let blurred = partial_volume(&sharp, n, spec.partial_volume);
    let raw: Vec<f64> = (0..n * n)
        .map(|i| {
            let base = blurred[i];
            let eps = if spec.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (base * bias[i] + eps).max(0.0)
        })
        .collect();

    let id = format!("phantom_{}", spec.seed);
    let image = normalize(id, n, n, &raw, NormalizeMethod::MinMax)?;
    let muscle = BinaryMask::from_raw(
        n,
        n,
        (0..n * n)
            .map(|i| u8::from(tissue[i] == Tissue::Muscle && imf[i] == 0))
            .collect(),
    );
    Ok(Phantom {
        image,
        raw,
        muscle,
        imf: BinaryMask::from_raw(n, n, imf),
    })
}

/// Mixes each pixel with its 4-neighbours: the centre keeps weight
/// `1 − 4·w`, each neighbour gets `w`. Edge pixels reuse their own value for
/// missing neighbours.
fn partial_volume(px: &[f64], n: usize, w: f64) -> Vec<f64> {
    if w == 0.0 {
        return px.to_vec();
    }
    let at = |r: isize, c: isize, own: f64| {
        if r < 0 || c < 0 || r >= n as isize || c >= n as isize {
            own
        } else {
            px[r as usize * n + c as usize]
        }
    };
    (0..n * n)
        .map(|i| {
            let (r, c) = ((i / n) as isize, (i % n) as isize);
            let own = px[i];
            let sum = at(r - 1, c, own) + at(r + 1, c, own) + at(r, c - 1, own) + at(r, c + 1, own);
            (1.0 - 4.0 * w) * own + w * sum
        })
        .collect()
}

/// Draws a wandering branch into `imf`, forking occasionally. Only muscle
/// pixels are marked; the walk ends when it leaves the muscle region.
#[allow(clippy::too_many_arguments)]
fn random_walk(
    rng: &mut ChaCha8Rng,
    tissue: &[Tissue],
    n: usize,
    imf: &mut [u8],
    start: (f64, f64),
    mut heading: f64,
    length: f64,
    width: usize,
    forks_left: usize,
) {
    let turn = Normal::new(0.0, 0.2).expect("valid sigma");
    let (mut x, mut y) = start;
    let steps = (length * 2.0) as usize;
    let lo = -((width as isize - 1) / 2);
    let hi = width as isize / 2;
    for step in 0..steps {
        let (px, py) = (x.round() as isize, y.round() as isize);
        if px < 0 || py < 0 || px >= n as isize || py >= n as isize {
            return;
        }
        if tissue[py as usize * n + px as usize] != Tissue::Muscle && step > 0 {
            return;
        }
        for dy in lo..=hi {
            for dx in lo..=hi {
                let (qx, qy) = (px + dx, py + dy);
                if qx >= 0 && qy >= 0 && qx < n as isize && qy < n as isize {
                    let i = qy as usize * n + qx as usize;
                    if tissue[i] == Tissue::Muscle {
                        imf[i] = 1;
                    }
                }
            }
        }
        if forks_left > 0 && step > 4 && rng.random_bool(0.02) {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let remaining = (steps - step) as f64 / 2.0;
            let fork_heading = heading + side * rng.random_range(0.5..1.2);
            random_walk(
                rng,
                tissue,
                n,
                imf,
                (x, y),
                fork_heading,
                remaining * 0.6,
                width.saturating_sub(1).max(1),
                forks_left - 1,
            );
        }
        heading += turn.sample(rng);
        x += 0.5 * heading.cos();
        y += 0.5 * heading.sin();
    }
}

/// Smooth field with values in `[1 − a, 1 + a]` (exactly 1 when `a = 0`).
fn bias_field(rng: &mut ChaCha8Rng, n: usize, amplitude: f64) -> Vec<f64> {
    let gx = rng.random_range(-1.0..1.0);
    let gy = rng.random_range(-1.0..1.0);
    let wx = rng.random_range(1.0..3.0);
    let wy = rng.random_range(1.0..3.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let raw: Vec<f64> = (0..n * n)
        .map(|i| {
            let x = 2.0 * (i % n) as f64 / (n - 1) as f64 - 1.0;
            let y = 2.0 * (i / n) as f64 / (n - 1) as f64 - 1.0;
            gx * x + gy * y + (wx * x + wy * y + phase).sin()
        })
        .collect();
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if amplitude == 0.0 || peak == 0.0 {
        return vec![1.0; n * n];
    }
    raw.iter().map(|v| 1.0 + amplitude * v / peak).collect()
}

/// Layout of a generated phantom dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub slices_per_subject: usize,
    pub n_labeled: usize,
    pub phantom: PhantomSpec,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 50,
            slices_per_subject: 10,
            n_labeled: 2,
            phantom: PhantomSpec::default(),
            seed: 0,
        }
    }
}

/// Spec of slice `index` of `subject` within a dataset.
pub fn slice_spec(ds: &DatasetSpec, subject: &str, index: usize) -> PhantomSpec {
    PhantomSpec {
        seed: derive_seed(ds.seed, subject, index as u64),
        ..ds.phantom.clone()
    }
}

struct PlannedSlice {
    subject: String,
    index: usize,
    split: Split,
}

fn plan(ds: &DatasetSpec) -> Vec<PlannedSlice> {
    let per = ds.slices_per_subject.max(1);
    let mut out = Vec::with_capacity(ds.n_train + ds.n_test);
    for (split, count, prefix) in [(Split::Train, ds.n_train, "tr"), (Split::Test, ds.n_test, "te")] {
        for k in 0..count {
            out.push(PlannedSlice {
                subject: format!("{prefix}{:03}", k / per),
                index: k % per,
                split,
            });
        }
    }
    out
}

/// Generates the dataset in memory: `(entry, phantom)` pairs in manifest order.
pub fn generate_dataset_in_memory(
    ds: &DatasetSpec,
    exec: Execution,
) -> Result<Vec<(ManifestEntry, Phantom)>> {
    let planned = plan(ds);
    let phantoms = par::map(exec, &planned, |p| generate(&slice_spec(ds, &p.subject, p.index)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(planned
        .into_iter()
        .zip(phantoms)
        .map(|(p, ph)| {
            let stem = format!("{}_{:03}", p.subject, p.index);
            let entry = ManifestEntry {
                image_path: PathBuf::from("images").join(format!("{stem}.png")),
                label_path: Some(PathBuf::from("labels").join(format!("{stem}.png"))),
                subject_id: p.subject,
                split: p.split,
                precisely_labeled: false,
            };
            let ph = Phantom {
                image: ph.image.with_source_id(stem),
                ..ph
            };
            (entry, ph)
        })
        .collect())
}

/// Writes images, ground-truth masks and `manifest.csv` under `dir`, with
/// `n_labeled` train slices marked as precise annotations.
pub fn generate_dataset(dir: &Path, ds: &DatasetSpec, exec: Execution) -> Result<DatasetManifest> {
    let pairs = generate_dataset_in_memory(ds, exec)?;
    let written: Vec<Result<()>> = par::map(exec, &pairs, |(entry, ph)| {
        let n = ph.image.height();
        pio::save_raw_image(&dir.join(&entry.image_path), n, n, ph.image.pixels())?;
        pio::save_mask(
            &dir.join(entry.label_path.as_ref().expect("phantoms are labeled")),
            &ph.muscle,
        )
    });
    written.into_iter().collect::<Result<()>>()?;
    let manifest = DatasetManifest::new(pairs.into_iter().map(|(e, _)| e).collect());
    let fraction = ds.n_labeled as f64 / ds.n_train.max(1) as f64;
    let manifest = pio::select_labeled_subset(&manifest, fraction, ds.seed)?;
    manifest.save(&dir.join("manifest.csv"))?;
    let spec_json = serde_json::to_vec_pretty(ds)?;
    pio::atomic_write_bytes(&dir.join("phantom_spec.json"), &spec_json)?;
    Ok(manifest)
}
