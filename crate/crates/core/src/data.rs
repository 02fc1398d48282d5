//! Synthetic source and target domains.
//!
//! Every image is a 16x16 grayscale canvas: a noisy dark background plus one
//! bright class-defining patch (horizontal bar, vertical bar, cross or square
//! blob) at a random position. The patch's bounding rectangle is the image's
//! ground-truth box. Target domains are produced by severity-graded
//! corruptions of a shared clean base set.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::roi::RoiBox;
use crate::tensor::{fingerprint, Tensor};

pub const IMAGE_SIZE: usize = 16;
pub const NUM_CLASSES: usize = 4;

/// Mixed into seeds of corruption streams so they never coincide with the
/// generator stream of the same nominal seed.
const CORRUPTION_STREAM: u64 = 0xC0DE_5EED_0000_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[1, H, W]` with values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
    /// Object regions in pixel coordinates; at least one per image.
    pub boxes: Vec<RoiBox>,
}

/// Appearance parameters of the generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorParams {
    pub size: usize,
    /// Per-image background level is uniform in `[background_min, background_max)`.
    pub background_min: f64,
    pub background_max: f64,
    /// Per-image background noise deviation is uniform in `[noise_min, noise_max)`.
    pub noise_min: f64,
    pub noise_max: f64,
    /// Patch level above the background, uniform in `[contrast_min, contrast_max)`.
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub patch_noise: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            size: IMAGE_SIZE,
            background_min: 0.05,
            background_max: 0.2,
            noise_min: 0.02,
            noise_max: 0.12,
            contrast_min: 0.35,
            contrast_max: 0.5,
            patch_noise: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub images: Vec<LabeledImage>,
    pub num_classes: usize,
    pub params: GeneratorParams,
    pub seed: u64,
}

/// A stacked mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[N, 1, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub boxes: Vec<Vec<RoiBox>>,
}

impl Batch {
    pub fn from_images(images: &[LabeledImage]) -> Result<Self> {
        let pixels: Vec<Tensor> = images.iter().map(|i| i.pixels.clone()).collect();
        Ok(Self {
            images: Tensor::stack(&pixels)?,
            labels: images.iter().map(|i| i.label).collect(),
            boxes: images.iter().map(|i| i.boxes.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Consecutive batches of at most `size` images, in dataset order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        self.images.chunks(size.max(1)).map(Batch::from_images)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.num_classes];
        for img in &self.images {
            counts[img.label] += 1;
        }
        counts
    }

    /// SHA-256 over all pixel bit patterns, labels and boxes.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut meta = Vec::new();
        for img in &self.images {
            meta.push(img.label as f64);
            for b in &img.boxes {
                meta.extend_from_slice(&[b.x0, b.y0, b.x1, b.y1]);
            }
        }
        let meta = Tensor::from_vec(meta);
        fingerprint(self.images.iter().map(|i| &i.pixels).chain(core::iter::once(&meta)))
    }
}

/// Offsets `(row, col)` of the lit pixels of a class patch and its extent.
fn patch_shape(class: usize) -> (Vec<(usize, usize)>, usize, usize) {
    let mut cells = Vec::new();
    let (h, w) = match class {
        0 => (2, 6),
        1 => (6, 2),
        2 => (5, 5),
        _ => (4, 4),
    };
    for r in 0..h {
        for c in 0..w {
            let lit = match class {
                2 => r == 2 || c == 2,
                _ => true,
            };
            if lit {
                cells.push((r, c));
            }
        }
    }
    (cells, h, w)
}

/// Generates `n` labeled images; labels are assigned round-robin.
pub fn gen_dataset(n: usize, seed: u64) -> Result<ToyDataset> {
    gen_dataset_with(n, seed, GeneratorParams::default())
}

pub fn gen_dataset_with(n: usize, seed: u64, params: GeneratorParams) -> Result<ToyDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let s = params.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fg_noise = Normal::new(0.0, params.patch_noise).map_err(|e| Error::InvalidArgument(format!("{e}")))?;
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % NUM_CLASSES;
        let level = rng.random_range(params.background_min..params.background_max);
        let sigma = rng.random_range(params.noise_min..params.noise_max);
        let bg = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("{e}")))?;
        let mut px: Vec<f64> = (0..s * s).map(|_| (level + bg.sample(&mut rng)).clamp(0.0, 1.0)).collect();
        let (cells, ph, pw) = patch_shape(label);
        let top = rng.random_range(0..=s - ph);
        let left = rng.random_range(0..=s - pw);
        let intensity = level + rng.random_range(params.contrast_min..params.contrast_max);
        for (r, c) in cells {
            px[(top + r) * s + left + c] = (intensity + fg_noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        images.push(LabeledImage {
            pixels: Tensor::new([1, s, s], px)?,
            label,
            boxes: alloc::vec![RoiBox::new(left as f64, top as f64, (left + pw) as f64, (top + ph) as f64)],
        });
    }
    Ok(ToyDataset { images, num_classes: NUM_CLASSES, params, seed })
}

// ── Corruptions ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    GaussianNoise,
    BrightnessShift,
    BoxBlur,
    HazeMix,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] =
        [Self::GaussianNoise, Self::BrightnessShift, Self::BoxBlur, Self::HazeMix];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::BrightnessShift => "brightness_shift",
            Self::BoxBlur => "box_blur",
            Self::HazeMix => "haze_mix",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// In `[0, 1]`; zero is the identity.
    pub severity: f64,
    pub seed: u64,
}

pub const HAZE_LEVEL: f64 = 0.7;
pub const HAZE_MAX_BLEND: f64 = 0.8;

/// Side length of the box filter at a given severity.
pub fn blur_taps(severity: f64) -> usize {
    1 + 2 * libm::round(3.0 * severity) as usize
}

fn box_blur(px: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = alloc::vec![0.0; src.len()];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let (mut acc, mut cnt) = (0.0, 0.0);
                for d in -r..=r {
                    let (ii, jj) = if horizontal { (i, j + d) } else { (i + d, j) };
                    if ii >= 0 && jj >= 0 && ii < h as isize && jj < w as isize {
                        acc += src[ii as usize * w + jj as usize];
                        cnt += 1.0;
                    }
                }
                dst[i as usize * w + j as usize] = acc / cnt;
            }
        }
        dst
    };
    pass(&pass(px, true), false)
}

/// Applies one corruption. Labels and boxes pass through unchanged.
pub fn corrupt(img: &LabeledImage, spec: &CorruptionSpec) -> Result<LabeledImage> {
    if !(0.0..=1.0).contains(&spec.severity) {
        return Err(Error::InvalidArgument(format!("severity {} outside [0, 1]", spec.severity)));
    }
    if spec.severity == 0.0 {
        return Ok(img.clone());
    }
    let sev = spec.severity;
    let shape = img.pixels.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let src = img.pixels.data();
    let mut px: Vec<f64> = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ CORRUPTION_STREAM);
            let noise = Normal::new(0.0, 0.5 * sev).map_err(|e| Error::InvalidArgument(format!("{e}")))?;
            src.iter().map(|&v| v + noise.sample(&mut rng)).collect()
        }
        CorruptionKind::BrightnessShift => src.iter().map(|&v| v + 0.6 * sev).collect(),
        CorruptionKind::BoxBlur => box_blur(src, h, w, blur_taps(sev)),
        CorruptionKind::HazeMix => {
            let a = HAZE_MAX_BLEND * sev;
            src.iter().map(|&v| (1.0 - a) * v + a * HAZE_LEVEL).collect()
        }
    };
    for v in &mut px {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(LabeledImage { pixels: Tensor::new(shape, px)?, label: img.label, boxes: img.boxes.clone() })
}

/// Corrupts every image; image `i` draws from its own stream derived from `seed`.
pub fn corrupt_dataset(base: &ToyDataset, kind: CorruptionKind, severity: f64, seed: u64) -> Result<ToyDataset> {
    let images = base
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let spec = CorruptionSpec {
                kind,
                severity,
                seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64),
            };
            corrupt(img, &spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyDataset { images, ..base.clone() })
}

/// One `(kind, severity)` cell of a severity ladder.
#[derive(Debug, Clone)]
pub struct LadderCell {
    pub kind: CorruptionKind,
    pub severity: f64,
    pub dataset: ToyDataset,
}

#[derive(Debug, Clone)]
pub struct SeverityLadder {
    pub base: ToyDataset,
    pub cells: Vec<LadderCell>,
}

/// Builds one corrupted dataset per `(kind, severity)` from a single clean
/// base of `n_per_cell` images, so cells differ only in the corruption.
pub fn severity_ladder(
    kinds: &[CorruptionKind],
    severities: &[f64],
    n_per_cell: usize,
    seed: u64,
) -> Result<SeverityLadder> {
    let base = gen_dataset(n_per_cell, seed)?;
    let mut cells = Vec::with_capacity(kinds.len() * severities.len());
    for &kind in kinds {
        for &severity in severities {
            cells.push(LadderCell { kind, severity, dataset: corrupt_dataset(&base, kind, severity, seed)? });
        }
    }
    Ok(SeverityLadder { base, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_image_has_box_inside_bounds() {
        let ds = gen_dataset(1, 3).unwrap();
        assert_eq!(ds.len(), 1);
        let b = ds.images[0].boxes[0];
        assert!(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 16.0 && b.y1 <= 16.0 && !b.is_degenerate());
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(gen_dataset(20, 9).unwrap(), gen_dataset(20, 9).unwrap());
        assert_ne!(gen_dataset(20, 9).unwrap().images, gen_dataset(20, 10).unwrap().images);
    }

    #[test]
    fn classes_balanced() {
        let ds = gen_dataset(403, 1).unwrap();
        for &c in &ds.class_counts() {
            assert!((c as f64 - 403.0 / 4.0).abs() <= 0.1 * 403.0 / 4.0);
        }
    }

    #[test]
    fn pixels_in_unit_range_and_patch_inside_box() {
        let ds = gen_dataset(40, 2).unwrap();
        for img in &ds.images {
            assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let b = img.boxes[0];
            // The brightest pixel belongs to the patch.
            let (k, _) = img.pixels.data().iter().enumerate().fold((0, -1.0), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
            let (r, c) = ((k / 16) as f64, (k % 16) as f64);
            assert!(r >= b.y0 && r < b.y1 && c >= b.x0 && c < b.x1);
        }
    }

    #[test]
    fn zero_severity_is_bit_exact_identity() {
        let ds = gen_dataset(8, 4).unwrap();
        for kind in CorruptionKind::ALL {
            for img in &ds.images {
                let out = corrupt(img, &CorruptionSpec { kind, severity: 0.0, seed: 5 }).unwrap();
                assert_eq!(&out, img);
            }
        }
    }

    #[test]
    fn haze_on_black_image() {
        let img = LabeledImage { pixels: Tensor::zeros([1, 16, 16]), label: 0, boxes: alloc::vec![RoiBox::new(0.0, 0.0, 2.0, 2.0)] };
        let out = corrupt(&img, &CorruptionSpec { kind: CorruptionKind::HazeMix, severity: 1.0, seed: 0 }).unwrap();
        assert!(out.pixels.data().iter().all(|&v| (v - 0.56).abs() < 1e-15));
    }

    #[test]
    fn noise_is_reproducible_and_labels_preserved() {
        let ds = gen_dataset(4, 4).unwrap();
        let spec = CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 0.6, seed: 11 };
        let a = corrupt(&ds.images[1], &spec).unwrap();
        let b = corrupt(&ds.images[1], &spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.pixels, ds.images[1].pixels);
        assert_eq!((a.label, &a.boxes), (ds.images[1].label, &ds.images[1].boxes));
        assert!(a.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn severity_out_of_range_rejected() {
        let ds = gen_dataset(1, 4).unwrap();
        for s in [-0.1, 1.5, f64::NAN] {
            let spec = CorruptionSpec { kind: CorruptionKind::BoxBlur, severity: s, seed: 0 };
            assert!(corrupt(&ds.images[0], &spec).is_err());
        }
    }

    #[test]
    fn blur_taps_follow_severity() {
        assert_eq!(blur_taps(0.0), 1);
        assert_eq!(blur_taps(0.5), 5);
        assert_eq!(blur_taps(1.0), 7);
        // A box filter preserves constants.
        let px = alloc::vec![0.3; 25];
        assert!(box_blur(&px, 5, 5, 5).iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn ladder_shares_base() {
        let kinds = [CorruptionKind::GaussianNoise, CorruptionKind::HazeMix];
        let l = severity_ladder(&kinds, &[0.0, 0.5, 1.0], 12, 3).unwrap();
        assert_eq!(l.cells.len(), 6);
        assert_eq!(l.base.fingerprint(), gen_dataset(12, 3).unwrap().fingerprint());
        for cell in l.cells.iter().filter(|c| c.severity == 0.0) {
            assert_eq!(cell.dataset.fingerprint(), l.base.fingerprint());
        }
        for cell in &l.cells {
            for (a, b) in cell.dataset.images.iter().zip(&l.base.images) {
                assert_eq!((a.label, &a.boxes), (b.label, &b.boxes));
            }
        }
    }
}
