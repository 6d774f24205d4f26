//! Image/mask value types and the resolution schedule of the pyramid.
//!
//! Images are single-channel `f64` arrays in `[-1, 1]`. Condition masks hold
//! one label per pixel — 0 background, 1 lung, 2 infection — rendered to the
//! canonical pixel values 0/128/255 on disk and to their `[-1, 1]` images when
//! fed to a generator.

use crate::{PyrganError, Result};
use ndarray::{Array2, Array4};

/// Canonical pixel value for each mask label.
pub const MASK_PIXELS: [u8; 3] = [0, 128, 255];
pub const NUM_LABELS: usize = 3;

/// Largest number of 2x-downsampling steps any generator uses.
pub const MAX_GEN_DEPTH: usize = 8;

/// Single-channel image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(pub Array2<f64>);

impl ImageTensor {
    /// Wraps raw data after range/finiteness validation.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        for &v in data.iter() {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(PyrganError::Validation(format!(
                    "image value {v} outside [-1, 1]"
                )));
            }
        }
        Ok(Self(data))
    }

    /// Wraps raw data, clamping into range (used on generator outputs, which
    /// tanh already bounds up to rounding).
    pub fn new_clamped(mut data: Array2<f64>) -> Self {
        data.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        Self(data)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// `[1, 1, h, w]` network view.
    pub fn to_batch(&self) -> Array4<f64> {
        let (h, w) = self.0.dim();
        self.0
            .clone()
            .into_shape_with_order((1, 1, h, w))
            .expect("contiguous image")
    }

    /// First sample, first channel of a `[n, 1, h, w]` batch.
    pub fn from_batch(batch: &Array4<f64>, index: usize) -> Self {
        let (_, c, h, w) = batch.dim();
        assert_eq!(c, 1, "from_batch expects single-channel tensors");
        let mut data = Array2::zeros((h, w));
        for r in 0..h {
            for cc in 0..w {
                data[[r, cc]] = batch[[index, 0, r, cc]];
            }
        }
        Self::new_clamped(data)
    }

    pub fn resize(&self, h: usize, w: usize) -> Self {
        Self::new_clamped(resize_bilinear(&self.0, h, w))
    }

    /// Maps `[-1, 1]` to 8-bit gray.
    pub fn to_pixels(&self) -> Array2<u8> {
        self.0.mapv(|v| (((v + 1.0) * 0.5) * 255.0).round().clamp(0.0, 255.0) as u8)
    }

    pub fn from_pixels(px: &Array2<u8>) -> Self {
        Self(px.mapv(|p| p as f64 / 255.0 * 2.0 - 1.0))
    }
}

/// Per-pixel labels: 0 background, 1 lung, 2 infection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionMask(pub Array2<u8>);

impl ConditionMask {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        for &l in labels.iter() {
            if l as usize >= NUM_LABELS {
                return Err(PyrganError::Validation(format!("mask label {l} out of range")));
            }
        }
        Ok(Self(labels))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// The `[-1, 1]` image a generator conditions on: labels rendered at
    /// their canonical pixel values.
    pub fn encode(&self) -> ImageTensor {
        ImageTensor(self.0.mapv(|l| encode_label(l)))
    }

    /// Canonical 0/128/255 rendering for storage.
    pub fn to_pixels(&self) -> Array2<u8> {
        self.0.mapv(|l| MASK_PIXELS[l as usize])
    }

    /// Inverse of [`to_pixels`](Self::to_pixels); each pixel snaps to the
    /// nearest canonical value so slightly filtered masks still load.
    pub fn from_pixels(px: &Array2<u8>) -> Self {
        Self(px.mapv(|p| nearest_label(p)))
    }

    /// Nearest-neighbour resize; never invents labels.
    pub fn resize(&self, h: usize, w: usize) -> Self {
        Self(resize_nearest(&self.0, h, w))
    }

    /// Pixel counts per label, indexed by label.
    pub fn label_counts(&self) -> [usize; NUM_LABELS] {
        let mut counts = [0usize; NUM_LABELS];
        for &l in self.0.iter() {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Per-pixel loss weights from per-label weights.
    pub fn weight_map(&self, weights: [f64; NUM_LABELS]) -> Array2<f64> {
        self.0.mapv(|l| weights[l as usize])
    }

    /// `[1, 1, h, w]` label map as floats, for cross-entropy targets.
    pub fn to_label_batch(&self) -> Array4<f64> {
        let (h, w) = self.0.dim();
        self.0
            .mapv(|l| l as f64)
            .into_shape_with_order((1, 1, h, w))
            .expect("contiguous mask")
    }
}

/// `[-1, 1]` value a label renders to.
pub fn encode_label(label: u8) -> f64 {
    MASK_PIXELS[label as usize] as f64 / 255.0 * 2.0 - 1.0
}

fn nearest_label(pixel: u8) -> u8 {
    let mut best = 0u8;
    let mut dist = u8::MAX;
    for (l, &p) in MASK_PIXELS.iter().enumerate() {
        let d = pixel.abs_diff(p);
        if d < dist {
            dist = d;
            best = l as u8;
        }
    }
    best
}

/// One annotated slice.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub image: ImageTensor,
    pub mask: ConditionMask,
}

impl SamplePair {
    pub fn new(image: ImageTensor, mask: ConditionMask) -> Result<Self> {
        if image.shape() != mask.shape() {
            return Err(PyrganError::Shape(format!(
                "image {:?} vs mask {:?}",
                image.shape(),
                mask.shape()
            )));
        }
        Ok(Self { image, mask })
    }

    pub fn resize(&self, h: usize, w: usize) -> Self {
        Self { image: self.image.resize(h, w), mask: self.mask.resize(h, w) }
    }
}

/// One pyramid level: square working size plus derived network sizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleSpec {
    pub size: usize,
    /// Number of 2x-downsampling encoder steps in the generators.
    pub gen_depth: usize,
    /// Total conv layers in the critics at this scale.
    pub disc_layers: usize,
}

/// Coarse-to-fine resolution schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSchedule {
    pub scales: Vec<ScaleSpec>,
}

/// Encoder depth for a working size: one 2x step per octave above 2 pixels,
/// capped so the deepest generators stay at [`MAX_GEN_DEPTH`] steps.
pub fn gen_depth_for(size: usize) -> usize {
    let depth = (size as f64).log2().floor() as usize - 1;
    depth.min(MAX_GEN_DEPTH)
}

impl ScaleSchedule {
    /// Builds the schedule from working sizes, deriving per-scale depths.
    /// Sizes must be strictly increasing and at least 8, which keeps every
    /// generator bottleneck at 2 pixels or more.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(PyrganError::Config("schedule needs at least one scale".into()));
        }
        for w in sizes.windows(2) {
            if w[1] <= w[0] {
                return Err(PyrganError::Config(format!(
                    "scale sizes must strictly increase, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if sizes[0] < 8 {
            return Err(PyrganError::Config(format!(
                "smallest scale {} is below the 8-pixel minimum",
                sizes[0]
            )));
        }
        let scales = sizes
            .iter()
            .map(|&size| {
                let gen_depth = gen_depth_for(size);
                ScaleSpec { size, gen_depth, disc_layers: gen_depth + 2 }
            })
            .collect();
        Ok(Self { scales })
    }

    /// The full nine-scale schedule used for 512x512 slices.
    pub fn reference() -> Self {
        Self::from_sizes(&[32, 48, 64, 96, 128, 192, 256, 384, 512]).expect("static sizes")
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn last_size(&self) -> usize {
        self.scales.last().expect("non-empty schedule").size
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (h, w) {
        return src.clone();
    }
    let mut out = Array2::zeros((h, w));
    let fy = sh as f64 / h as f64;
    let fx = sw as f64 / w as f64;
    for r in 0..h {
        let sy = ((r as f64 + 0.5) * fy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let dy = sy - y0 as f64;
        for c in 0..w {
            let sx = ((c as f64 + 0.5) * fx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let dx = sx - x0 as f64;
            let top = src[[y0, x0]] * (1.0 - dx) + src[[y0, x1]] * dx;
            let bot = src[[y1, x0]] * (1.0 - dx) + src[[y1, x1]] * dx;
            out[[r, c]] = top * (1.0 - dy) + bot * dy;
        }
    }
    out
}

/// Nearest-neighbour resize for label maps.
pub fn resize_nearest(src: &Array2<u8>, h: usize, w: usize) -> Array2<u8> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (h, w) {
        return src.clone();
    }
    let mut out = Array2::zeros((h, w));
    let fy = sh as f64 / h as f64;
    let fx = sw as f64 / w as f64;
    for r in 0..h {
        let sy = (((r as f64 + 0.5) * fy - 0.5).round().max(0.0) as usize).min(sh - 1);
        for c in 0..w {
            let sx = (((c as f64 + 0.5) * fx - 0.5).round().max(0.0) as usize).min(sw - 1);
            out[[r, c]] = src[[sy, sx]];
        }
    }
    out
}
