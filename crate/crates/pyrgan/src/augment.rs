//! Paired geometric augmentation.
//!
//! A sampled [`AugmentDraw`] reifies one transform — crop (resized back),
//! rotation, flips, optional elastic displacement — so the identical geometry
//! can be replayed on an image (bilinear) and its mask (nearest-neighbour).
//! The whole pipeline composes into a single per-pixel source lookup, so each
//! output is resampled exactly once.
//!
//! Strong augmentation (SA) drives stage-1 training and fades across scales;
//! weak augmentation (WA) drives stage-2 training and never changes.

use crate::core::{ConditionMask, ImageTensor, ScaleSchedule};
use crate::nets::TwoStageGenerator;
use crate::{PyrganError, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Strong,
    Weak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    /// Lower bound of the crop fraction at full intensity.
    pub crop_min_frac: f64,
    pub use_elastic: bool,
    /// Elastic displacement amplitude as a fraction of min dim, scaled by intensity.
    pub elastic_alpha_frac: f64,
    /// Elastic smoothing radius as a fraction of min dim.
    pub elastic_sigma_frac: f64,
    pub rotation_max_deg: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    /// In [0, 1]; scales elastic amplitude and widens the crop floor toward 1.
    pub intensity: f64,
}

impl AugmentPolicy {
    pub fn strong(intensity: f64) -> Self {
        Self {
            kind: AugmentKind::Strong,
            crop_min_frac: 0.5,
            use_elastic: true,
            elastic_alpha_frac: 0.08,
            elastic_sigma_frac: 0.04,
            rotation_max_deg: 20.0,
            flip_h: true,
            flip_v: true,
            intensity,
        }
    }

    /// Weak policy: tighter crops, no elastic, constant intensity.
    pub fn weak() -> Self {
        Self {
            kind: AugmentKind::Weak,
            crop_min_frac: 0.75,
            use_elastic: false,
            elastic_alpha_frac: 0.0,
            elastic_sigma_frac: 0.04,
            rotation_max_deg: 20.0,
            flip_h: true,
            flip_v: true,
            intensity: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_min_frac > 0.0 && self.crop_min_frac <= 1.0) {
            return Err(PyrganError::Config(format!(
                "crop_min_frac {} outside (0, 1]",
                self.crop_min_frac
            )));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(PyrganError::Config(format!("intensity {} outside [0, 1]", self.intensity)));
        }
        if self.kind == AugmentKind::Weak && self.use_elastic {
            return Err(PyrganError::Config("weak augmentation must not use elastic".into()));
        }
        Ok(())
    }

    /// Crop floor after intensity widening: at intensity 0 every crop is the
    /// full frame.
    pub fn effective_crop_min(&self) -> f64 {
        self.crop_min_frac + (1.0 - self.crop_min_frac) * (1.0 - self.intensity)
    }
}

/// Smoothed random displacement field, one offset pair per output pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticField {
    pub dy: Array2<f64>,
    pub dx: Array2<f64>,
}

/// One reproducible transform: crop box in source pixels, rotation, flips,
/// optional elastic field, and the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    /// (top, left, height, width) of the source crop, resized back to full frame.
    pub crop: (usize, usize, usize, usize),
    pub rotation_deg: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub elastic: Option<ElasticField>,
    pub rng_seed: u64,
}

impl AugmentDraw {
    /// The do-nothing transform for a given shape.
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            crop: (0, 0, h, w),
            rotation_deg: 0.0,
            flip_h: false,
            flip_v: false,
            elastic: None,
            rng_seed: 0,
        }
    }
}

/// Samples one transform. The same `(policy, shape, seed)` triple always
/// yields the same draw.
pub fn sample_draw(policy: &AugmentPolicy, shape: (usize, usize), seed: u64) -> Result<AugmentDraw> {
    policy.validate()?;
    let (h, w) = shape;
    if h < 8 || w < 8 {
        return Err(PyrganError::Shape(format!("shape {h}x{w} too small to augment")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fmin = policy.effective_crop_min();
    let frac = fmin + (1.0 - fmin) * rng.random::<f64>();
    let ch = ((h as f64 * frac).round() as usize).clamp(1, h);
    let cw = ((w as f64 * frac).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let rotation_deg = (rng.random::<f64>() * 2.0 - 1.0) * policy.rotation_max_deg;
    let flip_h = policy.flip_h && rng.random::<bool>();
    let flip_v = policy.flip_v && rng.random::<bool>();
    let elastic = policy.use_elastic.then(|| {
        let min_dim = h.min(w) as f64;
        let alpha = policy.elastic_alpha_frac * min_dim * policy.intensity;
        let sigma = policy.elastic_sigma_frac * min_dim;
        sample_elastic_field(h, w, alpha, sigma, &mut rng)
    });
    Ok(AugmentDraw { crop: (top, left, ch, cw), rotation_deg, flip_h, flip_v, elastic, rng_seed: seed })
}

fn sample_elastic_field(h: usize, w: usize, alpha: f64, sigma: f64, rng: &mut ChaCha8Rng) -> ElasticField {
    let mut raw_dy = Array2::zeros((h, w));
    let mut raw_dx = Array2::zeros((h, w));
    for v in raw_dy.iter_mut() {
        *v = rng.random::<f64>() * 2.0 - 1.0;
    }
    for v in raw_dx.iter_mut() {
        *v = rng.random::<f64>() * 2.0 - 1.0;
    }
    let dy = gaussian_smooth(&raw_dy, sigma).mapv(|v| v * alpha);
    let dx = gaussian_smooth(&raw_dx, sigma).mapv(|v| v * alpha);
    ElasticField { dy, dx }
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_smooth(src: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let (h, w) = src.dim();
    let mut tmp = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let cc = (c as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * src[[r, cc]];
            }
            tmp[[r, c]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let rr = (r as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[[rr, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Source coordinates for each output pixel under the full transform chain:
/// elastic displacement, flip, inverse rotation, then crop-and-rescale.
fn source_point(draw: &AugmentDraw, h: usize, w: usize, r: usize, c: usize) -> (f64, f64) {
    let (mut y, mut x) = (r as f64, c as f64);
    if let Some(field) = &draw.elastic {
        y += field.dy[[r, c]];
        x += field.dx[[r, c]];
    }
    if draw.flip_h {
        x = (w as f64 - 1.0) - x;
    }
    if draw.flip_v {
        y = (h as f64 - 1.0) - y;
    }
    if draw.rotation_deg != 0.0 {
        let theta = -draw.rotation_deg.to_radians();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (dy, dx) = (y - cy, x - cx);
        y = cy + theta.cos() * dy - theta.sin() * dx;
        x = cx + theta.sin() * dy + theta.cos() * dx;
    }
    let (top, left, ch, cw) = draw.crop;
    let sy = top as f64 + (y + 0.5) * ch as f64 / h as f64 - 0.5;
    let sx = left as f64 + (x + 0.5) * cw as f64 / w as f64 - 0.5;
    (sy, sx)
}

fn sample_bilinear(src: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = src.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (dy, dx) = (y - y0 as f64, x - x0 as f64);
    let top = src[[y0, x0]] * (1.0 - dx) + src[[y0, x1]] * dx;
    let bot = src[[y1, x0]] * (1.0 - dx) + src[[y1, x1]] * dx;
    top * (1.0 - dy) + bot * dy
}

fn sample_nearest(src: &Array2<u8>, y: f64, x: f64) -> u8 {
    let (h, w) = src.dim();
    let r = (y.round().max(0.0) as usize).min(h - 1);
    let c = (x.round().max(0.0) as usize).min(w - 1);
    src[[r, c]]
}

/// Applies the draw's geometry to an image alone.
pub fn apply_draw_image(draw: &AugmentDraw, image: &ImageTensor) -> ImageTensor {
    let (h, w) = image.shape();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = source_point(draw, h, w, r, c);
            out[[r, c]] = sample_bilinear(&image.0, sy, sx);
        }
    }
    ImageTensor::new_clamped(out)
}

/// Applies the draw's geometry to a mask alone (nearest-neighbour, so the
/// label set never grows).
pub fn apply_draw_mask(draw: &AugmentDraw, mask: &ConditionMask) -> ConditionMask {
    let (h, w) = mask.shape();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = source_point(draw, h, w, r, c);
            out[[r, c]] = sample_nearest(&mask.0, sy, sx);
        }
    }
    ConditionMask(out)
}

/// One geometric transform applied consistently to both halves of a pair.
pub fn apply_draw(draw: &AugmentDraw, image: &ImageTensor, mask: &ConditionMask) -> Result<(ImageTensor, ConditionMask)> {
    if image.shape() != mask.shape() {
        return Err(PyrganError::Shape(format!(
            "image {:?} vs mask {:?}",
            image.shape(),
            mask.shape()
        )));
    }
    let (h, w) = image.shape();
    let (top, left, ch, cw) = draw.crop;
    if top + ch > h || left + cw > w || ch == 0 || cw == 0 {
        return Err(PyrganError::State(format!("crop box {:?} outside {h}x{w}", draw.crop)));
    }
    Ok((apply_draw_image(draw, image), apply_draw_mask(draw, mask)))
}

/// Strong-augmentation intensity at scale `i`: linear from 1.0 at the
/// coarsest scale down to 0.25 at the finest.
pub fn sa_intensity_for_scale(schedule: &ScaleSchedule, i: usize) -> Result<f64> {
    let n = schedule.len();
    if i >= n {
        return Err(PyrganError::Config(format!("scale index {i} out of range 0..{n}")));
    }
    if n == 1 {
        return Ok(1.0);
    }
    Ok(1.0 - 0.75 * i as f64 / (n - 1) as f64)
}

/// Training input for scale `i` under one draw: the draw is applied to the
/// full-resolution mask once, the augmented mask is resized to scales 0..=i,
/// and the frozen prefix regenerates the previous output from those
/// conditions (rather than warping a stored output directly).
pub fn augmented_cascade_input(
    prefix: &[TwoStageGenerator],
    mask_orig: &ConditionMask,
    draw: &AugmentDraw,
    schedule: &ScaleSchedule,
    scale: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<(Option<ImageTensor>, ConditionMask)> {
    if scale >= schedule.len() {
        return Err(PyrganError::Config(format!("scale {scale} outside schedule")));
    }
    if prefix.len() < scale {
        return Err(PyrganError::State(format!(
            "cascade prefix has {} trained scales, need {scale}",
            prefix.len()
        )));
    }
    let augmented = apply_draw_mask(draw, mask_orig);
    let cond_i = {
        let s = schedule.scales[scale].size;
        augmented.resize(s, s)
    };
    if scale == 0 {
        return Ok((None, cond_i));
    }
    let mut prev: Option<ImageTensor> = None;
    for (s, gen) in prefix.iter().enumerate().take(scale) {
        let size = schedule.scales[s].size;
        let cond = augmented.resize(size, size).encode();
        let out = gen.two_stage_forward(prev.as_ref(), &cond, false, rng)?;
        prev = Some(out);
    }
    Ok((prev, cond_i))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_pair(h: usize, w: usize) -> (ImageTensor, ConditionMask) {
        let image = ImageTensor::new(Array2::from_shape_fn((h, w), |(r, c)| {
            (((r * 31 + c * 17) % 64) as f64 / 32.0) - 1.0
        }))
        .unwrap();
        let mask = ConditionMask::new(Array2::from_shape_fn((h, w), |(r, c)| {
            // Two nested ellipse-ish bands.
            let dy = r as f64 - h as f64 / 2.0;
            let dx = c as f64 - w as f64 / 2.0;
            let d = (dy * dy + dx * dx).sqrt();
            if d < h as f64 / 6.0 {
                2
            } else if d < h as f64 / 3.0 {
                1
            } else {
                0
            }
        }))
        .unwrap();
        (image, mask)
    }

    #[test]
    fn identity_draw_changes_nothing() {
        let (image, mask) = test_pair(24, 24);
        let draw = AugmentDraw::identity(24, 24);
        let (i2, m2) = apply_draw(&draw, &image, &mask).unwrap();
        assert_eq!(i2.0, image.0);
        assert_eq!(m2.0, mask.0);
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let (image, mask) = test_pair(16, 20);
        let mut draw = AugmentDraw::identity(16, 20);
        draw.flip_h = true;
        let (i1, m1) = apply_draw(&draw, &image, &mask).unwrap();
        assert_ne!(i1.0, image.0);
        let (i2, m2) = apply_draw(&draw, &i1, &m1).unwrap();
        assert_eq!(i2.0, image.0);
        assert_eq!(m2.0, mask.0);
    }

    #[test]
    fn same_seed_reproduces_the_draw_exactly() {
        let policy = AugmentPolicy::strong(0.8);
        let a = sample_draw(&policy, (32, 32), 1234).unwrap();
        let b = sample_draw(&policy, (32, 32), 1234).unwrap();
        assert_eq!(a, b);
        let c = sample_draw(&policy, (32, 32), 1235).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn weak_draws_never_carry_elastic_fields() {
        let policy = AugmentPolicy::weak();
        for seed in 0..20 {
            let draw = sample_draw(&policy, (16, 16), seed).unwrap();
            assert!(draw.elastic.is_none());
            let frac = draw.crop.2 as f64 / 16.0;
            assert!(frac >= 0.75 - 1.0 / 16.0, "crop fraction {frac}");
        }
    }

    #[test]
    fn zero_intensity_strong_policy_degenerates() {
        let policy = AugmentPolicy::strong(0.0);
        assert!((policy.effective_crop_min() - 1.0).abs() < 1e-12);
        for seed in 0..10 {
            let draw = sample_draw(&policy, (16, 16), seed).unwrap();
            assert_eq!(draw.crop, (0, 0, 16, 16));
            let field = draw.elastic.expect("strong policy still samples a field");
            for v in field.dy.iter().chain(field.dx.iter()) {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn augmented_mask_labels_subset_of_source() {
        let (image, mask) = test_pair(32, 32);
        let policy = AugmentPolicy::strong(1.0);
        for seed in 0..25 {
            let draw = sample_draw(&policy, (32, 32), seed).unwrap();
            let (_, m2) = apply_draw(&draw, &image, &mask).unwrap();
            for &l in m2.0.iter() {
                assert!(l <= 2);
            }
        }
    }

    #[test]
    fn wa_ignores_scale_while_sa_decays() {
        let schedule = ScaleSchedule::from_sizes(&[16, 24, 32, 48, 64]).unwrap();
        let mut last = f64::INFINITY;
        for i in 0..schedule.len() {
            let intensity = sa_intensity_for_scale(&schedule, i).unwrap();
            assert!(intensity <= last);
            last = intensity;
        }
        assert_eq!(sa_intensity_for_scale(&schedule, 0).unwrap(), 1.0);
        assert_eq!(sa_intensity_for_scale(&schedule, 4).unwrap(), 0.25);
        assert!(sa_intensity_for_scale(&schedule, 5).is_err());
        // The weak policy has no scale dependence at all.
        assert_eq!(AugmentPolicy::weak().intensity, 1.0);
    }

    #[test]
    fn crop_fraction_respects_effective_floor() {
        let policy = AugmentPolicy::strong(0.5); // floor = 0.5 + 0.5*0.5 = 0.75
        assert!((policy.effective_crop_min() - 0.75).abs() < 1e-12);
        for seed in 0..50 {
            let draw = sample_draw(&policy, (64, 64), seed).unwrap();
            let frac = draw.crop.2 as f64 / 64.0;
            assert!(frac >= 0.75 - 1.0 / 64.0, "fraction {frac} below floor");
        }
    }
}
