//! Reconstruction and adversarial objectives.
//!
//! The mixed reconstruction loss is a weighted sum of four terms: a
//! category-weighted L1 distance, a multi-scale structural-similarity loss,
//! and two frozen-extractor feature distances (L1 for the classifier-style
//! extractor, squared L2 for the segmenter-style one). All terms are built on
//! the autodiff graph so one backward pass serves the whole sum.

use crate::{PyrganError, Result};
use ndarray::Array4;
use pyrgan_nn::{Arr4, Graph, NodeId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-label weights for the weighted pixel loss: background, lung, infection.
pub const WPPL_CATEGORY_WEIGHTS: [f64; 3] = [0.1, 0.5, 1.0];

/// Per-level weights of the standard 5-level structural-similarity stack,
/// truncated and renormalized when fewer levels fit the image.
pub const MS_SSIM_LEVEL_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Window size and spread of the similarity statistics.
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
/// Stabilizers for a [-1, 1] dynamic range (L = 2).
const SSIM_C1: f64 = (0.01 * 2.0) * (0.01 * 2.0);
const SSIM_C2: f64 = (0.03 * 2.0) * (0.03 * 2.0);

/// Mixing coefficients of the four reconstruction terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub wppl: f64,
    pub ms_ssim: f64,
    pub ms_fvl: f64,
    pub ms_ful: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { wppl: 10.0, ms_ssim: 1.0, ms_fvl: 10.0, ms_ful: 10.0 }
    }
}

/// Scalar values of every objective evaluated for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub wppl: f64,
    pub ms_ssim: f64,
    pub ms_fvl: f64,
    pub ms_ful: f64,
    pub mixed: f64,
    pub adv_g: f64,
    pub adv_d: f64,
}

/// Category-weighted mean absolute error: `(1/P) Σ w(label_p) · |gen_p − real_p|`.
pub fn wppl(g: &mut Graph, gen: NodeId, real: NodeId, weight_map: Arr4) -> NodeId {
    let w = g.input(weight_map);
    let diff = g.sub(gen, real);
    let adiff = g.abs(diff);
    let weighted = g.mul(w, adiff);
    g.mean(weighted)
}

/// Largest level count whose coarsest stage still fits the window.
pub fn ms_ssim_levels_for(min_dim: usize) -> usize {
    let mut levels = 0usize;
    while levels < MS_SSIM_LEVEL_WEIGHTS.len() && min_dim >= SSIM_WINDOW << levels {
        levels += 1;
    }
    levels
}

fn gaussian_window() -> Arr4 {
    let mut w = Array4::zeros((1, 1, SSIM_WINDOW, SSIM_WINDOW));
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for r in 0..SSIM_WINDOW {
        for cc in 0..SSIM_WINDOW {
            let d2 = (r as f64 - c).powi(2) + (cc as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[[0, 0, r, cc]] = v;
            sum += v;
        }
    }
    w.mapv_inplace(|v| v / sum);
    w
}

/// `1 − MS-SSIM(gen, real)` on single-channel batches, in `[0, 2]`.
///
/// Contrast/structure statistics are averaged per level, the luminance term
/// joins at the coarsest level, and level exponents are applied as
/// sign-preserving powers so anti-correlated inputs keep their negative
/// similarity instead of being clipped. Levels auto-reduce (with a warning on
/// stderr) when the image cannot hold `levels` halvings of the 11-px window.
pub fn ms_ssim_loss(g: &mut Graph, gen: NodeId, real: NodeId, levels: usize) -> Result<NodeId> {
    let (_, c, h, w) = g.value(gen).dim();
    if c != 1 {
        return Err(PyrganError::Shape(format!("similarity loss expects 1 channel, got {c}")));
    }
    let fit = ms_ssim_levels_for(h.min(w));
    if fit == 0 {
        return Err(PyrganError::Shape(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}-px similarity window"
        )));
    }
    let levels = if levels > fit {
        eprintln!("warning: reducing similarity levels {levels} -> {fit} for {h}x{w} input");
        fit
    } else {
        levels.max(1)
    };
    let wsum: f64 = MS_SSIM_LEVEL_WEIGHTS[..levels].iter().sum();
    let weights: Vec<f64> = MS_SSIM_LEVEL_WEIGHTS[..levels].iter().map(|v| v / wsum).collect();

    let win = g.input(gaussian_window());
    let mut x = gen;
    let mut y = real;
    let mut msssim: Option<NodeId> = None;
    for (j, &wj) in weights.iter().enumerate() {
        let mu_x = g.conv2d(x, win, None, 1, 0);
        let mu_y = g.conv2d(y, win, None, 1, 0);
        let xx = g.mul(x, x);
        let yy = g.mul(y, y);
        let xy = g.mul(x, y);
        let mu_xx = g.mul(mu_x, mu_x);
        let mu_yy = g.mul(mu_y, mu_y);
        let mu_xy = g.mul(mu_x, mu_y);
        let exx = g.conv2d(xx, win, None, 1, 0);
        let eyy = g.conv2d(yy, win, None, 1, 0);
        let exy = g.conv2d(xy, win, None, 1, 0);
        let sig_x = g.sub(exx, mu_xx);
        let sig_y = g.sub(eyy, mu_yy);
        let sig_xy = g.sub(exy, mu_xy);

        let cs_num = {
            let t = g.mul_scalar(sig_xy, 2.0);
            g.add_scalar(t, SSIM_C2)
        };
        let cs_den = {
            let t = g.add(sig_x, sig_y);
            g.add_scalar(t, SSIM_C2)
        };
        let cs_map = g.div(cs_num, cs_den);

        let level_stat = if j + 1 == levels {
            // Luminance joins only at the coarsest level.
            let l_num = {
                let t = g.mul_scalar(mu_xy, 2.0);
                g.add_scalar(t, SSIM_C1)
            };
            let l_den = {
                let t = g.add(mu_xx, mu_yy);
                g.add_scalar(t, SSIM_C1)
            };
            let l_map = g.div(l_num, l_den);
            let ssim_map = g.mul(l_map, cs_map);
            g.mean(ssim_map)
        } else {
            g.mean(cs_map)
        };
        let factor = g.sign_pow(level_stat, wj);
        msssim = Some(match msssim {
            Some(acc) => g.mul(acc, factor),
            None => factor,
        });
        if j + 1 < levels {
            x = g.avg_pool2(x);
            y = g.avg_pool2(y);
        }
    }
    let msssim = msssim.expect("at least one level");
    let neg = g.mul_scalar(msssim, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Norm used by a feature distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureNorm {
    L1,
    L2Squared,
}

/// Frozen multi-level feature source. Implementations must not register
/// trainable leaves; gradients flow through the features to the input only.
pub trait FeatureExtractor {
    fn levels(&self) -> usize;
    /// Expected input channel count; single-channel inputs are replicated.
    fn in_channels(&self) -> usize {
        1
    }
    fn features(&self, g: &mut Graph, x: NodeId) -> Vec<NodeId>;
}

/// Replicates a single-channel node to `channels` by concatenation.
pub fn replicate_channels(g: &mut Graph, x: NodeId, channels: usize) -> NodeId {
    let mut out = x;
    for _ in 1..channels {
        out = g.concat_ch(out, x);
    }
    out
}

/// Pass-through extractor; turns the L1 feature distance into plain mean
/// absolute error. Used by tests.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn levels(&self) -> usize {
        1
    }
    fn features(&self, _g: &mut Graph, x: NodeId) -> Vec<NodeId> {
        vec![x]
    }
}

/// Fixed random convolution stack: conv k3s1p1 → leaky-relu → 2x pool per
/// level. Deterministic for a given seed; serves as the default frozen
/// extractor when no trained encoder is available.
pub struct RandomConvExtractor {
    weights: Vec<Arr4>,
    in_ch: usize,
}

impl RandomConvExtractor {
    pub fn new(seed: u64, levels: usize, in_ch: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(levels);
        let mut cin = in_ch;
        for _ in 0..levels {
            // Modest scale keeps five stacked responses in a usable range.
            let std = (2.0 / (cin * 9) as f64).sqrt() * 0.5;
            weights.push(pyrgan_nn::init::normal_init((width, cin, 3, 3), std, &mut rng));
            cin = width;
        }
        Self { weights, in_ch }
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn levels(&self) -> usize {
        self.weights.len()
    }
    fn in_channels(&self) -> usize {
        self.in_ch
    }
    fn features(&self, g: &mut Graph, x: NodeId) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.weights.len());
        let mut h = x;
        for (j, w) in self.weights.iter().enumerate() {
            let wn = g.input(w.clone());
            let c = g.conv2d(h, wn, None, 1, 1);
            let a = g.leaky_relu(c, 0.2);
            out.push(a);
            if j + 1 < self.weights.len() {
                h = g.avg_pool2(a);
            }
        }
        out
    }
}

/// `Σ_j η_j · (1/P_j) ‖F_j(gen) − F_j(real)‖` with the chosen norm.
pub fn feature_loss(
    g: &mut Graph,
    gen: NodeId,
    real: NodeId,
    extractor: &dyn FeatureExtractor,
    etas: &[f64],
    norm: FeatureNorm,
) -> Result<NodeId> {
    if etas.len() != extractor.levels() {
        return Err(PyrganError::Config(format!(
            "{} level weights for a {}-level extractor",
            etas.len(),
            extractor.levels()
        )));
    }
    let (gen, real) = if extractor.in_channels() > 1 {
        (
            replicate_channels(g, gen, extractor.in_channels()),
            replicate_channels(g, real, extractor.in_channels()),
        )
    } else {
        (gen, real)
    };
    let fg = extractor.features(g, gen);
    let fr = extractor.features(g, real);
    let mut total: Option<NodeId> = None;
    for ((&fg, &fr), &eta) in fg.iter().zip(fr.iter()).zip(etas.iter()) {
        let diff = g.sub(fg, fr);
        let per_elem = match norm {
            FeatureNorm::L1 => g.abs(diff),
            FeatureNorm::L2Squared => g.square(diff),
        };
        let level = g.mean(per_elem);
        let scaled = g.mul_scalar(level, eta);
        total = Some(match total {
            Some(acc) => g.add(acc, scaled),
            None => scaled,
        });
    }
    Ok(total.expect("extractor produced no levels"))
}

/// Everything [`mixed_loss`] needs besides the two images.
pub struct MixedLossCfg<'a> {
    pub weights: LossWeights,
    /// Per-pixel weight map for the weighted pixel term.
    pub wppl_map: Arr4,
    pub vgg_style: &'a dyn FeatureExtractor,
    pub unet_style: &'a dyn FeatureExtractor,
    pub vgg_etas: &'a [f64],
    pub unet_etas: &'a [f64],
    pub ms_ssim_levels: usize,
}

/// Weighted sum of the four reconstruction terms. Returns the node to
/// backprop plus the individual scalar values (adversarial fields zeroed for
/// the caller to fill).
pub fn mixed_loss(
    g: &mut Graph,
    gen: NodeId,
    real: NodeId,
    cfg: &MixedLossCfg,
) -> Result<(NodeId, LossReport)> {
    let l_wppl = wppl(g, gen, real, cfg.wppl_map.clone());
    let l_ssim = ms_ssim_loss(g, gen, real, cfg.ms_ssim_levels)?;
    let l_fvl = feature_loss(g, gen, real, cfg.vgg_style, cfg.vgg_etas, FeatureNorm::L1)?;
    let l_ful = feature_loss(g, gen, real, cfg.unet_style, cfg.unet_etas, FeatureNorm::L2Squared)?;

    let t1 = g.mul_scalar(l_wppl, cfg.weights.wppl);
    let t2 = g.mul_scalar(l_ssim, cfg.weights.ms_ssim);
    let t3 = g.mul_scalar(l_fvl, cfg.weights.ms_fvl);
    let t4 = g.mul_scalar(l_ful, cfg.weights.ms_ful);
    let s12 = g.add(t1, t2);
    let s34 = g.add(t3, t4);
    let mixed = g.add(s12, s34);

    let report = LossReport {
        wppl: g.scalar_value(l_wppl),
        ms_ssim: g.scalar_value(l_ssim),
        ms_fvl: g.scalar_value(l_fvl),
        ms_ful: g.scalar_value(l_ful),
        mixed: g.scalar_value(mixed),
        adv_g: 0.0,
        adv_d: 0.0,
    };
    Ok((mixed, report))
}

/// Generator side of the adversarial game: fool the critic into "real".
pub fn adv_g_from_logits(g: &mut Graph, fake_logits: NodeId) -> NodeId {
    let ones = Arr4::ones(g.value(fake_logits).raw_dim());
    g.bce_with_logits(fake_logits, ones)
}

/// Critic side: real toward 1, generated toward 0, halved as in pix2pix.
pub fn adv_d_from_logits(g: &mut Graph, fake_logits: NodeId, real_logits: NodeId) -> NodeId {
    let zeros = Arr4::zeros(g.value(fake_logits).raw_dim());
    let ones = Arr4::ones(g.value(real_logits).raw_dim());
    let l_fake = g.bce_with_logits(fake_logits, zeros);
    let l_real = g.bce_with_logits(real_logits, ones);
    let sum = g.add(l_fake, l_real);
    g.mul_scalar(sum, 0.5)
}
