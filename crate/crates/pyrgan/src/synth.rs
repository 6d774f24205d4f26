//! Cascade inference and the three diversification mechanisms: dropout kept
//! active at inference, per-scale condition randomization, and cross-modality
//! image fusion.

use crate::core::{ConditionMask, ImageTensor, SamplePair};
use crate::io;
use crate::nets::GeneratorStack;
use crate::{PyrganError, Result};
use pyrgan_nn::parallel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Default condition-noise magnitudes (background, lung, infection) for
/// randomized-condition corpora.
pub const RC_DELTAS: (u8, u8, u8) = (16, 16, 32);

/// One synthesis job: a full-resolution condition plus the randomness knobs.
#[derive(Debug, Clone)]
pub struct SynthesisRequest {
    pub mask: ConditionMask,
    pub dropout_at_inference: bool,
    /// Condition-noise magnitudes; `None` keeps the canonical encoding.
    pub rc_noise: Option<(u8, u8, u8)>,
    pub seed: u64,
}

impl SynthesisRequest {
    pub fn plain(mask: ConditionMask, seed: u64) -> Self {
        Self { mask, dropout_at_inference: false, rc_noise: None, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.rc_noise {
            validate_deltas(d)?;
        }
        Ok(())
    }
}

/// Noise magnitudes are legal when the three randomized ranges can never
/// collide: `δ_b < 128 − δ_l` and `128 + δ_l < 255 − δ_i`.
pub fn validate_deltas(d: (u8, u8, u8)) -> Result<()> {
    let (db, dl, di) = (d.0 as i32, d.1 as i32, d.2 as i32);
    if db >= 128 - dl || 128 + dl >= 255 - di {
        return Err(PyrganError::Config(format!(
            "condition noise ({db},{dl},{di}) lets label ranges collide"
        )));
    }
    Ok(())
}

/// Encodes a mask with one uniformly drawn pixel value per category:
/// background in `[0, δ_b]`, lung in `[128−δ_l, 128+δ_l]`, infection in
/// `[255−δ_i, 255]`, then mapped to the network's `[-1, 1]` range.
pub fn randomize_condition(
    mask: &ConditionMask,
    deltas: (u8, u8, u8),
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    validate_deltas(deltas)?;
    let (db, dl, di) = (deltas.0 as f64, deltas.1 as f64, deltas.2 as f64);
    let values = [
        rng.random_range(0.0..=db),
        rng.random_range(128.0 - dl..=128.0 + dl),
        rng.random_range(255.0 - di..=255.0),
    ];
    let encoded = values.map(|v| v / 255.0 * 2.0 - 1.0);
    Ok(ImageTensor(mask.0.mapv(|l| encoded[l as usize])))
}

/// Per-scale encoded conditions for one request; condition noise is redrawn
/// at every scale.
fn conditions_for(stack: &GeneratorStack, req: &SynthesisRequest, rng: &mut ChaCha8Rng) -> Result<Vec<ImageTensor>> {
    stack
        .schedule
        .scales
        .iter()
        .map(|s| {
            let mask_i = req.mask.resize(s.size, s.size);
            match req.rc_noise {
                None => Ok(mask_i.encode()),
                Some(d) => randomize_condition(&mask_i, d, rng),
            }
        })
        .collect()
}

/// Runs the full cascade and returns every scale's output, coarse to fine.
pub fn synthesize_all_scales(
    stack: &GeneratorStack,
    req: &SynthesisRequest,
) -> Result<Vec<ImageTensor>> {
    req.validate()?;
    if !stack.is_fully_trained() {
        return Err(PyrganError::State(format!(
            "stack has {} of {} scales trained",
            stack.trained_scales,
            stack.scale_count()
        )));
    }
    let final_size = stack.final_size();
    if req.mask.shape() != (final_size, final_size) {
        return Err(PyrganError::Shape(format!(
            "mask is {:?}, stack synthesizes at {final_size}",
            req.mask.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let conds = conditions_for(stack, req, &mut rng)?;
    stack.cascade(&conds, req.dropout_at_inference, &mut rng)
}

/// The final-scale synthesized image for one request.
pub fn synthesize(stack: &GeneratorStack, req: &SynthesisRequest) -> Result<ImageTensor> {
    let mut outs = synthesize_all_scales(stack, req)?;
    Ok(outs.pop().expect("non-empty schedule"))
}

/// Convex combination `ζ·a + (1−ζ)·b`; the endpoints return the inputs
/// bitwise.
pub fn fuse(a: &ImageTensor, b: &ImageTensor, zeta: f64) -> Result<ImageTensor> {
    if a.shape() != b.shape() {
        return Err(PyrganError::Shape(format!("fuse inputs {:?} vs {:?}", a.shape(), b.shape())));
    }
    if !(0.0..=1.0).contains(&zeta) {
        return Err(PyrganError::Validation(format!("fusion coefficient {zeta} outside [0, 1]")));
    }
    if zeta == 1.0 {
        return Ok(a.clone());
    }
    if zeta == 0.0 {
        return Ok(b.clone());
    }
    Ok(ImageTensor(zeta * &a.0 + (1.0 - zeta) * &b.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusMode {
    /// Cascade inference with dropout kept active, so repeated masks still
    /// yield distinct images.
    OSt,
    /// Condition randomization with the default noise magnitudes.
    RcSt,
    /// Fusion of two modality stacks with a per-sample coefficient.
    IfSt,
}

impl CorpusMode {
    pub fn tag(self) -> &'static str {
        match self {
            CorpusMode::OSt => "o-st",
            CorpusMode::RcSt => "rc-st",
            CorpusMode::IfSt => "if-st",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSampleMeta {
    pub name: String,
    pub seed: u64,
    /// Fusion coefficient; present only for fusion corpora.
    pub zeta: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub mode: String,
    pub seed: u64,
    pub samples: Vec<CorpusSampleMeta>,
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 of the pair, so per-sample streams stay decorrelated and
    // independent of iteration order.
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Synthesizes one image per named mask and writes image+mask pairs plus a
/// JSON manifest to `out`. Samples use derived per-index seeds, so results
/// are reproducible regardless of worker count.
pub fn generate_corpus(
    stack_a: &GeneratorStack,
    stack_b: Option<&GeneratorStack>,
    masks: &[(String, ConditionMask)],
    mode: CorpusMode,
    seed: u64,
    out: &Path,
) -> Result<CorpusManifest> {
    if masks.is_empty() {
        return Err(PyrganError::Validation("corpus needs at least one mask".into()));
    }
    if mode == CorpusMode::IfSt {
        let b = stack_b.ok_or_else(|| {
            PyrganError::Config("fusion corpus needs a second generator stack".into())
        })?;
        if b.schedule != stack_a.schedule {
            return Err(PyrganError::Config(
                "fusion requires both stacks to share one scale schedule".into(),
            ));
        }
    }
    std::fs::create_dir_all(out)?;

    let metas = parallel::map_indexed(masks.len(), |i| -> Result<CorpusSampleMeta> {
        let (name, mask) = &masks[i];
        let s = sample_seed(seed, i);
        let (image, zeta) = match mode {
            CorpusMode::OSt => {
                let req = SynthesisRequest {
                    mask: mask.clone(),
                    dropout_at_inference: true,
                    rc_noise: None,
                    seed: s,
                };
                (synthesize(stack_a, &req)?, None)
            }
            CorpusMode::RcSt => {
                let req = SynthesisRequest {
                    mask: mask.clone(),
                    dropout_at_inference: false,
                    rc_noise: Some(RC_DELTAS),
                    seed: s,
                };
                (synthesize(stack_a, &req)?, None)
            }
            CorpusMode::IfSt => {
                let a = synthesize(stack_a, &SynthesisRequest::plain(mask.clone(), s))?;
                let b = synthesize(
                    stack_b.expect("checked above"),
                    &SynthesisRequest::plain(mask.clone(), s),
                )?;
                let zeta = ChaCha8Rng::seed_from_u64(s).random_range(0.0..=1.0);
                (fuse(&a, &b, zeta)?, Some(zeta))
            }
        };
        let pair = SamplePair::new(image, mask.clone())?;
        io::save_pair(out, name, &pair)?;
        Ok(CorpusSampleMeta { name: name.clone(), seed: s, zeta })
    });

    let mut samples = Vec::with_capacity(metas.len());
    for m in metas {
        samples.push(m?);
    }
    let manifest = CorpusManifest { mode: mode.tag().to_string(), seed, samples };
    io::save_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
