//! Generator and critic architectures.
//!
//! Generators are UNets in the pix2pix mold: k4s2p1 encoder convs, transposed
//! k4s2p1 decoder convs with skip concatenation, instance normalization,
//! leaky-relu down / relu up, tanh output, and 50% dropout in the three
//! deepest decoder blocks. Critics are patch discriminators emitting a 2-D
//! logit map. Each scale trains a two-stage pair: a conditional
//! super-resolution stage and a restoration stage initialized by copying it.

use crate::core::{ImageTensor, ScaleSchedule, MAX_GEN_DEPTH};
use crate::{PyrganError, Result};
use ndarray::Array4;
use pyrgan_nn::layers::{Conv2d, ConvTranspose2d, Ctx, Dropout, InstanceNorm};
use pyrgan_nn::{Arr4, Graph, NodeId, ParamSet};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How the upsampled previous output joins the condition at stage-1 input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    /// Two input channels; both signals preserved losslessly.
    #[default]
    Concat,
    /// Elementwise sum in one channel.
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    /// Number of 2x downsampling encoder steps.
    pub depth: usize,
    pub in_channels: usize,
    pub base_width: usize,
    pub dropout_rate: f64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 || self.depth > MAX_GEN_DEPTH {
            return Err(PyrganError::Config(format!(
                "generator depth {} outside 3..={MAX_GEN_DEPTH}",
                self.depth
            )));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(PyrganError::Config("zero-sized generator spec".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(PyrganError::Config(format!(
                "dropout rate {} outside [0, 1]",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Feature width at encoder level `i`: doubles per level, capped at 8x.
    fn width(&self, i: usize) -> usize {
        self.base_width * (1 << i.min(3))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorSpec {
    pub conv_layers: usize,
    pub in_channels: usize,
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers < 3 {
            return Err(PyrganError::Config(format!(
                "discriminator needs at least 3 conv layers, got {}",
                self.conv_layers
            )));
        }
        if self.in_channels == 0 {
            return Err(PyrganError::Config("zero-channel discriminator".into()));
        }
        Ok(())
    }
}

/// Whether a forward pass registers trainable leaves and samples dropout.
#[derive(Debug, Clone, Copy)]
pub struct FwdMode {
    pub trainable: bool,
    pub dropout: bool,
}

impl FwdMode {
    pub const TRAIN: Self = Self { trainable: true, dropout: true };
    pub const FROZEN: Self = Self { trainable: false, dropout: false };
    /// Inference with dropout still sampling — the diversity source.
    pub const SAMPLE: Self = Self { trainable: false, dropout: true };
}

struct DownBlock {
    conv: Conv2d,
    norm: Option<InstanceNorm>,
}

struct UpBlock {
    conv: ConvTranspose2d,
    norm: Option<InstanceNorm>,
    dropout: Option<Dropout>,
}

/// Encoder-decoder generator with skip connections and bounded output.
pub struct UnetGenerator {
    pub spec: GeneratorSpec,
    pub params: ParamSet,
    down: Vec<DownBlock>,
    up: Vec<UpBlock>,
}

impl UnetGenerator {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = spec.depth;

        let mut down = Vec::with_capacity(d);
        for i in 0..d {
            let cin = if i == 0 { spec.in_channels } else { spec.width(i - 1) };
            let conv =
                Conv2d::new(&mut params, &format!("down{i}.conv"), cin, spec.width(i), 4, 2, 1, &mut rng);
            // No normalization on the outermost or bottleneck encoder conv.
            let norm = (i != 0 && i != d - 1)
                .then(|| InstanceNorm::new(&mut params, &format!("down{i}.norm"), spec.width(i), &mut rng));
            down.push(DownBlock { conv, norm });
        }

        let mut up = Vec::with_capacity(d);
        for i in (0..d).rev() {
            // Innermost decoder conv sees only the bottleneck; the rest see
            // the skip concatenation. The outermost emits the image.
            let cin = if i == d - 1 { spec.width(i) } else { 2 * spec.width(i) };
            let cout = if i == 0 { 1 } else { spec.width(i - 1) };
            let conv =
                ConvTranspose2d::new(&mut params, &format!("up{i}.conv"), cin, cout, 4, 2, 1, &mut rng);
            let norm = (i != 0)
                .then(|| InstanceNorm::new(&mut params, &format!("up{i}.norm"), cout, &mut rng));
            // The three deepest decoder blocks regularize reconstruction.
            let dropout = (i != 0 && i + 3 >= d && spec.dropout_rate > 0.0)
                .then_some(Dropout { p: spec.dropout_rate });
            up.push(UpBlock { conv, norm, dropout });
        }
        up.reverse(); // index by encoder level

        Ok(Self { spec, params, down, up })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Graph-level forward. `x` is `[n, in_channels, h, w]` with
    /// `min(h, w) >= 2^depth`.
    pub fn forward_node(
        &self,
        g: &mut Graph,
        x: NodeId,
        mode: FwdMode,
        rng: &mut dyn RngCore,
    ) -> Result<NodeId> {
        let (_, c, h, w) = g.value(x).dim();
        if c != self.spec.in_channels {
            return Err(PyrganError::Shape(format!(
                "generator expects {} channels, got {c}",
                self.spec.in_channels
            )));
        }
        if h.min(w) < 1 << self.spec.depth {
            return Err(PyrganError::Shape(format!(
                "input {h}x{w} too small for {} downsamplings",
                self.spec.depth
            )));
        }
        let mut ctx = Ctx {
            graph: g,
            params: &self.params,
            trainable: mode.trainable,
            dropout: mode.dropout,
            rng,
        };

        let mut skips: Vec<(NodeId, usize, usize)> = Vec::with_capacity(self.spec.depth);
        let mut h_node = x;
        for (i, block) in self.down.iter().enumerate() {
            if i > 0 {
                h_node = ctx.graph.leaky_relu(h_node, 0.2);
            }
            h_node = block.conv.forward(&mut ctx, h_node);
            if let Some(norm) = &block.norm {
                h_node = norm.forward(&mut ctx, h_node);
            }
            let (_, _, sh, sw) = ctx.graph.value(h_node).dim();
            skips.push((h_node, sh, sw));
        }

        for i in (0..self.spec.depth).rev() {
            let block = &self.up[i];
            h_node = ctx.graph.relu(h_node);
            h_node = block.conv.forward(&mut ctx, h_node);
            // Transposed convs can overshoot odd encoder sizes by a pixel;
            // snap to the skip's size before concatenating.
            let (th, tw) = if i == 0 {
                (h, w)
            } else {
                (skips[i - 1].1, skips[i - 1].2)
            };
            let (_, _, uh, uw) = ctx.graph.value(h_node).dim();
            if (uh, uw) != (th, tw) {
                h_node = ctx.graph.fit_to(h_node, th, tw);
            }
            if let Some(norm) = &block.norm {
                h_node = norm.forward(&mut ctx, h_node);
            }
            if let Some(dropout) = &block.dropout {
                h_node = dropout.forward(&mut ctx, h_node);
            }
            if i > 0 {
                h_node = ctx.graph.concat_ch(h_node, skips[i - 1].0);
            }
        }
        Ok(ctx.graph.tanh(h_node))
    }

    /// Copies every same-named tensor from `src`, taking the overlapping
    /// channel slab when shapes differ (adjacent scales share depth but can
    /// differ in input channels or add blocks).
    pub fn transfer_from(&mut self, src: &UnetGenerator) {
        transfer_matching(&mut self.params, &src.params);
    }
}

/// Copy values between same-named parameters; mismatched shapes copy the
/// overlapping region. Optimizer state is untouched.
pub fn transfer_matching(dst: &mut ParamSet, src: &ParamSet) {
    let refs: Vec<_> = dst.refs().collect();
    for r in refs {
        let name = dst.get(r).name.clone();
        let Some(sr) = src.find(&name) else { continue };
        let sv = src.value(sr).clone();
        let dv = &mut dst.get_mut(r).value;
        if sv.raw_dim() == dv.raw_dim() {
            dv.assign(&sv);
        } else {
            let d0 = sv.dim().0.min(dv.dim().0);
            let d1 = sv.dim().1.min(dv.dim().1);
            let d2 = sv.dim().2.min(dv.dim().2);
            let d3 = sv.dim().3.min(dv.dim().3);
            dv.slice_mut(ndarray::s![..d0, ..d1, ..d2, ..d3])
                .assign(&sv.slice(ndarray::s![..d0, ..d1, ..d2, ..d3]));
        }
    }
}

/// Patch critic: stride-2 k4 convs (at most three), then k3s1 convs, then a
/// k4s1 head producing one logit channel over patches.
pub struct PatchDiscriminator {
    pub spec: DiscriminatorSpec,
    pub params: ParamSet,
    layers: Vec<(Conv2d, Option<InstanceNorm>, bool)>,
}

impl PatchDiscriminator {
    pub fn new(spec: DiscriminatorSpec, base_width: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let n_s2 = (spec.conv_layers - 1).min(3);
        let mut layers = Vec::with_capacity(spec.conv_layers);
        let width = |i: usize| base_width * (1 << i.min(3));
        let mut cin = spec.in_channels;
        for i in 0..spec.conv_layers {
            let last = i + 1 == spec.conv_layers;
            let (cout, k, stride) = if last {
                (1, 4, 1)
            } else if i < n_s2 {
                (width(i), 4, 2)
            } else {
                (width(i), 3, 1)
            };
            let conv =
                Conv2d::new(&mut params, &format!("conv{i}"), cin, cout, k, stride, 1, &mut rng);
            let norm = (!last && i != 0)
                .then(|| InstanceNorm::new(&mut params, &format!("norm{i}"), cout, &mut rng));
            layers.push((conv, norm, !last));
            cin = cout;
        }
        Ok(Self { spec, params, layers })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Logit map over patches; spatial dims shrink with depth but stay >= 1
    /// for inputs of 16 px and up at the schedule's layer counts.
    pub fn forward_node(
        &self,
        g: &mut Graph,
        x: NodeId,
        mode: FwdMode,
        rng: &mut dyn RngCore,
    ) -> Result<NodeId> {
        let (_, c, _, _) = g.value(x).dim();
        if c != self.spec.in_channels {
            return Err(PyrganError::Shape(format!(
                "critic expects {} channels, got {c}",
                self.spec.in_channels
            )));
        }
        let mut ctx = Ctx {
            graph: g,
            params: &self.params,
            trainable: mode.trainable,
            dropout: false,
            rng,
        };
        let mut h = x;
        for (conv, norm, activate) in &self.layers {
            h = conv.forward(&mut ctx, h);
            if let Some(norm) = norm {
                h = norm.forward(&mut ctx, h);
            }
            if *activate {
                h = ctx.graph.leaky_relu(h, 0.2);
            }
        }
        Ok(h)
    }

    /// Logits for a (condition, image) pair, concatenated on channels.
    pub fn logits_for_pair(
        &self,
        g: &mut Graph,
        cond: NodeId,
        image: NodeId,
        mode: FwdMode,
        rng: &mut dyn RngCore,
    ) -> Result<NodeId> {
        let joined = g.concat_ch(cond, image);
        self.forward_node(g, joined, mode, rng)
    }
}

/// The per-scale generator pair.
pub struct TwoStageGenerator {
    pub scale_index: usize,
    pub g_super: UnetGenerator,
    pub g_restore: UnetGenerator,
    pub combine: CombineMode,
}

impl TwoStageGenerator {
    /// Builds both stages with the same architecture. The restoration stage
    /// starts from independent weights; call
    /// [`copy_super_into_restore`](Self::copy_super_into_restore) when stage-1
    /// training finishes.
    pub fn new(scale_index: usize, spec: GeneratorSpec, combine: CombineMode, seed: u64) -> Result<Self> {
        let g_super = UnetGenerator::new(spec, seed)?;
        let g_restore = UnetGenerator::new(spec, seed.wrapping_add(1))?;
        Ok(Self { scale_index, g_super, g_restore, combine })
    }

    /// Stage-2 initialization: restoration starts as an exact copy of the
    /// trained super-resolution stage, with fresh optimizer state.
    pub fn copy_super_into_restore(&mut self) {
        transfer_matching(&mut self.g_restore.params, &self.g_super.params);
        self.g_restore.params.reset_optimizer();
    }

    /// `[n, C, h, w]` stage-1 input from an already-upsampled previous output
    /// and the encoded condition. `prev` is absent only at scale 0.
    pub fn stage1_input(&self, prev: Option<&Arr4>, cond: &Arr4) -> Result<Arr4> {
        let (n, c, h, w) = cond.dim();
        if c != 1 {
            return Err(PyrganError::Shape("condition must be single-channel".into()));
        }
        match prev {
            None => Ok(cond.clone()),
            Some(p) => {
                if p.dim() != (n, 1, h, w) {
                    return Err(PyrganError::Shape(format!(
                        "previous output {:?} does not match condition {:?}",
                        p.dim(),
                        cond.dim()
                    )));
                }
                match self.combine {
                    CombineMode::Add => Ok(p + cond),
                    CombineMode::Concat => {
                        let mut joined = Array4::zeros((n, 2, h, w));
                        joined.slice_mut(ndarray::s![.., 0..1, .., ..]).assign(p);
                        joined.slice_mut(ndarray::s![.., 1..2, .., ..]).assign(cond);
                        Ok(joined)
                    }
                }
            }
        }
    }

    /// Restoration input: the stage-1 output replicated across the input
    /// channels the copied architecture expects.
    pub fn stage2_input(&self, o_is: &Arr4) -> Arr4 {
        let (n, _, h, w) = o_is.dim();
        let c = self.g_restore.spec.in_channels;
        let mut out = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            out.slice_mut(ndarray::s![.., ci..ci + 1, .., ..]).assign(o_is);
        }
        out
    }

    /// Tensor-level stage 1: upsamples `prev` to the condition's size,
    /// combines, and runs the super-resolution stage.
    pub fn stage1_forward(
        &self,
        prev: Option<&ImageTensor>,
        cond_encoded: &ImageTensor,
        dropout: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ImageTensor> {
        let (h, w) = cond_encoded.shape();
        let prev_up = prev.map(|p| p.resize(h, w).to_batch());
        let input = self.stage1_input(prev_up.as_ref(), &cond_encoded.to_batch())?;
        let mut g = Graph::new();
        let x = g.input(input);
        let mode = if dropout { FwdMode::SAMPLE } else { FwdMode::FROZEN };
        let y = self.g_super.forward_node(&mut g, x, mode, rng)?;
        Ok(ImageTensor::from_batch(g.value(y), 0))
    }

    /// Tensor-level stage 2: same-scale restoration of a stage-1 output.
    pub fn stage2_forward(
        &self,
        o_is: &ImageTensor,
        dropout: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ImageTensor> {
        let input = self.stage2_input(&o_is.to_batch());
        let mut g = Graph::new();
        let x = g.input(input);
        let mode = if dropout { FwdMode::SAMPLE } else { FwdMode::FROZEN };
        let y = self.g_restore.forward_node(&mut g, x, mode, rng)?;
        Ok(ImageTensor::from_batch(g.value(y), 0))
    }

    /// Full per-scale generation: restoration of the super-resolved output.
    pub fn two_stage_forward(
        &self,
        prev: Option<&ImageTensor>,
        cond_encoded: &ImageTensor,
        dropout: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ImageTensor> {
        let o_is = self.stage1_forward(prev, cond_encoded, dropout, rng)?;
        self.stage2_forward(&o_is, dropout, rng)
    }
}

/// Input channel count for a scale's generators under a combine mode.
pub fn stage_in_channels(scale_index: usize, combine: CombineMode) -> usize {
    if scale_index > 0 && combine == CombineMode::Concat {
        2
    } else {
        1
    }
}

fn scale_seed(seed: u64, scale_index: usize) -> u64 {
    seed ^ (scale_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Two-stage generator pairs for every scale of a schedule, coarse to fine.
/// Construction is a pure function of `(schedule, combine, base_width,
/// dropout_rate, seed)`, so a stack rebuilt from the same settings starts
/// from bitwise-identical weights — the property checkpoint resume relies on.
pub struct GeneratorStack {
    pub schedule: ScaleSchedule,
    pub combine: CombineMode,
    pub base_width: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub stages: Vec<TwoStageGenerator>,
    /// Scales whose two stages have both finished training; the usable
    /// cascade prefix length.
    pub trained_scales: usize,
}

impl GeneratorStack {
    pub fn new(
        schedule: ScaleSchedule,
        combine: CombineMode,
        base_width: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(schedule.len());
        for (i, spec) in schedule.scales.iter().enumerate() {
            let gspec = GeneratorSpec {
                depth: spec.gen_depth,
                in_channels: stage_in_channels(i, combine),
                base_width,
                dropout_rate,
            };
            stages.push(TwoStageGenerator::new(i, gspec, combine, scale_seed(seed, i))?);
        }
        Ok(Self { schedule, combine, base_width, dropout_rate, seed, stages, trained_scales: 0 })
    }

    pub fn scale_count(&self) -> usize {
        self.stages.len()
    }

    pub fn final_size(&self) -> usize {
        self.schedule.scales.last().map(|s| s.size).unwrap_or(0)
    }

    pub fn is_fully_trained(&self) -> bool {
        self.trained_scales == self.stages.len()
    }

    /// Runs the full cascade over per-scale encoded conditions (one per
    /// scale, coarse to fine). Returns every scale's output; the last entry
    /// is the final image.
    pub fn cascade(
        &self,
        conds: &[ImageTensor],
        dropout: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<ImageTensor>> {
        if conds.len() != self.stages.len() {
            return Err(PyrganError::Shape(format!(
                "{} conditions for {} scales",
                conds.len(),
                self.stages.len()
            )));
        }
        let mut outputs: Vec<ImageTensor> = Vec::with_capacity(self.stages.len());
        for (i, gen) in self.stages.iter().enumerate() {
            let prev = outputs.last();
            let out = gen.two_stage_forward(prev, &conds[i], dropout, rng)?;
            outputs.push(out);
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::ConditionMask;
    use ndarray::Array2;

    fn spec(depth: usize, in_ch: usize) -> GeneratorSpec {
        GeneratorSpec { depth, in_channels: in_ch, base_width: 4, dropout_rate: 0.5 }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn generator_output_shape_and_range() {
        let gen = UnetGenerator::new(spec(4, 2), 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(Arr4::from_elem((2, 2, 32, 32), 0.3));
        let y = gen.forward_node(&mut g, x, FwdMode::FROZEN, &mut rng()).unwrap();
        assert_eq!(g.value(y).dim(), (2, 1, 32, 32));
        for &v in g.value(y).iter() {
            assert!((-1.0..=1.0).contains(&v) && v.is_finite());
        }
    }

    #[test]
    fn generator_handles_non_power_of_two_sizes() {
        // 48 -> 24 -> 12 -> 6 -> 3 and back up.
        let gen = UnetGenerator::new(spec(4, 1), 2).unwrap();
        let mut g = Graph::new();
        let x = g.input(Arr4::from_elem((1, 1, 48, 48), -0.2));
        let y = gen.forward_node(&mut g, x, FwdMode::FROZEN, &mut rng()).unwrap();
        assert_eq!(g.value(y).dim(), (1, 1, 48, 48));

        // 20 -> 10 -> 5 -> 2 hits an odd intermediate; the fit step restores it.
        let gen = UnetGenerator::new(spec(3, 1), 3).unwrap();
        let mut g = Graph::new();
        let x = g.input(Arr4::from_elem((1, 1, 20, 20), 0.1));
        let y = gen.forward_node(&mut g, x, FwdMode::FROZEN, &mut rng()).unwrap();
        assert_eq!(g.value(y).dim(), (1, 1, 20, 20));
    }

    #[test]
    fn generator_rejects_undersized_input() {
        let gen = UnetGenerator::new(spec(5, 1), 4).unwrap();
        let mut g = Graph::new();
        let x = g.input(Arr4::zeros((1, 1, 16, 16)));
        assert!(gen.forward_node(&mut g, x, FwdMode::FROZEN, &mut rng()).is_err());
    }

    #[test]
    fn generator_param_count_grows_with_depth() {
        let shallow = UnetGenerator::new(spec(4, 2), 5).unwrap();
        let deep = UnetGenerator::new(spec(5, 2), 5).unwrap();
        assert!(deep.param_count() > shallow.param_count());
    }

    #[test]
    fn spec_validation() {
        assert!(UnetGenerator::new(spec(2, 1), 0).is_err());
        assert!(UnetGenerator::new(
            GeneratorSpec { depth: 4, in_channels: 1, base_width: 4, dropout_rate: 1.5 },
            0
        )
        .is_err());
        assert!(PatchDiscriminator::new(
            DiscriminatorSpec { conv_layers: 2, in_channels: 2 },
            4,
            0
        )
        .is_err());
    }

    #[test]
    fn critic_logit_map_dims_track_input_size() {
        let disc =
            PatchDiscriminator::new(DiscriminatorSpec { conv_layers: 6, in_channels: 2 }, 4, 7)
                .unwrap();
        let dims = |n: usize| {
            let mut g = Graph::new();
            let x = g.input(Arr4::from_elem((1, 2, n, n), 0.2));
            let y = disc.forward_node(&mut g, x, FwdMode::FROZEN, &mut rng()).unwrap();
            let (_, c, h, w) = g.value(y).dim();
            assert_eq!(c, 1);
            for &v in g.value(y).iter() {
                assert!(v.is_finite());
            }
            (h, w)
        };
        let (h32, w32) = dims(32);
        assert!(h32 >= 1 && w32 >= 1);
        let (h64, w64) = dims(64);
        // Doubling the input doubles each logit dimension within one pixel.
        assert!((h64 as i64 - 2 * h32 as i64).abs() <= 1, "{h32} -> {h64}");
        assert!((w64 as i64 - 2 * w32 as i64).abs() <= 1, "{w32} -> {w64}");
    }

    #[test]
    fn two_stage_restore_copy_reproduces_super() {
        let mut pair = TwoStageGenerator::new(
            1,
            GeneratorSpec { depth: 3, in_channels: 2, base_width: 4, dropout_rate: 0.5 },
            CombineMode::Concat,
            11,
        )
        .unwrap();
        pair.copy_super_into_restore();

        let input = Arr4::from_shape_fn((1, 2, 16, 16), |(_, c, r, cc)| {
            ((r * 16 + cc + c * 3) % 17) as f64 / 8.5 - 1.0
        });
        let run = |net: &UnetGenerator| {
            let mut g = Graph::new();
            let x = g.input(input.clone());
            let y = net.forward_node(&mut g, x, FwdMode::FROZEN, &mut rng()).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(&pair.g_super), run(&pair.g_restore));
    }

    #[test]
    fn scale_zero_runs_on_condition_alone() {
        let pair = TwoStageGenerator::new(
            0,
            GeneratorSpec { depth: 3, in_channels: 1, base_width: 4, dropout_rate: 0.5 },
            CombineMode::Concat,
            13,
        )
        .unwrap();
        let mask = ConditionMask::new(Array2::from_shape_fn((16, 16), |(r, _)| (r / 6) as u8))
            .unwrap();
        let out = pair
            .two_stage_forward(None, &mask.encode(), false, &mut rng())
            .unwrap();
        assert_eq!(out.shape(), (16, 16));
    }

    #[test]
    fn two_stage_composition_matches_explicit_stages() {
        let pair = TwoStageGenerator::new(
            1,
            GeneratorSpec { depth: 3, in_channels: 2, base_width: 4, dropout_rate: 0.5 },
            CombineMode::Concat,
            17,
        )
        .unwrap();
        let mask =
            ConditionMask::new(Array2::from_shape_fn((24, 24), |(r, c)| ((r + c) % 3) as u8))
                .unwrap();
        let prev = ImageTensor::new(Array2::from_elem((16, 16), 0.25)).unwrap();
        let cond = mask.encode();
        let o_is = pair.stage1_forward(Some(&prev), &cond, false, &mut rng()).unwrap();
        let o_ir = pair.stage2_forward(&o_is, false, &mut rng()).unwrap();
        let composed = pair.two_stage_forward(Some(&prev), &cond, false, &mut rng()).unwrap();
        assert_eq!(composed.0, o_ir.0);
        assert_eq!(o_is.shape(), (24, 24));
    }

    #[test]
    fn add_combine_mode_keeps_single_channel() {
        let pair = TwoStageGenerator::new(
            1,
            GeneratorSpec { depth: 3, in_channels: 1, base_width: 4, dropout_rate: 0.0 },
            CombineMode::Add,
            19,
        )
        .unwrap();
        let cond = Arr4::from_elem((1, 1, 16, 16), -1.0);
        let prev = Arr4::from_elem((1, 1, 16, 16), 0.5);
        let input = pair.stage1_input(Some(&prev), &cond).unwrap();
        assert_eq!(input.dim(), (1, 1, 16, 16));
        assert!((input[[0, 0, 3, 3]] - -0.5).abs() < 1e-15);
    }

    #[test]
    fn adjacent_scale_transfer_accepts_shape_differences() {
        // Scale-0 generator (condition only) seeds the scale-1 generator
        // (condition + previous output) without shape errors.
        let g0 = UnetGenerator::new(spec(4, 1), 23).unwrap();
        let mut g1 = UnetGenerator::new(spec(4, 2), 29).unwrap();
        g1.transfer_from(&g0);
        let w0 = g0.params.value(g0.params.find("down0.conv.w").unwrap()).clone();
        let w1 = g1.params.value(g1.params.find("down0.conv.w").unwrap()).clone();
        assert_eq!(w0.slice(ndarray::s![.., 0..1, .., ..]), w1.slice(ndarray::s![.., 0..1, .., ..]));

        // Same-spec transfer is a full copy.
        let mut g2 = UnetGenerator::new(spec(4, 1), 31).unwrap();
        g2.transfer_from(&g0);
        for (a, b) in g0.params.iter().zip(g2.params.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }

        // Deeper generator accepts a shallower one's weights.
        let mut g3 = UnetGenerator::new(spec(5, 1), 37).unwrap();
        g3.transfer_from(&g0);
    }

    #[test]
    fn dropout_at_inference_diversifies_outputs() {
        let gen = UnetGenerator::new(spec(3, 1), 41).unwrap();
        let input = Arr4::from_elem((1, 1, 16, 16), 0.1);
        let sample = |seed: u64| {
            let mut g = Graph::new();
            let x = g.input(input.clone());
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let y = gen.forward_node(&mut g, x, FwdMode::SAMPLE, &mut r).unwrap();
            g.value(y).clone()
        };
        let a = sample(1);
        let b = sample(2);
        let same = sample(1);
        assert_eq!(a, same, "same rng stream must reproduce the sample");
        assert_ne!(a, b, "different rng streams must diversify");
    }
}
