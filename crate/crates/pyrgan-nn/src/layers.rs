//! Layer structs: a thin naming/ownership layer over graph ops.
//!
//! A layer registers its tensors in a [`ParamSet`] at construction and replays
//! them onto a [`Graph`] per forward call. `Ctx::trainable` decides whether
//! the leaves carry gradients, so the same layer can run inside either the
//! updated network or a frozen opponent.

use crate::graph::{Graph, NodeId};
use crate::init;
use crate::params::{ParamRef, ParamSet};
use rand::RngCore;

/// Per-forward options.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    pub params: &'a ParamSet,
    /// Register leaves with gradients; `false` freezes the whole pass.
    pub trainable: bool,
    /// Enables dropout layers. Inference-time diversity keeps this on.
    pub dropout: bool,
    pub rng: &'a mut dyn RngCore,
}

impl Ctx<'_> {
    fn leaf(&mut self, r: ParamRef) -> NodeId {
        if self.trainable {
            self.graph.param(self.params, r)
        } else {
            self.graph.param_frozen(self.params, r)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamRef,
    pub b: ParamRef,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let w = params.register(format!("{name}.w"), init::conv_weight((cout, cin, k, k), rng));
        let b = params.register(format!("{name}.b"), init::zeros((1, cout, 1, 1)));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let w = ctx.leaf(self.w);
        let b = ctx.leaf(self.b);
        ctx.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: ParamRef,
    pub b: ParamRef,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let w = params.register(format!("{name}.w"), init::conv_weight((cin, cout, k, k), rng));
        let b = params.register(format!("{name}.b"), init::zeros((1, cout, 1, 1)));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let w = ctx.leaf(self.w);
        let b = ctx.leaf(self.b);
        ctx.graph.convt2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: ParamRef,
    pub beta: ParamRef,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize, rng: &mut dyn RngCore) -> Self {
        let gamma = params.register(format!("{name}.gamma"), init::norm_gamma(channels, rng));
        let beta = params.register(format!("{name}.beta"), init::zeros((1, channels, 1, 1)));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let gamma = ctx.leaf(self.gamma);
        let beta = ctx.leaf(self.beta);
        ctx.graph.instance_norm(x, gamma, beta, self.eps)
    }
}

/// Stateless dropout; the mask is drawn from `ctx.rng` when `ctx.dropout`.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        if ctx.dropout && self.p > 0.0 {
            ctx.graph.dropout(x, self.p, ctx.rng)
        } else {
            x
        }
    }
}
