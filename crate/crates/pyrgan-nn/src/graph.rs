//! Eager-tape reverse-mode autodiff.
//!
//! Every op evaluates its value at insertion time and appends one node to the
//! tape, so node ids are already a topological order; [`Graph::backward`]
//! walks them once in reverse. Values are `f64` `[batch, channel, h, w]`
//! tensors throughout.

use crate::kernels;
use crate::params::{ParamRef, ParamSet};
use crate::Arr4;
use ndarray::{s, Array2, Axis};
use rand::RngCore;

/// Handle to a node in one [`Graph`]'s tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Abs(NodeId),
    Square(NodeId),
    /// sign(x) * |x|^w — keeps fractional powers defined for negative inputs.
    SignPow(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Arr4,
        inv_std: Array2<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Arr4,
    },
    ConcatCh(NodeId, NodeId, usize),
    AvgPool2(NodeId),
    Mean(NodeId),
    FitTo(NodeId),
    BceWithLogits {
        x: NodeId,
        target: Arr4,
    },
    WeightedCe {
        logits: NodeId,
        probs: Arr4,
        labels: Arr4,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Arr4,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Arr4>>,
    param_leaves: Vec<(NodeId, ParamRef)>,
}

impl Gradients {
    /// Gradient w.r.t. any grad-requiring node (leaves included).
    pub fn for_node(&self, id: NodeId) -> Option<&Arr4> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a registered parameter leaf.
    pub fn for_param(&self, r: ParamRef) -> Option<&Arr4> {
        self.param_leaves
            .iter()
            .find(|(_, pr)| *pr == r)
            .and_then(|(id, _)| self.for_node(*id))
    }

    /// All parameter gradients, summed when a parameter fed several leaves.
    pub fn into_param_grads(mut self) -> Vec<(ParamRef, Arr4)> {
        let mut out: Vec<(ParamRef, Arr4)> = Vec::new();
        for (id, r) in std::mem::take(&mut self.param_leaves) {
            let Some(g) = self.by_node[id.0].take() else { continue };
            match out.iter_mut().find(|(pr, _)| *pr == r) {
                Some((_, acc)) => *acc += &g,
                None => out.push((r, g)),
            }
        }
        out
    }
}

/// One forward tape. Build ops, call [`backward`](Self::backward), drop.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: Vec<(NodeId, ParamRef)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Arr4 {
        &self.nodes[id.0].value
    }

    /// Scalar convenience for `[1,1,1,1]` nodes such as losses.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        v[[0, 0, 0, 0]]
    }

    fn push(&mut self, value: Arr4, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rq(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant leaf: no gradient tracked.
    pub fn input(&mut self, value: Arr4) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Non-parameter leaf whose gradient is wanted (loss probes, grad checks).
    pub fn input_grad(&mut self, value: Arr4) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable leaf borrowing the parameter's current value.
    pub fn param(&mut self, set: &ParamSet, r: ParamRef) -> NodeId {
        let id = self.push(set.value(r).clone(), Op::Leaf, true);
        self.param_leaves.push((id, r));
        id
    }

    /// Parameter leaf with gradients disabled (a frozen network).
    pub fn param_frozen(&mut self, set: &ParamSet, r: ParamRef) -> NodeId {
        self.push(set.value(r).clone(), Op::Leaf, false)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.nodes[a.0].value.raw_dim(),
            self.nodes[b.0].value.raw_dim(),
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "add");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rq = self.rq(a) || self.rq(b);
        self.push(v, Op::Add(a, b), rq)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "sub");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rq = self.rq(a) || self.rq(b);
        self.push(v, Op::Sub(a, b), rq)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "mul");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rq = self.rq(a) || self.rq(b);
        self.push(v, Op::Mul(a, b), rq)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "div");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let rq = self.rq(a) || self.rq(b);
        self.push(v, Op::Div(a, b), rq)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let rq = self.rq(a);
        self.push(v, Op::AddScalar(a), rq)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rq = self.rq(a);
        self.push(v, Op::MulScalar(a, c), rq)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let rq = self.rq(a);
        self.push(v, Op::Abs(a), rq)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let rq = self.rq(a);
        self.push(v, Op::Square(a), rq)
    }

    /// Sign-preserving power: `sign(x) * |x|^w`.
    pub fn sign_pow(&mut self, a: NodeId, w: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.signum() * x.abs().powf(w));
        let rq = self.rq(a);
        self.push(v, Op::SignPow(a, w), rq)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let rq = self.rq(a);
        self.push(v, Op::Tanh(a), rq)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rq = self.rq(a);
        self.push(v, Op::Sigmoid(a), rq)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let rq = self.rq(a);
        self.push(v, Op::Relu(a), rq)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        let rq = self.rq(a);
        self.push(v, Op::LeakyRelu(a, slope), rq)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let v = kernels::conv2d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
            stride,
            pad,
        );
        let rq = self.rq(x) || self.rq(w) || b.map(|b| self.rq(b)).unwrap_or(false);
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, rq)
    }

    pub fn convt2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let v = kernels::convt2d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
            stride,
            pad,
        );
        let rq = self.rq(x) || self.rq(w) || b.map(|b| self.rq(b)).unwrap_or(false);
        self.push(v, Op::ConvT2d { x, w, b, stride, pad }, rq)
    }

    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (_, _, h, w) = self.nodes[x.0].value.dim();
        assert!(h * w > 1, "instance_norm on a 1x1 plane is degenerate");
        let (v, x_hat, inv_std) = kernels::instance_norm_fwd(
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            eps,
        );
        let rq = self.rq(x) || self.rq(gamma) || self.rq(beta);
        self.push(v, Op::InstanceNorm { x, gamma, beta, x_hat, inv_std }, rq)
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`. The mask is
    /// drawn here and stored on the tape, so replaying with a cloned rng
    /// reproduces the same forward exactly.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut dyn RngCore) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
        let scale = 1.0 / (1.0 - p);
        let mask = {
            let src = &self.nodes[x.0].value;
            let mut m = Arr4::zeros(src.raw_dim());
            for v in m.iter_mut() {
                let u: f64 = rand::Rng::random(&mut *rng);
                *v = if u >= p { scale } else { 0.0 };
            }
            m
        };
        let v = &self.nodes[x.0].value * &mask;
        let rq = self.rq(x);
        self.push(v, Op::Dropout { x, mask }, rq)
    }

    /// Concatenate along the channel axis.
    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (na, ca, ha, wa) = va.dim();
        let (nb, cb, hb, wb) = vb.dim();
        assert_eq!((na, ha, wa), (nb, hb, wb), "concat_ch: non-channel dims differ");
        let mut v = Arr4::zeros((na, ca + cb, ha, wa));
        v.slice_mut(s![.., ..ca, .., ..]).assign(va);
        v.slice_mut(s![.., ca.., .., ..]).assign(vb);
        let rq = self.rq(a) || self.rq(b);
        self.push(v, Op::ConcatCh(a, b, ca), rq)
    }

    pub fn avg_pool2(&mut self, a: NodeId) -> NodeId {
        let v = kernels::avg_pool2_fwd(&self.nodes[a.0].value);
        let rq = self.rq(a);
        self.push(v, Op::AvgPool2(a), rq)
    }

    /// Mean over every element, producing a `[1,1,1,1]` scalar node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let src = &self.nodes[a.0].value;
        let mut v = Arr4::zeros((1, 1, 1, 1));
        v[[0, 0, 0, 0]] = src.sum() / src.len() as f64;
        let rq = self.rq(a);
        self.push(v, Op::Mean(a), rq)
    }

    /// Center crop or zero-pad to the target spatial size.
    pub fn fit_to(&mut self, a: NodeId, th: usize, tw: usize) -> NodeId {
        let v = kernels::fit_to_fwd(&self.nodes[a.0].value, th, tw);
        let rq = self.rq(a);
        self.push(v, Op::FitTo(a), rq)
    }

    /// Mean binary cross-entropy on logits against a constant target map.
    pub fn bce_with_logits(&mut self, x: NodeId, target: Arr4) -> NodeId {
        let logits = &self.nodes[x.0].value;
        assert_eq!(logits.raw_dim(), target.raw_dim(), "bce: target shape mismatch");
        let n = logits.len() as f64;
        let mut acc = 0.0;
        for (&z, &t) in logits.iter().zip(target.iter()) {
            // max(z,0) - z t + ln(1 + exp(-|z|)) is the stable form.
            acc += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let mut v = Arr4::zeros((1, 1, 1, 1));
        v[[0, 0, 0, 0]] = acc / n;
        let rq = self.rq(x);
        self.push(v, Op::BceWithLogits { x, target }, rq)
    }

    /// Mean class-weighted cross-entropy over pixels.
    ///
    /// `labels` holds integral class indices as `f64` in a `[n,1,h,w]` map;
    /// the result is `(1/N) * sum(weights[label] * -log softmax(logits)[label])`
    /// with `N = n*h*w`, so re-weighting changes a pixel's contribution by the
    /// plain ratio of its class weight.
    pub fn weighted_ce(&mut self, logits: NodeId, labels: Arr4, weights: Vec<f64>) -> NodeId {
        let z = &self.nodes[logits.0].value;
        let (n, c, h, w) = z.dim();
        assert_eq!(labels.dim(), (n, 1, h, w), "weighted_ce: label shape mismatch");
        assert!(weights.len() == c, "weighted_ce: {} weights for {c} classes", weights.len());
        let npix = (n * h * w) as f64;
        let mut probs = Arr4::zeros((n, c, h, w));
        let mut acc = 0.0;
        for bi in 0..n {
            for r in 0..h {
                for cc in 0..w {
                    let lbl = labels[[bi, 0, r, cc]] as usize;
                    assert!(lbl < c, "weighted_ce: label {lbl} out of range");
                    let mut maxz = f64::NEG_INFINITY;
                    for ci in 0..c {
                        maxz = maxz.max(z[[bi, ci, r, cc]]);
                    }
                    let mut denom = 0.0;
                    for ci in 0..c {
                        denom += (z[[bi, ci, r, cc]] - maxz).exp();
                    }
                    for ci in 0..c {
                        probs[[bi, ci, r, cc]] = (z[[bi, ci, r, cc]] - maxz).exp() / denom;
                    }
                    let logp = z[[bi, lbl, r, cc]] - maxz - denom.ln();
                    acc += weights[lbl] * -logp;
                }
            }
        }
        let mut v = Arr4::zeros((1, 1, 1, 1));
        v[[0, 0, 0, 0]] = acc / npix;
        let rq = self.rq(logits);
        self.push(v, Op::WeightedCe { logits, probs, labels, weights }, rq)
    }

    /// Reverse pass from `root` (must be scalar). Seeds d(root)/d(root) = 1.
    pub fn backward(&mut self, root: NodeId) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Arr4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Arr4::ones((1, 1, 1, 1)));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &gy, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Gradients { by_node: grads, param_leaves: self.param_leaves.clone() }
    }

    fn accumulate_inputs(&self, i: usize, gy: &Arr4, grads: &mut [Option<Arr4>]) {
        let send = |id: NodeId, g: Arr4, grads: &mut [Option<Arr4>]| {
            if !self.rq(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, gy.clone(), grads);
                send(*b, gy.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, gy.clone(), grads);
                send(*b, gy.mapv(|g| -g), grads);
            }
            Op::Mul(a, b) => {
                send(*a, gy * &self.nodes[b.0].value, grads);
                send(*b, gy * &self.nodes[a.0].value, grads);
            }
            Op::Div(a, b) => {
                let vb = &self.nodes[b.0].value;
                send(*a, gy / vb, grads);
                let va = &self.nodes[a.0].value;
                send(*b, -(gy * va) / (vb * vb), grads);
            }
            Op::AddScalar(a) => send(*a, gy.clone(), grads),
            Op::MulScalar(a, c) => send(*a, gy.mapv(|g| g * c), grads),
            Op::Abs(a) => {
                let g = ndarray::Zip::from(gy)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| g * x.signum());
                send(*a, g, grads);
            }
            Op::Square(a) => {
                let g = ndarray::Zip::from(gy)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| g * 2.0 * x);
                send(*a, g, grads);
            }
            Op::SignPow(a, w) => {
                // d/dx sign(x)|x|^w = w |x|^(w-1) for either sign.
                let g = ndarray::Zip::from(gy)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| g * w * x.abs().max(1e-300).powf(w - 1.0));
                send(*a, g, grads);
            }
            Op::Tanh(a) => {
                let g = ndarray::Zip::from(gy)
                    .and(&self.nodes[i].value)
                    .map_collect(|&g, &y| g * (1.0 - y * y));
                send(*a, g, grads);
            }
            Op::Sigmoid(a) => {
                let g = ndarray::Zip::from(gy)
                    .and(&self.nodes[i].value)
                    .map_collect(|&g, &y| g * y * (1.0 - y));
                send(*a, g, grads);
            }
            Op::Relu(a) => {
                let g = ndarray::Zip::from(gy)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                send(*a, g, grads);
            }
            Op::LeakyRelu(a, slope) => {
                let g = ndarray::Zip::from(gy)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| if x > 0.0 { g } else { g * slope });
                send(*a, g, grads);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = kernels::conv2d_bwd(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    gy,
                    *stride,
                    *pad,
                    self.rq(*x),
                    self.rq(*w),
                );
                if let Some(g) = gx {
                    send(*x, g, grads);
                }
                if let Some(g) = gw {
                    send(*w, g, grads);
                }
                if let Some(b) = b {
                    send(*b, gb, grads);
                }
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = kernels::convt2d_bwd(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    gy,
                    *stride,
                    *pad,
                    self.rq(*x),
                    self.rq(*w),
                );
                if let Some(g) = gx {
                    send(*x, g, grads);
                }
                if let Some(g) = gw {
                    send(*w, g, grads);
                }
                if let Some(b) = b {
                    send(*b, gb, grads);
                }
            }
            Op::InstanceNorm { x, gamma, beta, x_hat, inv_std } => {
                let (gx, gg, gb) = kernels::instance_norm_bwd(
                    x_hat,
                    inv_std,
                    &self.nodes[gamma.0].value,
                    gy,
                );
                send(*x, gx, grads);
                send(*gamma, gg, grads);
                send(*beta, gb, grads);
            }
            Op::Dropout { x, mask } => send(*x, gy * mask, grads),
            Op::ConcatCh(a, b, split) => {
                let ga = gy.slice(s![.., ..*split, .., ..]).to_owned();
                let gb = gy.slice(s![.., *split.., .., ..]).to_owned();
                send(*a, ga, grads);
                send(*b, gb, grads);
            }
            Op::AvgPool2(a) => {
                let g = kernels::avg_pool2_bwd(self.nodes[a.0].value.dim(), gy);
                send(*a, g, grads);
            }
            Op::Mean(a) => {
                let src = &self.nodes[a.0].value;
                let g = gy[[0, 0, 0, 0]] / src.len() as f64;
                send(*a, Arr4::from_elem(src.raw_dim(), g), grads);
            }
            Op::FitTo(a) => {
                let g = kernels::fit_to_bwd(self.nodes[a.0].value.dim(), gy);
                send(*a, g, grads);
            }
            Op::BceWithLogits { x, target } => {
                let z = &self.nodes[x.0].value;
                let n = z.len() as f64;
                let gs = gy[[0, 0, 0, 0]];
                let g = ndarray::Zip::from(z)
                    .and(target)
                    .map_collect(|&z, &t| gs * (1.0 / (1.0 + (-z).exp()) - t) / n);
                send(*x, g, grads);
            }
            Op::WeightedCe { logits, probs, labels, weights } => {
                let (n, c, h, w) = probs.dim();
                let npix = (n * h * w) as f64;
                let gs = gy[[0, 0, 0, 0]];
                let mut g = Arr4::zeros((n, c, h, w));
                for bi in 0..n {
                    for r in 0..h {
                        for cc in 0..w {
                            let lbl = labels[[bi, 0, r, cc]] as usize;
                            let wt = weights[lbl];
                            for ci in 0..c {
                                let onehot = if ci == lbl { 1.0 } else { 0.0 };
                                g[[bi, ci, r, cc]] =
                                    gs * wt * (probs[[bi, ci, r, cc]] - onehot) / npix;
                            }
                        }
                    }
                }
                send(*logits, g, grads);
            }
        }
    }

    /// Axis-0 view helper used by tests; returns the batch size of a node.
    pub fn batch_of(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.len_of(Axis(0))
    }
}
