//! Downstream evaluation: baseline segmenters and classifiers trained on
//! real or synthesized corpora, per-scan metrics with Student-t confidence
//! intervals, and segmentation-based image-quality scoring.

use crate::augment::{apply_draw, sample_draw, AugmentPolicy};
use crate::core::{ConditionMask, ImageTensor, SamplePair, NUM_LABELS};
use crate::io;
use crate::trainer::lr_schedule;
use crate::trainer::StageTrainConfig;
use crate::{PyrganError, Result};
use ndarray::{concatenate, Array2, Axis};
use pyrgan_nn::layers::{Conv2d, ConvTranspose2d, Ctx, InstanceNorm};
use pyrgan_nn::{adam_step, AdamConfig, Arr4, Graph, NodeId, ParamSet};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use std::path::Path;

/// Per-category cross-entropy weights for segmentation probes:
/// background, lung, infection.
pub const SEG_CE_WEIGHTS: [f64; NUM_LABELS] = [0.1, 1.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One evaluation sample with its grouping key for per-scan statistics.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub pair: SamplePair,
    pub scan_id: String,
}

#[derive(Debug, Clone)]
pub struct EvalCorpus {
    pub samples: Vec<EvalSample>,
    pub split: Split,
}

impl EvalCorpus {
    pub fn new(samples: Vec<EvalSample>, split: Split) -> Self {
        Self { samples, split }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scan_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.samples.iter().map(|s| s.scan_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Train/test splits must not share scans.
    pub fn check_disjoint(train: &EvalCorpus, test: &EvalCorpus) -> Result<()> {
        let train_ids = train.scan_ids();
        for id in test.scan_ids() {
            if train_ids.contains(&id) {
                return Err(PyrganError::Validation(format!(
                    "scan {id} appears in both train and test splits"
                )));
            }
        }
        Ok(())
    }

    /// Loads every `{name}_img.png` / `{name}_mask.png` pair in a directory;
    /// the scan id is the name up to its last underscore (`scan3_0007` →
    /// `scan3`).
    pub fn from_dir(dir: &Path, split: Split) -> Result<Self> {
        let mut samples = Vec::new();
        for name in io::list_pairs(dir)? {
            let pair = io::load_pair(dir, &name)?;
            let scan_id = name.rsplit_once('_').map(|(s, _)| s.to_string()).unwrap_or(name);
            samples.push(EvalSample { pair, scan_id });
        }
        if samples.is_empty() {
            return Err(PyrganError::Validation(format!("no sample pairs in {}", dir.display())));
        }
        Ok(Self { samples, split })
    }
}

/// Mean and t-based 95% interval of per-scan metric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric: String,
    pub per_scan: Vec<(String, f64)>,
    pub mean: f64,
    pub ci95: (f64, f64),
    pub n_scans: usize,
    /// Scans whose value was undefined and therefore excluded.
    pub undefined_scans: usize,
}

impl MetricsReport {
    pub fn from_values(metric: &str, per_scan: Vec<(String, f64)>, undefined_scans: usize) -> Self {
        let values: Vec<f64> = per_scan.iter().map(|(_, v)| *v).collect();
        let n = values.len();
        let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
        let ci95 = t_ci95(&values);
        Self { metric: metric.to_string(), per_scan, mean, ci95, n_scans: n, undefined_scans }
    }
}

/// Student-t 95% interval around the mean with `n − 1` degrees of freedom.
/// Degenerate inputs (fewer than two values, or zero spread) collapse to a
/// zero-width interval at the mean.
pub fn t_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    if values.windows(2).all(|w| w[0] == w[1]) {
        // Zero spread exactly, sidestepping summation rounding.
        return (values[0], values[0]);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, mean);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid dof")
        .inverse_cdf(0.975);
    let half = t * var.sqrt() / (n as f64).sqrt();
    (mean - half, mean + half)
}

/// Dice similarity for one class: `2|P∩T| / (|P|+|T|)`; 1.0 when both masks
/// lack the class, 0.0 when exactly one does.
pub fn dsc(pred: &ConditionMask, truth: &ConditionMask, class_id: u8) -> f64 {
    assert_eq!(pred.shape(), truth.shape(), "dsc needs aligned masks");
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for (&a, &b) in pred.0.iter().zip(truth.0.iter()) {
        let pa = a == class_id;
        let tb = b == class_id;
        p += pa as usize;
        t += tb as usize;
        inter += (pa && tb) as usize;
    }
    match (p, t) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * inter as f64 / (p + t) as f64,
    }
}

/// Per-scan binary confusion counts; the persisted form every derived
/// metric can be recomputed from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn sensitivity(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        (pos > 0).then(|| self.tp as f64 / pos as f64)
    }

    pub fn specificity(&self) -> Option<f64> {
        let neg = self.tn + self.fp;
        (neg > 0).then(|| self.tn as f64 / neg as f64)
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_scan_counts: Vec<(String, ConfusionCounts)>,
    pub sensitivity: MetricsReport,
    pub specificity: MetricsReport,
    pub accuracy: MetricsReport,
}

/// Aggregates persisted per-scan counts into the three metric reports.
/// Scans where a metric is undefined (no positives, or no negatives) are
/// excluded from that metric and counted.
pub fn metrics_from_counts(per_scan: &[(String, ConfusionCounts)]) -> ClassificationReport {
    let mut sens = Vec::new();
    let mut sens_undef = 0;
    let mut spec = Vec::new();
    let mut spec_undef = 0;
    let mut acc = Vec::new();
    for (id, c) in per_scan {
        match c.sensitivity() {
            Some(v) => sens.push((id.clone(), v)),
            None => sens_undef += 1,
        }
        match c.specificity() {
            Some(v) => spec.push((id.clone(), v)),
            None => spec_undef += 1,
        }
        acc.push((id.clone(), c.accuracy()));
    }
    ClassificationReport {
        per_scan_counts: per_scan.to_vec(),
        sensitivity: MetricsReport::from_values("sensitivity", sens, sens_undef),
        specificity: MetricsReport::from_values("specificity", spec, spec_undef),
        accuracy: MetricsReport::from_values("accuracy", acc, 0),
    }
}

/// Per-scan sensitivity/specificity/accuracy with t-based 95% intervals.
pub fn classification_metrics(
    preds: &[bool],
    labels: &[bool],
    scan_ids: &[String],
) -> Result<ClassificationReport> {
    if preds.is_empty() || preds.len() != labels.len() || preds.len() != scan_ids.len() {
        return Err(PyrganError::Validation(format!(
            "metric inputs misaligned: {} preds, {} labels, {} scan ids",
            preds.len(),
            labels.len(),
            scan_ids.len()
        )));
    }
    let mut by_scan: BTreeMap<&str, ConfusionCounts> = BTreeMap::new();
    for ((&p, &l), id) in preds.iter().zip(labels.iter()).zip(scan_ids.iter()) {
        let c = by_scan.entry(id.as_str()).or_default();
        match (p, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let per_scan: Vec<(String, ConfusionCounts)> =
        by_scan.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    Ok(metrics_from_counts(&per_scan))
}

/// Probe capacity tier; the contrast matters, not any specific architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeArch {
    Light,
    Heavy,
}

impl ProbeArch {
    fn seg_shape(self) -> (usize, usize) {
        // (depth, base width)
        match self {
            ProbeArch::Light => (3, 8),
            ProbeArch::Heavy => (4, 16),
        }
    }

    fn cls_width(self) -> usize {
        match self {
            ProbeArch::Light => 8,
            ProbeArch::Heavy => 16,
        }
    }
}

/// Encoder-decoder segmentation probe emitting 3-class logits.
pub struct SegmenterNet {
    pub arch: ProbeArch,
    pub params: ParamSet,
    depth: usize,
    down: Vec<(Conv2d, Option<InstanceNorm>)>,
    up: Vec<ConvTranspose2d>,
}

impl SegmenterNet {
    pub fn new(arch: ProbeArch, seed: u64) -> Self {
        let (depth, width) = arch.seg_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let w = |i: usize| width * (1 << i.min(3));
        let mut down = Vec::with_capacity(depth);
        for i in 0..depth {
            let cin = if i == 0 { 1 } else { w(i - 1) };
            let conv = Conv2d::new(&mut params, &format!("down{i}.conv"), cin, w(i), 4, 2, 1, &mut rng);
            let norm = (i != 0 && i != depth - 1)
                .then(|| InstanceNorm::new(&mut params, &format!("down{i}.norm"), w(i), &mut rng));
            down.push((conv, norm));
        }
        let mut up = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            let cin = if i == depth - 1 { w(i) } else { 2 * w(i) };
            let cout = if i == 0 { NUM_LABELS } else { w(i - 1) };
            up.push(ConvTranspose2d::new(&mut params, &format!("up{i}.conv"), cin, cout, 4, 2, 1, &mut rng));
        }
        up.reverse();
        Self { arch, params, depth, down, up }
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// `[n, 1, h, w]` image → `[n, 3, h, w]` class logits.
    pub fn forward(&self, g: &mut Graph, x: NodeId, trainable: bool) -> Result<NodeId> {
        let (_, c, h, w) = g.value(x).dim();
        if c != 1 {
            return Err(PyrganError::Shape(format!("segmenter expects 1 channel, got {c}")));
        }
        if h.min(w) < 1 << self.depth {
            return Err(PyrganError::Shape(format!(
                "input {h}x{w} too small for {} downsamplings",
                self.depth
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx { graph: g, params: &self.params, trainable, dropout: false, rng: &mut rng };
        let mut skips: Vec<(NodeId, usize, usize)> = Vec::with_capacity(self.depth);
        let mut node = x;
        for (i, (conv, norm)) in self.down.iter().enumerate() {
            if i > 0 {
                node = ctx.graph.leaky_relu(node, 0.2);
            }
            node = conv.forward(&mut ctx, node);
            if let Some(norm) = norm {
                node = norm.forward(&mut ctx, node);
            }
            let (_, _, sh, sw) = ctx.graph.value(node).dim();
            skips.push((node, sh, sw));
        }
        for i in (0..self.depth).rev() {
            node = ctx.graph.relu(node);
            node = self.up[i].forward(&mut ctx, node);
            let (th, tw) = if i == 0 { (h, w) } else { (skips[i - 1].1, skips[i - 1].2) };
            let (_, _, uh, uw) = ctx.graph.value(node).dim();
            if (uh, uw) != (th, tw) {
                node = ctx.graph.fit_to(node, th, tw);
            }
            if i > 0 {
                node = ctx.graph.concat_ch(node, skips[i - 1].0);
            }
        }
        Ok(node)
    }

    /// Argmax segmentation of one image.
    pub fn segment(&self, image: &ImageTensor) -> Result<ConditionMask> {
        let mut g = Graph::new();
        let x = g.input(image.to_batch());
        let logits = self.forward(&mut g, x, false)?;
        let v = g.value(logits);
        let (_, _, h, w) = v.dim();
        let mut labels = Array2::<u8>::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let mut best = 0u8;
                let mut score = f64::NEG_INFINITY;
                for l in 0..NUM_LABELS {
                    let s = v[[0, l, r, c]];
                    if s > score {
                        score = s;
                        best = l as u8;
                    }
                }
                labels[[r, c]] = best;
            }
        }
        ConditionMask::new(labels)
    }
}

/// Convolutional binary classifier: stride-2 convs to a small grid, then a
/// full-grid conv producing one logit per sample.
pub struct ClassifierNet {
    pub arch: ProbeArch,
    pub params: ParamSet,
    input_size: usize,
    convs: Vec<(Conv2d, Option<InstanceNorm>)>,
}

impl ClassifierNet {
    pub fn new(arch: ProbeArch, input_size: usize, seed: u64) -> Result<Self> {
        if input_size < 8 {
            return Err(PyrganError::Config(format!("classifier input {input_size} below 8 px")));
        }
        let width = arch.cls_width();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut convs = Vec::new();
        let mut size = input_size;
        let mut cin = 1;
        let mut i = 0;
        while size > 4 {
            let cout = width * (1 << i.min(3));
            let conv = Conv2d::new(&mut params, &format!("conv{i}"), cin, cout, 4, 2, 1, &mut rng);
            let norm = (i != 0)
                .then(|| InstanceNorm::new(&mut params, &format!("norm{i}"), cout, &mut rng));
            convs.push((conv, norm));
            cin = cout;
            size /= 2;
            i += 1;
        }
        if arch == ProbeArch::Heavy {
            // One extra same-size conv deepens the heavy probe.
            let conv = Conv2d::new(&mut params, &format!("conv{i}"), cin, cin, 3, 1, 1, &mut rng);
            let norm = Some(InstanceNorm::new(&mut params, &format!("norm{i}"), cin, &mut rng));
            convs.push((conv, norm));
        }
        // Head: one valid conv spanning the remaining grid.
        let head = Conv2d::new(&mut params, "head", cin, 1, size, 1, 0, &mut rng);
        convs.push((head, None));
        Ok(Self { arch, params, input_size, convs })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// `[n, 1, s, s]` image → `[n, 1, 1, 1]` logits.
    pub fn forward(&self, g: &mut Graph, x: NodeId, trainable: bool) -> Result<NodeId> {
        let (_, c, h, w) = g.value(x).dim();
        if c != 1 || h != self.input_size || w != self.input_size {
            return Err(PyrganError::Shape(format!(
                "classifier expects [n,1,{0},{0}], got [.,{c},{h},{w}]",
                self.input_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx { graph: g, params: &self.params, trainable, dropout: false, rng: &mut rng };
        let mut node = x;
        let last = self.convs.len() - 1;
        for (i, (conv, norm)) in self.convs.iter().enumerate() {
            node = conv.forward(&mut ctx, node);
            if let Some(norm) = norm {
                node = norm.forward(&mut ctx, node);
            }
            if i != last {
                node = ctx.graph.leaky_relu(node, 0.2);
            }
        }
        Ok(node)
    }

    /// Infection probability for one image.
    pub fn classify(&self, image: &ImageTensor) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(image.to_batch());
        let logit = self.forward(&mut g, x, false)?;
        let prob = g.sigmoid(logit);
        Ok(g.value(prob)[[0, 0, 0, 0]])
    }
}

/// Binary label a classifier trains toward: any infection pixel present.
pub fn infection_label(mask: &ConditionMask) -> bool {
    mask.label_counts()[2] > 0
}

/// Optimization settings for the downstream probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_start: usize,
    pub lr_decay_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub augment: bool,
    /// Per-category cross-entropy weights; segmentation only.
    pub ce_weights: [f64; NUM_LABELS],
    pub seed: u64,
}

impl ProbeTrainConfig {
    pub fn segmenter_default(seed: u64) -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            lr: 1e-4,
            lr_decay_start: 25,
            lr_decay_frac: 0.04,
            beta1: 0.9,
            beta2: 0.999,
            augment: true,
            ce_weights: SEG_CE_WEIGHTS,
            seed,
        }
    }

    pub fn classifier_default(seed: u64) -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 1e-4,
            lr_decay_start: 5,
            lr_decay_frac: 0.20,
            beta1: 0.9,
            beta2: 0.999,
            augment: true,
            ce_weights: SEG_CE_WEIGHTS,
            seed,
        }
    }

    fn as_schedule(&self) -> StageTrainConfig {
        StageTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay_start: self.lr_decay_start,
            lr_decay_frac: self.lr_decay_frac,
            beta1: self.beta1,
            beta2: self.beta2,
            sample_every: 0,
        }
    }
}

/// One augmented (or bare) batch of corpus samples, by index.
fn probe_batch(
    corpus: &EvalCorpus,
    idxs: &[usize],
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(ImageTensor, ConditionMask)>> {
    idxs.iter()
        .map(|&i| {
            let pair = &corpus.samples[i].pair;
            if augment {
                let draw =
                    sample_draw(&AugmentPolicy::strong(1.0), pair.image.shape(), rng.next_u64())?;
                apply_draw(&draw, &pair.image, &pair.mask)
            } else {
                Ok((pair.image.clone(), pair.mask.clone()))
            }
        })
        .collect()
}

/// Trains a 3-class segmentation probe with weighted cross-entropy. Returns
/// the net and the mean loss per epoch.
pub fn train_segmenter(
    corpus: &EvalCorpus,
    arch: ProbeArch,
    cfg: &ProbeTrainConfig,
) -> Result<(SegmenterNet, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(PyrganError::Validation("segmenter needs a non-empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = SegmenterNet::new(arch, rng.next_u64());
    let schedule_cfg = cfg.as_schedule();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_schedule(&schedule_cfg, epoch);
        let adam = AdamConfig { lr, beta1: cfg.beta1, beta2: cfg.beta2, ..AdamConfig::default() };
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let items = probe_batch(corpus, chunk, cfg.augment, &mut rng)?;
            let xs: Vec<Arr4> = items.iter().map(|(img, _)| img.to_batch()).collect();
            let labs: Vec<Arr4> = items.iter().map(|(_, m)| m.to_label_batch()).collect();
            let x = concatenate(Axis(0), &xs.iter().map(|a| a.view()).collect::<Vec<_>>()).unwrap();
            let lab =
                concatenate(Axis(0), &labs.iter().map(|a| a.view()).collect::<Vec<_>>()).unwrap();
            let mut g = Graph::new();
            let xn = g.input(x);
            let logits = net.forward(&mut g, xn, true)?;
            let loss = g.weighted_ce(logits, lab, cfg.ce_weights.to_vec());
            sum += g.scalar_value(loss);
            batches += 1;
            let grads = g.backward(loss).into_param_grads();
            adam_step(&mut net.params, &grads, &adam);
        }
        epoch_losses.push(sum / batches as f64);
    }
    Ok((net, epoch_losses))
}

/// Trains a binary infection classifier with BCE. The corpus must contain
/// both classes. Returns the net and the mean loss per epoch.
pub fn train_classifier(
    corpus: &EvalCorpus,
    arch: ProbeArch,
    cfg: &ProbeTrainConfig,
) -> Result<(ClassifierNet, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(PyrganError::Validation("classifier needs a non-empty corpus".into()));
    }
    let positives = corpus.samples.iter().filter(|s| infection_label(&s.pair.mask)).count();
    if positives == 0 || positives == corpus.len() {
        return Err(PyrganError::Validation(format!(
            "classifier corpus needs both classes; {positives} of {} are positive",
            corpus.len()
        )));
    }
    let (h, w) = corpus.samples[0].pair.image.shape();
    if h != w {
        return Err(PyrganError::Shape("classifier expects square inputs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ClassifierNet::new(arch, h, rng.next_u64())?;
    let schedule_cfg = cfg.as_schedule();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_schedule(&schedule_cfg, epoch);
        let adam = AdamConfig { lr, beta1: cfg.beta1, beta2: cfg.beta2, ..AdamConfig::default() };
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let items = probe_batch(corpus, chunk, cfg.augment, &mut rng)?;
            let xs: Vec<Arr4> = items.iter().map(|(img, _)| img.to_batch()).collect();
            let x = concatenate(Axis(0), &xs.iter().map(|a| a.view()).collect::<Vec<_>>()).unwrap();
            let mut target = Arr4::zeros((items.len(), 1, 1, 1));
            for (b, (_, mask)) in items.iter().enumerate() {
                target[[b, 0, 0, 0]] = infection_label(mask) as usize as f64;
            }
            let mut g = Graph::new();
            let xn = g.input(x);
            let logit = net.forward(&mut g, xn, true)?;
            let loss = g.bce_with_logits(logit, target);
            sum += g.scalar_value(loss);
            batches += 1;
            let grads = g.backward(loss).into_param_grads();
            adam_step(&mut net.params, &grads, &adam);
        }
        epoch_losses.push(sum / batches as f64);
    }
    Ok((net, epoch_losses))
}

/// Per-class segmentation report: per-scan mean DSC, then the t-interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEvalReport {
    pub lung: MetricsReport,
    pub infection: MetricsReport,
}

pub fn evaluate_segmenter(net: &SegmenterNet, test: &EvalCorpus) -> Result<SegEvalReport> {
    if test.is_empty() {
        return Err(PyrganError::Validation("empty test corpus".into()));
    }
    let mut per_scan: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in &test.samples {
        let pred = net.segment(&s.pair.image)?;
        let e = per_scan.entry(s.scan_id.as_str()).or_default();
        e.0.push(dsc(&pred, &s.pair.mask, 1));
        e.1.push(dsc(&pred, &s.pair.mask, 2));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let lung: Vec<(String, f64)> =
        per_scan.iter().map(|(k, (l, _))| (k.to_string(), mean(l))).collect();
    let infection: Vec<(String, f64)> =
        per_scan.iter().map(|(k, (_, i))| (k.to_string(), mean(i))).collect();
    Ok(SegEvalReport {
        lung: MetricsReport::from_values("lung_dsc", lung, 0),
        infection: MetricsReport::from_values("infection_dsc", infection, 0),
    })
}

pub fn evaluate_classifier(net: &ClassifierNet, test: &EvalCorpus) -> Result<ClassificationReport> {
    if test.is_empty() {
        return Err(PyrganError::Validation("empty test corpus".into()));
    }
    let mut preds = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    let mut ids = Vec::with_capacity(test.len());
    for s in &test.samples {
        preds.push(net.classify(&s.pair.image)? >= 0.5);
        labels.push(infection_label(&s.pair.mask));
        ids.push(s.scan_id.clone());
    }
    classification_metrics(&preds, &labels, &ids)
}

/// Scores a synthesized corpus by how well an oracle segmenter recovers the
/// generating masks: mean DSC over samples for (lung, infection).
pub fn image_quality_score(corpus: &EvalCorpus, oracle: &SegmenterNet) -> Result<(f64, f64)> {
    if corpus.is_empty() {
        return Err(PyrganError::Validation("empty corpus".into()));
    }
    let mut lung = 0.0;
    let mut infection = 0.0;
    for s in &corpus.samples {
        let pred = oracle.segment(&s.pair.image)?;
        lung += dsc(&pred, &s.pair.mask, 1);
        infection += dsc(&pred, &s.pair.mask, 2);
    }
    let n = corpus.len() as f64;
    Ok((lung / n, infection / n))
}
