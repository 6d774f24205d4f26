//! Everything behind the command-line binary: the TOML run configuration,
//! synthetic phantom corpora, labeled-volume ingestion, and the
//! six-training-set downstream comparison experiment.
//!
//! The experiment pipeline persists every stage — data, generator
//! checkpoints, synthesized sets, per-set probe reports — so an interrupted
//! run resumes where it stopped and a finished run reassembles the same
//! report from disk.

use crate::augment::{apply_draw, sample_draw, AugmentPolicy};
use crate::core::{ConditionMask, ImageTensor, SamplePair};
use crate::eval::{
    evaluate_classifier, evaluate_segmenter, image_quality_score, infection_label, train_classifier,
    train_segmenter, ClassificationReport, EvalCorpus, ProbeArch, ProbeTrainConfig, SegEvalReport,
    Split,
};
use crate::io;
use crate::nets::GeneratorStack;
use crate::synth::{generate_corpus, CorpusMode};
use crate::trainer::{train_full, TrainPlan};
use crate::{PyrganError, Result};
use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// splitmix64 of a seed/index pair: cheap decorrelated sub-streams.
fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------- config --

/// Output locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsCfg {
    /// Root directory for run outputs when `--out` is not given.
    pub out: String,
}

impl Default for PathsCfg {
    fn default() -> Self {
        Self { out: "pyrgan-out".into() }
    }
}

/// Synthesis defaults for corpus-producing commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCfg {
    pub seed: u64,
    /// Samples produced when the command is not given an explicit count.
    pub count: usize,
}

impl Default for SynthCfg {
    fn default() -> Self {
        Self { seed: 29, count: 16 }
    }
}

/// Downstream probe settings shared by evaluation and the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbesCfg {
    pub arch: ProbeArch,
    pub segmenter: ProbeTrainConfig,
    pub classifier: ProbeTrainConfig,
}

impl Default for ProbesCfg {
    fn default() -> Self {
        Self {
            arch: ProbeArch::Light,
            segmenter: ProbeTrainConfig::segmenter_default(19),
            classifier: ProbeTrainConfig::classifier_default(19),
        }
    }
}

/// Shape of the synthetic lung phantoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// Square slice edge in pixels; also the size probes train at.
    pub size: usize,
    /// Upper bound on infection foci per slice.
    pub max_blobs: usize,
    /// Chance that a free slice draws no focus at all.
    pub blob_free_frac: f64,
    /// Per-pixel noise amplitude in the `[-1, 1]` intensity range.
    pub noise: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self { size: 64, max_blobs: 3, blob_free_frac: 0.35, noise: 0.06 }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(PyrganError::Config(format!("phantom size {} below 16 px", self.size)));
        }
        if !(0.0..=1.0).contains(&self.blob_free_frac) {
            return Err(PyrganError::Config("blob_free_frac must lie in [0, 1]".into()));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(PyrganError::Config("noise must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

/// Scale of the six-set comparison experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentCfg {
    pub seed: u64,
    /// Training scans per modality.
    pub scans: usize,
    pub slices_per_scan: usize,
    /// Held-out scans per modality.
    pub test_scans: usize,
}

impl Default for ExperimentCfg {
    fn default() -> Self {
        Self { seed: 23, scans: 3, slices_per_scan: 4, test_scans: 2 }
    }
}

impl ExperimentCfg {
    pub fn validate(&self) -> Result<()> {
        if self.scans == 0 || self.test_scans == 0 {
            return Err(PyrganError::Config("experiment needs train and test scans".into()));
        }
        if self.slices_per_scan < 2 {
            return Err(PyrganError::Config(
                "experiment needs at least 2 slices per scan so both classes appear".into(),
            ));
        }
        Ok(())
    }
}

/// The whole run configuration; serializes to TOML and parses back exactly.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsCfg,
    pub train: TrainPlan,
    pub synth: SynthCfg,
    pub probes: ProbesCfg,
    pub phantom: PhantomSpec,
    pub experiment: ExperimentCfg,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan::full(17)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PyrganError::Config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file, or yields the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    PyrganError::Config(format!("reading {}: {e}", p.display()))
                })?;
                Self::parse(&text)
            }
        }
    }

    /// Largest seed a config file can hold: TOML integers are signed 64-bit.
    pub const MAX_SEED: u64 = i64::MAX as u64;

    /// Master seed override: every section's seed becomes a fixed offset of
    /// `seed`, so one flag makes the whole run reproducible. Seeds are masked
    /// to [`Self::MAX_SEED`] so the derived config always serializes.
    pub fn apply_seed(&mut self, seed: u64) {
        let off = |i: u64| seed.wrapping_add(i) & Self::MAX_SEED;
        self.train.seed = off(0);
        self.synth.seed = off(1);
        self.probes.segmenter.seed = off(2);
        self.probes.classifier.seed = off(3);
        self.experiment.seed = off(4);
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.phantom.validate()?;
        self.experiment.validate()?;
        for (name, seed) in [
            ("train", self.train.seed),
            ("loss feature", self.train.loss.feat_seed),
            ("synth", self.synth.seed),
            ("segmenter probe", self.probes.segmenter.seed),
            ("classifier probe", self.probes.classifier.seed),
            ("experiment", self.experiment.seed),
        ] {
            if seed > Self::MAX_SEED {
                return Err(PyrganError::Config(format!(
                    "{name} seed {seed} exceeds {}; config files store signed 64-bit integers",
                    Self::MAX_SEED
                )));
            }
        }
        if self.synth.count == 0 {
            return Err(PyrganError::Config("synthesis count must be positive".into()));
        }
        for (name, p) in [("segmenter", &self.probes.segmenter), ("classifier", &self.probes.classifier)] {
            if p.batch_size == 0 || p.epochs == 0 {
                return Err(PyrganError::Config(format!("{name} probe needs epochs and a batch")));
            }
            if !p.lr.is_finite() || p.lr < 0.0 {
                return Err(PyrganError::Config(format!("{name} probe learning rate {}", p.lr)));
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------- phantoms --

/// Texture family of a phantom corpus. The two families keep the same
/// anatomy but different intensity statistics, standing in for two imaging
/// modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Dark background, soft low-frequency internal texture.
    Smooth,
    /// Brighter base with high-frequency speckle and ridges.
    Grainy,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Smooth => "smooth",
            Modality::Grainy => "grainy",
        }
    }

    /// Scan-name prefix; keeps scan ids of the two families disjoint.
    pub fn scan_prefix(self) -> &'static str {
        match self {
            Modality::Smooth => "sm",
            Modality::Grainy => "gr",
        }
    }
}

impl FromStr for Modality {
    type Err = PyrganError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(Modality::Smooth),
            "grainy" => Ok(Modality::Grainy),
            other => Err(PyrganError::Config(format!(
                "unknown modality {other:?}; expected smooth or grainy"
            ))),
        }
    }
}

/// Per-scan anatomy: axis stretch and vertical drift shared by its slices.
struct ScanShape {
    ay: f64,
    ax: f64,
    drift: f64,
}

fn ellipse_hit(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> bool {
    let dy = (y - cy) / ry;
    let dx = (x - cx) / rx;
    dy * dy + dx * dx <= 1.0
}

/// Lung labels for one slice: two ellipses, mirrored around the midline.
fn lung_labels(size: usize, scan: &ScanShape, grng: &mut ChaCha8Rng) -> (Array2<u8>, [f64; 6]) {
    let s = size as f64;
    let ry = s * 0.30 * scan.ay * grng.random_range(0.93..=1.07);
    let rx = s * 0.15 * scan.ax * grng.random_range(0.93..=1.07);
    let cy = s * (0.52 + scan.drift);
    let (cxl, cxr) = (s * 0.30, s * 0.70);
    let mut labels = Array2::<u8>::zeros((size, size));
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            if ellipse_hit(y, x, cy, cxl, ry, rx) || ellipse_hit(y, x, cy, cxr, ry, rx) {
                labels[[r, c]] = 1;
            }
        }
    }
    (labels, [cy, cxl, cxr, ry, rx, s])
}

/// Plants infection foci strictly inside lung tissue: a focus center is drawn
/// inside one lung ellipse and only pixels already labeled lung flip to
/// infection, so foci can never leak into the background.
fn add_blobs(labels: &mut Array2<u8>, geom: &[f64; 6], count: usize, brng: &mut ChaCha8Rng) {
    let [cy, cxl, cxr, ry, rx, _] = *geom;
    let (h, w) = labels.dim();
    for _ in 0..count {
        let cx0 = if brng.random::<bool>() { cxl } else { cxr };
        let ang = brng.random_range(0.0..TAU);
        let rad = brng.random_range(0.0..=0.6);
        let by = cy + ang.sin() * rad * ry;
        let bx = cx0 + ang.cos() * rad * rx;
        let br = (brng.random_range(0.12..=0.40) * ry.min(rx)).max(1.2);
        for r in 0..h {
            for c in 0..w {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let (dy, dx) = (y - by, x - bx);
                if dy * dy + dx * dx <= br * br && labels[[r, c]] == 1 {
                    labels[[r, c]] = 2;
                }
            }
        }
    }
}

/// Focus count for a slice. The first slice of every scan stays clean and
/// the second always carries at least one focus, so each scan — and thus any
/// corpus built from whole scans — contains both classifier classes; later
/// slices draw freely.
fn blob_count(spec: &PhantomSpec, slice: usize, brng: &mut ChaCha8Rng) -> usize {
    if spec.max_blobs == 0 || slice == 0 {
        return 0;
    }
    if slice == 1 {
        return brng.random_range(1..=spec.max_blobs);
    }
    if brng.random::<f64>() < spec.blob_free_frac {
        0
    } else {
        brng.random_range(1..=spec.max_blobs)
    }
}

/// Renders one slice image from its labels in the requested texture family.
fn render_slice(
    labels: &Array2<u8>,
    modality: Modality,
    noise: f64,
    trng: &mut ChaCha8Rng,
) -> ImageTensor {
    let (h, w) = labels.dim();
    let s = h.max(w) as f64;
    let phase = trng.random_range(0.0..TAU);
    let mut img = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64, c as f64);
            let label = labels[[r, c]];
            let v = match modality {
                Modality::Smooth => {
                    let base = match label {
                        0 => -0.85,
                        1 => -0.15,
                        _ => 0.55,
                    };
                    let tex = if label > 0 {
                        0.10 * (TAU * (1.4 * x / s + 0.9 * y / s) + phase).sin()
                    } else {
                        0.0
                    };
                    base + tex + trng.random_range(-noise..=noise)
                }
                Modality::Grainy => {
                    let base = match label {
                        0 => -0.55,
                        1 => 0.05,
                        _ => 0.75,
                    };
                    let ridge = 0.08 * (TAU * 3.0 * y / s + phase).sin();
                    base + ridge + trng.random_range(-1.5 * noise..=1.5 * noise)
                }
            };
            img[[r, c]] = v;
        }
    }
    ImageTensor::new_clamped(img)
}

/// Generates a named phantom corpus: `scans` scans of `slices_per_scan`
/// slices each, named `{prefix}{scan:02}_{slice:03}` starting at
/// `first_scan`. The same arguments always produce the same pairs.
pub fn make_phantom_corpus(
    spec: &PhantomSpec,
    modality: Modality,
    first_scan: usize,
    scans: usize,
    slices_per_scan: usize,
    seed: u64,
) -> Result<Vec<(String, SamplePair)>> {
    spec.validate()?;
    if scans == 0 || slices_per_scan == 0 {
        return Err(PyrganError::Config("phantom corpus needs scans and slices".into()));
    }
    let mut out = Vec::with_capacity(scans * slices_per_scan);
    for sc in 0..scans {
        let scan_idx = first_scan + sc;
        let mut scan_rng = ChaCha8Rng::seed_from_u64(mix(seed, scan_idx as u64));
        let scan = ScanShape {
            ay: scan_rng.random_range(0.85..=1.15),
            ax: scan_rng.random_range(0.85..=1.15),
            drift: scan_rng.random_range(-0.03..=0.03),
        };
        for sl in 0..slices_per_scan {
            // Independent sub-streams per concern, so e.g. disabling foci
            // leaves anatomy and texture untouched.
            let mut grng = ChaCha8Rng::seed_from_u64(scan_rng.next_u64());
            let mut brng = ChaCha8Rng::seed_from_u64(scan_rng.next_u64());
            let mut trng = ChaCha8Rng::seed_from_u64(scan_rng.next_u64());
            let (mut labels, geom) = lung_labels(spec.size, &scan, &mut grng);
            let count = blob_count(spec, sl, &mut brng);
            add_blobs(&mut labels, &geom, count, &mut brng);
            let image = render_slice(&labels, modality, spec.noise, &mut trng);
            let pair = SamplePair::new(image, ConditionMask::new(labels)?)?;
            out.push((format!("{}{:02}_{:03}", modality.scan_prefix(), scan_idx, sl), pair));
        }
    }
    Ok(out)
}

// -------------------------------------------------------------- ingest --

/// Slices a labeled volume into axial training pairs named
/// `{scan_name}_{index:03}`, resized to `size`. Voxel labels collapse to the
/// three mask categories: 0 stays background, 1 and 2 become lung, 3 becomes
/// infection. Returns the number of slices written.
pub fn ingest_volume(volume: &Path, out: &Path, size: usize, scan_name: &str) -> Result<usize> {
    let vol = io::read_volume(volume)?;
    if vol.voxels.dim() != vol.labels.dim() {
        return Err(PyrganError::Shape(format!(
            "voxel grid {:?} does not match label grid {:?}",
            vol.voxels.dim(),
            vol.labels.dim()
        )));
    }
    if let Some(&bad) = vol.labels.iter().find(|&&l| l > 3) {
        return Err(PyrganError::Validation(format!(
            "volume label {bad} outside the expected 0..=3 range"
        )));
    }
    let (d, h, w) = vol.voxels.dim();
    std::fs::create_dir_all(out)?;
    for z in 0..d {
        let image = ImageTensor::new(Array2::from_shape_fn((h, w), |(r, c)| {
            vol.voxels[[z, r, c]] as f64 / 255.0 * 2.0 - 1.0
        }))?;
        let labels = Array2::from_shape_fn((h, w), |(r, c)| match vol.labels[[z, r, c]] {
            0 => 0,
            1 | 2 => 1,
            _ => 2,
        });
        let mask = ConditionMask::new(labels)?;
        let pair = SamplePair::new(image.resize(size, size), mask.resize(size, size))?;
        io::save_pair(out, &format!("{scan_name}_{z:03}"), &pair)?;
    }
    Ok(d)
}

// ---------------------------------------------------------- experiment --

/// The six training-set types, in reporting order.
pub const SET_ORDER: [&str; 6] = ["oc-ts", "sin-ts", "two-ts", "o-st", "rc-st", "if-st"];

fn is_synth_set(tag: &str) -> bool {
    matches!(tag, "o-st" | "rc-st" | "if-st")
}

/// Downstream result for one training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub set: String,
    pub corpus_size: usize,
    pub segmentation: SegEvalReport,
    /// Absent when the corpus holds a single class; see the note.
    pub classification: Option<ClassificationReport>,
    pub classification_note: Option<String>,
    /// Oracle-segmenter (lung, infection) mean DSC of the set's own images;
    /// synthesized sets only.
    pub oracle_quality: Option<(f64, f64)>,
}

/// Consolidated six-set comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub corpus_size: usize,
    pub test_size: usize,
    pub probe_arch: ProbeArch,
    pub sets: Vec<SetReport>,
}

impl ExperimentReport {
    pub fn set(&self, tag: &str) -> Option<&SetReport> {
        self.sets.iter().find(|s| s.set == tag)
    }

    /// Plain-text table of the whole comparison.
    pub fn text_table(&self) -> String {
        let fmt_ci = |m: &crate::eval::MetricsReport| {
            format!("{:.3} [{:.3},{:.3}]", m.mean, m.ci95.0, m.ci95.1)
        };
        let mut out = String::new();
        out.push_str(&format!(
            "training sets of {} pairs, evaluated on {} held-out slices\n",
            self.corpus_size, self.test_size
        ));
        out.push_str(&format!(
            "{:<7} {:>21} {:>21} {:>21} {:>21} {:>21} {:>13}\n",
            "set", "lung dsc", "infection dsc", "sensitivity", "specificity", "accuracy", "oracle l/i"
        ));
        let mut notes = Vec::new();
        for s in &self.sets {
            let (sens, spec, acc) = match &s.classification {
                Some(c) => (fmt_ci(&c.sensitivity), fmt_ci(&c.specificity), fmt_ci(&c.accuracy)),
                None => ("-".into(), "-".into(), "-".into()),
            };
            let quality = match s.oracle_quality {
                Some((l, i)) => format!("{l:.3}/{i:.3}"),
                None => "-".into(),
            };
            out.push_str(&format!(
                "{:<7} {:>21} {:>21} {:>21} {:>21} {:>21} {:>13}\n",
                s.set,
                fmt_ci(&s.segmentation.lung),
                fmt_ci(&s.segmentation.infection),
                sens,
                spec,
                acc,
                quality
            ));
            if let Some(note) = &s.classification_note {
                notes.push(format!("  {}: {note}", s.set));
            }
        }
        for n in notes {
            out.push_str(&n);
            out.push('\n');
        }
        out
    }
}

fn resized_corpus(mut corpus: EvalCorpus, size: usize) -> EvalCorpus {
    for s in &mut corpus.samples {
        if s.pair.image.shape() != (size, size) {
            s.pair = s.pair.resize(size, size);
        }
    }
    corpus
}

fn corpus_has_both_classes(corpus: &EvalCorpus) -> bool {
    let positives = corpus.samples.iter().filter(|s| infection_label(&s.pair.mask)).count();
    positives > 0 && positives < corpus.len()
}

/// Trains both probes on `train` and reports their test metrics. Single-class
/// corpora skip the classifier with an explanatory note instead of failing.
pub fn evaluate_corpus(
    name: &str,
    train: &EvalCorpus,
    test: &EvalCorpus,
    probes: &ProbesCfg,
) -> Result<SetReport> {
    if test.is_empty() {
        return Err(PyrganError::Validation("empty test corpus".into()));
    }
    let (th, tw) = test.samples[0].pair.image.shape();
    if th != tw {
        return Err(PyrganError::Shape("probes expect square test images".into()));
    }
    let train_r = resized_corpus(train.clone(), th);
    let (seg, _) = train_segmenter(&train_r, probes.arch, &probes.segmenter)?;
    let segmentation = evaluate_segmenter(&seg, test)?;
    let (classification, classification_note) = if corpus_has_both_classes(&train_r) {
        let (cls, _) = train_classifier(&train_r, probes.arch, &probes.classifier)?;
        (Some(evaluate_classifier(&cls, test)?), None)
    } else {
        (None, Some("corpus holds a single class; classifier probe not trainable".to_string()))
    };
    Ok(SetReport {
        set: name.to_string(),
        corpus_size: train.len(),
        segmentation,
        classification,
        classification_note,
        oracle_quality: None,
    })
}

/// Marker pinning an output directory to one experiment's data parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DataMarker {
    seed: u64,
    scans: usize,
    slices_per_scan: usize,
    test_scans: usize,
    size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReplicaManifest {
    mode: String,
    size: usize,
    sources: Vec<String>,
}

/// Loads all pairs from one or more set directories, resized for probes.
fn load_set(dirs: &[PathBuf], size: usize) -> Result<EvalCorpus> {
    let mut samples = Vec::new();
    for dir in dirs {
        samples.extend(EvalCorpus::from_dir(dir, Split::Train)?.samples);
    }
    Ok(resized_corpus(EvalCorpus::new(samples, Split::Train), size))
}

/// Runs the whole comparison: phantom data for two modalities, one generator
/// pyramid per modality, the three synthesized corpora, and both probes on
/// each of the six equally sized training sets. Every stage persists its
/// outputs under `out` and is skipped when already present, so reruns resume
/// and a finished run reproduces its report exactly.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let ex = &cfg.experiment;
    let train_dir = out.join("data").join("train");
    let test_dir = out.join("data").join("test");
    let marker_path = out.join("data").join("corpus.json");
    let marker = DataMarker {
        seed: ex.seed,
        scans: ex.scans,
        slices_per_scan: ex.slices_per_scan,
        test_scans: ex.test_scans,
        size: cfg.phantom.size,
    };

    // Stage 1: phantom data, half per modality, disjoint test scans.
    if marker_path.exists() {
        let found: DataMarker = io::load_json(&marker_path)?;
        if found != marker {
            return Err(PyrganError::Config(format!(
                "{} already holds a different experiment's data",
                out.display()
            )));
        }
    } else {
        std::fs::create_dir_all(&train_dir)?;
        std::fs::create_dir_all(&test_dir)?;
        for (i, modality) in [Modality::Smooth, Modality::Grainy].into_iter().enumerate() {
            let train = make_phantom_corpus(
                &cfg.phantom,
                modality,
                0,
                ex.scans,
                ex.slices_per_scan,
                mix(ex.seed, i as u64),
            )?;
            for (name, pair) in &train {
                io::save_pair(&train_dir, name, pair)?;
            }
            let test = make_phantom_corpus(
                &cfg.phantom,
                modality,
                ex.scans,
                ex.test_scans,
                ex.slices_per_scan,
                mix(ex.seed, 100 + i as u64),
            )?;
            for (name, pair) in &test {
                io::save_pair(&test_dir, name, pair)?;
            }
        }
        io::save_json(&marker_path, &marker)?;
    }

    let real_train = EvalCorpus::from_dir(&train_dir, Split::Train)?;
    let real_test = EvalCorpus::from_dir(&test_dir, Split::Test)?;
    EvalCorpus::check_disjoint(&real_train, &real_test)?;
    let corpus_size = real_train.len();

    // Stage 2: one generator pyramid per modality, seeded by the first
    // infected slice of that modality.
    let gan_size = cfg.train.schedule()?.last_size();
    let pick = |prefix: &str| -> Result<(String, SamplePair)> {
        real_train
            .samples
            .iter()
            .find(|s| s.scan_id.starts_with(prefix) && infection_label(&s.pair.mask))
            .map(|s| (s.scan_id.clone(), s.pair.resize(gan_size, gan_size)))
            .ok_or_else(|| {
                PyrganError::Validation(format!("no infected {prefix} slice to seed a generator"))
            })
    };
    let (source_a, sample_a) = pick(Modality::Smooth.scan_prefix())?;
    let (source_b, sample_b) = pick(Modality::Grainy.scan_prefix())?;

    let plan_a = cfg.train.clone();
    let mut plan_b = cfg.train.clone();
    plan_b.seed = cfg.train.seed.wrapping_add(1);
    let stack_a = train_full(&sample_a, &plan_a, Some(&out.join("gan").join("a")))?;
    let stack_b = train_full(&sample_b, &plan_b, Some(&out.join("gan").join("b")))?;

    // Stage 3: the three synthesized corpora over the real training masks,
    // each the size of the real corpus. Plain and randomized-condition sets
    // route each mask through its own modality's stack; the fusion set blends
    // both stacks on every mask.
    let sets_dir = out.join("sets");
    let mut masks_sm = Vec::new();
    let mut masks_gr = Vec::new();
    let mut masks_all = Vec::new();
    for name in io::list_pairs(&train_dir)? {
        let mask = io::read_mask_png(&train_dir.join(format!("{name}_mask.png")))?
            .resize(gan_size, gan_size);
        masks_all.push((name.clone(), mask.clone()));
        if name.starts_with(Modality::Smooth.scan_prefix()) {
            masks_sm.push((name, mask));
        } else {
            masks_gr.push((name, mask));
        }
    }
    let gen_half = |mode: CorpusMode,
                    sub: &str,
                    stack: &GeneratorStack,
                    masks: &[(String, ConditionMask)],
                    salt: u64|
     -> Result<()> {
        let dir = sets_dir.join(mode.tag()).join(sub);
        if dir.join("manifest.json").exists() {
            return Ok(());
        }
        generate_corpus(stack, None, masks, mode, mix(cfg.synth.seed, salt), &dir)?;
        Ok(())
    };
    gen_half(CorpusMode::OSt, "a", &stack_a, &masks_sm, 1)?;
    gen_half(CorpusMode::OSt, "b", &stack_b, &masks_gr, 2)?;
    gen_half(CorpusMode::RcSt, "a", &stack_a, &masks_sm, 3)?;
    gen_half(CorpusMode::RcSt, "b", &stack_b, &masks_gr, 4)?;
    let if_dir = sets_dir.join("if-st");
    if !if_dir.join("manifest.json").exists() {
        generate_corpus(&stack_a, Some(&stack_b), &masks_all, CorpusMode::IfSt, mix(cfg.synth.seed, 5), &if_dir)?;
    }

    // Stage 4: the two replicated real sets, padded to the corpus size.
    let replicate = |dir: &Path, tag: &str, sources: &[(&str, &SamplePair)]| -> Result<()> {
        if dir.join("manifest.json").exists() {
            return Ok(());
        }
        std::fs::create_dir_all(dir)?;
        for i in 0..corpus_size {
            let (_, pair) = sources[i % sources.len()];
            io::save_pair(dir, &format!("{}{:02}_{:03}", tag, i % sources.len(), i), pair)?;
        }
        let manifest = ReplicaManifest {
            mode: tag.to_string(),
            size: corpus_size,
            sources: sources.iter().map(|(n, _)| n.to_string()).collect(),
        };
        io::save_json(&dir.join("manifest.json"), &manifest)
    };
    replicate(&sets_dir.join("sin-ts"), "sin", &[(&source_a, &sample_a)])?;
    replicate(&sets_dir.join("two-ts"), "two", &[(&source_a, &sample_a), (&source_b, &sample_b)])?;

    // Stage 5: probes per set, against the held-out real test slices.
    let probe_size = cfg.phantom.size;
    let test_p = resized_corpus(real_test, probe_size);
    let probes_dir = out.join("probes");
    std::fs::create_dir_all(&probes_dir)?;

    let set_dirs = |tag: &str| -> Vec<PathBuf> {
        match tag {
            "oc-ts" => vec![train_dir.clone()],
            "o-st" | "rc-st" => vec![sets_dir.join(tag).join("a"), sets_dir.join(tag).join("b")],
            other => vec![sets_dir.join(other)],
        }
    };
    let need_oracle = SET_ORDER
        .iter()
        .any(|t| is_synth_set(t) && !probes_dir.join(format!("{t}.json")).exists());
    let oracle = if need_oracle {
        let oc = load_set(&set_dirs("oc-ts"), probe_size)?;
        Some(train_segmenter(&oc, cfg.probes.arch, &cfg.probes.segmenter)?.0)
    } else {
        None
    };

    let mut sets = Vec::with_capacity(SET_ORDER.len());
    for tag in SET_ORDER {
        let report_path = probes_dir.join(format!("{tag}.json"));
        if report_path.exists() {
            sets.push(io::load_json(&report_path)?);
            continue;
        }
        let corpus = load_set(&set_dirs(tag), probe_size)?;
        if corpus.len() != corpus_size {
            return Err(PyrganError::State(format!(
                "{tag} holds {} pairs, expected {corpus_size}",
                corpus.len()
            )));
        }
        let mut report = evaluate_corpus(tag, &corpus, &test_p, &cfg.probes)?;
        if is_synth_set(tag) {
            let oracle = oracle.as_ref().expect("oracle trained when synth reports are missing");
            report.oracle_quality = Some(image_quality_score(&corpus, oracle)?);
        }
        io::save_json(&report_path, &report)?;
        sets.push(report);
    }

    let report = ExperimentReport {
        corpus_size,
        test_size: test_p.len(),
        probe_arch: cfg.probes.arch,
        sets,
    };
    io::save_json(&out.join("report.json"), &report)?;
    std::fs::write(out.join("report.txt"), report.text_table())?;
    Ok(report)
}

// ------------------------------------------------------------- augment --

/// Renders a review grid of augmentation draws: strong-policy images and
/// masks on the top two rows, weak-policy on the bottom two, one column per
/// draw.
pub fn dump_augment(pair: &SamplePair, draws: usize, seed: u64, out_png: &Path) -> Result<()> {
    if draws == 0 {
        return Err(PyrganError::Config("need at least one draw".into()));
    }
    let (h, w) = pair.image.shape();
    let mut grid = Array2::<f64>::from_elem((4 * h, draws * w), -1.0);
    let mut place = |row: usize, col: usize, tile: &ImageTensor| {
        for y in 0..h {
            for x in 0..w {
                grid[[row * h + y, col * w + x]] = tile.0[[y, x]];
            }
        }
    };
    for (pi, policy) in [AugmentPolicy::strong(1.0), AugmentPolicy::weak()].iter().enumerate() {
        for d in 0..draws {
            let draw = sample_draw(policy, (h, w), mix(seed, (pi * draws + d) as u64))?;
            let (img, mask) = apply_draw(&draw, &pair.image, &pair.mask)?;
            place(2 * pi, d, &img);
            place(2 * pi + 1, d, &mask.encode());
        }
    }
    if let Some(parent) = out_png.parent() {
        std::fs::create_dir_all(parent)?;
    }
    io::write_image_png(out_png, &ImageTensor::new_clamped(grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn default_config_round_trips_exactly() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);

        // A thoroughly mutated config still survives the trip.
        let mut cfg = RunConfig::default();
        cfg.train = TrainPlan::desk(&[16, 24], 7, 3);
        cfg.train.combine = crate::nets::CombineMode::Add;
        cfg.train.final_scale_batch = Some(3);
        cfg.train.sa_policy.intensity = 0.7;
        cfg.train.loss.wppl_weights = [0.2, 0.4, 1.5];
        cfg.synth.count = 5;
        cfg.probes.arch = ProbeArch::Heavy;
        cfg.probes.segmenter.ce_weights = [0.3, 1.0, 9.0];
        cfg.phantom.max_blobs = 0;
        cfg.experiment.slices_per_scan = 9;
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(PyrganError::Config(_))));
        assert!(matches!(
            RunConfig::parse("[phantom]\nsize = \"big\""),
            Err(PyrganError::Config(_))
        ));
        // Typos inside sections fail loudly instead of being ignored.
        assert!(matches!(
            RunConfig::parse("[synth]\nseed = 1\ncount = 2\nbogus = 3"),
            Err(PyrganError::Config(_))
        ));

        let mut cfg = RunConfig::default();
        cfg.train.dropout_rate = 1.5;
        assert!(matches!(cfg.validate(), Err(PyrganError::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.experiment.slices_per_scan = 1;
        assert!(matches!(cfg.validate(), Err(PyrganError::Config(_))));
    }

    #[test]
    fn master_seed_reaches_every_section() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed(1000);
        let seeds = [
            cfg.train.seed,
            cfg.synth.seed,
            cfg.probes.segmenter.seed,
            cfg.probes.classifier.seed,
            cfg.experiment.seed,
        ];
        let mut unique = seeds.to_vec();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), seeds.len());
        assert!(seeds.iter().all(|&s| (1000..1005).contains(&s)));
    }

    fn tiny_spec() -> PhantomSpec {
        PhantomSpec { size: 24, max_blobs: 3, blob_free_frac: 0.3, noise: 0.05 }
    }

    #[test]
    fn phantom_corpus_is_deterministic_and_scan_grouped() {
        let spec = tiny_spec();
        let a = make_phantom_corpus(&spec, Modality::Smooth, 0, 2, 3, 7).unwrap();
        let b = make_phantom_corpus(&spec, Modality::Smooth, 0, 2, 3, 7).unwrap();
        assert_eq!(a.len(), 6);
        for ((na, pa), (nb, pb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(pa.image.0, pb.image.0);
            assert_eq!(pa.mask, pb.mask);
        }
        assert_eq!(a[0].0, "sm00_000");
        assert_eq!(a[5].0, "sm01_002");
        // Different seed moves the anatomy.
        let c = make_phantom_corpus(&spec, Modality::Smooth, 0, 2, 3, 8).unwrap();
        assert_ne!(a[0].1.image.0, c[0].1.image.0);
        // Pixels stay in range and labels stay in the alphabet.
        for (_, p) in &a {
            assert!(p.image.0.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(p.mask.0.iter().all(|&l| l <= 2));
        }
    }

    #[test]
    fn every_scan_contains_both_classes() {
        let spec = tiny_spec();
        for modality in [Modality::Smooth, Modality::Grainy] {
            let corpus = make_phantom_corpus(&spec, modality, 0, 3, 2, 11).unwrap();
            for scan in 0..3 {
                let slices: Vec<_> = corpus
                    .iter()
                    .filter(|(n, _)| n.starts_with(&format!("{}{:02}", modality.scan_prefix(), scan)))
                    .collect();
                assert!(slices.iter().any(|(_, p)| infection_label(&p.mask)));
                assert!(slices.iter().any(|(_, p)| !infection_label(&p.mask)));
            }
        }
    }

    #[test]
    fn infection_foci_only_replace_lung_pixels() {
        let spec = tiny_spec();
        let clean_spec = PhantomSpec { max_blobs: 0, ..spec.clone() };
        // Anatomy and texture streams are independent of the focus stream, so
        // the only difference a focus can make is lung → infection.
        let with = make_phantom_corpus(&spec, Modality::Grainy, 0, 2, 4, 5).unwrap();
        let without = make_phantom_corpus(&clean_spec, Modality::Grainy, 0, 2, 4, 5).unwrap();
        let mut saw_infection = false;
        for ((_, a), (_, b)) in with.iter().zip(&without) {
            assert!(b.mask.0.iter().all(|&l| l != 2), "clean corpus must stay clean");
            for (&la, &lb) in a.mask.0.iter().zip(b.mask.0.iter()) {
                if la != lb {
                    assert_eq!((lb, la), (1, 2), "foci may only overwrite lung tissue");
                    saw_infection = true;
                }
            }
        }
        assert!(saw_infection, "expected at least one focus in 8 slices");
    }

    #[test]
    fn modalities_have_distinct_intensity_statistics() {
        let spec = tiny_spec();
        let hist = |modality| {
            let corpus = make_phantom_corpus(&spec, modality, 0, 2, 3, 13).unwrap();
            let mut h = [0f64; 256];
            let mut n = 0f64;
            for (_, p) in &corpus {
                for &px in p.image.to_pixels().iter() {
                    h[px as usize] += 1.0;
                    n += 1.0;
                }
            }
            h.iter().map(|c| c / n).collect::<Vec<_>>()
        };
        let hs = hist(Modality::Smooth);
        let hg = hist(Modality::Grainy);
        let l1: f64 = hs.iter().zip(&hg).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 > 0.1, "modality histograms too close: L1 = {l1}");
    }

    #[test]
    fn ingest_maps_labels_and_slices_volumes() {
        let dir = tempfile::tempdir().unwrap();
        let (d, h, w) = (3, 20, 20);
        let voxels = Array3::from_shape_fn((d, h, w), |(z, r, c)| ((z * 40 + r * 5 + c) % 256) as u8);
        let labels = Array3::from_shape_fn((d, h, w), |(z, r, c)| {
            // Nested squares exercise every input label.
            if z == 0 {
                0
            } else if r > 4 && r < 15 && c > 4 && c < 15 {
                if r > 8 && r < 12 && c > 8 && c < 12 {
                    3
                } else if r < 10 {
                    1
                } else {
                    2
                }
            } else {
                0
            }
        });
        let vol_path = dir.path().join("scan.pvol");
        io::write_volume(&vol_path, &io::Volume { voxels, labels }).unwrap();

        let out = dir.path().join("pairs");
        let n = ingest_volume(&vol_path, &out, 20, "case7").unwrap();
        assert_eq!(n, 3);
        assert_eq!(io::list_pairs(&out).unwrap(), vec!["case7_000", "case7_001", "case7_002"]);
        let pair = io::load_pair(&out, "case7_001").unwrap();
        // Voxel labels 1 and 2 both collapse to lung; 3 becomes infection.
        assert!(pair.mask.0.iter().any(|&l| l == 1));
        assert!(pair.mask.0.iter().any(|&l| l == 2));
        assert!(pair.mask.0.iter().all(|&l| l <= 2));

        // Out-of-alphabet labels are rejected.
        let bad = io::Volume {
            voxels: Array3::zeros((1, 8, 8)),
            labels: Array3::from_elem((1, 8, 8), 4),
        };
        let bad_path = dir.path().join("bad.pvol");
        io::write_volume(&bad_path, &bad).unwrap();
        assert!(matches!(
            ingest_volume(&bad_path, &out, 8, "bad"),
            Err(PyrganError::Validation(_))
        ));
    }

    #[test]
    fn augment_grid_has_expected_geometry() {
        let spec = tiny_spec();
        let corpus = make_phantom_corpus(&spec, Modality::Smooth, 0, 1, 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        dump_augment(&corpus[1].1, 5, 42, &path).unwrap();
        let img = io::read_image_png(&path).unwrap();
        assert_eq!(img.shape(), (4 * spec.size, 5 * spec.size));
    }
}
