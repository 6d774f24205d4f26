//! Command-line front end: ingest data, train the generator pyramid,
//! synthesize corpora, probe them downstream, or run the full six-set
//! comparison.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for inconsistent
//! or missing state, 4 when training diverges.

use clap::{Parser, Subcommand};
use pyrgan::cli::{
    dump_augment, evaluate_corpus, ingest_volume, make_phantom_corpus, run_experiment, Modality,
    RunConfig,
};
use pyrgan::core::{ConditionMask, SamplePair};
use pyrgan::eval::{EvalCorpus, Split};
use pyrgan::io;
use pyrgan::synth::{generate_corpus, CorpusMode};
use pyrgan::trainer::{load_stack, train_full};
use pyrgan::{PyrganError, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pyrgan",
    version,
    about = "Single-pair multi-scale GAN: train, synthesize, and probe downstream"
)]
struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed; overrides every per-section seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config's path.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Slice a labeled volume into resized, relabeled training pairs.
    Ingest {
        /// Volume file holding voxels and labels.
        volume: PathBuf,
        /// Scan name used as the pair-name prefix.
        #[arg(long, default_value = "scan")]
        scan: String,
        /// Slice edge in pixels; defaults to the configured phantom size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Generate a synthetic two-lung phantom corpus.
    Phantom {
        /// Texture family: smooth or grainy.
        #[arg(long, default_value = "smooth")]
        modality: String,
        /// Number of scans.
        #[arg(long, default_value_t = 1)]
        scans: usize,
        /// Slices per scan.
        #[arg(long, default_value_t = 4)]
        slices: usize,
        /// Index of the first scan, for appending to an existing corpus.
        #[arg(long, default_value_t = 0)]
        first_scan: usize,
    },
    /// Train the full generator pyramid on one annotated pair.
    Train {
        /// Pair stem: `DIR/name` loads `DIR/name_img.png` + `DIR/name_mask.png`.
        sample: PathBuf,
    },
    /// Synthesize a corpus from a trained pyramid.
    Synthesize {
        /// Directory holding a trained pyramid.
        #[arg(long, value_name = "DIR")]
        stack: PathBuf,
        /// Mask file, or directory of `*_mask.png` files, to condition on.
        #[arg(long, value_name = "PATH")]
        masks: PathBuf,
        /// Corpus mode: o-st, rc-st, or if-st.
        #[arg(long, default_value = "o-st")]
        mode: String,
        /// Second pyramid, required by if-st fusion.
        #[arg(long, value_name = "DIR")]
        stack_b: Option<PathBuf>,
        /// Number of samples; defaults to the configured count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train segmentation and classification probes on one corpus and score
    /// them on held-out pairs.
    Evaluate {
        /// Training pairs directory.
        #[arg(long, value_name = "DIR")]
        train_dir: PathBuf,
        /// Held-out pairs directory; scan ids must not overlap the training ones.
        #[arg(long, value_name = "DIR")]
        test_dir: PathBuf,
    },
    /// Print the effective configuration as TOML, after applying `--config`
    /// and `--seed`. Pipe to a file to get a complete, editable run config.
    Config,
    /// Run the six-training-set comparison end to end, resuming from
    /// whatever stages already exist in the output directory.
    Experiment,
    /// Render a review grid of strong and weak augmentation draws.
    DumpAugment {
        /// Pair stem, as for `train`.
        sample: PathBuf,
        /// Columns in the grid.
        #[arg(long, default_value_t = 6)]
        draws: usize,
    },
}

/// Loads a pair from a `DIR/name` stem, tolerating a full `_img.png` path.
fn load_stem(path: &Path) -> Result<SamplePair> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| PyrganError::Config(format!("bad sample path {}", path.display())))?;
    let stem = name.strip_suffix("_img.png").unwrap_or(name);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    io::load_pair(dir.unwrap_or(Path::new(".")), stem)
}

/// Accepts either a training output directory or its `ckpt` subdirectory.
fn stack_dir(path: PathBuf) -> PathBuf {
    if !path.join("stack.json").exists() && path.join("ckpt").join("stack.json").exists() {
        path.join("ckpt")
    } else {
        path
    }
}

fn parse_mode(text: &str) -> Result<CorpusMode> {
    match text {
        "o-st" => Ok(CorpusMode::OSt),
        "rc-st" => Ok(CorpusMode::RcSt),
        "if-st" => Ok(CorpusMode::IfSt),
        other => Err(PyrganError::Config(format!(
            "unknown corpus mode {other:?}; expected o-st, rc-st, or if-st"
        ))),
    }
}

/// Builds the conditioning list: a single mask file or a directory of pairs,
/// cycled up to `count` masks at the generator's resolution.
fn masks_from_path(path: &Path, count: usize, size: usize) -> Result<Vec<(String, ConditionMask)>> {
    let mut base = Vec::new();
    if path.is_dir() {
        for name in io::list_pairs(path)? {
            base.push(io::read_mask_png(&path.join(format!("{name}_mask.png")))?);
        }
        if base.is_empty() {
            return Err(PyrganError::Config(format!(
                "no *_mask.png pairs under {}",
                path.display()
            )));
        }
    } else {
        base.push(io::read_mask_png(path)?);
    }
    Ok((0..count)
        .map(|i| (format!("syn{i:04}"), base[i % base.len()].resize(size, size)))
        .collect())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    cfg.validate()?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.out));

    match cli.cmd {
        Cmd::Ingest { volume, scan, size } => {
            let size = size.unwrap_or(cfg.phantom.size);
            let n = ingest_volume(&volume, &out, size, &scan)?;
            println!("ingested {n} slices into {}", out.display());
        }
        Cmd::Phantom { modality, scans, slices, first_scan } => {
            let modality: Modality = modality.parse()?;
            let corpus =
                make_phantom_corpus(&cfg.phantom, modality, first_scan, scans, slices, cfg.experiment.seed)?;
            std::fs::create_dir_all(&out)?;
            for (name, pair) in &corpus {
                io::save_pair(&out, name, pair)?;
            }
            println!("wrote {} {} phantom pairs to {}", corpus.len(), modality.tag(), out.display());
        }
        Cmd::Train { sample } => {
            let size = cfg.train.schedule()?.last_size();
            let pair = load_stem(&sample)?.resize(size, size);
            let stack = train_full(&pair, &cfg.train, Some(&out))?;
            println!(
                "trained {} scales up to {} px into {}",
                stack.scale_count(),
                stack.final_size(),
                out.display()
            );
        }
        Cmd::Synthesize { stack, masks, mode, stack_b, count } => {
            let mode = parse_mode(&mode)?;
            let stack = load_stack(&stack_dir(stack))?;
            let stack_b = stack_b.map(|p| load_stack(&stack_dir(p))).transpose()?;
            let count = count.unwrap_or(cfg.synth.count);
            let masks = masks_from_path(&masks, count, stack.final_size())?;
            let manifest = generate_corpus(&stack, stack_b.as_ref(), &masks, mode, cfg.synth.seed, &out)?;
            println!(
                "synthesized {} {} samples into {}",
                manifest.samples.len(),
                mode.tag(),
                out.display()
            );
        }
        Cmd::Evaluate { train_dir, test_dir } => {
            let train = EvalCorpus::from_dir(&train_dir, Split::Train)?;
            let test = EvalCorpus::from_dir(&test_dir, Split::Test)?;
            EvalCorpus::check_disjoint(&train, &test)?;
            let report = evaluate_corpus("corpus", &train, &test, &cfg.probes)?;
            std::fs::create_dir_all(&out)?;
            io::save_json(&out.join("eval.json"), &report)?;
            let seg = &report.segmentation;
            println!(
                "lung dsc {:.3} [{:.3},{:.3}]  infection dsc {:.3} [{:.3},{:.3}]",
                seg.lung.mean,
                seg.lung.ci95.0,
                seg.lung.ci95.1,
                seg.infection.mean,
                seg.infection.ci95.0,
                seg.infection.ci95.1
            );
            match (&report.classification, &report.classification_note) {
                (Some(c), _) => println!(
                    "sensitivity {:.3}  specificity {:.3}  accuracy {:.3}",
                    c.sensitivity.mean, c.specificity.mean, c.accuracy.mean
                ),
                (None, Some(note)) => println!("classifier skipped: {note}"),
                (None, None) => {}
            }
            println!("report saved to {}", out.join("eval.json").display());
        }
        Cmd::Config => {
            print!("{}", cfg.to_toml());
        }
        Cmd::Experiment => {
            let report = run_experiment(&cfg, &out)?;
            print!("{}", report.text_table());
            println!("report saved to {}", out.join("report.json").display());
        }
        Cmd::DumpAugment { sample, draws } => {
            let pair = load_stem(&sample)?;
            let png = out.join("augment.png");
            dump_augment(&pair, draws, cfg.synth.seed, &png)?;
            println!("wrote {}", png.display());
        }
    }
    Ok(())
}

fn exit_code(err: &PyrganError) -> u8 {
    match err {
        PyrganError::Config(_) => 2,
        PyrganError::Divergence(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
