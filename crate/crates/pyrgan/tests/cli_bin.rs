//! Drives the installed binary the way a user would: exit codes for each
//! failure class, then a full phantom → train → synthesize → evaluate
//! pipeline at desk scale, including a bitwise rerun of synthesis.

use pyrgan::cli::{PhantomSpec, RunConfig};
use pyrgan::trainer::TrainPlan;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_pyrgan");

fn pyrgan(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary launches")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Desk-scale config file for pipeline runs: one 16 px scale, a few epochs.
fn write_micro_config(dir: &Path) -> String {
    let mut cfg = RunConfig::default();
    cfg.train = TrainPlan::desk(&[16], 3, 0);
    cfg.phantom = PhantomSpec { size: 16, max_blobs: 2, blob_free_frac: 0.3, noise: 0.05 };
    cfg.synth.count = 3;
    for probe in [&mut cfg.probes.segmenter, &mut cfg.probes.classifier] {
        probe.epochs = 2;
        probe.lr_decay_start = 1;
        probe.lr = 1e-3;
    }
    cfg.apply_seed(61);
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> =
        std::fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    entries
        .into_iter()
        .filter(|p| p.is_file())
        .map(|p| {
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = pyrgan(dir.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for cmd in
        ["ingest", "phantom", "train", "synthesize", "evaluate", "config", "experiment",
            "dump-augment"]
    {
        assert!(text.contains(cmd), "--help misses {cmd}");
    }
}

#[test]
fn config_dump_round_trips_through_itself() {
    let dir = tempfile::tempdir().unwrap();
    let out = pyrgan(dir.path(), &["--seed", "9", "config"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let dumped = stdout(&out);
    std::fs::write(dir.path().join("dumped.toml"), &dumped).unwrap();

    // Feeding the dump back in reproduces it exactly.
    let again = pyrgan(dir.path(), &["--config", "dumped.toml", "config"]);
    assert_eq!(code(&again), 0, "stderr: {}", stderr(&again));
    assert_eq!(stdout(&again), dumped);
}

#[test]
fn failure_classes_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // Unparseable config file.
    std::fs::write(dir.path().join("broken.toml"), "train = \"nope\"").unwrap();
    let out = pyrgan(dir.path(), &["--config", "broken.toml", "phantom"]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).starts_with("error:"));

    // Misspelled key: rejected, not ignored.
    std::fs::write(dir.path().join("typo.toml"), "[synth]\nseed = 1\ncount = 2\nmoar = 3\n")
        .unwrap();
    let out = pyrgan(dir.path(), &["--config", "typo.toml", "phantom"]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));

    // Unknown corpus mode is a usage error even before any state loads.
    let out = pyrgan(dir.path(), &["synthesize", "--stack", "x", "--masks", "y", "--mode", "bogus"]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));

    // Missing sample and missing checkpoints are state errors.
    let out = pyrgan(dir.path(), &["train", "no_such_pair"]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    let out = pyrgan(dir.path(), &["synthesize", "--stack", "absent", "--masks", "y"]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));

    // An unknown modality name is a usage error too.
    let out = pyrgan(dir.path(), &["phantom", "--modality", "marble"]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn pipeline_runs_end_to_end_and_synthesis_reruns_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = write_micro_config(root);
    let base: Vec<String> = vec!["--config".into(), config];
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = base.iter().map(String::as_str).collect();
        args.extend_from_slice(extra);
        let out = pyrgan(root, &args);
        assert_eq!(code(&out), 0, "args {extra:?}\nstderr: {}", stderr(&out));
        out
    };

    // Training data: one scan of two slices, then a held-out scan.
    run(&["--out", "data", "phantom", "--modality", "grainy", "--scans", "1", "--slices", "2"]);
    run(&[
        "--out", "test", "phantom", "--modality", "grainy", "--scans", "1", "--slices", "2",
        "--first-scan", "1",
    ]);
    for name in ["gr00_000", "gr00_001"] {
        assert!(root.join("data").join(format!("{name}_img.png")).exists());
        assert!(root.join("data").join(format!("{name}_mask.png")).exists());
    }
    assert!(root.join("test").join("gr01_000_img.png").exists());

    // Train the pyramid on the infected slice.
    let out = run(&["--out", "run", "train", "data/gr00_001"]);
    assert!(stdout(&out).contains("trained"));
    assert!(root.join("run").join("ckpt").join("stack.json").exists());
    assert!(root.join("run").join("logs").join("losses.csv").exists());

    // Synthesize twice with the same seed: corpora match byte for byte.
    let synth = |out_dir: &str| {
        run(&["--out", out_dir, "synthesize", "--stack", "run", "--masks", "data", "--mode",
            "rc-st"])
    };
    synth("syn1");
    synth("syn2");
    let bytes1 = dir_bytes(&root.join("syn1"));
    assert_eq!(bytes1, dir_bytes(&root.join("syn2")));
    assert!(root.join("syn1").join("manifest.json").exists());
    let images = bytes1.iter().filter(|(n, _)| n.ends_with("_img.png")).count();
    assert_eq!(images, 3, "synth count from config");

    // A different master seed actually changes the samples.
    run(&["--seed", "62", "--out", "syn3", "synthesize", "--stack", "run", "--masks", "data",
        "--mode", "rc-st"]);
    assert_ne!(bytes1, dir_bytes(&root.join("syn3")));

    // Review grid for the augmentation draws.
    run(&["--out", "aug", "dump-augment", "data/gr00_001", "--draws", "3"]);
    assert!(root.join("aug").join("augment.png").exists());

    // Probe the synthesized corpus against the held-out scan.
    let out = run(&["--out", "eval", "evaluate", "--train-dir", "syn1", "--test-dir", "test"]);
    let text = stdout(&out);
    assert!(text.contains("lung dsc"), "stdout: {text}");
    assert!(root.join("eval").join("eval.json").exists());

    // Overlapping scan ids are refused as inconsistent state.
    let out = pyrgan(
        root,
        &["--config", "run.toml", "evaluate", "--train-dir", "data", "--test-dir", "data"],
    );
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
}
