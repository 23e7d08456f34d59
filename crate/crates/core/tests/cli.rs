//! Black-box checks of the command-line binary: artifact layout, cross-command
//! consumption, reproducibility, and the documented exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_debias-cl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary launches")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A configuration small enough that the whole pipeline runs in well under a
/// second, with every cross-field constraint satisfied.
const TINY_INI: &str = "\
[run]
name = tiny
window = 2

[data]
n_sessions = 8
samples_per_session = 30
input_dim = 12
embed_dim = 5

[protocol]
n_init = 4
n_step = 2

[train]
epochs = 2
batch_size = 8

[encoder]
input_dim = 12
hidden_dim = 16
tap_count = 2
output_dim = 5

[retrieval]
n_way = 6
trials = 2
";

#[test]
fn generated_datasets_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ini = dir.path().join("tiny.ini");
    std::fs::write(&ini, TINY_INI).unwrap();
    let ini = ini.to_str().unwrap();

    let mut paths = Vec::new();
    for (sub, seed) in [("a", "9"), ("b", "9"), ("c", "10")] {
        let out_dir = dir.path().join(sub);
        let out = run(&[
            "gen-data",
            "--config",
            ini,
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert!(out.status.success(), "gen-data failed: {}", stderr(&out));
        let data = out_dir.join("dataset.vbcl");
        assert!(data.is_file(), "dataset file written");
        assert!(out_dir.join("dataset_summary.json").is_file());
        paths.push(std::fs::read(&data).unwrap());
    }
    assert_eq!(paths[0], paths[1], "same seed, byte-identical file");
    assert_ne!(paths[0], paths[2], "different seed, different file");
}

#[test]
fn pipeline_artifacts_feed_the_next_command() {
    let dir = tempfile::tempdir().unwrap();
    let ini = dir.path().join("tiny.ini");
    std::fs::write(&ini, TINY_INI).unwrap();
    let ini = ini.to_str().unwrap();
    let run_dir = dir.path().join("run");
    let run_dir_s = run_dir.to_str().unwrap().to_owned();

    // train leaves a self-describing run directory
    let out = run(&[
        "train",
        "--config",
        ini,
        "--out",
        &run_dir_s,
        "--seed",
        "1",
        "--ablation",
        "wo_cl",
    ]);
    assert!(out.status.success(), "train failed: {}", stderr(&out));
    for file in [
        "dataset.vbcl",
        "report.csv",
        "report.json",
        "config.ini",
        "manifest.json",
        "checkpoints/step_01.brnc",
        "checkpoints/step_02.brnc",
        "checkpoints/step_03.brnc",
    ] {
        assert!(run_dir.join(file).is_file(), "missing artifact {file}");
    }
    let per_step = stdout(&out);
    assert_eq!(
        per_step.lines().filter(|l| l.starts_with("step ")).count(),
        3,
        "one progress line per protocol step"
    );

    // eval consumes a checkpoint plus the dataset the run preserved
    let ckpt = run_dir.join("checkpoints/step_01.brnc");
    let data = run_dir.join("dataset.vbcl");
    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--range",
        "1-4",
        "--config",
        ini,
    ]);
    assert!(out.status.success(), "eval failed: {}", stderr(&out));
    let text = stdout(&out);
    for direction in ["brain_to_image ", "image_to_brain "] {
        let line = text
            .lines()
            .find(|l| l.starts_with(direction))
            .unwrap_or_else(|| panic!("missing `{direction}` line in: {text}"));
        let value: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&value), "accuracy in range: {line}");
    }

    // analyze writes both report families next to each other
    let analyze_dir = dir.path().join("analysis");
    let out = run(&[
        "analyze",
        "--dataset",
        data.to_str().unwrap(),
        "--config",
        ini,
        "--out",
        analyze_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "analyze failed: {}", stderr(&out));
    for file in [
        "behavioral.csv",
        "behavioral.json",
        "behavioral.svg",
        "windows.csv",
        "windows.json",
        "windows.svg",
    ] {
        assert!(analyze_dir.join(file).is_file(), "missing analysis {file}");
    }

    // report pivots finished runs into one comparison table
    let out = run(&["report", &run_dir_s]);
    assert!(out.status.success(), "report failed: {}", stderr(&out));
    let table = stdout(&out);
    assert!(
        table.starts_with("direction,method,1-4,1-6,1-8"),
        "header names the evaluation windows: {table}"
    );
    assert!(
        table.contains("brain_to_image,wo_cl,") && table.contains("image_to_brain,wo_cl,"),
        "one labeled row per direction: {table}"
    );
}

#[test]
fn failures_map_to_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |out: &Output| out.status.code().expect("process exits");

    // configuration mistakes → 2, naming the offending line
    let bad_ini = dir.path().join("bad.ini");
    std::fs::write(&bad_ini, "[data]\nn_sessions = many\n").unwrap();
    let out = run(&["gen-data", "--config", bad_ini.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "bad config value: {}", stderr(&out));
    assert!(stderr(&out).contains("line 2"), "names the line: {}", stderr(&out));

    let out = bin()
        .args(["train", "--ablation", "nonsense"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "unknown ablation: {}", stderr(&out));

    // a range that names no sessions is a usage error, found before any i/o
    let out = run(&[
        "eval", "--checkpoint", "nope.brnc", "--dataset", "nope.vbcl", "--range", "9-3",
    ]);
    assert_eq!(code(&out), 2, "reversed range: {}", stderr(&out));

    // missing and damaged files → 3
    let out = run(&[
        "eval",
        "--checkpoint",
        dir.path().join("absent.brnc").to_str().unwrap(),
        "--dataset",
        dir.path().join("absent.vbcl").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "missing checkpoint: {}", stderr(&out));

    let ini = dir.path().join("tiny.ini");
    std::fs::write(&ini, TINY_INI).unwrap();
    let data_dir = dir.path().join("data");
    let out = run(&[
        "gen-data",
        "--config",
        ini.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let victim = data_dir.join("dataset.vbcl");
    corrupt_middle_byte(&victim);
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        ini.to_str().unwrap(),
        "--dataset",
        victim.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "corrupted dataset: {}", stderr(&out));
    assert!(
        stderr(&out).contains("checksum"),
        "says what is wrong: {}",
        stderr(&out)
    );
}

fn corrupt_middle_byte(path: &Path) {
    let mut bytes = std::fs::read(path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(path, bytes).unwrap();
}
