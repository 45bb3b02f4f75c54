//! End-to-end runs of the binary: exit codes, artifacts, determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> PathBuf {
    let mut p = PathBuf::from(env!("CARGO_BIN_EXE_pointseq"));
    assert!(p.exists(), "binary missing at {}", p.display());
    p = p.canonicalize().unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn pointseq")
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

const TINY_CONFIG: &str = "\
model.dim = 16
model.layers = 1
model.heads = 2
tokenizer.h1 = 8
tokenizer.h2 = 16
model.patches = 8
model.patch_size = 8
data.points = 64
data.train_per_class = 2
data.test_per_class = 1
train.steps = 3
train.batch = 2
train.log_every = 1
probe.epochs = 10
";

#[test]
fn usage_error_is_exit_1() {
    let out = run(&["pretrain", "--config", "/nonexistent/conf.txt"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/conf.txt"), "stderr: {err}");
}

#[test]
fn unknown_flag_is_exit_1() {
    let out = run(&["pretrain", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_is_exit_0() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn pretrain_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("conf.txt");
    write(&conf, TINY_CONFIG);
    let out_dir = dir.path().join("run");
    let out = run(&[
        "pretrain",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("checkpoint.bin").exists());
    let log = std::fs::read_to_string(out_dir.join("run.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final loss"));
    // config echo precedes the log
    assert!(stdout.contains("model.dim = 16"));
}

#[test]
fn pretrain_zero_steps_still_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("conf.txt");
    write(&conf, TINY_CONFIG);
    let out_dir = dir.path().join("run");
    let out = run(&[
        "pretrain",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--steps",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out_dir.join("checkpoint.bin").exists());
}

#[test]
fn probe_reads_checkpoint_and_random_init_skips_it() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("conf.txt");
    write(&conf, TINY_CONFIG);
    let out_dir = dir.path().join("run");
    let out = run(&[
        "pretrain",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));

    let ckpt = out_dir.join("checkpoint.bin");
    let out = run(&["probe", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("test accuracy"));

    let out = run(&["probe", "--random-init", "--config", conf.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));

    // corrupt checkpoint surfaces a load error
    std::fs::write(&ckpt, b"garbage").unwrap();
    let out = run(&["probe", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn ablate_grid_runs_and_empty_grid_errors() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("conf.txt");
    write(&conf, TINY_CONFIG);
    let grid = dir.path().join("grid.txt");
    write(&grid, "baseline:\nno_stopgrad: loss.stopgrad=false\n");
    let out_dir = dir.path().join("abl");
    let out = run(&[
        "ablate",
        "--config",
        conf.to_str().unwrap(),
        "--grid",
        grid.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("table.tsv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("no_stopgrad"));
    assert!(table.lines().next().unwrap().contains("collapsed"));

    let empty = dir.path().join("empty.txt");
    write(&empty, "# nothing here\n");
    let out = run(&["ablate", "--config", conf.to_str().unwrap(), "--grid", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn serialize_dump_single_point_and_bad_order() {
    let dir = tempfile::tempdir().unwrap();
    let xyz = dir.path().join("one.xyz");
    write(&xyz, "0.1 0.2 0.3\n");
    let out = run(&["serialize-dump", "--input", xyz.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = stdout.lines().collect();
    assert_eq!(rows.len(), 2); // header + one row
    assert!(rows[1].starts_with("0\t0\t"));

    let out = run(&["serialize-dump", "--input", xyz.to_str().unwrap(), "--order", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hilbert"));
}

#[test]
fn serialize_dump_cube_corners_in_hilbert_order() {
    let dir = tempfile::tempdir().unwrap();
    let xyz = dir.path().join("cube.xyz");
    // unit cube corners
    let mut content = String::new();
    for z in [0, 1] {
        for y in [0, 1] {
            for x in [0, 1] {
                content.push_str(&format!("{x} {y} {z}\n"));
            }
        }
    }
    write(&xyz, &content);
    let out = run(&[
        "serialize-dump",
        "--input",
        xyz.to_str().unwrap(),
        "--order",
        "hilbert",
        "--bits",
        "1",
        "--patches",
        "8",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let codes: Vec<u64> = stdout
        .lines()
        .skip(1)
        .map(|l| l.rsplit('\t').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(codes.len(), 8);
    let mut sorted = codes.clone();
    sorted.sort_unstable();
    assert_eq!(codes, sorted);
    assert_eq!(sorted, (0..8).collect::<Vec<u64>>());
}

#[test]
fn pretrain_deterministic_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("conf.txt");
    write(&conf, TINY_CONFIG);
    let logs: Vec<String> = (0..2)
        .map(|i| {
            let out_dir = dir.path().join(format!("run{i}"));
            let out = run(&[
                "pretrain",
                "--config",
                conf.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
                "--seed",
                "42",
            ]);
            assert_eq!(out.status.code(), Some(0));
            std::fs::read_to_string(out_dir.join("run.jsonl")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
}
