use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dsrlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsrlab")).args(args).output().expect("spawn dsrlab")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn synth(out: &Path, n: &str, seed: &str) -> Output {
    dsrlab(&["synth", "--preset", "toy", "--n", n, "--seed", seed, "--set", "hr_h=32", "--set", "hr_w=32", "--out", p(out)])
}

#[test]
fn unknown_command_exits_2_with_usage() {
    let o = dsrlab(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_flag_exits_2() {
    assert_eq!(dsrlab(&["synth", "--bogus"]).status.code(), Some(2));
}

#[test]
fn synth_is_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(synth(&a, "3", "7").status.success());
    assert!(synth(&b, "3", "7").status.success());
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.iter().any(|(f, _)| f.ends_with("manifest.json")));
    assert!(ta.iter().any(|(f, _)| f.ends_with("resolved_config.json")));
    assert_eq!(ta, tb);
    let c = dir.path().join("c");
    assert!(synth(&c, "3", "8").status.success());
    assert_ne!(tree(&c), ta);
}

#[test]
fn unknown_config_key_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsrlab(&["synth", "--set", "nope=1", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn train_then_eval_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let ev = dir.path().join("eval");
    assert!(synth(&data, "3", "1").status.success());
    let o = dsrlab(&[
        "train", "--preset", "toy", "--mode", "teacher-rec-dep", "--set", "steps=3", "--set", "holdout=1",
        "--data", p(&data), "--out", p(&run),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["resolved_config.json", "config.json", "train_log.csv", "checkpoint/weights.bin"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let o = dsrlab(&["eval", "--ckpt", p(&run.join("checkpoint")), "--data", p(&data), "--out", p(&ev), "--holdout-only"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["samples"].as_array().unwrap().len(), 1);
    for k in ["method", "mean", "stats", "config", "provenance"] {
        assert!(report.get(k).is_some(), "{k}");
    }
    let csv = fs::read_to_string(ev.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "method,PSNR,SSIM,FLOPs(G),Params(M)");
    assert_eq!(csv.lines().count(), 3);
    let o = dsrlab(&["eval", "--ckpt", p(&dir.path().join("missing")), "--data", p(&data), "--out", p(&ev)]);
    assert_eq!(o.status.code(), Some(1));
}
