use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_trajattr");

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.toml")
}

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(tiny_config())
        .args(args)
        .env("TRAJATTR_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) {
    let out = run(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_record(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().expect("an error line")).expect("JSON error record")
}

fn run_dir(root: &Path) -> PathBuf {
    root.join("runs/tiny")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn train_attribute_fidelity_pipeline() {
    let root = tempfile::tempdir().unwrap();
    for args in [
        &["gen-data"][..],
        &["train"],
        &["attribute", "--estimator", "adamw"],
        &["tsloo"],
        &["fidelity"],
    ] {
        ok(root.path(), args);
    }
    let dir = run_dir(root.path());
    let fidelity = dir.join("analysis/fidelity.csv");
    let text = fs::read_to_string(&fidelity).unwrap();
    assert!(text.starts_with("# config_digest="));
    let rows = csv_rows(&fidelity);
    assert_eq!(rows[0], vec!["statistic", "sgd", "adamw"]);
    let mean = rows.iter().find(|r| r[0] == "mean_rho").unwrap();
    for rho in &mean[1..] {
        let rho: f64 = rho.parse().unwrap();
        assert!((-1.0..=1.0).contains(&rho));
    }
    let adamw: f64 = mean[2].parse().unwrap();
    assert!(adamw > 0.5, "AdamW-influence rho {adamw} on an AdamW run");
    assert!(dir.join("config.resolved.toml").exists());
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifests/fidelity.json")).unwrap()).unwrap();
    assert!(manifest["inputs"]["oracle/tsloo.json"].is_string());
    assert!(manifest["inputs"]["attribution/scores_adamw.csv"].is_string());
    assert!(manifest["outputs"]["analysis/fidelity.csv"].is_string());
}

#[test]
fn attribute_before_train_names_train() {
    let root = tempfile::tempdir().unwrap();
    let rec = error_record(&run(root.path(), &["attribute", "--estimator", "adamw"]));
    assert_eq!(rec["kind"], "dependency");
    assert_eq!(rec["producer"], "train");
}

#[test]
fn train_before_gen_data_names_gen_data() {
    let root = tempfile::tempdir().unwrap();
    let rec = error_record(&run(root.path(), &["train"]));
    assert_eq!(rec["producer"], "gen-data");
}

#[test]
fn invalid_config_lists_paths() {
    let root = tempfile::tempdir().unwrap();
    let out = run(
        root.path(),
        &["--set", "optimizer.lr=0", "--set", "mask.keep_ratio=3", "gen-data"],
    );
    let rec = error_record(&out);
    assert_eq!(rec["kind"], "invalid_config");
    let paths: Vec<String> = rec["paths"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p.as_str().unwrap().to_string())
        .collect();
    assert!(paths.iter().any(|p| p.starts_with("optimizer.lr")), "{paths:?}");
    assert!(paths.iter().any(|p| p.starts_with("mask.keep_ratio")), "{paths:?}");
    let rec = error_record(&run(root.path(), &["--set", "model.width=3", "gen-data"]));
    assert!(rec["message"].as_str().unwrap().contains("model.width"));
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let steps: [&[&str]; 6] = [
        &["gen-data"],
        &["train"],
        &["attribute", "--estimator", "sgd"],
        &["tsloo"],
        &["select", "--mode", "online"],
        &["report"],
    ];
    for root in [a.path(), b.path()] {
        for args in steps {
            ok(root, args);
        }
    }
    let (ta, tb) = (tree(&run_dir(a.path())), tree(&run_dir(b.path())));
    assert_eq!(ta.len(), tb.len());
    for ((pa, ba), (pb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs between runs", pa.display());
    }
}

#[test]
fn report_refuses_mixed_digests() {
    let root = tempfile::tempdir().unwrap();
    ok(root.path(), &["gen-data"]);
    ok(root.path(), &["train"]);
    ok(root.path(), &["report"]);
    let out = run(root.path(), &["--set", "optimizer.lr=0.002", "report"]);
    let rec = error_record(&out);
    assert!(rec["message"].as_str().unwrap().contains("refusing"), "{rec}");
}
