use calonet::causal::CausalMatrix;
use std::path::Path;
use std::process::{Command, Output};

fn calonet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calonet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {text:?}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, seed: u64, per_class: usize) -> std::path::PathBuf {
    let path = dir.join(name);
    let o = calonet(&["synth", "--seed", &seed.to_string(), "--samples-per-class", &per_class.to_string(), "--out", p(&path)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    path
}

#[test]
fn synth_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (synth(dir.path(), "a.ts", 5, 2), synth(dir.path(), "b.ts", 5, 2));
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn train_without_train_flag_prints_usage() {
    let o = calonet(&["train", "--test", "x.ts", "--out", "o"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("--train") && err.contains("Usage"), "{err}");
}

#[test]
fn train_eval_explain_round() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth(dir.path(), "train.ts", 1, 3);
    let test = synth(dir.path(), "test.ts", 2, 2);
    let run = |out: &Path| {
        calonet(&[
            "train", "--train", p(&train), "--test", p(&test), "--out", p(out), "--seed", "7", "--epochs", "3",
            "--bins", "4", "--batch-size", "4",
        ])
    };
    let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));
    let first = run(&out_a);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    for f in ["model.json", "report.csv", "config.resolved.json"] {
        assert!(out_a.join(f).is_file(), "{f}");
    }
    assert!(run(&out_b).status.success());
    assert_eq!(std::fs::read(out_a.join("report.csv")).unwrap(), std::fs::read(out_b.join("report.csv")).unwrap());

    let model = out_a.join("model.json");
    let eval = calonet(&["eval", "--model", p(&model), "--data", p(&test)]);
    assert!(eval.status.success());
    assert_eq!(value(&stdout(&eval), "accuracy"), value(&stdout(&first), "accuracy"));

    let csv_path = dir.path().join("sal.csv");
    let explain = calonet(&["explain", "--model", p(&model), "--data", p(&test), "--sample", "3", "--out", p(&csv_path)]);
    assert!(explain.status.success(), "{}", String::from_utf8_lossy(&explain.stderr));
    let csv = std::fs::read_to_string(csv_path).unwrap();
    let rows: Vec<Vec<f64>> = csv.lines().map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.len() == 100 && r.iter().all(|v| (0.0..=1.0).contains(v))));
}

const THREE_DIMS: &str = "@dimensions 3\n@classLabel true a\n@data\n";

fn three_dim_file(dir: &Path) -> std::path::PathBuf {
    let mut r: u64 = 12345;
    let mut next = || {
        r = r.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (r >> 11) as f64 / (1u64 << 53) as f64
    };
    let series: Vec<String> = (0..3).map(|_| (0..80).map(|_| format!("{:.6}", next())).collect::<Vec<_>>().join(",")).collect();
    let path = dir.join("three.ts");
    std::fs::write(&path, format!("{THREE_DIMS}{}:a\n", series.join(":"))).unwrap();
    path
}

#[test]
fn graph_exports() {
    let dir = tempfile::tempdir().unwrap();
    let data = three_dim_file(dir.path());
    let dot = calonet(&["graph", "--data", p(&data)]);
    assert!(dot.status.success());
    let text = stdout(&dot);
    for v in 0..3 {
        assert!(text.contains(&format!("  {v};")));
    }

    let none = calonet(&["graph", "--data", p(&data), "--threshold", "1e9"]);
    assert!(!stdout(&none).contains("->"));

    let json_path = dir.path().join("m.json");
    let o = calonet(&["graph", "--data", p(&data), "--format", "json", "--out", p(&json_path)]);
    assert!(o.status.success());
    let again_path = dir.path().join("m2.json");
    assert!(calonet(&["graph", "--from", p(&json_path), "--format", "json", "--out", p(&again_path)]).status.success());
    let (a, b) = (std::fs::read_to_string(&json_path).unwrap(), std::fs::read_to_string(&again_path).unwrap());
    assert_eq!(CausalMatrix::from_json(&a).unwrap(), CausalMatrix::from_json(&b).unwrap());
}

#[test]
fn bad_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ts");
    assert_eq!(calonet(&["graph", "--data", p(&missing)]).status.code(), Some(1));
    assert_eq!(calonet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(calonet(&["--help"]).status.code(), Some(0));
}
