use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/tiny.toml");

fn wst(args: &[&str], stdin: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_wst"));
    cmd.args(args);
    match stdin {
        Some(text) => {
            use std::io::Write;
            cmd.stdin(std::process::Stdio::piped())
                .stdout(std::process::Stdio::piped())
                .stderr(std::process::Stdio::piped());
            let mut child = cmd.spawn().unwrap();
            child.stdin.take().unwrap().write_all(text.as_bytes()).unwrap();
            child.wait_with_output().unwrap()
        }
        None => cmd.output().unwrap(),
    }
}

fn ok(args: &[&str]) -> String {
    let out = wst(args, None);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data plus a run directory trained through Stage 1.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn through_stage1(seed: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["synth", "--out", s(&data), "--config", TINY, "--test-size", "40"]);
    ok(&[
        "train-classifier",
        "--run",
        s(&run),
        "--data",
        s(&data),
        "--config",
        TINY,
        "--seed",
        seed,
    ]);
    ok(&["train-lm", "--run", s(&run), "--data", s(&data)]);
    ok(&["train-stage1", "--run", s(&run), "--data", s(&data)]);
    Fixture { _dir: dir, data, run }
}

fn sha(p: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(p).unwrap()))
}

fn manifest(run: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn full_pipeline_writes_consistent_artifacts() {
    let f = through_stage1("3");
    let out = ok(&["train-stage2", "--run", s(&f.run), "--data", s(&f.data)]);
    assert!(out.contains("acc"), "{out}");
    for name in [
        "vocab.txt",
        "config.toml",
        "classifier.ckpt",
        "lm.0.fwd.ckpt",
        "lm.0.bwd.ckpt",
        "lm.1.fwd.ckpt",
        "lm.1.bwd.ckpt",
        "stage1.ckpt",
        "stage2.ckpt",
        "outputs.txt",
        "metrics.json",
        "manifest.json",
    ] {
        assert!(f.run.join(name).exists(), "{name} missing");
    }
    let m = manifest(&f.run);
    for section in ["checkpoints", "artifacts"] {
        for (name, hash) in m[section].as_object().unwrap() {
            assert_eq!(&sha(&f.run.join(name)), hash.as_str().unwrap(), "{name}");
        }
    }
    assert_eq!(m["checkpoints"].as_object().unwrap().len(), 7);
    assert_eq!(m["seeds"]["stage2"], 3);
    assert_eq!(m["variant"], "full");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["metrics"], metrics);
    assert_eq!(metrics["n_sentences"], 40);
}

#[test]
fn metrics_are_recomputable_with_evaluate() {
    let f = through_stage1("0");
    ok(&["train-stage2", "--run", s(&f.run), "--data", s(&f.data)]);
    // outputs.txt follows the test split order: style 0 lines, then style 1.
    let outputs = std::fs::read_to_string(f.run.join("outputs.txt")).unwrap();
    let lines: Vec<&str> = outputs.lines().collect();
    let n0 = std::fs::read_to_string(f.data.join("test.style0.txt")).unwrap().lines().count();
    let dir = tempfile::tempdir().unwrap();
    let to1 = dir.path().join("to1.txt");
    std::fs::write(&to1, lines[..n0].join("\n") + "\n").unwrap();
    let refs: Vec<String> = (0..4)
        .map(|k| s(&f.data.join(format!("test.style0.ref{k}.txt"))).to_string())
        .collect();
    let json = dir.path().join("m.json");
    let out = ok(&[
        "evaluate",
        "--outputs",
        s(&to1),
        "--refs",
        &refs.join(","),
        "--classifier",
        s(&f.run.join("classifier.ckpt")),
        "--target-style",
        "1",
        "--json",
        s(&json),
    ]);
    assert!(out.starts_with("# corpus BLEU-4"), "{out}");
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(m["n_sentences"], n0);
    let acc = m["acc"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&acc));
}

#[test]
fn same_inputs_give_identical_artifacts() {
    let a = through_stage1("5");
    let b = through_stage1("5");
    for name in ["classifier.ckpt", "lm.1.bwd.ckpt", "stage1.ckpt"] {
        assert_eq!(sha(&a.run.join(name)), sha(&b.run.join(name)), "{name}");
    }
    assert_eq!(manifest(&a.run)["config_hash"], manifest(&b.run)["config_hash"]);
}

#[test]
fn stage2_before_stage1_names_the_dependency() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["synth", "--out", s(&data), "--config", TINY, "--test-size", "40"]);
    ok(&["train-classifier", "--run", s(&run), "--data", s(&data), "--config", TINY]);
    ok(&["train-lm", "--run", s(&run), "--data", s(&data)]);
    let out = wst(&["train-stage2", "--run", s(&run), "--data", s(&data)], None);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: missing-dependency: stage1.ckpt"), "{err}");
    assert!(err.contains("train-stage1"), "{err}");
}

#[test]
fn transfer_dumps_token_relevance() {
    let f = through_stage1("0");
    ok(&["train-stage2", "--run", s(&f.run), "--data", s(&f.data)]);
    let out = wst(
        &["transfer", "--run", s(&f.run), "--target-style", "1", "--dump-relevance"],
        Some("the food was awful\nvery rude staff\n"),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let blocks: Vec<&str> = text.split("\n\n").filter(|b| !b.trim().is_empty()).collect();
    assert_eq!(blocks.len(), 2, "{text}");
    for b in blocks {
        let mut lines = b.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("# "), "{header}");
        let words: Vec<&str> = header[2..].split_whitespace().collect();
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), words.len());
        for (row, w) in rows.iter().zip(&words) {
            let (tok, lam) = row.split_once('\t').unwrap();
            assert_eq!(tok, *w);
            let lam: f64 = lam.parse().unwrap();
            assert!((0.0..1.0).contains(&lam));
        }
    }
    // Plain mode prints one line per input.
    let plain = wst(
        &["transfer", "--run", s(&f.run), "--target-style", "0"],
        Some("the food was awful\n"),
    );
    assert_eq!(String::from_utf8(plain.stdout).unwrap().lines().count(), 1);
}

#[test]
fn lrp_inspect_emits_tab_lines_and_jsonl() {
    let f = through_stage1("0");
    let out = wst(
        &["lrp-inspect", "--run", s(&f.run), "--target-style", "0"],
        Some("the food was awful\n"),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().filter(|l| !l.is_empty()).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), ["the", "food", "was", "awful"]);
    for r in &rows {
        assert_eq!(r.len(), 3);
        let lam: f64 = r[1].parse().unwrap();
        assert!((0.0..1.0).contains(&lam));
        r[2].parse::<f64>().unwrap();
    }
    let jsonl = std::fs::read_to_string(f.run.join("relevance.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(rec["tokens"].as_array().unwrap().len(), 4);
    assert_eq!(rec["target_style"], 0);
    // The calibrated eta from Stage 1 is the one applied.
    assert_eq!(rec["eta"], manifest(&f.run)["lrp"]["eta"]);
}

#[test]
fn ablate_appends_rows() {
    let f = through_stage1("0");
    let args = ["ablate", "--run", s(&f.run), "--data", s(&f.data), "--variant"];
    ok(&[&args[..], &["NSC-lambda"]].concat());
    ok(&[&args[..], &["-NSC,Lcp-prime"]].concat());
    let csv = std::fs::read_to_string(f.run.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("variant,acc,bleu,g2,h2"), "{csv}");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["NSC-lambda", "-NSC", "Lcp-prime"]);
}

#[test]
fn gradcheck_exits_zero_on_the_stage2_loss() {
    let out = ok(&["gradcheck", "--loss", "L2", "--limit", "3"]);
    assert!(out.starts_with("L2"), "{out}");
    assert!(out.contains(" ok"), "{out}");
}

#[test]
fn bad_inputs_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[stage2]\nalpha = -1.0\n").unwrap();
    let out = wst(&["synth", "--out", s(dir.path()), "--config", s(&bad)], None);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: config:"), "{err}");
    assert_eq!(err.lines().count(), 1);

    let out = wst(&["gradcheck", "--loss", "L_nope"], None);
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: invalid:"));

    let out = wst(&["train-stage2", "--run", "x", "--data", "y", "--variant", "nope"], None);
    assert!(!out.status.success());
}
