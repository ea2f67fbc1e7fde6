//! End-to-end runs of the `dali-lab` binary on a small corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_dali-lab");

fn small_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({ "corpus": { "n": 300, "n_generic": 60 } });
    if let (Value::Object(a), Value::Object(b)) = (&mut cfg, extra) {
        a.extend(b);
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

fn run(out: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn ok(out: &Path, config: &Path, args: &[&str]) {
    let o = run(out, config, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn pipeline(out: &Path, config: &Path, threads: &str) {
    for cmd in ["gen-corpus", "build-model", "eval", "align", "patch", "report"] {
        ok(out, config, &[cmd, "--threads", threads]);
    }
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn pipeline_is_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), json!({}));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a, &cfg, "1");
    pipeline(&b, &cfg, "3");
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs", k.display());
    }
    for name in [
        "alignment_profile.csv",
        "ts_tf_delta.csv",
        "patch_sweep.csv",
        "delta_flip.csv",
        "entropy.csv",
        "report.json",
        "eval_fra.json",
        "run_config.json",
        "model/model.json",
        "model/tokenizer.json",
        "corpus/eng.jsonl",
        "generic/fra.jsonl",
    ] {
        assert!(fa.contains_key(Path::new(name)), "{name} missing");
    }

    // every text artifact opens with the metadata line or key
    for (k, v) in &fa {
        let text = match std::str::from_utf8(v) {
            Ok(t) => t,
            Err(_) => continue,
        };
        let first = text.lines().next().unwrap_or("");
        let has_meta = first.starts_with("# dali-lab") || text.contains("\"meta\"");
        assert!(has_meta, "{} lacks metadata", k.display());
        if k.extension().is_some_and(|e| e == "json") {
            let v: Value = serde_json::from_str(text).unwrap();
            assert!(v["meta"]["config_hash"].is_string(), "{}", k.display());
        }
    }

    // idempotent: rerunning a command rewrites the same bytes
    ok(&a, &cfg, &["align"]);
    assert_eq!(
        fs::read(a.join("alignment_profile.csv")).unwrap(),
        fa[Path::new("alignment_profile.csv")]
    );
    // the resolved seed reaches the metadata
    let seeded = tmp.path().join("s");
    ok(&seeded, &cfg, &["gen-corpus", "--seed", "9"]);
    let head = fs::read_to_string(seeded.join("corpus/eng.jsonl")).unwrap();
    assert!(head.starts_with("# dali-lab") && head.lines().next().unwrap().contains("seed=9"));
    assert_ne!(head.as_bytes(), fa[Path::new("corpus/eng.jsonl")].as_slice());
}

/// CSV rows keyed by header, comment lines skipped.
fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| {
            header
                .iter()
                .map(|h| h.to_string())
                .zip(l.split(',').map(str::to_string))
                .collect()
        })
        .collect()
}

fn same_cell(csv: &str, json: &Value) -> bool {
    match json {
        Value::Null => csv.is_empty(),
        Value::Bool(b) => csv == b.to_string(),
        Value::String(s) => csv == s,
        Value::Number(n) => csv.parse::<f64>().unwrap() == n.as_f64().unwrap(),
        _ => false,
    }
}

#[test]
fn report_echoes_every_csv_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), json!({}));
    let out = tmp.path().join("o");
    pipeline(&out, &cfg, "2");
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    for (key, file) in [
        ("alignment_profile", "alignment_profile.csv"),
        ("ts_tf_delta", "ts_tf_delta.csv"),
        ("patch_sweep", "patch_sweep.csv"),
        ("delta_flip", "delta_flip.csv"),
        ("entropy", "entropy.csv"),
    ] {
        let rows = csv_rows(&out.join(file));
        let merged = report[key].as_array().unwrap();
        assert_eq!(rows.len(), merged.len(), "{key}");
        assert!(!rows.is_empty(), "{key}");
        for (r, m) in rows.iter().zip(merged) {
            for (col, cell) in r {
                assert!(same_cell(cell, &m[col]), "{key}.{col}: {cell} vs {}", m[col]);
            }
        }
    }
    let eval: Value = serde_json::from_slice(&fs::read(out.join("eval_fra.json")).unwrap()).unwrap();
    assert_eq!(report["eval"]["fra"]["tf_ids"], eval["tf_ids"]);
}

#[test]
fn csv_rows_are_sorted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), json!({}));
    let out = tmp.path().join("o");
    pipeline(&out, &cfg, "1");
    let sweep = csv_rows(&out.join("patch_sweep.csv"));
    let key = |r: &BTreeMap<String, String>| {
        let mode = if r["mode"] == "equivalent" { 0 } else { 1 };
        let pos = if r["position"] == "last" { 0 } else { 1 };
        (mode, r["lang"].clone(), pos, r["layer"].parse::<usize>().unwrap())
    };
    assert!(sweep.windows(2).all(|w| key(&w[0]) < key(&w[1])));
    // 2 modes × 2 positions × (Λ + 1) layers
    assert_eq!(sweep.len(), 2 * 2 * 7);
}

#[test]
fn missing_artifacts_exit_3_with_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), json!({}));
    let out = tmp.path().join("empty");
    for cmd in ["eval", "align", "patch", "report"] {
        let o = run(&out, &cfg, &[cmd]);
        assert_eq!(o.status.code(), Some(3), "{cmd}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(out.to_str().unwrap()), "{cmd}: {err}");
    }
    ok(&out, &cfg, &["gen-corpus"]);
    ok(&out, &cfg, &["build-model"]);
    let o = run(&out, &cfg, &["patch"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("eval_fra.json"));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"corpus": {"n": 10}, "no_such_field": 1}"#).unwrap();
    assert_eq!(run(&out, &bad, &["gen-corpus"]).status.code(), Some(2));

    fs::write(&bad, r#"{"demo": {"l_bind": 9}}"#).unwrap();
    let o = run(&out, &bad, &["build-model"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());

    let cfg = small_config(tmp.path(), json!({}));
    assert_eq!(
        run(&out, &cfg, &["eval", "--langs", "fra,eng"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&out, &cfg, &["eval", "--langs", "eng,deu"]).status.code(),
        Some(2)
    );
    // rejected by the argument parser itself
    assert_eq!(
        run(&out, &cfg, &["align", "--metric", "cosine"]).status.code(),
        Some(2)
    );
}

#[test]
fn existing_outputs_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), json!({}));
    let out = tmp.path().join("o");
    ok(&out, &cfg, &["gen-corpus"]);
    ok(&out, &cfg, &["build-model"]);
    let before = fs::read(out.join("corpus/fra.jsonl")).unwrap();
    for cmd in ["gen-corpus", "build-model"] {
        let o = run(&out, &cfg, &[cmd]);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
        ok(&out, &cfg, &[cmd, "--force"]);
    }
    assert_eq!(fs::read(out.join("corpus/fra.jsonl")).unwrap(), before);
}

#[test]
fn empty_transfer_failure_set_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), json!({ "demo": { "noise": {} } }));
    let out = tmp.path().join("o");
    for cmd in ["gen-corpus", "build-model", "eval"] {
        ok(&out, &cfg, &[cmd]);
    }
    let eval: Value = serde_json::from_slice(&fs::read(out.join("eval_fra.json")).unwrap()).unwrap();
    assert_eq!(eval["tf_ids"], json!([]));
    let o = run(&out, &cfg, &["patch"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));
}

#[test]
fn patch_flags_restrict_the_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), json!({}));
    let out = tmp.path().join("o");
    for cmd in ["gen-corpus", "build-model", "eval"] {
        ok(&out, &cfg, &[cmd]);
    }
    ok(
        &out,
        &cfg,
        &["patch", "--mode", "equivalent", "--positions", "penult"],
    );
    let rows = csv_rows(&out.join("patch_sweep.csv"));
    assert_eq!(rows.len(), 7);
    assert!(rows
        .iter()
        .all(|r| r["mode"] == "equivalent" && r["position"] == "penult"));
    assert!(!out.join("delta_flip.csv").exists());

    ok(&out, &cfg, &["align", "--metric", "dali-st"]);
    let prof = csv_rows(&out.join("alignment_profile.csv"));
    assert!(prof.iter().all(|r| r["metric"] == "dali-st"));
    // groups all, TS, TF over Λ + 1 layers
    assert_eq!(prof.len(), 3 * 7);
}

#[test]
fn random_model_runs_through_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), json!({}));
    let out = tmp.path().join("o");
    ok(&out, &cfg, &["gen-corpus"]);
    ok(&out, &cfg, &["build-model", "--kind", "random"]);
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("model/model.json")).unwrap()).unwrap();
    assert_eq!(manifest["spec"]["d_model"], 64);
    assert_eq!(manifest["meta"]["model_kind"], "random");
    ok(&out, &cfg, &["eval"]);
}
