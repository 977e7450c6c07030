use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ovg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ovg(args);
    assert!(
        out.status.success(),
        "ovg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 10] = [
    "--set",
    "data.train_videos=6",
    "--set",
    "data.eval_videos=3",
    "--set",
    "data.video_len=32",
    "--set",
    "train.epochs=1",
    "--set",
    "student.epochs=1",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(SMALL);
    v
}

fn datagen(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    ok(&with_small(&["datagen", "--out", p(&out)]));
    out
}

#[test]
fn datagen_writes_splits_ground_truth_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = datagen(dir.path());
    for f in ["train.jsonl", "eval.jsonl", "train_gt.json", "eval_gt.json", "resolved_config.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let snapshot: Value =
        serde_json::from_str(&fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["data"]["train_videos"], 6);

    // same inputs, same bytes
    let again = dir.path().join("again");
    ok(&with_small(&["datagen", "--out", p(&again)]));
    for f in ["train.jsonl", "eval_gt.json"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn train_stream_and_score_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = datagen(dir.path());
    let train = data.join("train.jsonl");
    let eval = data.join("eval.jsonl");
    let expert = dir.path().join("expert/model.ckpt");
    let student = dir.path().join("student/model.ckpt");
    ok(&with_small(&["train", "--mode", "expert", "--data", p(&train), "--out", p(&expert)]));
    ok(&with_small(&[
        "train", "--mode", "student", "--data", p(&train), "--teacher", p(&expert), "--out", p(&student),
    ]));
    assert!(dir.path().join("student/resolved_config.json").is_file());

    let before = fs::read(&eval).unwrap();
    let logs = dir.path().join("logs");
    let stdout = ok(&[
        "stream", "--checkpoint", p(&student), "--data", p(&eval), "--query", "text+image",
        "--mode", "tune", "--out-dir", p(&logs),
    ]);
    assert!(stdout.contains("3 streams"), "{stdout}");
    assert_eq!(fs::read(&eval).unwrap(), before, "inputs are never modified");
    let logs2 = dir.path().join("logs2");
    ok(&[
        "stream", "--checkpoint", p(&student), "--data", p(&eval), "--query", "text+image",
        "--mode", "tune", "--out-dir", p(&logs2),
    ]);
    for entry in fs::read_dir(&logs).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(logs.join(&name)).unwrap(), fs::read(logs2.join(&name)).unwrap());
    }

    let report = dir.path().join("report/metrics.json");
    ok(&["metrics", "--logs", p(&logs), "--gt", p(&data.join("eval_gt.json")), "--out", p(&report)]);
    let json: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["queries"], 3);
    assert!(dir.path().join("report/metrics.csv").is_file());
}

#[test]
fn exact_timely_predictions_score_one_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.json");
    fs::write(
        &gt,
        r#"{"version": 1, "queries": [{"query_id": "a", "moments": [[2.0, 10.0]]},
            {"query_id": "b", "moments": [[4.0, 6.0], [20.0, 30.0]]}]}"#,
    )
    .unwrap();
    let logs = dir.path().join("logs");
    fs::create_dir(&logs).unwrap();
    fs::write(logs.join("a.jsonl"), "{\"s\":2.0,\"e\":10.0,\"score\":0.9,\"emit_time\":10.0}\n").unwrap();
    fs::write(
        logs.join("b.jsonl"),
        "{\"s\":4.0,\"e\":6.0,\"score\":0.8,\"emit_time\":6.0}\n{\"s\":20.0,\"e\":30.0,\"score\":0.7,\"emit_time\":30.0}\n",
    )
    .unwrap();
    let out = dir.path().join("m.json");
    ok(&["metrics", "--logs", p(&logs), "--gt", p(&gt), "--out", p(&out)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let mut seen = 0;
    for key in ["online_recall", "online_map", "offline_recall", "offline_map"] {
        for entry in report[key].as_array().unwrap() {
            let v = entry.get("average").or_else(|| entry.get("value")).unwrap();
            assert_eq!(v.as_f64().unwrap(), 1.0, "{key}: {entry}");
            seen += 1;
        }
    }
    assert!(seen > 0);
}

fn error_of(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not structured: {stderr}"))
}

#[test]
fn invalid_input_exits_with_one_and_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ovg(&["datagen", "--out", p(dir.path()), "--set", "data.trian_videos=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["error"], "config");

    let out = ovg(&["train", "--mode", "expert", "--data", "/nonexistent.jsonl", "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["error"], "io");

    let data = datagen(dir.path());
    let out = ovg(&["train", "--mode", "student", "--data", p(&data.join("train.jsonl")), "--out", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_of(&out)["message"].as_str().unwrap().contains("--teacher"));

    let out = ovg(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_with_exit_zero() {
    let stdout = ok(&["gradcheck", "--seed", "3"]);
    assert!(!stdout.contains("FAIL"), "{stdout}");
    assert!(stdout.contains("model.pml"));
}

#[test]
fn experiment_names_use_underscores() {
    let out = ovg(&["experiment", "no_such_study", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let help = String::from_utf8(ovg(&["experiment", "--help"]).stdout).unwrap();
    for name in ["modality_matrix", "distill_ablation", "tune_vs_frozen", "memory_ablation"] {
        assert!(help.contains(name), "{help}");
    }
}
