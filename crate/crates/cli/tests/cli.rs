use std::fs;
use std::path::Path;
use std::process::Command;

fn vidqa(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_vidqa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn record_replay_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = p(d, "data");
    let qs = p(d, "data/questions.jsonl");
    vidqa(&["gen-synthetic", "--seed", "5", "--questions", "20", "--out", &data]);
    vidqa(&["build", "--data", &data, "--out", &p(d, "engine")]);
    for pipeline in ["sva", "tmkg"] {
        let live = p(d, &format!("{pipeline}-live.jsonl"));
        let replay = p(d, &format!("{pipeline}-replay.jsonl"));
        let fixtures = p(d, &format!("{pipeline}-fixtures.jsonl"));
        vidqa(&[
            "answer", "--pipeline", pipeline, "--data", &data, "--questions", &qs, "--out", &live, "--backend",
            "oracle", "--record", &fixtures,
        ]);
        vidqa(&[
            "answer", "--pipeline", pipeline, "--data", &data, "--questions", &qs, "--out", &replay, "--backend",
            "scripted", "--fixtures", &fixtures,
        ]);
        assert_eq!(fs::read(&live).unwrap(), fs::read(&replay).unwrap());
        let line = vidqa(&[
            "eval", "--answers", &replay, "--questions", &qs, "--report", &p(d, "report.json"), "--truth",
            &p(d, "data/truth.json"),
        ]);
        assert_eq!(line.trim(), "accuracy 1.0000 (20/20)");
    }
}

#[test]
fn disabled_backend_still_answers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = p(d, "data");
    let qs = p(d, "data/questions.jsonl");
    vidqa(&["gen-synthetic", "--seed", "6", "--questions", "10", "--out", &data]);
    let out = p(d, "a.jsonl");
    vidqa(&["answer", "--pipeline", "sva", "--data", &data, "--questions", &qs, "--out", &out]);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 10);
}

#[test]
fn bad_input_exits_with_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_vidqa"))
        .args(["answer", "--pipeline", "tmkg", "--data", "x", "--questions", "y", "--out", "z", "--backend", "scripted"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
