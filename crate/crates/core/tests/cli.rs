use std::path::Path;
use std::process::{Command, Output};

fn xlent(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xlent"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn xlent")
}

fn error_kind(out: &Output) -> String {
    let line = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(line.trim()).expect("JSON error line");
    v["error"].as_str().expect("error kind").to_string()
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    assert_eq!(xlent(d, &["no-such-command"]).status.code(), Some(2));

    let ok = xlent(d, &["make-toy", "--set", "toy.pairs=5", "--set", "toy.heldout_pairs=2", "--out", "toy"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(d.join("toy/manifest.json").exists());

    let bad = xlent(d, &["make-toy", "--set", "toy.pairs=many", "--out", "toy2"]);
    assert_eq!(bad.status.code(), Some(3));
    assert_eq!(error_kind(&bad), "config");

    let unknown = xlent(d, &["make-toy", "--set", "toy.colour=red", "--out", "toy2"]);
    assert_eq!(unknown.status.code(), Some(3));

    let missing = xlent(
        d,
        &["build-vocab", "--corpus", "nowhere/*.jsonl", "--links", "toy/links.tsv", "--out", "vocab"],
    );
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(error_kind(&missing), "runtime");

    let manifest = d.join("toy/manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    m["outputs"][0]["sha256"] = serde_json::Value::String("0".repeat(64));
    std::fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
    let tampered = xlent(d, &["rerun", "toy/manifest.json", "--out", "again", "--verify"]);
    assert_eq!(tampered.status.code(), Some(4));
    assert_eq!(error_kind(&tampered), "mismatch");
}

#[test]
fn inspect_prints_to_stdout() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let run = |args: &[&str]| {
        let o = xlent(d, args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["make-toy", "--set", "toy.pairs=5", "--set", "toy.heldout_pairs=2", "--out", "toy"]);
    run(&[
        "pretrain", "--corpus", "toy/train.jsonl", "--words", "toy/words.txt", "--entities", "toy/entities.tsv",
        "--set", "model.preset=tiny", "--set", "train.total_steps=2", "--set", "train.stage1_steps=1",
        "--set", "train.batch_size=2", "--set", "train.warmup_steps=1", "--set", "train.max_words=32", "--out", "run",
    ]);
    let o = run(&["inspect-checkpoint", "--checkpoint", "run/final.ckpt"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("embeddings.word"), "{text}");
}
