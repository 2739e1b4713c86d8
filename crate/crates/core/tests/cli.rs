//! End-to-end runs of the `mmrec` binary on a small world.

use std::path::Path;
use std::process::{Command, Output};

use mmrec::cli::modelfile;

const SMALL: &str = r#"{"world": {"n_users": 300, "n_videos": 600}, "train": {"max_epochs": 1}}"#;

fn mmrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmrec"))
        .args([
            "--config",
            dir.join("run.json").to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ])
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("MMREC_OUT_DIR")
        .output()
        .unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), config).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_train_evaluate_recommend_explain() {
    let dir = setup(SMALL);
    let d = dir.path();
    let gen = mmrec(d, &["gen-data", "--seed", "2"]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    assert!(stdout(&gen).contains("users=300 videos=600"));
    for f in ["catalog.jsonl", "logs.jsonl", "profiles.jsonl"] {
        assert!(d.join(f).exists(), "{f} missing");
    }

    let train = mmrec(d, &["train", "--seed", "2"]);
    assert!(train.status.success(), "{}", stderr(&train));
    assert!(stdout(&train).contains("epoch 1: train loss"));
    let (_, header) = modelfile::load(&d.join("model.bin")).unwrap();
    assert_eq!(header.seeds.train, 2);

    let eval = mmrec(d, &["evaluate"]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let table = stdout(&eval);
    assert!(table.contains("Model Variant | NDCG@10 | Precision@10 | AUC"));
    assert!(table.contains("MMT (Full Model) | "));
    assert!(d.join("report.json").exists() && d.join("report.txt").exists());

    let user = "7";
    let top10 = stdout(&mmrec(d, &["recommend", "--user", user, "--k", "10"]));
    let top1 = stdout(&mmrec(d, &["recommend", "--user", user, "--k", "1"]));
    assert_eq!(top10.lines().count(), 10);
    assert_eq!(top1.lines().next(), top10.lines().next());
    let ranks: Vec<&str> = top10
        .lines()
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(ranks, (1..=10).map(|i| i.to_string()).collect::<Vec<_>>());

    let explain = mmrec(d, &["explain", "--user", user, "--k", "3"]);
    assert!(explain.status.success(), "{}", stderr(&explain));
    let e: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("explain.json")).unwrap()).unwrap();
    assert_eq!(e["items"].as_array().unwrap().len(), 3);

    // evaluating a model under another variant is a configuration error
    let wrong = mmrec(d, &["evaluate", "--variant", "NO_SEQ"]);
    assert_eq!(wrong.status.code(), Some(2));
    assert!(stderr(&wrong).contains("variant"));

    // explanations need the full model
    assert!(mmrec(d, &["train", "--variant", "TEXT_ONLY"])
        .status
        .success());
    assert_eq!(
        mmrec(d, &["explain", "--user", user, "--variant", "TEXT_ONLY"])
            .status
            .code(),
        Some(2)
    );

    let unknown = mmrec(d, &["recommend", "--user", "100000"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(
        stderr(&unknown).contains("nearest ids: 299"),
        "{}",
        stderr(&unknown)
    );
}

#[test]
fn exit_codes() {
    let dir = setup(r#"{"world": {"n_users": 0}}"#);
    assert_eq!(mmrec(dir.path(), &["gen-data"]).status.code(), Some(2));

    let dir = setup("{\n  \"bogus\": 1\n}");
    let o = mmrec(dir.path(), &["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));

    // no data files yet
    let dir = setup(SMALL);
    assert_eq!(mmrec(dir.path(), &["train"]).status.code(), Some(4));

    let dir = setup(SMALL);
    assert_eq!(mmrec(dir.path(), &["recommend"]).status.code(), Some(2));
    assert_eq!(
        mmrec(dir.path(), &["gen-data", "--world-profile", "nope"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn untrained_model_and_missing_audio_world() {
    let dir = setup(r#"{"world": {"n_users": 200, "n_videos": 400}, "train": {"max_epochs": 0}}"#);
    let d = dir.path();
    let gen = mmrec(d, &["gen-data", "--world-profile", "kubd-like"]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    assert!(stdout(&gen).contains("audio_missing=400"));
    let catalog = std::fs::read_to_string(d.join("catalog.jsonl")).unwrap();
    assert!(catalog.lines().all(|l| l.contains("\"audio\":null")));

    let train = mmrec(d, &["train"]);
    assert!(train.status.success(), "{}", stderr(&train));
    let (model, _) = modelfile::load(&d.join("model.bin")).unwrap();
    assert!(model.params().is_finite());

    let eval = mmrec(d, &["evaluate"]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let recs = stdout(&mmrec(d, &["recommend", "--user", "3", "--k", "5"]));
    // no audio anywhere, so its weight is exactly zero
    assert!(recs.lines().all(|l| l.ends_with("\t0.0000")), "{recs}");
}
