use std::path::Path;
use std::process::{Command, Output};

use sgmm::stats_pool;

fn sgmm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgmm")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> serde_json::Value {
    let out = sgmm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Small corpus plus a matching UBM.
fn corpus(dir: &Path) {
    ok(
        dir,
        &[
            "gen-synth",
            "--out",
            "d",
            "--classes",
            "3",
            "--clusters",
            "4",
            "--dim",
            "4",
            "--videos-per-class",
            "12",
            "--seed",
            "5",
        ],
    );
    ok(dir, &["train-ubm", "--data", "d/train.vseq", "--out", "ubm.gmm", "--k", "4", "--seed", "1"]);
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = sgmm(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sgmm(dir.path(), &["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(sgmm(dir.path(), &["gradcheck", "--variant", "full"]).status.code(), Some(1));
    assert_eq!(sgmm(dir.path(), &["frobnicate"]).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.conf"), "no-such-flag = 3\n").unwrap();
    assert_eq!(sgmm(dir.path(), &["gradcheck", "--config", "bad.conf"]).status.code(), Some(1));
    assert_eq!(sgmm(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        sgmm(dir.path(), &["eval", "--checkpoint", "missing.ckpt", "--data", "missing.vseq"]).status.code(),
        Some(2)
    );
    std::fs::write(dir.path().join("junk.vseq"), b"VSEQ\x01\x00").unwrap();
    let out = sgmm(dir.path(), &["train-ubm", "--data", "junk.vseq", "--out", "u.gmm", "--k", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_a_small_error() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(dir.path(), &["gradcheck", "--variant", "diagonal", "--pool", "dsgmm"]);
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert_eq!(v["passed"], true);
}

#[test]
fn extract_sgmm_and_vlad_give_distinct_parseable_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    ok(d, &["extract", "--data", "d/train.vseq", "--ubm", "ubm.gmm", "--out", "s.vcod", "--gamma", "0"]);
    ok(d, &["extract", "--data", "d/train.vseq", "--ubm", "ubm.gmm", "--out", "v.vcod", "--pool", "vlad"]);
    let s = std::fs::read(d.join("s.vcod")).unwrap();
    let v = std::fs::read(d.join("v.vcod")).unwrap();
    assert_ne!(s, v);
    let a = stats_pool::decode_vcod(&s).unwrap();
    let b = stats_pool::decode_vcod(&v).unwrap();
    assert_eq!(a.len(), b.len());
    let manifest = stats_pool::read_manifest(d.join("s.vcod.manifest")).unwrap();
    assert_eq!(manifest.len(), a.len());
}

#[test]
fn train_eval_is_deterministic_and_honours_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    std::fs::write(d.join("t.conf"), "# desk-scale run\nsteps = 1000\nlr = 0.003\nbatch_size = 8\neval-every = 10\n")
        .unwrap();
    let args = |out: &str, log: &str| {
        vec![
            "train",
            "--train",
            "d/train.vseq",
            "--val",
            "d/val.vseq",
            "--ubm",
            "ubm.gmm",
            "--config",
            "t.conf",
            "--steps",
            "20",
            "--seed",
            "3",
            "--out",
            out,
            "--log",
            log,
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()
    };
    let a1 = args("a.ckpt", "a.csv");
    let a2 = args("b.ckpt", "b.csv");
    let r = ok(d, &a1.iter().map(String::as_str).collect::<Vec<_>>());
    ok(d, &a2.iter().map(String::as_str).collect::<Vec<_>>());
    // the explicit flag overrides the config file
    assert_eq!(r["steps"], 20);
    assert_eq!(std::fs::read(d.join("a.ckpt")).unwrap(), std::fs::read(d.join("b.ckpt")).unwrap());
    assert_eq!(std::fs::read(d.join("a.csv")).unwrap(), std::fs::read(d.join("b.csv")).unwrap());
    let log = std::fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let out = sgmm(d, &["eval", "--checkpoint", "a.ckpt", "--data", "d/test.vseq"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["gap", "hit1", "n_videos"]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("resolved config") && stderr.contains("checkpoint = a.ckpt"));
}

#[test]
fn recommendation_commands_emit_the_four_aucs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    ok(d, &["gen-cowatch", "--videos", "d/train.vseq", "--out", "cw.csv", "--users", "30", "--seed", "2"]);
    ok(
        d,
        &[
            "reco-train",
            "--videos",
            "d/train.vseq",
            "--interactions",
            "cw.csv",
            "--ubm",
            "ubm.gmm",
            "--out",
            "m.embd",
            "--embed-dim",
            "4",
            "--hidden",
            "8",
            "--steps",
            "10",
            "--batch-size",
            "8",
            "--seed",
            "1",
        ],
    );
    let v = ok(d, &["reco-eval", "--model", "m.embd", "--videos", "d/train.vseq", "--interactions", "cw.csv"]);
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["auc_avg_sim", "auc_glmix", "auc_glmix_coldstart", "auc_max_sim"]);
    assert!((0.0..=1.0).contains(&v["auc_glmix"].as_f64().unwrap()));
}
