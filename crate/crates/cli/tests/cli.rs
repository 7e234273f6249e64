use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lego_core::pruning::{PruneSpec, Strategy};
use lego_core::runner::{
    read_manifest, ExperimentConfig, RunStatus, COMPARISON_HEADER, FAILURE_MARKER, MANIFEST_FILE, PRESETS,
};

fn lego(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lego"))
        .args(args)
        .env_remove("LEGO_OUT_DIR")
        .env_remove("LEGO_THREADS")
        .output()
        .expect("spawn lego")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        name: "tiny".into(),
        ..ExperimentConfig::default()
    };
    c.model.d_model = 8;
    c.model.n_layers = 1;
    c.model.mlp_hidden = 16;
    c.model.max_seq_len = 16;
    c.model.lora_rank = 2;
    c.corpus.pretrain_per_domain = 8;
    c.corpus.finetune_per_domain = 8;
    c.corpus.heldout_per_domain = 4;
    c.corpus.reference_per_domain = 4;
    c.pretrain.steps = 10;
    c.pretrain.batch_size = 4;
    c.clients = vec![
        PruneSpec::dense(),
        PruneSpec::unstructured(Strategy::ActivationNorm, 0.5),
    ];
    c.federation.rounds = 2;
    c.federation.participation_rate = 1.0;
    c.federation.batch_size = 4;
    c
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn lists_every_preset() {
    let o = lego(&["presets"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    for (name, _) in PRESETS {
        assert!(out.lines().any(|l| l.starts_with(name)), "{name} missing from {out}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&lego(&["run"])), 2);
    assert_eq!(code(&lego(&["run", "--preset", "iid", "--config", "x.toml"])), 2);
    let o = lego(&["run", "--preset", "nope"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("hetero"));
}

#[test]
fn unknown_key_is_rejected_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, format!("{}\nbogus = 1\n", tiny().to_toml().unwrap())).unwrap();
    let out = tmp.path().join("out");
    let o = lego(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus"));
    assert!(!out.exists());
}

#[test]
fn invalid_values_are_rejected_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.federation.lr = -1.0;
    c.model.n_heads = 3;
    let cfg = write_config(tmp.path(), "bad.toml", &c);
    let out = tmp.path().join("out");
    let o = lego(&["prune", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("lr") && err.contains("n_heads"), "{err}");
    assert!(!out.exists());
}

#[test]
fn missing_config_exits_3() {
    let o = lego(&["run", "--config", "/definitely/not/here.toml"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn missing_checkpoint_exits_3_and_marks_the_run_failed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.pretrain.enabled = false;
    c.pretrain.checkpoint = Some(tmp.path().join("absent.ckpt"));
    let cfg = write_config(tmp.path(), "c.toml", &c);
    let out = tmp.path().join("out");
    let o = lego(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(out.join(FAILURE_MARKER).exists());
    assert_eq!(
        read_manifest(&out.join(MANIFEST_FILE)).unwrap().status,
        RunStatus::Failed
    );
}

#[test]
fn reruns_match_and_compare_reports_zero_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &tiny());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for out in [&a, &b] {
        let o = lego(&["run", "--config", s(&cfg), "--out", s(out), "--threads", "1"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("subject"));
    }
    let ma = read_manifest(&a.join(MANIFEST_FILE)).unwrap();
    assert_eq!(ma.status, RunStatus::Complete);
    assert_eq!(ma.files, read_manifest(&b.join(MANIFEST_FILE)).unwrap().files);
    for f in [
        "metrics.csv",
        "reference_metrics.csv",
        "summary.csv",
        "checkpoints/final.ckpt",
    ] {
        assert!(ma.files.contains_key(f), "{f} not recorded");
    }
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );

    let o = lego(&[
        "compare",
        s(&a.join("metrics.csv")),
        s(&b.join("metrics.csv")),
        "--out",
        s(&c),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(c.join("comparison.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(COMPARISON_HEADER));
    for l in lines {
        let cells: Vec<&str> = l.split(',').collect();
        assert_eq!(&cells[5..], ["0.0", "0.0"], "{l}");
    }
}

#[test]
fn seed_override_changes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &tiny());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&lego(&["prune", "--config", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(
        code(&lego(&["prune", "--config", s(&cfg), "--out", s(&b), "--seed", "7"])),
        0
    );
    assert_eq!(read_manifest(&b.join(MANIFEST_FILE)).unwrap().seed, 7);
    assert_ne!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn pretrained_checkpoint_reproduces_the_inline_base() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tiny();
    let cfg = write_config(tmp.path(), "c.toml", &c);
    let pre = tmp.path().join("pre");
    assert_eq!(code(&lego(&["pretrain", "--config", s(&cfg), "--out", s(&pre)])), 0);
    assert!(pre.join("pretrain_loss.csv").exists());

    let mut from_ckpt = c.clone();
    from_ckpt.pretrain.enabled = false;
    from_ckpt.pretrain.checkpoint = Some(pre.join("checkpoints/base.ckpt"));
    let cfg2 = write_config(tmp.path(), "c2.toml", &from_ckpt);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&lego(&["prune", "--config", s(&cfg), "--out", s(&a)])), 0);
    let o = lego(&["prune", "--config", s(&cfg2), "--out", s(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
    assert!(!b.join("checkpoints/base.ckpt").exists());

    let mut wrong = from_ckpt;
    wrong.model.d_model = 16;
    let cfg3 = write_config(tmp.path(), "c3.toml", &wrong);
    assert_eq!(
        code(&lego(&[
            "prune",
            "--config",
            s(&cfg3),
            "--out",
            s(&tmp.path().join("w"))
        ])),
        2
    );
}

#[test]
fn compare_rejects_foreign_and_missing_files() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "a,b,c\n1,2,3\n").unwrap();
    let o = lego(&["compare", s(&bad), s(&bad)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert_eq!(code(&lego(&["compare", s(&tmp.path().join("none.csv")), s(&bad)])), 3);
}

#[test]
fn out_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &tiny());
    let out = tmp.path().join("env_out");
    let o = Command::new(env!("CARGO_BIN_EXE_lego"))
        .args(["prune", "--config", s(&cfg)])
        .env("LEGO_OUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join(MANIFEST_FILE).exists());
}
