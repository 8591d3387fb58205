use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use readmit::pipeline::sha256_file;

const SMALL: [&str; 16] = [
    "--synth.n_patients",
    "300",
    "--synth.signal",
    "token",
    "--model.d",
    "4",
    "--model.a",
    "4",
    "--model.hidden",
    "8",
    "--model.epochs",
    "1",
    "--featurize.max_windows",
    "16",
    "--baseline.epochs",
    "2",
];

fn readmit(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_readmit"))
        .args(args)
        .arg("--paths.workdir")
        .arg(workdir)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn small(workdir: &Path, args: &[&str]) -> Output {
    let mut all = args.to_vec();
    all.extend(SMALL);
    readmit(workdir, &all)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = readmit(dir.path(), &["cohort", "--model.d", "0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.d"), "{}", stderr(&o));

    let o = readmit(dir.path(), &["cohort", "--no.such_key", "1"]);
    assert_eq!(code(&o), 2);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nepochs = \"six\"\n").unwrap();
    let o = readmit(dir.path(), &["cohort", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.epochs"), "{}", stderr(&o));
}

#[test]
fn missing_upstream_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = readmit(dir.path(), &["train"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("cohort/train.jsonl"), "{}", stderr(&o));
}

#[test]
fn flags_override_the_config_file_and_the_echo_records_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 3\n[synth]\nn_patients = 50\n[model]\nepochs = 4\n").unwrap();
    let work = dir.path().join("w");
    let o = readmit(&work, &["synth", "--config", cfg.to_str().unwrap(), "--model.epochs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo: toml::Table = fs::read_to_string(work.join("config.resolved.toml")).unwrap().parse().unwrap();
    assert_eq!(echo["model"]["epochs"].as_integer(), Some(2));
    assert_eq!(echo["synth"]["n_patients"].as_integer(), Some(50));
    assert_eq!(echo["seed"].as_integer(), Some(3));
}

#[test]
fn gradcheck_subcommand_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = readmit(dir.path(), &["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("gradcheck/report.txt")).unwrap();
    assert!(report.lines().all(|l| l.contains(" PASS ")), "{report}");
    assert!(report.contains("model_toy PASS"));
}

#[test]
fn concurrent_runs_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".lock"), "").unwrap();
    let o = readmit(dir.path(), &["synth", "--synth.n_patients", "5"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn eval_prints_per_class_block() {
    let dir = tempfile::tempdir().unwrap();
    let o = small(dir.path(), &["all"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = small(dir.path(), &["eval", "--model", "lstm", "--split", "test"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    for key in ["auroc:", "class_0: precision", "class_1: precision", "confusion: tp"] {
        assert!(out.contains(key), "{out}");
    }
    let o = small(dir.path(), &["predict", "--model", "baseline", "--split", "validation"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("predictions/baseline-validation.jsonl").is_file());
}

#[test]
fn rerunning_a_stage_reproduces_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["synth", "cohort"] {
        assert_eq!(code(&small(dir.path(), &[stage])), 0);
    }
    let first = fs::read_to_string(dir.path().join("stages/cohort.json")).unwrap();
    assert_eq!(code(&small(dir.path(), &["cohort"])), 0);
    let second = fs::read_to_string(dir.path().join("stages/cohort.json")).unwrap();
    let outputs = |s: &str| serde_json::from_str::<serde_json::Value>(s).unwrap()["outputs"].clone();
    assert_eq!(outputs(&first), outputs(&second));
}

#[test]
fn changed_settings_make_downstream_stale() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["synth", "cohort", "vocab"] {
        assert_eq!(code(&small(dir.path(), &[stage])), 0);
    }
    let o = small(dir.path(), &["vocab", "--cohort.horizon_days", "10"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("cohort.horizon_days"), "{}", stderr(&o));
}

/// Training artifacts must not depend on test labels: flip them all and
/// retrain; every training output stays byte-identical, while evaluation
/// notices the edited file.
#[test]
fn test_labels_never_reach_training() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let mut ov = SMALL.to_vec();
    ov.extend(["--model.oversample", "0.2"]);
    let run = |stage: &str| {
        let mut args = vec![stage];
        args.extend(&ov);
        readmit(w, &args)
    };
    for stage in ["synth", "cohort", "vocab", "train", "train-baseline"] {
        let o = run(stage);
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
    let tracked = ["vocab/vocab.txt", "model/lstm.ckpt", "model/train_set.tsv", "baseline/baseline.bin"];
    let before: Vec<String> = tracked.iter().map(|r| sha256_file(&w.join(r)).unwrap()).collect();

    let test_path = w.join("cohort/test.jsonl");
    let flipped: String = fs::read_to_string(&test_path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            let y = v["label"].as_u64().unwrap();
            v["label"] = serde_json::json!(1 - y);
            format!("{v}\n")
        })
        .collect();
    fs::write(&test_path, flipped).unwrap();

    for stage in ["vocab", "train", "train-baseline"] {
        let o = run(stage);
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
    let after: Vec<String> = tracked.iter().map(|r| sha256_file(&w.join(r)).unwrap()).collect();
    assert_eq!(before, after);

    let mut args = vec!["eval", "--model", "lstm"];
    args.extend(&ov);
    let o = readmit(w, &args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("cohort/test.jsonl"));
}
