use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tplf::io::experiment::ExperimentPlan;
use tplf::io::formats::{write_classified_tsv, write_conll, write_pairs_jsonl};
use tplf::synth::{ConflictBenchmark, ConflictConfig};
use tplf::trainer::PlanMode;

fn tplf(args: &[&str], data_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tplf"));
    cmd.args(args).env("RUST_LOG", "warn");
    match data_dir {
        Some(d) => cmd.env("TPLF_DATA_DIR", d),
        None => cmd.env_remove("TPLF_DATA_DIR"),
    };
    cmd.output().expect("spawn tplf")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "tplf failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Small corpora under `dir` with relative names.
fn write_corpora(dir: &Path) {
    let b = ConflictBenchmark::generate(&ConflictConfig {
        pretrain_sentences: 60,
        pretrain_pairs: 60,
        downstream_train: 40,
        downstream_test: 30,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    write_conll(&dir.join("pre.conll"), &b.pretrain_ner).unwrap();
    write_pairs_jsonl(&dir.join("pairs.jsonl"), &b.pretrain_pairs).unwrap();
    write_conll(&dir.join("ner_train.conll"), &b.ner_train).unwrap();
    write_conll(&dir.join("ner_test.conll"), &b.ner_test).unwrap();
    write_classified_tsv(&dir.join("tc_train.tsv"), &b.tc_train).unwrap();
    write_classified_tsv(&dir.join("tc_test.tsv"), &b.tc_test).unwrap();
}

fn file_plan(dir: &Path) -> PathBuf {
    let mut plan = ExperimentPlan::toy(PlanMode::Mtpf, 0);
    plan.data = serde_json::from_value(serde_json::json!({
        "ner_files": ["pre.conll"],
        "pair_files": ["pairs.jsonl"],
    }))
    .unwrap();
    plan.downstream = None;
    plan.train.total_steps = 6;
    plan.train.snapshot_every = 3;
    plan.diagnostics.samples = 8;
    plan.save_snapshots = true;
    let path = dir.join("plan.json");
    std::fs::write(&path, serde_json::to_string_pretty(&plan).unwrap()).unwrap();
    path
}

#[test]
fn unknown_plan_field_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let mut v = serde_json::to_value(ExperimentPlan::toy(PlanMode::Mtpf, 0)).unwrap();
    v["learning_rate"] = serde_json::json!(0.1);
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = dir.path().join("run");
    let o = tplf(
        &[
            "mtpf",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    assert!(!out.join("metrics.jsonl").exists());
}

#[test]
fn missing_data_file_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let plan = file_plan(dir.path());
    let out = dir.path().join("run");
    let o = tplf(
        &[
            "mtpf",
            "--config",
            plan.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert!(!o.status.success());
    assert!(!out.join("metrics.jsonl").exists());
}

#[test]
fn data_dir_env_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_corpora(&data);
    let plan = file_plan(dir.path());
    let out = dir.path().join("run");
    ok(&tplf(
        &[
            "pretrain-ner",
            "--config",
            plan.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "3",
        ],
        Some(&data),
    ));
    assert!(out.join("final.tplf").exists());
}

#[test]
fn precision_flag_is_only_for_training() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("missing.tplf");
    let o = tplf(
        &[
            "--precision",
            "f64-test",
            "export",
            "--checkpoint",
            ck.to_str().unwrap(),
        ],
        None,
    );
    assert!(!o.status.success());
}

#[test]
fn train_export_adapt_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_corpora(&data);
    let plan = file_plan(dir.path());
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let run = dir.path().join("mtpf");
    ok(&tplf(
        &[
            "mtpf",
            "--config",
            &p(&plan),
            "--out",
            &p(&run),
            "--tpl-layers",
            "all",
            "--threads",
            "1",
            "--steps",
            "4",
        ],
        Some(&data),
    ));
    let state = run.join("final.tplf");

    let bundle = dir.path().join("bundle");
    ok(&tplf(
        &["export", "--checkpoint", &p(&state), "--out", &p(&bundle)],
        None,
    ));
    for f in [
        "manifest.json",
        "backbone.tplf",
        "adapters/ner.tplf",
        "adapters/tc.tplf",
    ] {
        assert!(bundle.join(f).exists(), "{f} missing");
    }

    let ner = dir.path().join("ner");
    let cfg = dir.path().join("adapt.json");
    let ac = tplf::trainer::AdaptNerConfig {
        stage1_epochs: 1,
        stage2_epochs: 1,
        ..Default::default()
    };
    std::fs::write(&cfg, serde_json::to_string(&ac).unwrap()).unwrap();
    ok(&tplf(
        &[
            "adapt-ner",
            "--config",
            &p(&cfg),
            "--backbone",
            &p(&bundle.join("backbone.tplf")),
            "--adapter",
            &p(&bundle.join("adapters/ner.tplf")),
            "--train",
            "ner_train.conll",
            "--test",
            "ner_test.conll",
            "--out",
            &p(&ner),
        ],
        Some(&data),
    ));
    let scores: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ner.join("scores.json")).unwrap()).unwrap();
    assert!(scores.to_string().contains("f1"));

    let tc = dir.path().join("tc");
    ok(&tplf(
        &[
            "adapt-tc",
            "--backbone",
            &p(&state),
            "--train",
            "tc_train.tsv",
            "--test",
            "tc_test.tsv",
            "--out",
            &p(&tc),
        ],
        Some(&data),
    ));
    assert!(tc.join("scores.json").exists());

    let an = dir.path().join("analysis");
    ok(&tplf(
        &[
            "analyze",
            "--checkpoint",
            &p(&run.join("snapshots/step_000000.tplf")),
            &p(&state),
            "--bio",
            "ner_test.conll",
            "--pairs",
            "pairs.jsonl",
            "--samples",
            "10",
            "--out",
            &p(&an),
        ],
        Some(&data),
    ));
    let csv = std::fs::read_to_string(an.join("analysis.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}
