mod common;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tplf::data::text_batch;
use tplf::encoder::{encode_with_group, EncoderParams, Mode};
use tplf::io::experiment::{run_experiment, run_sweep, DownstreamSpec, ExperimentPlan};
use tplf::io::read_metrics;
use tplf::params::Parameters;
use tplf::synth::ConflictConfig;
use tplf::trainer::mtpf::TplLayers;
use tplf::trainer::{pretrain, AdamWConfig, PlanMode, PrefinetuneModel, TrainPlan, TrainState};

fn state_for(
    mode: PlanMode,
    steps: usize,
) -> (TrainState<f32>, TrainPlan, tplf::trainer::PretrainData) {
    let data = common::toy_data();
    let cfg = common::tiny_config(data.vocab.len(), 2, 16);
    let mut plan = TrainPlan::new(mode, steps, 3);
    if mode.has_adapters() {
        plan.tpl_layers = Some(TplLayers::All);
    }
    plan.ner_batch = 4;
    plan.tc_batch = 4;
    plan.optimizer = AdamWConfig::with_lr(1e-2);
    let model = PrefinetuneModel::for_plan(
        EncoderParams::init(&cfg).unwrap(),
        &plan,
        data.ner_classes(),
    )
    .unwrap();
    (TrainState::new(model, &plan), plan, data)
}

#[test]
fn adapters_only_leaves_backbone_bitwise() {
    let (mut state, plan, data) = state_for(PlanMode::PfL, 8);
    let before = state.model.encoder.to_map();
    let adapters_before = state.model.adapters.to_map();
    pretrain(&mut state, &data, &plan, &mut ()).unwrap();
    assert_eq!(state.model.encoder.to_map(), before);
    assert_ne!(state.model.adapters.to_map(), adapters_before);
}

#[test]
fn single_task_plans_only_touch_their_objective() {
    let (mut state, plan, data) = state_for(PlanMode::PfTc, 5);
    let s = pretrain(&mut state, &data, &plan, &mut ()).unwrap();
    assert!(s.final_loss_ner.is_none());
    assert!(s.final_loss_tc.unwrap().is_finite());
    assert_eq!(s.steps_run, 5);

    let (mut state, plan, data) = state_for(PlanMode::PfNer, 5);
    let s = pretrain(&mut state, &data, &plan, &mut ()).unwrap();
    assert!(s.final_loss_tc.is_none());
}

#[test]
fn training_reduces_joint_loss() {
    let (mut state, mut plan, data) = state_for(PlanMode::MtpfTpl, 1);
    plan.total_steps = 1;
    let first = pretrain(&mut state, &data, &plan, &mut ()).unwrap();
    let (mut state, mut plan, data) = state_for(PlanMode::MtpfTpl, 60);
    plan.total_steps = 60;
    let last = pretrain(&mut state, &data, &plan, &mut ()).unwrap();
    assert!(last.final_loss_ner.unwrap() < first.final_loss_ner.unwrap());
}

#[test]
fn stop_file_halts_before_the_next_step() {
    let dir = tempfile::tempdir().unwrap();
    let stop = dir.path().join("STOP");
    std::fs::write(&stop, "").unwrap();
    let (mut state, mut plan, data) = state_for(PlanMode::Mtpf, 50);
    plan.stop_file = Some(stop);
    let s = pretrain(&mut state, &data, &plan, &mut ()).unwrap();
    assert!(s.stopped_early);
    assert!(s.steps_run < 50);
}

#[test]
fn eval_encoding_is_pure_and_row_independent() {
    let data = common::toy_data();
    let cfg = common::tiny_config(data.vocab.len(), 2, 16);
    let enc = EncoderParams::<f32>::init(&cfg).unwrap();
    let short = "red cat";
    let long = "the blue dog sleeps a red cat runs";
    let alone = encode_with_group(
        &text_batch(&[short], &data.vocab, 12),
        &enc,
        None,
        &mut Mode::Eval,
    )
    .unwrap();
    let batch = text_batch(&[long, short], &data.vocab, 12);
    let a = encode_with_group(&batch, &enc, None, &mut Mode::Eval).unwrap();
    let b = encode_with_group(&batch, &enc, None, &mut Mode::Eval).unwrap();
    assert_eq!(a, b);
    let n = alone.shape()[1];
    for t in 0..n {
        for d in 0..alone.shape()[2] {
            assert!(
                (alone[[0, t, d]] - a[[1, t, d]]).abs() < 1e-5,
                "padding leaked into row"
            );
        }
    }
}

#[test]
fn dropout_streams_are_seeded() {
    let data = common::toy_data();
    let mut cfg = common::tiny_config(data.vocab.len(), 1, 16);
    cfg.dropout_rate = 0.3;
    let enc = EncoderParams::<f32>::init(&cfg).unwrap();
    let batch = text_batch(&["red cat runs"], &data.vocab, 12);
    let run = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        encode_with_group(&batch, &enc, None, &mut Mode::Train(&mut r)).unwrap()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

fn small_plan(mode: PlanMode) -> ExperimentPlan {
    let mut plan = ExperimentPlan::toy(mode, 2);
    plan.data.conflict = Some(ConflictConfig {
        pretrain_sentences: 80,
        pretrain_pairs: 80,
        downstream_train: 60,
        downstream_test: 40,
        seed: 2,
        ..Default::default()
    });
    plan.train.total_steps = 12;
    plan.train.snapshot_every = 6;
    plan.diagnostics.samples = 16;
    let mut ds = DownstreamSpec::default();
    ds.ner.stage1_epochs = 1;
    ds.ner.stage2_epochs = 1;
    plan.downstream = Some(ds);
    plan
}

fn phases(path: &Path) -> Vec<String> {
    read_metrics(path)
        .unwrap()
        .into_iter()
        .map(|r| r.phase)
        .collect()
}

#[test]
fn experiment_writes_artifacts_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(PlanMode::MtpfTpl);
    let r = run_experiment(&plan, dir.path()).unwrap();
    for f in [
        "plan.json",
        "metrics.jsonl",
        "final.tplf",
        "curves.csv",
        "report.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert_eq!(r.steps_run, 12);
    assert_eq!(r.homogeneity.points.len(), 3);
    let p = phases(&r.metrics_file);
    for want in ["provenance", "train", "snapshot", "downstream"] {
        assert!(p.iter().any(|x| x == want), "no {want} record");
    }
    let d = r.downstream.unwrap();
    assert!(d.ner_f1.is_some() && d.tc_accuracy.is_some());
}

#[test]
fn tc_only_run_logs_no_ner_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = small_plan(PlanMode::PfTc);
    plan.downstream = None;
    let r = run_experiment(&plan, dir.path()).unwrap();
    let recs = read_metrics(&r.metrics_file).unwrap();
    assert!(recs
        .iter()
        .filter(|r| r.phase == "train")
        .all(|r| !r.metrics.contains_key("loss_ner")));
    assert!(recs.iter().any(|r| r.metrics.contains_key("loss_tc")));
}

#[test]
fn sweep_reports_one_row_per_placement() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = small_plan(PlanMode::Mtpf);
    plan.encoder.num_layers = 4;
    plan.train.total_steps = 4;
    plan.diagnostics.homogeneity = false;
    plan.diagnostics.perturbation = false;
    let rows = run_sweep(&plan, dir.path()).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.tpl_layers.as_str()).collect();
    assert_eq!(labels, vec!["1", "2", "4", "all"]);
    assert!(rows.iter().all(|r| r.combined.is_some()));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
