//! Downstream evaluation of a pre-finetuned encoder: two-stage LoRA NER
//! adaptation warm-started from the NER adapters, and a linear probe on
//! pooled embeddings with the TC adapters.

use tplf::data::LabelSet;
use tplf::encoder::Vocab;
use tplf::io::experiment::ExperimentPlan;
use tplf::io::store::load_train_state;
use tplf::lora::Task;
use tplf::synth::{ConflictBenchmark, ConflictConfig};
use tplf::trainer::{adapt_ner, adapt_tc, AdaptNerConfig, PlanMode, ProbeConfig};

fn main() -> tplf::Result<()> {
    let dir = std::env::temp_dir().join("tplf_adapt");
    let mut plan = ExperimentPlan::toy(PlanMode::MtpfTpl, 1);
    plan.train.total_steps = 200;
    plan.downstream = None;
    tplf::io::experiment::run_experiment(&plan, &dir)?;
    let saved = load_train_state(&dir.join("final.tplf"))?;
    let m = &saved.state.model;
    let vocab: &Vocab = &saved.vocab;

    let bench = ConflictBenchmark::generate(
        plan.data
            .conflict
            .as_ref()
            .unwrap_or(&ConflictConfig::default()),
    )?;
    let labels = LabelSet::new(bench.ner_train.tag_set());
    let cfg = AdaptNerConfig {
        stage1_epochs: 3,
        stage2_epochs: 6,
        ..Default::default()
    };
    let (ner, report) = adapt_ner(
        &m.encoder,
        m.adapters.group(Task::Ner),
        &bench.ner_train,
        &labels,
        vocab,
        &cfg,
    )?;
    let scores = ner.evaluate(vocab, &bench.ner_test)?;
    println!("NER: {report:?}");
    println!("NER test span F1 {:.3}", scores.f1);

    let (_, probe) = adapt_tc(
        &m.encoder,
        m.adapters.group(Task::Tc),
        &bench.tc_train,
        &bench.tc_test,
        vocab,
        &ProbeConfig::default(),
    )?;
    println!(
        "TC probe: train {:.3}  test {:.3}",
        probe.train_accuracy, probe.test_accuracy
    );
    Ok(())
}
