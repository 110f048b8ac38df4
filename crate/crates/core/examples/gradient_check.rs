//! Finite-difference check of the joint pre-finetuning loss in f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tplf::data::LabelSet;
use tplf::encoder::gradcheck::GradCheckOptions;
use tplf::encoder::{gradient_check, EncoderConfig, EncoderParams, Vocab};
use tplf::synth::{ConflictBenchmark, ConflictConfig};
use tplf::trainer::mtpf::{joint_loss_and_grads, PretrainData, TplLayers};
use tplf::trainer::{PlanMode, PrefinetuneModel, TrainPlan};

fn main() -> tplf::Result<()> {
    let b = ConflictBenchmark::generate(&ConflictConfig {
        pretrain_sentences: 20,
        pretrain_pairs: 20,
        ..Default::default()
    })?;
    let words = b.pretrain_ner.word_lists();
    let labels = LabelSet::new(b.pretrain_ner.tag_set());
    let data = PretrainData {
        vocab: Vocab::build(words.iter().map(Vec::as_slice), 1, None),
        max_len: 16,
        ner: Some((vec![b.pretrain_ner], labels)),
        tc: vec![b.pretrain_pairs],
    };
    let mut plan = TrainPlan::new(PlanMode::MtpfTpl, 1, 0);
    plan.tpl_layers = Some(TplLayers::All);
    let cfg = EncoderConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        vocab_size: data.vocab.len(),
        max_seq_len: 16,
        dropout_rate: 0.0,
        seed: 1,
    };
    let mut model =
        PrefinetuneModel::for_plan(EncoderParams::<f64>::init(&cfg)?, &plan, data.ner_classes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ner = data.sample_ner(3, &mut rng)?;
    let tc = data.sample_tc(3, &mut rng)?;
    let report = gradient_check(
        |m: &PrefinetuneModel<f64>| joint_loss_and_grads(m, ner.as_ref(), tc.as_ref(), &plan),
        &mut model,
        // Entries near 1e-6 sit in central-difference round-off at this loss scale.
        &GradCheckOptions {
            epsilon: 3e-5,
            abs_floor: 1e-5,
            ..Default::default()
        },
    )?;
    if let Some((name, idx)) = &report.worst {
        println!("worst entry: {name}[{idx}]");
    }
    println!(
        "checked {} entries, max relative error {:.2e} (tolerance {:.0e}): {}",
        report.checked,
        report.max_rel_error,
        report.tolerance,
        if report.passed { "ok" } else { "FAILED" }
    );
    Ok(())
}
