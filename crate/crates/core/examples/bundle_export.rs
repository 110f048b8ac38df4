//! Train briefly, export a deployment bundle, reload it and check that the
//! reloaded adapters reproduce the live model and refuse a foreign backbone.
//!
//! `cargo run --example bundle_export -- [dir]`

use std::path::PathBuf;

use tplf::data::text_batch;
use tplf::encoder::{encode_with_group, Mode};
use tplf::io::bundle::{export_deployment, DeploymentBundle};
use tplf::io::experiment::{run_experiment, ExperimentPlan};
use tplf::io::store::load_train_state;
use tplf::lora::Task;
use tplf::params::Parameters;
use tplf::trainer::PlanMode;

fn main() -> tplf::Result<()> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "runs/bundle_example".into()),
    );
    let mut plan = ExperimentPlan::toy(PlanMode::MtpfTpl, 0);
    plan.train.total_steps = 50;
    plan.downstream = None;
    run_experiment(&plan, &dir.join("train"))?;

    let saved = load_train_state(&dir.join("train/final.tplf"))?;
    let m = &saved.state.model;
    let labels = saved.ner_labels.as_ref().expect("NER labels").tags.clone();
    let head = m.ner_head.as_ref().expect("NER head");
    let out = dir.join("bundle");
    export_deployment(
        &out,
        &m.encoder,
        &saved.vocab,
        &m.adapters,
        &[(Task::Ner, head, labels)],
    )?;
    let bundle = DeploymentBundle::load(&out)?;
    println!("backbone hash {}", bundle.manifest.backbone_hash);

    let batch = text_batch(&["a sentence the model has never seen"], &saved.vocab, 16);
    for task in [Task::Ner, Task::Tc] {
        let file = bundle.adapter(task)?;
        let live = encode_with_group(&batch, &m.encoder, m.adapters.group(task), &mut Mode::Eval)?;
        let back = encode_with_group(&batch, &bundle.backbone, Some(&file.group), &mut Mode::Eval)?;
        let diff = (&live - &back)
            .mapv(f32::abs)
            .fold(0.0f32, |a, &b| a.max(b));
        println!("{task}: max |live - reloaded| = {diff:e}");
    }

    let mut other = bundle.backbone.clone();
    other.visit_mut(&mut |_, a| a.mapv_inplace(|v| v * 0.5));
    match bundle.adapter_for(Task::Ner, &other) {
        Err(e) => println!("foreign backbone refused: {e}"),
        Ok(_) => println!("foreign backbone accepted (unexpected)"),
    }
    Ok(())
}
