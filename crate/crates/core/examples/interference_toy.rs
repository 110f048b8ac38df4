//! Naive MTPF against MTPF-TPL on the conflicting bi-task benchmark.
//!
//! `cargo run --release --example interference_toy -- [seed]`

use std::time::Instant;

use tplf::io::experiment::{run_experiment, ExperimentPlan};
use tplf::trainer::PlanMode;

fn main() -> tplf::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let out = std::env::temp_dir().join(format!("tplf-interference-{seed}"));
    for mode in [PlanMode::Mtpf, PlanMode::MtpfTpl] {
        let t = Instant::now();
        let plan = ExperimentPlan::toy(mode, seed);
        let r = run_experiment(&plan, &out.join(mode.name()))?;
        let d = r.downstream.expect("toy plan has downstream sets");
        println!(
            "{:<9} ner_f1 {:.4}  tc_acc {:.4}  combined {:.4}  loss_ner {:?} loss_tc {:?}  ({:.1}s)",
            mode.name(),
            d.ner_f1.unwrap_or(f64::NAN),
            d.tc_accuracy.unwrap_or(f64::NAN),
            d.combined.unwrap_or(f64::NAN),
            r.final_loss_ner,
            r.final_loss_tc,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
