//! Downstream scores as task-primary adapters cover the last 1, 2, 4 or all
//! layers of a 4-layer encoder.
//!
//! `cargo run --release --example tpl_sweep -- [steps]`

use tplf::io::experiment::{run_sweep, ExperimentPlan};
use tplf::trainer::PlanMode;

fn main() -> tplf::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1000);
    let mut plan = ExperimentPlan::toy(PlanMode::MtpfTpl, 0);
    plan.encoder.num_layers = 4;
    plan.train.total_steps = steps;
    plan.diagnostics.homogeneity = false;
    plan.diagnostics.perturbation = false;
    let rows = run_sweep(&plan, &std::env::temp_dir().join("tplf_sweep"))?;
    println!(
        "{:>6} {:>8} {:>8} {:>8}",
        "layers", "ner_f1", "tc_acc", "combined"
    );
    for r in rows {
        let f = |x: Option<f64>| x.map_or("-".into(), |v| format!("{v:.3}"));
        println!(
            "{:>6} {:>8} {:>8} {:>8}",
            r.tpl_layers,
            f(r.ner_f1),
            f(r.tc_accuracy),
            f(r.combined)
        );
    }
    Ok(())
}
