//! Embedding diagnostics over training: token homogeneity under
//! contrastive training and entity-perturbation similarity under token
//! classification. Prints the curves recorded at each snapshot.

use tplf::io::experiment::{run_experiment, DataSpec, DiagnosticsSpec, ExperimentPlan};
use tplf::synth::{SynthNerConfig, SynthPairConfig};
use tplf::trainer::{PlanMode, TrainPlan};

fn plan(mode: PlanMode) -> ExperimentPlan {
    let mut train = TrainPlan::new(mode, 300, 0);
    train.ner_batch = 16;
    train.tc_batch = 32;
    train.optimizer.lr = if mode == PlanMode::PfTc { 5e-4 } else { 1e-3 };
    train.snapshot_every = 100;
    train.routing_check_every = 0;
    let data = if mode == PlanMode::PfTc {
        DataSpec {
            synth_pairs: Some(SynthPairConfig::new(2000, 0)),
            ..Default::default()
        }
    } else {
        DataSpec {
            synth_ner: Some(SynthNerConfig::new(600, 0)),
            ..Default::default()
        }
    };
    ExperimentPlan {
        name: format!("curves-{}", mode.name()),
        data,
        train,
        diagnostics: DiagnosticsSpec {
            homogeneity: mode == PlanMode::PfTc,
            perturbation: mode == PlanMode::PfNer,
            samples: 100,
            ..Default::default()
        },
        downstream: None,
        ..ExperimentPlan::toy(mode, 0)
    }
}

fn main() -> tplf::Result<()> {
    let root = std::env::temp_dir().join("tplf_curves");
    for mode in [PlanMode::PfTc, PlanMode::PfNer] {
        let r = run_experiment(&plan(mode), &root.join(mode.name()))?;
        let (name, curve) = if mode == PlanMode::PfTc {
            ("homogeneity", &r.homogeneity)
        } else {
            ("perturbation similarity", &r.perturbation)
        };
        println!("{} {name}:", mode.name());
        print!("{}", curve.to_csv());
    }
    Ok(())
}
