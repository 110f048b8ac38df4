//! Optimisation: AdamW, gradient surgery, sampling, pre-finetuning loop and
//! downstream adaptation.

pub mod adapt;
pub mod mtpf;
pub mod optimizer;
pub mod pcgrad;
pub mod sampling;

pub use adapt::{
    adapt_ner, adapt_tc, AdaptNerConfig, AdaptNerReport, NerModel, ProbeConfig, ProbeReport,
};
pub use mtpf::{
    mtpf_step, pretrain, PlanMode, PrefinetuneModel, PretrainData, TrainPlan, TrainState,
};
pub use optimizer::{AdamWConfig, OptimizerState};
pub use pcgrad::{pcgrad_project, Partition};
pub use sampling::hierarchical_sample;
