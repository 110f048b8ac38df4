//! Typed checkpoints: encoders, training states, adapter groups and adapted
//! NER models.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::LabelSet;
use crate::encoder::{EncoderConfig, EncoderParams, Vocab};
use crate::error::{Error, Result};
use crate::io::checkpoint::{peek_config, Checkpoint};
use crate::lora::{AdapterGroup, LoraModule, LoraSpec, Projection, Task};
use crate::params::{Head, Linear, Parameters};
use crate::trainer::adapt::NerModel;
use crate::trainer::mtpf::{PrefinetuneModel, RngSnapshot, TrainPlan, TrainState};
use crate::trainer::optimizer::OptimizerState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum CheckpointKind {
    Encoder {
        encoder: EncoderConfig,
        vocab: Vocab,
    },
    TrainState {
        encoder: EncoderConfig,
        vocab: Vocab,
        plan: TrainPlan,
        step: u64,
        skipped_nonfinite: u64,
        rngs: [RngSnapshot; 2],
        ner_labels: Option<LabelSet>,
    },
    Adapter {
        task: Task,
        group: String,
        spec: LoraSpec,
        backbone_hash: String,
        head: Option<HeadMeta>,
    },
    NerModel {
        encoder: EncoderConfig,
        vocab: Vocab,
        group: String,
        spec: LoraSpec,
        labels: LabelSet,
    },
}

impl CheckpointKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Encoder { .. } => "encoder",
            Self::TrainState { .. } => "train_state",
            Self::Adapter { .. } => "adapter",
            Self::NerModel { .. } => "ner_model",
        }
    }
}

/// Head shape and the label names of its outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub name: String,
    pub labels: Vec<String>,
}

pub fn peek_kind(path: &Path) -> Result<CheckpointKind> {
    Ok(serde_json::from_str(&peek_config(path)?)?)
}

fn wrong_kind(path: &Path, want: &str, got: &CheckpointKind) -> Error {
    Error::config(format!(
        "{}: expected a {want} checkpoint, found {}",
        path.display(),
        got.name()
    ))
}

fn rebuild_encoder(
    cfg: &EncoderConfig,
    arrays: &BTreeMap<String, Array2<f32>>,
) -> Result<EncoderParams<f32>> {
    let mut enc = EncoderParams::<f32>::init(cfg)?;
    enc.load_map(arrays)?;
    Ok(enc)
}

fn rebuild_group(
    name: &str,
    spec: &LoraSpec,
    arrays: &BTreeMap<String, Array2<f32>>,
) -> Result<AdapterGroup<f32>> {
    let mut modules = BTreeMap::new();
    let prefix = format!("{name}.layers.");
    for (k, a) in arrays {
        let Some(rest) = k.strip_prefix(&prefix) else {
            continue;
        };
        let Some(stem) = rest.strip_suffix(".a") else {
            continue;
        };
        let (layer, proj) = stem
            .split_once('.')
            .ok_or_else(|| Error::Corrupt(format!("bad adapter array name {k}")))?;
        let layer: usize = layer
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad layer index in {k}")))?;
        let proj = Projection::from_name(proj)
            .ok_or_else(|| Error::Corrupt(format!("bad projection in {k}")))?;
        let b = arrays
            .get(&format!("{prefix}{stem}.b"))
            .ok_or_else(|| Error::Corrupt(format!("{k} has no matching B factor")))?;
        modules.insert(
            (layer, proj),
            LoraModule::from_factors(a.clone(), b.clone(), spec.alpha)?,
        );
    }
    if modules.is_empty() {
        return Err(Error::Corrupt(format!(
            "no arrays for adapter group {name}"
        )));
    }
    Ok(AdapterGroup {
        name: name.to_string(),
        spec: spec.clone(),
        modules,
    })
}

fn rebuild_head(name: &str, arrays: &BTreeMap<String, Array2<f32>>) -> Result<Head<f32>> {
    let mut head = Head {
        name: name.to_string(),
        linear: Linear::zeros(0, 0),
    };
    let prefix = head.prefix();
    let w = arrays
        .get(&format!("{prefix}.weight"))
        .ok_or_else(|| Error::Corrupt(format!("missing {prefix}.weight")))?;
    head.linear = Linear::zeros(w.ncols(), w.nrows());
    head.load_map(arrays)?;
    Ok(head)
}

pub fn save_encoder(path: &Path, params: &EncoderParams<f32>, vocab: &Vocab) -> Result<()> {
    Checkpoint::new(&CheckpointKind::Encoder {
        encoder: params.config.clone(),
        vocab: vocab.clone(),
    })?
    .with_params(params)?
    .save(path)
}

/// Loads any checkpoint that carries a backbone; adapters are ignored.
pub fn load_encoder(path: &Path) -> Result<(EncoderParams<f32>, Vocab)> {
    let ck = Checkpoint::load(path)?;
    match ck.config_as::<CheckpointKind>()? {
        CheckpointKind::Encoder { encoder, vocab }
        | CheckpointKind::TrainState { encoder, vocab, .. }
        | CheckpointKind::NerModel { encoder, vocab, .. } => {
            Ok((rebuild_encoder(&encoder, &ck.subset("encoder."))?, vocab))
        }
        other => Err(wrong_kind(path, "backbone", &other)),
    }
}

/// A resumable training state with its plan, vocabulary and label set.
pub struct SavedTrainState {
    pub state: TrainState<f32>,
    pub plan: TrainPlan,
    pub vocab: Vocab,
    pub ner_labels: Option<LabelSet>,
}

pub fn save_train_state(
    path: &Path,
    state: &TrainState<f32>,
    plan: &TrainPlan,
    vocab: &Vocab,
    ner_labels: Option<&LabelSet>,
) -> Result<()> {
    let mut ck = Checkpoint::new(&CheckpointKind::TrainState {
        encoder: state.model.encoder.config.clone(),
        vocab: vocab.clone(),
        plan: plan.clone(),
        step: state.opt.step,
        skipped_nonfinite: state.opt.skipped_nonfinite,
        rngs: state.rng_snapshot(),
        ner_labels: ner_labels.cloned(),
    })?
    .with_params(&state.model)?;
    ck.insert_all(state.opt.moment_arrays())?;
    ck.save(path)
}

pub fn load_train_state(path: &Path) -> Result<SavedTrainState> {
    let ck = Checkpoint::load(path)?;
    let kind = ck.config_as::<CheckpointKind>()?;
    let CheckpointKind::TrainState {
        encoder,
        vocab,
        plan,
        step,
        skipped_nonfinite,
        rngs,
        ner_labels,
    } = kind
    else {
        return Err(wrong_kind(path, "train_state", &kind));
    };
    let enc = EncoderParams::<f32>::init(&encoder)?;
    let mut model = PrefinetuneModel::for_plan(enc, &plan, ner_labels.as_ref().map(LabelSet::len))?;
    let params: BTreeMap<String, Array2<f32>> = ck
        .arrays
        .iter()
        .filter(|(k, _)| !k.starts_with("opt."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    if params.len() != model.param_names().len() {
        return Err(Error::Corrupt(format!(
            "{} parameter arrays on disk, model expects {}",
            params.len(),
            model.param_names().len()
        )));
    }
    model.load_map(&params)?;
    let mut opt = OptimizerState::new(plan.optimizer);
    opt.step = step;
    opt.skipped_nonfinite = skipped_nonfinite;
    opt.load_moments(&ck.subset("opt."));
    let mut state = TrainState::new(model, &plan);
    state.opt = opt;
    state.restore_rngs(&rngs);
    Ok(SavedTrainState {
        state,
        plan,
        vocab,
        ner_labels,
    })
}

/// A standalone adapter group, optionally with a task head.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterFile {
    pub task: Task,
    pub group: AdapterGroup<f32>,
    pub head: Option<(Head<f32>, HeadMeta)>,
    pub backbone_hash: String,
}

pub fn save_adapter(path: &Path, file: &AdapterFile) -> Result<()> {
    let mut ck = Checkpoint::new(&CheckpointKind::Adapter {
        task: file.task,
        group: file.group.name.clone(),
        spec: file.group.spec.clone(),
        backbone_hash: file.backbone_hash.clone(),
        head: file.head.as_ref().map(|(_, m)| m.clone()),
    })?
    .with_params(&file.group)?;
    if let Some((h, _)) = &file.head {
        ck.insert_all(h.to_map())?;
    }
    ck.save(path)
}

pub fn load_adapter(path: &Path) -> Result<AdapterFile> {
    let ck = Checkpoint::load(path)?;
    let kind = ck.config_as::<CheckpointKind>()?;
    let CheckpointKind::Adapter {
        task,
        group,
        spec,
        backbone_hash,
        head,
    } = kind
    else {
        return Err(wrong_kind(path, "adapter", &kind));
    };
    let g = rebuild_group(&group, &spec, &ck.arrays)?;
    let head = match head {
        Some(meta) => {
            let h = rebuild_head(&meta.name, &ck.arrays)?;
            if h.linear.out_dim() != meta.labels.len() {
                return Err(Error::LabelMismatch(format!(
                    "head {} has {} outputs for {} labels",
                    meta.name,
                    h.linear.out_dim(),
                    meta.labels.len()
                )));
            }
            Some((h, meta))
        }
        None => None,
    };
    Ok(AdapterFile {
        task,
        group: g,
        head,
        backbone_hash,
    })
}

pub fn save_ner_model(path: &Path, model: &NerModel, vocab: &Vocab) -> Result<()> {
    let mut ck = Checkpoint::new(&CheckpointKind::NerModel {
        encoder: model.encoder.config.clone(),
        vocab: vocab.clone(),
        group: model.lora.name.clone(),
        spec: model.lora.spec.clone(),
        labels: model.labels.clone(),
    })?
    .with_params(&model.encoder)?;
    ck.insert_all(model.lora.to_map())?;
    ck.insert_all(model.head.to_map())?;
    ck.save(path)
}

pub fn load_ner_model(path: &Path) -> Result<(NerModel, Vocab)> {
    let ck = Checkpoint::load(path)?;
    let kind = ck.config_as::<CheckpointKind>()?;
    let CheckpointKind::NerModel {
        encoder,
        vocab,
        group,
        spec,
        labels,
    } = kind
    else {
        return Err(wrong_kind(path, "ner_model", &kind));
    };
    let head = rebuild_head("ner", &ck.arrays)?;
    if head.linear.out_dim() != labels.len() {
        return Err(Error::LabelMismatch(
            "head width differs from label count".into(),
        ));
    }
    Ok((
        NerModel {
            encoder: rebuild_encoder(&encoder, &ck.subset("encoder."))?,
            lora: rebuild_group(&group, &spec, &ck.arrays)?,
            head,
            labels,
        },
        vocab,
    ))
}

/// The TPL group for `task` out of a training-state checkpoint.
pub fn tpl_group(saved: &SavedTrainState, task: Task) -> Option<&AdapterGroup<f32>> {
    saved.state.model.adapters.group(task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::mtpf::PlanMode;

    fn tiny() -> (EncoderParams<f32>, Vocab) {
        let words: Vec<Vec<String>> = vec![vec!["alpha".into(), "beta".into()]];
        let vocab = Vocab::build(words.iter().map(|v| v.as_slice()), 1, None);
        let mut cfg = EncoderConfig::tiny(vocab.len());
        cfg.num_layers = 2;
        (EncoderParams::init(&cfg).unwrap(), vocab)
    }

    #[test]
    fn encoder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (enc, vocab) = tiny();
        let p = dir.path().join("e.tplf");
        save_encoder(&p, &enc, &vocab).unwrap();
        let (back, v2) = load_encoder(&p).unwrap();
        assert_eq!(back, enc);
        assert_eq!(v2, vocab);
        assert_eq!(peek_kind(&p).unwrap().name(), "encoder");
    }

    #[test]
    fn train_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (enc, vocab) = tiny();
        let mut plan = TrainPlan::new(PlanMode::MtpfTpl, 3, 11);
        plan.tpl_layers = Some(crate::trainer::mtpf::TplLayers::Count(1));
        let labels = LabelSet::new(vec!["O".into(), "B-X".into()]);
        let model = PrefinetuneModel::for_plan(enc, &plan, Some(2)).unwrap();
        let mut state = TrainState::new(model, &plan);
        state.opt.step = 5;
        state
            .opt
            .m
            .insert("encoder.token_embeddings".into(), Array2::ones((2, 2)));
        state
            .opt
            .v
            .insert("encoder.token_embeddings".into(), Array2::ones((2, 2)));
        let _: u64 = rand::Rng::random(&mut state.data_rng);
        let p = dir.path().join("s.tplf");
        save_train_state(&p, &state, &plan, &vocab, Some(&labels)).unwrap();
        let back = load_train_state(&p).unwrap();
        assert_eq!(back.state.model, state.model);
        assert_eq!(back.state.opt.m, state.opt.m);
        assert_eq!(back.state.opt.step, 5);
        assert_eq!(back.state.rng_snapshot(), state.rng_snapshot());
        assert_eq!(back.plan, plan);
        assert_eq!(back.ner_labels, Some(labels));
    }

    #[test]
    fn adapter_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let (enc, vocab) = tiny();
        let mut group =
            AdapterGroup::<f32>::new("lora.tc", &LoraSpec::task_primary(), &enc.config, 3).unwrap();
        for m in group.modules.values_mut() {
            m.b.fill(0.25);
        }
        let file = AdapterFile {
            task: Task::Tc,
            group,
            head: None,
            backbone_hash: "x".into(),
        };
        let p = dir.path().join("a.tplf");
        save_adapter(&p, &file).unwrap();
        assert_eq!(load_adapter(&p).unwrap(), file);
        let e = dir.path().join("e.tplf");
        save_encoder(&e, &enc, &vocab).unwrap();
        assert!(load_adapter(&e).is_err());
    }
}
