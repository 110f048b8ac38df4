//! Individual and multi-task pre-finetuning.
//!
//! Each task's loss is built on its own tape, so a task's gradient map only
//! holds entries for the parameters that loss actually reads. The NER tape
//! sees the backbone, the NER adapter group and the NER head; the TC tape sees
//! the backbone and the TC group. Combining the two maps is then a sum over
//! the shared backbone keys only.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Graph, Real};
use crate::data::{
    contrastive_batch, labeled_batch, LabelSet, PairDataset, SubtokenLabels, TokenDataset,
};
use crate::encoder::{EncoderParams, Mode, TrainRng, Vocab};
use crate::error::{Error, Result};
use crate::lora::{attach_task_primary, LayerSelection, LoraSpec, Task, TaskPrimaryAdapterSet};
use crate::objectives::{
    contrastive_loss_graph, token_loss_graph, ContrastiveBatch, ContrastiveConfig,
    TokenLabeledBatch,
};
use crate::params::{Head, Linear, Parameters};
use crate::trainer::optimizer::{AdamWConfig, OptimizerState};
use crate::trainer::pcgrad::{flatten, pcgrad_project, unflatten, GradientSet, Partition};
use crate::trainer::sampling::hierarchical_sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlanMode {
    #[serde(rename = "PF-NER")]
    PfNer,
    #[serde(rename = "PF-TC")]
    PfTc,
    #[serde(rename = "MTPF")]
    Mtpf,
    #[serde(rename = "MTPF-TPL")]
    MtpfTpl,
    /// Backbone frozen; only adapters (and the NER head) train.
    #[serde(rename = "PF-L")]
    PfL,
}

impl PlanMode {
    pub fn name(self) -> &'static str {
        match self {
            PlanMode::PfNer => "PF-NER",
            PlanMode::PfTc => "PF-TC",
            PlanMode::Mtpf => "MTPF",
            PlanMode::MtpfTpl => "MTPF-TPL",
            PlanMode::PfL => "PF-L",
        }
    }

    pub fn uses(self, task: Task) -> bool {
        !matches!(
            (self, task),
            (PlanMode::PfNer, Task::Tc) | (PlanMode::PfTc, Task::Ner)
        )
    }

    pub fn has_adapters(self) -> bool {
        matches!(self, PlanMode::MtpfTpl | PlanMode::PfL)
    }

    pub fn backbone_frozen(self) -> bool {
        self == PlanMode::PfL
    }
}

/// Number of final layers that carry task-primary adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TplLayers {
    Count(usize),
    #[serde(with = "all_tag")]
    All,
}

mod all_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("all")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "all" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!(
                "expected \"all\", got {s:?}"
            )))
        }
    }
}

impl TplLayers {
    pub fn selection(self) -> LayerSelection {
        match self {
            TplLayers::Count(n) => LayerSelection::Last(n),
            TplLayers::All => LayerSelection::All,
        }
    }

    pub fn label(self) -> String {
        match self {
            TplLayers::Count(n) => n.to_string(),
            TplLayers::All => "all".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub mode: PlanMode,
    #[serde(default)]
    pub pcgrad: bool,
    /// Only meaningful for MTPF-TPL and PF-L; defaults to the last two layers.
    #[serde(default)]
    pub tpl_layers: Option<TplLayers>,
    #[serde(default = "one")]
    pub w_ner: f64,
    #[serde(default = "one")]
    pub w_tc: f64,
    #[serde(default = "default_ner_batch")]
    pub ner_batch: usize,
    #[serde(default = "default_tc_batch")]
    pub tc_batch: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_tpl_spec")]
    pub tpl: LoraSpec,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
    /// One task per step, NER on even steps, instead of summing both.
    #[serde(default)]
    pub alternating: bool,
    /// Linear warmup length in steps; 0 keeps the rate constant.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Snapshot period for diagnostics curves; 0 disables.
    #[serde(default)]
    pub snapshot_every: usize,
    /// Routing assertion period; 0 disables.
    #[serde(default = "default_routing_every")]
    pub routing_check_every: usize,
    #[serde(default)]
    pub stop_file: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}
fn default_ner_batch() -> usize {
    256
}
fn default_tc_batch() -> usize {
    1024
}
fn default_tpl_spec() -> LoraSpec {
    LoraSpec::task_primary()
}
fn default_routing_every() -> usize {
    if cfg!(debug_assertions) {
        1
    } else {
        0
    }
}

impl TrainPlan {
    pub fn new(mode: PlanMode, total_steps: usize, seed: u64) -> Self {
        Self {
            mode,
            pcgrad: false,
            tpl_layers: None,
            w_ner: 1.0,
            w_tc: 1.0,
            ner_batch: default_ner_batch(),
            tc_batch: default_tc_batch(),
            total_steps,
            seed,
            optimizer: AdamWConfig::default(),
            tpl: LoraSpec::task_primary(),
            contrastive: ContrastiveConfig::default(),
            alternating: false,
            warmup_steps: 0,
            snapshot_every: 0,
            routing_check_every: default_routing_every(),
            stop_file: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tpl_layers.is_some() && !self.mode.has_adapters() {
            return Err(Error::config(format!(
                "tpl_layers is only valid for MTPF-TPL and PF-L, not {}",
                self.mode.name()
            )));
        }
        if self.pcgrad && !matches!(self.mode, PlanMode::Mtpf | PlanMode::MtpfTpl) {
            return Err(Error::config("pcgrad needs a multi-task mode"));
        }
        if self.alternating
            && !matches!(
                self.mode,
                PlanMode::Mtpf | PlanMode::MtpfTpl | PlanMode::PfL
            )
        {
            return Err(Error::config("alternating needs a multi-task mode"));
        }
        if !(self.w_ner >= 0.0 && self.w_tc >= 0.0) {
            return Err(Error::config("loss weights must be >= 0"));
        }
        if self.ner_batch == 0 || self.tc_batch == 0 {
            return Err(Error::config("batch sizes must be >= 1"));
        }
        if let Some(TplLayers::Count(0)) = self.tpl_layers {
            return Err(Error::config("tpl_layers must be >= 1"));
        }
        self.optimizer.validate()?;
        self.contrastive.validate()
    }

    /// The adapter spec with `tpl_layers` applied.
    pub fn adapter_spec(&self) -> LoraSpec {
        let mut spec = self.tpl.clone();
        if let Some(l) = self.tpl_layers {
            spec.target_layers = l.selection();
        }
        spec
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.optimizer.lr
        } else {
            self.optimizer.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// Backbone, task-primary adapters and the NER pre-finetuning head.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefinetuneModel<T> {
    pub encoder: EncoderParams<T>,
    pub adapters: TaskPrimaryAdapterSet<T>,
    pub ner_head: Option<Head<T>>,
}

impl<T: Real> PrefinetuneModel<T> {
    /// Attaches adapters and a fresh NER head as the plan requires.
    pub fn for_plan(
        encoder: EncoderParams<T>,
        plan: &TrainPlan,
        ner_classes: Option<usize>,
    ) -> Result<Self> {
        let mut tasks = Vec::new();
        if plan.mode.uses(Task::Ner) && ner_classes.is_some() {
            tasks.push(Task::Ner);
        }
        if plan.mode.uses(Task::Tc) {
            tasks.push(Task::Tc);
        }
        let adapters = if plan.mode.has_adapters() {
            attach_task_primary(&encoder, &plan.adapter_spec(), &tasks, plan.seed)?
        } else {
            TaskPrimaryAdapterSet::default()
        };
        let ner_head = match ner_classes {
            Some(k) if plan.mode.uses(Task::Ner) => {
                let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x4e45_5248);
                Some(Head {
                    name: "ner".into(),
                    linear: Linear::new(
                        encoder.hidden_dim(),
                        k,
                        crate::encoder::INIT_SIGMA,
                        &mut rng,
                    ),
                })
            }
            _ => None,
        };
        Ok(Self {
            encoder,
            adapters,
            ner_head,
        })
    }

    pub fn cast<U: Real>(&self) -> PrefinetuneModel<U> {
        PrefinetuneModel {
            encoder: self.encoder.cast(),
            adapters: self.adapters.cast(),
            ner_head: self.ner_head.as_ref().map(|h| Head {
                name: h.name.clone(),
                linear: h.linear.cast(),
            }),
        }
    }
}

impl<T: Real> Parameters<T> for PrefinetuneModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array2<T>)) {
        self.encoder.visit(f);
        self.adapters.visit(f);
        if let Some(h) = &self.ner_head {
            h.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        self.encoder.visit_mut(f);
        self.adapters.visit_mut(f);
        if let Some(h) = &mut self.ner_head {
            h.visit_mut(f);
        }
    }
}

/// One task's loss and gradients, from its own tape.
#[derive(Debug, Clone)]
pub struct TaskGradients<T> {
    pub loss: T,
    pub grads: GradMap<T>,
}

fn check_finite<T: Real>(loss: T, name: &str, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            name: name.into(),
            step,
        })
    }
}

pub fn ner_gradients<T: Real>(
    model: &PrefinetuneModel<T>,
    batch: &TokenLabeledBatch,
    plan_mode: PlanMode,
    mode: &mut Mode<'_>,
) -> Result<TaskGradients<T>> {
    let head = model
        .ner_head
        .as_ref()
        .ok_or_else(|| Error::config("NER loss needs a head"))?;
    let mut g = Graph::new();
    if plan_mode.backbone_frozen() {
        g.freeze_prefix("encoder.");
    }
    let group = model.adapters.group(Task::Ner);
    let loss = token_loss_graph(&mut g, batch, &model.encoder, group, head, mode)?;
    Ok(TaskGradients {
        loss: g.scalar(loss),
        grads: g.backward(loss),
    })
}

pub fn tc_gradients<T: Real>(
    model: &PrefinetuneModel<T>,
    batch: &ContrastiveBatch,
    plan_mode: PlanMode,
    cfg: &ContrastiveConfig,
    mode: &mut Mode<'_>,
) -> Result<TaskGradients<T>> {
    let mut g = Graph::new();
    if plan_mode.backbone_frozen() {
        g.freeze_prefix("encoder.");
    }
    let group = model.adapters.group(Task::Tc);
    let loss = contrastive_loss_graph(&mut g, batch, &model.encoder, group, cfg, mode)?;
    Ok(TaskGradients {
        loss: g.scalar(loss),
        grads: g.backward(loss),
    })
}

/// Errors unless neither task's map touches the other task's adapter group.
pub fn verify_routing<T: Real>(ner: Option<&GradMap<T>>, tc: Option<&GradMap<T>>) -> Result<()> {
    let leaks = |g: &GradMap<T>, forbidden: Partition| {
        g.iter()
            .filter(|(k, v)| Partition::of(k) == forbidden && v.iter().any(|x| *x != T::zero()))
            .map(|(k, _)| k.clone())
            .collect::<Vec<_>>()
    };
    let mut bad = Vec::new();
    if let Some(g) = ner {
        bad.extend(leaks(g, Partition::TcTpl));
    }
    if let Some(g) = tc {
        bad.extend(leaks(g, Partition::NerTpl));
        bad.extend(leaks(g, Partition::Heads));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "internal: cross-task gradient on {}",
            bad.join(", ")
        )))
    }
}

/// Combined update `w_ner·g_ner + w_tc·g_tc`, with PCGrad on the backbone
/// partition when requested. Returns the combined set and whether the
/// backbone gradients conflicted.
pub fn combine_gradients<T: Real>(
    model: &PrefinetuneModel<T>,
    ner: Option<&GradMap<T>>,
    tc: Option<&GradMap<T>>,
    w_ner: f64,
    w_tc: f64,
    pcgrad: bool,
) -> Result<(GradientSet<T>, bool)> {
    let mut ner = ner.cloned();
    let mut tc = tc.cloned();
    let mut conflict = false;
    if let (true, Some(gn), Some(gt)) = (pcgrad, ner.as_mut(), tc.as_mut()) {
        let mut layout = Vec::new();
        model
            .encoder
            .visit(&mut |n, a| layout.push((n.to_string(), a.dim())));
        let fa = flatten(gn, &layout);
        let fb = flatten(gt, &layout);
        let d: T = fa.iter().zip(&fb).map(|(&x, &y)| x * y).sum();
        conflict = d < T::zero();
        if conflict {
            let (pa, pb) = pcgrad_project(&fa, &fb)?;
            for (k, v) in unflatten(&pa, &layout) {
                gn.insert(k, v);
            }
            for (k, v) in unflatten(&pb, &layout) {
                gt.insert(k, v);
            }
        }
    }
    let mut set = GradientSet::default();
    if let Some(g) = &ner {
        set.add_scaled(g, T::lit(w_ner));
    }
    if let Some(g) = &tc {
        set.add_scaled(g, T::lit(w_tc));
    }
    Ok((set, conflict))
}

/// Losses and diagnostics of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepOutcome {
    pub step: u64,
    pub loss_ner: Option<f64>,
    pub loss_tc: Option<f64>,
    pub conflict: bool,
    pub skipped_nonfinite: u64,
    pub lr: f64,
}

/// One routed pre-finetuning step. Branches without a batch are skipped.
#[allow(clippy::too_many_arguments)]
pub fn mtpf_step<T: Real>(
    model: &mut PrefinetuneModel<T>,
    ner_batch: Option<&TokenLabeledBatch>,
    tc_batch: Option<&ContrastiveBatch>,
    plan: &TrainPlan,
    opt: &mut OptimizerState<T>,
    rng: &mut TrainRng,
) -> Result<StepOutcome> {
    let step = opt.step;
    let ner_batch = ner_batch.filter(|_| plan.mode.uses(Task::Ner));
    let tc_batch = tc_batch.filter(|_| plan.mode.uses(Task::Tc));
    if ner_batch.is_none() && tc_batch.is_none() {
        return Err(Error::EmptyBatch);
    }

    let ner = match ner_batch {
        Some(b) => {
            let r = ner_gradients(model, b, plan.mode, &mut Mode::Train(rng))?;
            check_finite(r.loss, "ner", step)?;
            Some(r)
        }
        None => None,
    };
    let tc = match tc_batch {
        Some(b) => {
            let r = tc_gradients(
                model,
                b,
                plan.mode,
                &plan.contrastive,
                &mut Mode::Train(rng),
            )?;
            check_finite(r.loss, "tc", step)?;
            Some(r)
        }
        None => None,
    };

    let gn = ner.as_ref().map(|r| &r.grads);
    let gt = tc.as_ref().map(|r| &r.grads);
    if plan.routing_check_every > 0 && step.is_multiple_of(plan.routing_check_every as u64) {
        verify_routing(gn, gt)?;
    }
    let (set, conflict) = combine_gradients(model, gn, gt, plan.w_ner, plan.w_tc, plan.pcgrad)?;
    opt.set_lr(plan.lr_at(step as usize));
    let before = opt.skipped_nonfinite;
    opt.apply(model, &set.grads)?;
    Ok(StepOutcome {
        step,
        loss_ner: ner.map(|r| r.loss.as_f64()),
        loss_tc: tc.map(|r| r.loss.as_f64()),
        conflict,
        skipped_nonfinite: opt.skipped_nonfinite - before,
        lr: opt.lr(),
    })
}

/// Weighted total loss and combined gradients in eval mode (no PCGrad), for
/// finite-difference checks of the joint objective.
pub fn joint_loss_and_grads<T: Real>(
    model: &PrefinetuneModel<T>,
    ner_batch: Option<&TokenLabeledBatch>,
    tc_batch: Option<&ContrastiveBatch>,
    plan: &TrainPlan,
) -> Result<(f64, GradMap<T>)> {
    let ner = ner_batch
        .map(|b| ner_gradients(model, b, plan.mode, &mut Mode::Eval))
        .transpose()?;
    let tc = tc_batch
        .map(|b| tc_gradients(model, b, plan.mode, &plan.contrastive, &mut Mode::Eval))
        .transpose()?;
    let total = ner.as_ref().map_or(0.0, |r| plan.w_ner * r.loss.as_f64())
        + tc.as_ref().map_or(0.0, |r| plan.w_tc * r.loss.as_f64());
    let (set, _) = combine_gradients(
        model,
        ner.as_ref().map(|r| &r.grads),
        tc.as_ref().map(|r| &r.grads),
        plan.w_ner,
        plan.w_tc,
        false,
    )?;
    Ok((total, set.grads))
}

/// Corpora and tokenisation settings for a pre-finetuning run.
#[derive(Debug, Clone)]
pub struct PretrainData {
    pub vocab: Vocab,
    pub max_len: usize,
    /// Token-labelled datasets and their shared label set.
    pub ner: Option<(Vec<TokenDataset>, LabelSet)>,
    pub tc: Vec<PairDataset>,
}

impl PretrainData {
    pub fn ner_classes(&self) -> Option<usize> {
        self.ner.as_ref().map(|(_, l)| l.len())
    }

    pub fn validate_for(&self, plan: &TrainPlan) -> Result<()> {
        let has_ner = self
            .ner
            .as_ref()
            .is_some_and(|(d, _)| d.iter().any(|x| !x.is_empty()));
        let has_tc = self.tc.iter().any(|d| !d.is_empty());
        let need = |t: Task| match plan.mode {
            PlanMode::PfL => false,
            m => m.uses(t),
        };
        if need(Task::Ner) && !has_ner {
            return Err(Error::config(format!(
                "{} needs token-labelled data",
                plan.mode.name()
            )));
        }
        if need(Task::Tc) && !has_tc {
            return Err(Error::config(format!(
                "{} needs pair data",
                plan.mode.name()
            )));
        }
        if plan.mode == PlanMode::PfL && !has_ner && !has_tc {
            return Err(Error::EmptyDataset(
                "PF-L needs at least one task's data".into(),
            ));
        }
        if let Some((sets, labels)) = &self.ner {
            for d in sets {
                labels.check_covers(d)?;
            }
        }
        Ok(())
    }

    /// Hierarchical draw of one NER batch.
    pub fn sample_ner(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Option<TokenLabeledBatch>> {
        let Some((sets, labels)) = &self.ner else {
            return Ok(None);
        };
        let sizes: Vec<usize> = sets.iter().map(TokenDataset::len).collect();
        let pick = hierarchical_sample(&sizes, n, rng)?;
        let d = &sets[pick.dataset];
        let sents: Vec<_> = pick.indices.iter().map(|&i| &d.sentences[i]).collect();
        labeled_batch(
            &sents,
            &self.vocab,
            labels,
            self.max_len,
            SubtokenLabels::Inherit,
        )
        .map(Some)
    }

    /// Hierarchical draw of one contrastive batch.
    pub fn sample_tc(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Option<ContrastiveBatch>> {
        if self.tc.is_empty() {
            return Ok(None);
        }
        let sizes: Vec<usize> = self.tc.iter().map(PairDataset::len).collect();
        let pick = hierarchical_sample(&sizes, n, rng)?;
        let d = &self.tc[pick.dataset];
        let pairs: Vec<_> = pick.indices.iter().map(|&i| &d.pairs[i]).collect();
        contrastive_batch(&pairs, &self.vocab, self.max_len).map(Some)
    }
}

/// Callbacks for metrics and snapshots during [`pretrain`].
pub trait TrainObserver<T> {
    fn on_step(&mut self, _outcome: &StepOutcome) -> Result<()> {
        Ok(())
    }

    /// Called before the first step and then every `snapshot_every` steps.
    fn on_snapshot(&mut self, _step: u64, _model: &PrefinetuneModel<T>) -> Result<()> {
        Ok(())
    }
}

impl<T> TrainObserver<T> for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub steps_run: u64,
    pub stopped_early: bool,
    pub final_loss_ner: Option<f64>,
    pub final_loss_tc: Option<f64>,
}

/// Full training state: model, optimizer and the two RNG streams.
pub struct TrainState<T> {
    pub model: PrefinetuneModel<T>,
    pub opt: OptimizerState<T>,
    /// Batch sampling.
    pub data_rng: ChaCha8Rng,
    /// Dropout masks.
    pub dropout_rng: TrainRng,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: PrefinetuneModel<T>, plan: &TrainPlan) -> Self {
        Self {
            model,
            opt: OptimizerState::new(plan.optimizer),
            data_rng: ChaCha8Rng::seed_from_u64(plan.seed),
            dropout_rng: TrainRng::seed_from_u64(plan.seed.wrapping_add(0x5eed)),
        }
    }

    pub fn rng_snapshot(&self) -> [RngSnapshot; 2] {
        [
            RngSnapshot::of(&self.data_rng),
            RngSnapshot::of(&self.dropout_rng),
        ]
    }

    pub fn restore_rngs(&mut self, snaps: &[RngSnapshot; 2]) {
        self.data_rng = snaps[0].restore();
        self.dropout_rng = snaps[1].restore();
    }
}

/// Exact position of a ChaCha stream, for resuming.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

impl RngSnapshot {
    pub fn of(r: &ChaCha8Rng) -> Self {
        Self {
            seed: r.get_seed(),
            stream: r.get_stream(),
            word_pos: r.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// Runs `plan.total_steps` steps (or until the stop file appears).
pub fn pretrain<T: Real>(
    state: &mut TrainState<T>,
    data: &PretrainData,
    plan: &TrainPlan,
    observer: &mut dyn TrainObserver<T>,
) -> Result<PretrainSummary> {
    plan.validate()?;
    data.validate_for(plan)?;
    let mut summary = PretrainSummary {
        steps_run: 0,
        stopped_early: false,
        final_loss_ner: None,
        final_loss_tc: None,
    };
    if plan.snapshot_every > 0 && state.opt.step == 0 {
        observer.on_snapshot(0, &state.model)?;
    }
    while (state.opt.step as usize) < plan.total_steps {
        if plan.stop_file.as_ref().is_some_and(|p| p.exists()) {
            log::info!("stop file found at step {}", state.opt.step);
            summary.stopped_early = true;
            break;
        }
        let step = state.opt.step as usize;
        let (want_ner, want_tc) = if plan.alternating {
            (step.is_multiple_of(2), step % 2 == 1)
        } else {
            (true, true)
        };
        let ner = if want_ner && plan.mode.uses(Task::Ner) {
            data.sample_ner(plan.ner_batch, &mut state.data_rng)?
        } else {
            None
        };
        let tc = if want_tc && plan.mode.uses(Task::Tc) {
            data.sample_tc(plan.tc_batch, &mut state.data_rng)?
        } else {
            None
        };
        let out = mtpf_step(
            &mut state.model,
            ner.as_ref(),
            tc.as_ref(),
            plan,
            &mut state.opt,
            &mut state.dropout_rng,
        )?;
        observer.on_step(&out)?;
        summary.steps_run += 1;
        summary.final_loss_ner = out.loss_ner.or(summary.final_loss_ner);
        summary.final_loss_tc = out.loss_tc.or(summary.final_loss_tc);
        let done = state.opt.step;
        if plan.snapshot_every > 0 && done.is_multiple_of(plan.snapshot_every as u64) {
            observer.on_snapshot(done, &state.model)?;
        }
    }
    Ok(summary)
}

/// Shapes of every parameter, for [`GradientSet::check_shapes`].
pub fn parameter_shapes<T: Real, P: Parameters<T>>(p: &P) -> BTreeMap<String, (usize, usize)> {
    let mut out = BTreeMap::new();
    p.visit(&mut |n, a| {
        out.insert(n.to_string(), a.dim());
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledSentence;
    use crate::encoder::EncoderConfig;

    fn tiny_cfg(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size: vocab,
            max_seq_len: 12,
            dropout_rate: 0.1,
            seed: 1,
        }
    }

    fn toy_data() -> PretrainData {
        let words = ["red", "blue", "cat", "dog", "runs", "sleeps", "the", "a"];
        let mut sents = Vec::new();
        let mut pairs = Vec::new();
        for i in 0..12 {
            let w: Vec<String> = (0..4).map(|j| words[(i + j * 3) % 8].to_string()).collect();
            let t: Vec<String> = w
                .iter()
                .map(|x| if x == "cat" || x == "dog" { "C1" } else { "C0" }.to_string())
                .collect();
            pairs.push((
                w.join(" "),
                w.iter().rev().cloned().collect::<Vec<_>>().join(" "),
            ));
            sents.push(LabeledSentence::new(w, t).unwrap());
        }
        let corpus: Vec<Vec<String>> = sents.iter().map(|s| s.words.clone()).collect();
        PretrainData {
            vocab: Vocab::build(corpus.iter().map(|v| v.as_slice()), 1, None),
            max_len: 12,
            ner: Some((
                vec![TokenDataset::new(sents)],
                LabelSet::new(vec!["C0".into(), "C1".into()]),
            )),
            tc: vec![PairDataset::new(pairs)],
        }
    }

    fn small_plan(mode: PlanMode) -> TrainPlan {
        let mut p = TrainPlan::new(mode, 3, 4);
        p.ner_batch = 4;
        p.tc_batch = 4;
        p.optimizer = AdamWConfig::with_lr(1e-3);
        p
    }

    #[test]
    fn plan_validation() {
        let mut p = small_plan(PlanMode::Mtpf);
        p.tpl_layers = Some(TplLayers::Count(2));
        assert!(p.validate().is_err());
        let mut p = small_plan(PlanMode::PfNer);
        p.pcgrad = true;
        assert!(p.validate().is_err());
        let mut p = small_plan(PlanMode::MtpfTpl);
        p.tpl_layers = Some(TplLayers::All);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn plan_json_round_trip() {
        let mut p = small_plan(PlanMode::MtpfTpl);
        p.tpl_layers = Some(TplLayers::All);
        let s = serde_json::to_string(&p).unwrap();
        let back: TrainPlan = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let q: TrainPlan =
            serde_json::from_str(r#"{"mode":"MTPF-TPL","total_steps":5,"tpl_layers":2}"#).unwrap();
        assert_eq!(q.tpl_layers, Some(TplLayers::Count(2)));
        assert!(
            serde_json::from_str::<TrainPlan>(r#"{"mode":"MTPF","total_steps":5,"bogus":1}"#)
                .is_err()
        );
    }

    #[test]
    fn routing_is_exact() {
        let data = toy_data();
        let plan = small_plan(PlanMode::MtpfTpl);
        let enc = EncoderParams::<f32>::init(&tiny_cfg(data.vocab.len())).unwrap();
        let model = PrefinetuneModel::for_plan(enc, &plan, data.ner_classes()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nb = data.sample_ner(4, &mut rng).unwrap().unwrap();
        let tb = data.sample_tc(4, &mut rng).unwrap().unwrap();
        let n = ner_gradients(&model, &nb, plan.mode, &mut Mode::Eval).unwrap();
        let t = tc_gradients(&model, &tb, plan.mode, &plan.contrastive, &mut Mode::Eval).unwrap();
        assert!(n.grads.keys().all(|k| Partition::of(k) != Partition::TcTpl));
        assert!(t
            .grads
            .keys()
            .all(|k| !matches!(Partition::of(k), Partition::NerTpl | Partition::Heads)));
        assert!(n
            .grads
            .keys()
            .any(|k| Partition::of(k) == Partition::NerTpl));
        assert!(t.grads.keys().any(|k| Partition::of(k) == Partition::TcTpl));
        verify_routing(Some(&n.grads), Some(&t.grads)).unwrap();
    }

    #[test]
    fn frozen_backbone_does_not_move() {
        let data = toy_data();
        let plan = small_plan(PlanMode::PfL);
        let enc = EncoderParams::<f32>::init(&tiny_cfg(data.vocab.len())).unwrap();
        let model = PrefinetuneModel::for_plan(enc.clone(), &plan, data.ner_classes()).unwrap();
        let mut state = TrainState::new(model, &plan);
        pretrain(&mut state, &data, &plan, &mut ()).unwrap();
        assert_eq!(state.model.encoder, enc);
        assert_ne!(
            state
                .model
                .adapters
                .group(Task::Ner)
                .unwrap()
                .modules
                .values()
                .next()
                .unwrap()
                .b,
            Array2::<f32>::zeros((16, 8))
        );
    }

    #[test]
    fn zero_weight_empty_branch_equals_single_task() {
        let data = toy_data();
        let enc = EncoderParams::<f32>::init(&tiny_cfg(data.vocab.len())).unwrap();
        let mut multi = small_plan(PlanMode::Mtpf);
        multi.w_tc = 0.0;
        let single = small_plan(PlanMode::PfNer);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nb = data.sample_ner(4, &mut rng).unwrap().unwrap();
        let run = |plan: &TrainPlan| {
            let mut m = PrefinetuneModel::for_plan(enc.clone(), plan, data.ner_classes()).unwrap();
            let mut opt = OptimizerState::new(plan.optimizer);
            let mut r = TrainRng::seed_from_u64(9);
            mtpf_step(&mut m, Some(&nb), None, plan, &mut opt, &mut r).unwrap();
            m
        };
        assert_eq!(run(&multi), run(&single));
    }

    #[test]
    fn pf_tc_never_reports_ner_loss() {
        let data = toy_data();
        let plan = small_plan(PlanMode::PfTc);
        let enc = EncoderParams::<f32>::init(&tiny_cfg(data.vocab.len())).unwrap();
        let model = PrefinetuneModel::for_plan(enc, &plan, data.ner_classes()).unwrap();
        assert!(model.ner_head.is_none());
        let mut state = TrainState::new(model, &plan);
        struct Rec(Vec<StepOutcome>);
        impl TrainObserver<f32> for Rec {
            fn on_step(&mut self, o: &StepOutcome) -> Result<()> {
                self.0.push(o.clone());
                Ok(())
            }
        }
        let mut rec = Rec(Vec::new());
        pretrain(&mut state, &data, &plan, &mut rec).unwrap();
        assert_eq!(rec.0.len(), 3);
        assert!(rec
            .0
            .iter()
            .all(|o| o.loss_ner.is_none() && o.loss_tc.is_some()));
    }
}
