//! Experiment plans: corpora, encoder shape, training plan, diagnostics and
//! downstream evaluation in one JSON file, plus the TPL layer sweep.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassifiedTexts, LabelSet, PairDataset, TokenDataset};
use crate::encoder::gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
use crate::encoder::{EncoderConfig, EncoderParams, Vocab};
use crate::error::{Error, Result};
use crate::eval::{
    perturb::perturb_corpus, perturbation_similarity, token_homogeneity, EncoderEmbedder,
    EntityBank, SimilarityCurve,
};
use crate::io::formats::{load_classified, load_conll, load_pairs};
use crate::io::metrics::{file_hash, MetricRecord, MetricsWriter};
use crate::io::resolve_data_path;
use crate::io::store::{load_encoder, save_train_state};
use crate::lora::Task;
use crate::pseudo_label::{build_pseudo_dataset, PseudoLabelConfig};
use crate::synth::{
    synth_ner_corpus, synth_topic_pairs, ConflictBenchmark, ConflictConfig, SynthNerConfig,
    SynthPairConfig,
};
use crate::trainer::adapt::{adapt_ner, adapt_tc, AdaptNerConfig, ProbeConfig};
use crate::trainer::mtpf::{
    joint_loss_and_grads, pretrain, PlanMode, PrefinetuneModel, PretrainData, StepOutcome,
    TplLayers, TrainObserver, TrainPlan, TrainState,
};

/// Encoder shape; the vocabulary size comes from the corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    #[serde(default = "d_layers")]
    pub num_layers: usize,
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "d_heads")]
    pub num_heads: usize,
    #[serde(default = "d_ffn")]
    pub ffn_dim: usize,
    #[serde(default = "d_seq")]
    pub max_seq_len: usize,
    #[serde(default = "d_dropout")]
    pub dropout_rate: f64,
    /// Initialisation seed; the training seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Start from this checkpoint instead of a fresh init.
    #[serde(default)]
    pub init_from: Option<PathBuf>,
}

fn d_layers() -> usize {
    2
}
fn d_hidden() -> usize {
    32
}
fn d_heads() -> usize {
    4
}
fn d_ffn() -> usize {
    64
}
fn d_seq() -> usize {
    32
}
fn d_dropout() -> f64 {
    0.1
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            num_layers: d_layers(),
            hidden_dim: d_hidden(),
            num_heads: d_heads(),
            ffn_dim: d_ffn(),
            max_seq_len: d_seq(),
            dropout_rate: d_dropout(),
            seed: None,
            init_from: None,
        }
    }
}

impl EncoderSpec {
    pub fn config(&self, vocab_size: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_seq_len: self.max_seq_len,
            dropout_rate: self.dropout_rate,
            seed: self.seed.unwrap_or(seed),
        }
    }
}

/// Where the corpora come from. Sources combine: every NER source becomes
/// one dataset in the hierarchical sampler, and likewise for pairs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default)]
    pub conflict: Option<ConflictConfig>,
    #[serde(default)]
    pub synth_ner: Option<SynthNerConfig>,
    #[serde(default)]
    pub synth_pairs: Option<SynthPairConfig>,
    /// CoNLL files (relative paths resolve against `$TPLF_DATA_DIR`).
    #[serde(default)]
    pub ner_files: Vec<PathBuf>,
    /// JSONL or TSV pair files.
    #[serde(default)]
    pub pair_files: Vec<PathBuf>,
    /// Replace NER tags with k-means cluster ids of teacher word embeddings.
    #[serde(default)]
    pub pseudo_labels: Option<PseudoLabelConfig>,
    #[serde(default)]
    pub ner_train: Option<PathBuf>,
    #[serde(default)]
    pub ner_test: Option<PathBuf>,
    #[serde(default)]
    pub tc_train: Option<PathBuf>,
    #[serde(default)]
    pub tc_test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    #[serde(default)]
    pub homogeneity: bool,
    #[serde(default)]
    pub perturbation: bool,
    /// Sentences scored per snapshot.
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_variants")]
    pub variants: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d_samples() -> usize {
    200
}
fn d_variants() -> usize {
    crate::eval::perturb::DEFAULT_VARIANTS
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        Self {
            homogeneity: false,
            perturbation: false,
            samples: d_samples(),
            variants: d_variants(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamSpec {
    #[serde(default)]
    pub ner: AdaptNerConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default = "d_name")]
    pub name: String,
    #[serde(default)]
    pub encoder: EncoderSpec,
    pub data: DataSpec,
    pub train: TrainPlan,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
    #[serde(default)]
    pub downstream: Option<DownstreamSpec>,
    /// TPL layer counts for [`run_sweep`].
    #[serde(default)]
    pub sweep: Option<Vec<TplLayers>>,
    /// Record elapsed seconds in metrics (breaks byte-identical reruns).
    #[serde(default)]
    pub wall_time: bool,
    /// Also write a checkpoint at every snapshot.
    #[serde(default)]
    pub save_snapshots: bool,
    /// Finite-difference check of the joint loss in f64 before training.
    #[serde(default)]
    pub gradcheck: bool,
}

fn d_name() -> String {
    "experiment".into()
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text).map_err(|e| Error::Plan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// The toy conflicting bi-task setup, used when no plan file is given.
    /// Downstream NER follows the default adaptation recipe.
    pub fn toy(mode: PlanMode, seed: u64) -> Self {
        let mut train = TrainPlan::new(mode, 1000, seed);
        train.ner_batch = 16;
        train.tc_batch = 16;
        train.optimizer.lr = 1e-3;
        train.snapshot_every = 250;
        train.routing_check_every = 250;
        if mode.has_adapters() {
            train.tpl_layers = Some(TplLayers::All);
        }
        Self {
            name: format!("toy-{}", mode.name().to_lowercase()),
            encoder: EncoderSpec::default(),
            data: DataSpec {
                conflict: Some(ConflictConfig {
                    pretrain_sentences: 2000,
                    pretrain_pairs: 2000,
                    downstream_train: 2000,
                    seed,
                    ..Default::default()
                }),
                ..Default::default()
            },
            train,
            diagnostics: DiagnosticsSpec {
                homogeneity: true,
                perturbation: true,
                samples: 64,
                ..Default::default()
            },
            downstream: Some(DownstreamSpec::default()),
            sweep: None,
            wall_time: false,
            save_snapshots: false,
            gradcheck: false,
        }
    }

    /// Schema checks that need no data.
    pub fn validate(&self) -> Result<()> {
        self.train
            .validate()
            .map_err(|e| Error::Plan(e.to_string()))?;
        self.encoder
            .config(8, 0)
            .validate()
            .map_err(|e| Error::Plan(e.to_string()))?;
        let d = &self.data;
        let has_ner = d.conflict.is_some() || d.synth_ner.is_some() || !d.ner_files.is_empty();
        let has_pairs = d.conflict.is_some() || d.synth_pairs.is_some() || !d.pair_files.is_empty();
        if self.train.mode.uses(Task::Ner) && self.train.mode != PlanMode::PfL && !has_ner {
            return Err(Error::Plan(format!(
                "{} needs an NER source",
                self.train.mode.name()
            )));
        }
        if self.train.mode.uses(Task::Tc) && self.train.mode != PlanMode::PfL && !has_pairs {
            return Err(Error::Plan(format!(
                "{} needs a pair source",
                self.train.mode.name()
            )));
        }
        if let Some(c) = &d.conflict {
            c.validate().map_err(|e| Error::Plan(e.to_string()))?;
        }
        if let Some(c) = &d.synth_ner {
            c.validate().map_err(|e| Error::Plan(e.to_string()))?;
        }
        if let Some(c) = &d.synth_pairs {
            c.validate().map_err(|e| Error::Plan(e.to_string()))?;
        }
        if let Some(p) = &d.pseudo_labels {
            p.validate().map_err(|e| Error::Plan(e.to_string()))?;
        }
        if d.ner_train.is_some() != d.ner_test.is_some() {
            return Err(Error::Plan("ner_train and ner_test go together".into()));
        }
        if d.tc_train.is_some() != d.tc_test.is_some() {
            return Err(Error::Plan("tc_train and tc_test go together".into()));
        }
        if self.diagnostics.perturbation && self.diagnostics.variants == 0 {
            return Err(Error::Plan("perturbation needs variants >= 1".into()));
        }
        if let Some(ds) = &self.downstream {
            ds.ner
                .optimizer
                .validate()
                .map_err(|e| Error::Plan(e.to_string()))?;
        }
        if let Some(s) = &self.sweep {
            if s.is_empty() {
                return Err(Error::Plan("sweep list is empty".into()));
            }
        }
        for p in d.ner_files.iter().chain(&d.pair_files).chain(
            [&d.ner_train, &d.ner_test, &d.tc_train, &d.tc_test]
                .into_iter()
                .flatten(),
        ) {
            let full = resolve_data_path(p);
            if !full.is_file() {
                return Err(Error::Plan(format!("missing data file {}", full.display())));
            }
        }
        Ok(())
    }
}

/// Everything a run reads, after loading and synthesis.
#[derive(Debug, Clone, Default)]
pub struct Corpora {
    pub ner: Vec<TokenDataset>,
    pub pairs: Vec<PairDataset>,
    pub ner_train: Option<TokenDataset>,
    pub ner_test: Option<TokenDataset>,
    pub tc_train: Option<ClassifiedTexts>,
    pub tc_test: Option<ClassifiedTexts>,
}

impl Corpora {
    pub fn load(spec: &DataSpec) -> Result<Self> {
        let mut c = Self::default();
        if let Some(cfg) = &spec.conflict {
            let b = ConflictBenchmark::generate(cfg)?;
            c.ner.push(b.pretrain_ner);
            c.pairs.push(b.pretrain_pairs);
            c.ner_train = Some(b.ner_train);
            c.ner_test = Some(b.ner_test);
            c.tc_train = Some(b.tc_train);
            c.tc_test = Some(b.tc_test);
        }
        if let Some(cfg) = &spec.synth_ner {
            c.ner.push(synth_ner_corpus(cfg)?);
        }
        if let Some(cfg) = &spec.synth_pairs {
            c.pairs.push(synth_topic_pairs(cfg)?);
        }
        for p in &spec.ner_files {
            c.ner.push(load_conll(&resolve_data_path(p))?);
        }
        for p in &spec.pair_files {
            c.pairs.push(load_pairs(&resolve_data_path(p))?);
        }
        if let (Some(tr), Some(te)) = (&spec.ner_train, &spec.ner_test) {
            c.ner_train = Some(load_conll(&resolve_data_path(tr))?);
            c.ner_test = Some(load_conll(&resolve_data_path(te))?);
        }
        if let (Some(tr), Some(te)) = (&spec.tc_train, &spec.tc_test) {
            let tr = load_classified(&resolve_data_path(tr))?;
            let te = load_classified(&resolve_data_path(te))?;
            let mut names: Vec<String> = tr.classes.iter().chain(&te.classes).cloned().collect();
            names.sort();
            names.dedup();
            c.tc_train = Some(tr.indexed(Some(&names))?.0);
            c.tc_test = Some(te.indexed(Some(&names))?.0);
        }
        Ok(c)
    }

    /// Word-level vocabulary over every pretraining and downstream-train text.
    pub fn vocab(&self) -> Vocab {
        let mut sents: Vec<Vec<String>> = Vec::new();
        for d in self.ner.iter().chain(&self.ner_train) {
            sents.extend(d.word_lists());
        }
        for d in &self.pairs {
            for (a, p) in &d.pairs {
                sents.push(crate::data::split_words(a));
                sents.push(crate::data::split_words(p));
            }
        }
        if let Some(t) = &self.tc_train {
            sents.extend(t.texts.iter().map(|s| crate::data::split_words(s)));
        }
        Vocab::build(sents.iter().map(Vec::as_slice), 1, None)
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        let mut h = BTreeMap::new();
        for (i, d) in self.ner.iter().enumerate() {
            h.insert(format!("ner.{i}"), d.content_hash());
        }
        for (i, d) in self.pairs.iter().enumerate() {
            h.insert(format!("pairs.{i}"), d.content_hash());
        }
        if let Some(d) = &self.ner_train {
            h.insert("ner_train".into(), d.content_hash());
        }
        if let Some(d) = &self.ner_test {
            h.insert("ner_test".into(), d.content_hash());
        }
        h
    }

    /// BIO sentences for the perturbation probe: downstream test set first,
    /// else the first gold NER corpus.
    fn bio_probe(&self) -> Option<&TokenDataset> {
        self.ner_test.as_ref().or(self.ner.first())
    }

    fn homogeneity_probe(&self) -> Vec<Vec<String>> {
        if let Some(p) = self.pairs.first() {
            return p
                .pairs
                .iter()
                .map(|(a, _)| crate::data::split_words(a))
                .collect();
        }
        self.ner
            .first()
            .map(TokenDataset::word_lists)
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownstreamScores {
    pub ner_f1: Option<f64>,
    pub tc_accuracy: Option<f64>,
    /// Mean of the available scores.
    pub combined: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub mode: String,
    pub tpl_layers: Option<String>,
    pub seed: u64,
    pub steps_run: u64,
    pub stopped_early: bool,
    pub final_loss_ner: Option<f64>,
    pub final_loss_tc: Option<f64>,
    pub homogeneity: SimilarityCurve,
    pub perturbation: SimilarityCurve,
    pub downstream: Option<DownstreamScores>,
    pub gradcheck_max_rel_error: Option<f64>,
    pub metrics_file: PathBuf,
    pub metrics_sha256: String,
}

struct Recorder<'a> {
    writer: MetricsWriter,
    diag: &'a DiagnosticsSpec,
    vocab: &'a Vocab,
    max_len: usize,
    homogeneity_sents: Vec<Vec<String>>,
    perturbed: Vec<crate::eval::PerturbedSet>,
    homogeneity: SimilarityCurve,
    perturbation: SimilarityCurve,
    snapshot_dir: Option<PathBuf>,
    plan: &'a TrainPlan,
}

impl TrainObserver<f32> for Recorder<'_> {
    fn on_step(&mut self, o: &StepOutcome) -> Result<()> {
        let mut r = MetricRecord::new("train", o.step).with("lr", o.lr);
        if let Some(l) = o.loss_ner {
            r = r.with("loss_ner", l);
        }
        if let Some(l) = o.loss_tc {
            r = r.with("loss_tc", l);
        }
        if self.plan.pcgrad {
            r = r.with("conflict", f64::from(u8::from(o.conflict)));
        }
        if o.skipped_nonfinite > 0 {
            r = r.with("skipped_nonfinite", o.skipped_nonfinite as f64);
        }
        self.writer.write(r)
    }

    fn on_snapshot(&mut self, step: u64, model: &PrefinetuneModel<f32>) -> Result<()> {
        let mut emb = EncoderEmbedder::new(&model.encoder, self.vocab);
        emb.max_len = self.max_len;
        let mut r = MetricRecord::new("snapshot", step);
        if self.diag.homogeneity && !self.homogeneity_sents.is_empty() {
            let h = token_homogeneity(
                &emb,
                &self.homogeneity_sents,
                self.diag.samples,
                self.diag.seed,
            )?;
            self.homogeneity.push(step, h.mean)?;
            r = r.with("homogeneity", h.mean);
        }
        if self.diag.perturbation && !self.perturbed.is_empty() {
            let s = perturbation_similarity(&emb, &self.perturbed)?;
            self.perturbation.push(step, s.mean)?;
            r = r.with("perturbation_similarity", s.mean);
        }
        if let Some(dir) = &self.snapshot_dir {
            crate::io::store::save_encoder(
                &dir.join(format!("step_{step:06}.tplf")),
                &model.encoder,
                self.vocab,
            )?;
        }
        self.writer.write(r)
    }
}

/// Finite-difference check of the joint loss on one small batch, in f64.
pub fn joint_gradcheck(
    model: &PrefinetuneModel<f32>,
    data: &PretrainData,
    plan: &TrainPlan,
) -> Result<GradCheckReport> {
    let mut small = plan.clone();
    small.ner_batch = 2;
    small.tc_batch = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x6772_6164);
    let ner = if plan.mode.uses(Task::Ner) {
        data.sample_ner(2, &mut rng)?
    } else {
        None
    };
    let tc = if plan.mode.uses(Task::Tc) {
        data.sample_tc(2, &mut rng)?
    } else {
        None
    };
    let mut m64: PrefinetuneModel<f64> = model.cast();
    gradient_check(
        |m| joint_loss_and_grads(m, ner.as_ref(), tc.as_ref(), &small),
        &mut m64,
        &GradCheckOptions {
            epsilon: 3e-5,
            abs_floor: 1e-5,
            samples_per_tensor: 3,
            ..Default::default()
        },
    )
}

/// Builds the pretraining datasets, applying pseudo-labelling if asked.
pub fn pretrain_data(
    plan: &ExperimentPlan,
    corpora: &Corpora,
    vocab: &Vocab,
) -> Result<PretrainData> {
    let max_len = plan.encoder.max_seq_len;
    let ner = if corpora.ner.is_empty() {
        None
    } else if let Some(pl) = &plan.data.pseudo_labels {
        let (teacher, tvocab) = match &pl.teacher {
            Some(p) => load_encoder(&resolve_data_path(p))?,
            None => {
                let cfg = plan.encoder.config(vocab.len(), pl.seed);
                (EncoderParams::init(&cfg)?, vocab.clone())
            }
        };
        let words: Vec<Vec<String>> = corpora
            .ner
            .iter()
            .flat_map(TokenDataset::word_lists)
            .collect();
        let pseudo = build_pseudo_dataset(&words, &tvocab, &teacher, pl)?;
        let mut sets = Vec::new();
        let mut at = 0;
        for d in &corpora.ner {
            sets.push(TokenDataset::new(
                pseudo.dataset.sentences[at..at + d.len()].to_vec(),
            ));
            at += d.len();
        }
        Some((sets, pseudo.labels))
    } else {
        let mut tags: Vec<String> = corpora.ner.iter().flat_map(TokenDataset::tag_set).collect();
        tags.sort();
        tags.dedup();
        Some((corpora.ner.clone(), LabelSet::new(tags)))
    };
    Ok(PretrainData {
        vocab: vocab.clone(),
        max_len,
        ner,
        tc: corpora.pairs.clone(),
    })
}

/// Runs one plan into `out`: `plan.json`, `metrics.jsonl`, `curves.csv`,
/// `final.tplf`, `report.json` (and `snapshots/` when asked).
pub fn run_experiment(plan: &ExperimentPlan, out: &Path) -> Result<ExperimentReport> {
    plan.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("plan.json"), serde_json::to_string_pretty(plan)?)?;
    let corpora = Corpora::load(&plan.data)?;
    let (vocab, encoder) = match &plan.encoder.init_from {
        Some(p) => {
            let (enc, v) = load_encoder(&resolve_data_path(p))?;
            (v, enc)
        }
        None => {
            let v = corpora.vocab();
            let cfg = plan.encoder.config(v.len(), plan.train.seed);
            let enc = EncoderParams::init(&cfg)?;
            (v, enc)
        }
    };
    let data = pretrain_data(plan, &corpora, &vocab)?;
    data.validate_for(&plan.train)?;

    let model = PrefinetuneModel::for_plan(encoder, &plan.train, data.ner_classes())?;
    let gradcheck = if plan.gradcheck {
        let r = joint_gradcheck(&model, &data, &plan.train)?;
        if !r.passed {
            return Err(Error::config(format!(
                "joint gradient check failed: max relative error {:.3e} at {:?}",
                r.max_rel_error, r.worst
            )));
        }
        Some(r.max_rel_error)
    } else {
        None
    };

    let metrics_path = out.join("metrics.jsonl");
    let mut writer = MetricsWriter::create(&metrics_path, plan.wall_time)?;
    let mut prov = MetricRecord::new("provenance", 0);
    prov.info = corpora.hashes();
    prov.info
        .insert("vocab_size".into(), vocab.len().to_string());
    prov.info
        .insert("mode".into(), plan.train.mode.name().into());
    writer.write(prov)?;
    if let Some(e) = gradcheck {
        writer.write(MetricRecord::new("gradcheck", 0).with("max_rel_error", e))?;
    }

    let perturbed = match (plan.diagnostics.perturbation, corpora.bio_probe()) {
        (true, Some(bio)) => {
            let bank = EntityBank::harvest(bio);
            let take: Vec<_> = bio
                .sentences
                .iter()
                .take(plan.diagnostics.samples)
                .cloned()
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(plan.diagnostics.seed);
            perturb_corpus(&take, &bank, plan.diagnostics.variants, &mut rng)?
        }
        _ => Vec::new(),
    };
    let snapshot_dir = if plan.save_snapshots {
        let d = out.join("snapshots");
        fs::create_dir_all(&d)?;
        Some(d)
    } else {
        None
    };
    let mut rec = Recorder {
        writer,
        diag: &plan.diagnostics,
        vocab: &vocab,
        max_len: plan.encoder.max_seq_len,
        homogeneity_sents: corpora.homogeneity_probe(),
        perturbed,
        homogeneity: SimilarityCurve::default(),
        perturbation: SimilarityCurve::default(),
        snapshot_dir,
        plan: &plan.train,
    };
    let mut state = TrainState::new(model, &plan.train);
    let summary = pretrain(&mut state, &data, &plan.train, &mut rec)?;
    let ner_labels = data.ner.as_ref().map(|(_, l)| l);
    save_train_state(
        &out.join("final.tplf"),
        &state,
        &plan.train,
        &vocab,
        ner_labels,
    )?;

    let downstream = match &plan.downstream {
        Some(ds) => Some(downstream_scores(
            &state.model,
            &corpora,
            &vocab,
            ds,
            plan.train.seed,
        )?),
        None => None,
    };
    if let Some(d) = &downstream {
        let mut r = MetricRecord::new("downstream", state.opt.step);
        for (k, v) in [
            ("ner_f1", d.ner_f1),
            ("tc_accuracy", d.tc_accuracy),
            ("combined", d.combined),
        ] {
            if let Some(v) = v {
                r = r.with(k, v);
            }
        }
        rec.writer.write(r)?;
    }
    drop(rec.writer);
    write_curves(&out.join("curves.csv"), &rec.homogeneity, &rec.perturbation)?;
    let report = ExperimentReport {
        name: plan.name.clone(),
        mode: plan.train.mode.name().into(),
        tpl_layers: plan.train.tpl_layers.map(TplLayers::label),
        seed: plan.train.seed,
        steps_run: summary.steps_run,
        stopped_early: summary.stopped_early,
        final_loss_ner: summary.final_loss_ner,
        final_loss_tc: summary.final_loss_tc,
        homogeneity: rec.homogeneity,
        perturbation: rec.perturbation,
        downstream,
        gradcheck_max_rel_error: gradcheck,
        metrics_sha256: file_hash(&metrics_path)?,
        metrics_file: metrics_path,
    };
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

fn write_curves(path: &Path, h: &SimilarityCurve, p: &SimilarityCurve) -> Result<()> {
    let mut steps: Vec<u64> = h.points.iter().chain(&p.points).map(|(s, _)| *s).collect();
    steps.sort_unstable();
    steps.dedup();
    let lookup = |c: &SimilarityCurve, s: u64| {
        c.points
            .iter()
            .find(|(t, _)| *t == s)
            .map_or(String::new(), |(_, v)| v.to_string())
    };
    let mut out = String::from("step,homogeneity,perturbation_similarity\n");
    for s in steps {
        out.push_str(&format!("{s},{},{}\n", lookup(h, s), lookup(p, s)));
    }
    fs::write(path, out)?;
    Ok(())
}

/// NER span F1 via LoRA adaptation (warm-started from the NER TPL group) and
/// topic accuracy via a linear probe on embeddings with the TC group active.
pub fn downstream_scores(
    model: &PrefinetuneModel<f32>,
    corpora: &Corpora,
    vocab: &Vocab,
    spec: &DownstreamSpec,
    seed: u64,
) -> Result<DownstreamScores> {
    let ner_f1 = match (&corpora.ner_train, &corpora.ner_test) {
        (Some(train), Some(test)) => {
            let mut tags = train.tag_set();
            tags.extend(test.tag_set());
            tags.sort();
            tags.dedup();
            let labels = LabelSet::new(tags);
            let mut cfg = spec.ner.clone();
            cfg.seed = cfg.seed.wrapping_add(seed);
            let (ner, _) = adapt_ner(
                &model.encoder,
                model.adapters.group(Task::Ner),
                train,
                &labels,
                vocab,
                &cfg,
            )?;
            Some(ner.evaluate(vocab, test)?.f1)
        }
        _ => None,
    };
    let tc_accuracy = match (&corpora.tc_train, &corpora.tc_test) {
        (Some(train), Some(test)) => {
            let (_, r) = adapt_tc(
                &model.encoder,
                model.adapters.group(Task::Tc),
                train,
                test,
                vocab,
                &spec.probe,
            )?;
            Some(r.test_accuracy)
        }
        _ => None,
    };
    let parts: Vec<f64> = ner_f1.into_iter().chain(tc_accuracy).collect();
    let combined = (!parts.is_empty()).then(|| parts.iter().sum::<f64>() / parts.len() as f64);
    Ok(DownstreamScores {
        ner_f1,
        tc_accuracy,
        combined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tpl_layers: String,
    pub ner_f1: Option<f64>,
    pub tc_accuracy: Option<f64>,
    pub combined: Option<f64>,
    pub final_loss_ner: Option<f64>,
    pub final_loss_tc: Option<f64>,
}

/// Default TPL placements: last 1, 2 and 4 layers, and every layer.
pub fn default_sweep() -> Vec<TplLayers> {
    vec![
        TplLayers::Count(1),
        TplLayers::Count(2),
        TplLayers::Count(4),
        TplLayers::All,
    ]
}

/// Runs MTPF-TPL once per TPL placement into `out/tpl_<label>/` and writes
/// `sweep.jsonl` and `sweep.csv`. Counts above the encoder depth are
/// clamped to every layer.
pub fn run_sweep(plan: &ExperimentPlan, out: &Path) -> Result<Vec<SweepRow>> {
    let values = plan.sweep.clone().unwrap_or_else(default_sweep);
    let mut base = plan.clone();
    base.train.mode = PlanMode::MtpfTpl;
    let mut checked = Vec::new();
    for v in &values {
        let mut p = base.clone();
        p.train.tpl_layers = Some(match *v {
            TplLayers::Count(n) if n > plan.encoder.num_layers => TplLayers::All,
            other => other,
        });
        p.name = format!("{}-tpl-{}", plan.name, v.label());
        p.validate()?;
        checked.push((v.label(), p));
    }
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut jsonl = String::new();
    let mut csv = String::from("tpl_layers,ner_f1,tc_accuracy,combined\n");
    let fmt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for (label, p) in checked {
        let r = run_experiment(&p, &out.join(format!("tpl_{label}")))?;
        let d = r.downstream.unwrap_or(DownstreamScores {
            ner_f1: None,
            tc_accuracy: None,
            combined: None,
        });
        let row = SweepRow {
            tpl_layers: label,
            ner_f1: d.ner_f1,
            tc_accuracy: d.tc_accuracy,
            combined: d.combined,
            final_loss_ner: r.final_loss_ner,
            final_loss_tc: r.final_loss_tc,
        };
        jsonl.push_str(&serde_json::to_string(&row)?);
        jsonl.push('\n');
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.tpl_layers,
            fmt(row.ner_f1),
            fmt(row.tc_accuracy),
            fmt(row.combined)
        ));
        rows.push(row);
    }
    fs::write(out.join("sweep.jsonl"), jsonl)?;
    fs::write(out.join("sweep.csv"), csv)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_plan_round_trips_and_validates() {
        let p = ExperimentPlan::toy(PlanMode::MtpfTpl, 3);
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(ExperimentPlan::from_json(&text).unwrap(), p);
    }

    #[test]
    fn schema_violations_fail_before_compute() {
        let bad = r#"{"data": {}, "train": {"mode": "PF-NER", "total_steps": 1, "seed": 0}}"#;
        assert!(matches!(
            ExperimentPlan::from_json(bad),
            Err(Error::Plan(_))
        ));
        let unknown =
            r#"{"data": {"bogus": 1}, "train": {"mode": "PF-TC", "total_steps": 1, "seed": 0}}"#;
        assert!(matches!(
            ExperimentPlan::from_json(unknown),
            Err(Error::Plan(_))
        ));
        let missing = r#"{"data": {"pair_files": ["/nonexistent/x.jsonl"]}, "train": {"mode": "PF-TC", "total_steps": 1, "seed": 0}}"#;
        assert!(
            matches!(ExperimentPlan::from_json(missing), Err(Error::Plan(m)) if m.contains("missing data file"))
        );
    }
}
