//! Downstream adaptation: LoRA token classification and the linear probe.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{
    labeled_batch, ClassifiedTexts, LabelSet, LabeledSentence, SubtokenLabels, TokenDataset,
};
use crate::encoder::{
    encode_with_group, EncoderParams, Mode, TokenBatch, TrainRng, Vocab, INIT_SIGMA,
};
use crate::error::{Error, Result};
use crate::eval::{accuracy, span_f1, Embedder, EncoderEmbedder, SpanScores};
use crate::lora::{AdapterGroup, LoraSpec, Task};
use crate::objectives::token_loss_graph;
use crate::params::{Head, Linear, Parameters};
use crate::trainer::optimizer::{AdamWConfig, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptNerConfig {
    #[serde(default = "LoraSpec::ner_adaptation")]
    pub lora: LoraSpec,
    /// Head-only warm-up epochs.
    #[serde(default = "default_stage1")]
    pub stage1_epochs: usize,
    /// Joint epochs after warm-up.
    #[serde(default = "default_stage2")]
    pub stage2_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Also update the backbone weights in stage 2.
    #[serde(default)]
    pub update_backbone: bool,
    #[serde(default = "default_subtokens")]
    pub subtoken_labels: SubtokenPolicy,
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtokenPolicy {
    FirstOnly,
    Inherit,
}

impl From<SubtokenPolicy> for SubtokenLabels {
    fn from(p: SubtokenPolicy) -> Self {
        match p {
            SubtokenPolicy::FirstOnly => SubtokenLabels::FirstOnly,
            SubtokenPolicy::Inherit => SubtokenLabels::Inherit,
        }
    }
}

fn default_stage1() -> usize {
    10
}
fn default_stage2() -> usize {
    30
}
fn default_batch() -> usize {
    64
}
fn default_subtokens() -> SubtokenPolicy {
    SubtokenPolicy::FirstOnly
}

impl Default for AdaptNerConfig {
    fn default() -> Self {
        Self {
            lora: LoraSpec::ner_adaptation(),
            stage1_epochs: default_stage1(),
            stage2_epochs: default_stage2(),
            batch_size: default_batch(),
            optimizer: AdamWConfig::default(),
            update_backbone: false,
            subtoken_labels: default_subtokens(),
            max_len: None,
            seed: 0,
        }
    }
}

/// A backbone adapted for one NER label set.
#[derive(Debug, Clone, PartialEq)]
pub struct NerModel {
    pub encoder: EncoderParams<f32>,
    pub lora: AdapterGroup<f32>,
    pub head: Head<f32>,
    pub labels: LabelSet,
}

struct Trainable<'a> {
    encoder: &'a mut EncoderParams<f32>,
    lora: &'a mut AdapterGroup<f32>,
    head: &'a mut Head<f32>,
}

impl Parameters<f32> for Trainable<'_> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array2<f32>)) {
        self.encoder.visit(f);
        self.lora.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f32>)) {
        self.encoder.visit_mut(f);
        self.lora.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptNerReport {
    /// Training-set span scores after the head-only stage.
    pub stage1_train: SpanScores,
    /// Training-set span scores after the joint stage.
    pub stage2_train: SpanScores,
    pub epoch_losses: Vec<f64>,
    pub warm_started_modules: usize,
}

impl NerModel {
    pub fn max_len(&self) -> usize {
        self.encoder.config.max_seq_len
    }

    /// Word-level tag predictions from each word's first sub-token. Words
    /// lost to truncation are tagged `O`.
    pub fn predict(&self, vocab: &Vocab, sentences: &[Vec<String>]) -> Result<Vec<Vec<String>>> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(64) {
            let enc: Vec<_> = chunk
                .iter()
                .map(|w| vocab.encode(w, self.max_len()))
                .collect();
            let refs: Vec<_> = enc.iter().collect();
            let batch = TokenBatch::from_encoded(&refs, None);
            let states =
                encode_with_group(&batch, &self.encoder, Some(&self.lora), &mut Mode::Eval)?;
            let (b, s, d) = states.dim();
            let flat = states.into_shape_with_order((b * s, d)).expect("row-major");
            let logits = self.head.linear.apply(&flat);
            for (r, (words, e)) in chunk.iter().zip(&enc).enumerate() {
                let mut tags = vec!["O".to_string(); words.len()];
                for (w, range) in e.word_ranges.iter().enumerate() {
                    let row = logits.row(r * s + range.start);
                    let best = argmax(row.iter().copied());
                    tags[w] = self.labels.tag(best).to_string();
                }
                out.push(tags);
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, vocab: &Vocab, data: &TokenDataset) -> Result<SpanScores> {
        let pred = self.predict(vocab, &data.word_lists())?;
        let gold: Vec<Vec<String>> = data.sentences.iter().map(|s| s.tags.clone()).collect();
        span_f1(&pred, &gold)
    }
}

fn argmax<I: Iterator<Item = f32>>(it: I) -> usize {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Two-stage token-classification adaptation. Stage 1 trains the head on a
/// frozen encoder; stage 2 adds the LoRA group (and the backbone when
/// `update_backbone` is set). Adapter modules that exist in `tpl` start from
/// it; the rest start from a fresh init.
pub fn adapt_ner(
    backbone: &EncoderParams<f32>,
    tpl: Option<&AdapterGroup<f32>>,
    train: &TokenDataset,
    labels: &LabelSet,
    vocab: &Vocab,
    cfg: &AdaptNerConfig,
) -> Result<(NerModel, AdaptNerReport)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("adaptation training set".into()));
    }
    labels.check_covers(train)?;
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut lora = AdapterGroup::warm_started(
        Task::Ner.group_name(),
        &cfg.lora,
        &backbone.config,
        cfg.seed.wrapping_add(1),
        tpl,
    )?;
    let warm = tpl.map_or(0, |t| {
        lora.modules
            .keys()
            .filter(|(l, p)| t.module(*l, *p).is_some())
            .count()
    });
    let mut head_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut head = Head {
        name: "ner".into(),
        linear: Linear::new(
            backbone.hidden_dim(),
            labels.len(),
            INIT_SIGMA,
            &mut head_rng,
        ),
    };
    let mut encoder = backbone.clone();
    let max_len = cfg.max_len.unwrap_or(backbone.config.max_seq_len);
    let policy: SubtokenLabels = cfg.subtoken_labels.into();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = TrainRng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut epoch_losses = Vec::new();

    let mut run_stage = |epochs: usize,
                         freeze: &[&str],
                         encoder: &mut EncoderParams<f32>,
                         lora: &mut AdapterGroup<f32>,
                         head: &mut Head<f32>|
     -> Result<()> {
        let mut opt = OptimizerState::<f32>::new(cfg.optimizer);
        for _ in 0..epochs {
            order.shuffle(&mut shuffle_rng);
            let (mut sum, mut batches) = (0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                let sents: Vec<&LabeledSentence> =
                    chunk.iter().map(|&i| &train.sentences[i]).collect();
                let batch = match labeled_batch(&sents, vocab, labels, max_len, policy) {
                    Ok(b) => b,
                    Err(Error::EmptySupervision) => continue,
                    Err(e) => return Err(e),
                };
                if batch.labels.iter().all(|&l| l < 0) {
                    continue;
                }
                let mut g = Graph::new();
                for p in freeze {
                    g.freeze_prefix(*p);
                }
                let loss = token_loss_graph(
                    &mut g,
                    &batch,
                    encoder,
                    Some(lora),
                    head,
                    &mut Mode::Train(&mut dropout_rng),
                )?;
                let lv = g.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        name: "adapt_ner".into(),
                        step: opt.step,
                    });
                }
                let grads = g.backward(loss);
                opt.apply(
                    &mut Trainable {
                        encoder,
                        lora,
                        head,
                    },
                    &grads,
                )?;
                sum += f64::from(lv);
                batches += 1;
            }
            epoch_losses.push(if batches > 0 {
                sum / batches as f64
            } else {
                f64::NAN
            });
        }
        Ok(())
    };

    run_stage(
        cfg.stage1_epochs,
        &["encoder.", "lora."],
        &mut encoder,
        &mut lora,
        &mut head,
    )?;
    let mut model = NerModel {
        encoder,
        lora,
        head,
        labels: labels.clone(),
    };
    let stage1_train = model.evaluate(vocab, train)?;
    let stage2_freeze: &[&str] = if cfg.update_backbone {
        &[]
    } else {
        &["encoder."]
    };
    run_stage(
        cfg.stage2_epochs,
        stage2_freeze,
        &mut model.encoder,
        &mut model.lora,
        &mut model.head,
    )?;
    let stage2_train = model.evaluate(vocab, train)?;
    Ok((
        model,
        AdaptNerReport {
            stage1_train,
            stage2_train,
            epoch_losses,
            warm_started_modules: warm,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_iters")]
    pub max_iter: usize,
    #[serde(default = "default_probe_lr")]
    pub lr: f64,
    #[serde(default = "default_probe_l2")]
    pub l2: f64,
    /// Stop when the loss improves by less than this.
    #[serde(default = "default_probe_tol")]
    pub tol: f64,
}

fn default_probe_iters() -> usize {
    500
}
fn default_probe_lr() -> f64 {
    0.5
}
fn default_probe_l2() -> f64 {
    1e-4
}
fn default_probe_tol() -> f64 {
    1e-9
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_iter: default_probe_iters(),
            lr: default_probe_lr(),
            l2: default_probe_l2(),
            tol: default_probe_tol(),
        }
    }
}

/// Multinomial logistic regression on standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticProbe {
    /// `K × d`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    /// Set when training saw a single class.
    pub degenerate: bool,
}

impl LogisticProbe {
    /// Full-batch gradient descent with Nesterov-free momentum 0.9.
    pub fn fit(
        x: &Array2<f64>,
        y: &[usize],
        num_classes: usize,
        cfg: &ProbeConfig,
    ) -> Result<Self> {
        let (n, d) = x.dim();
        if n == 0 {
            return Err(Error::EmptyDataset("probe training set".into()));
        }
        if y.len() != n {
            return Err(Error::LengthMismatch(format!(
                "{n} rows vs {} labels",
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::LabelMismatch(format!(
                "class {bad} >= {num_classes}"
            )));
        }
        let k = num_classes.max(1);
        let mean = x.mean_axis(Axis(0)).expect("n > 0");
        let std = x.std_axis(Axis(0), 0.0);
        let scale = std.mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 });
        let xs = (x - &mean) * &scale;
        let distinct: std::collections::BTreeSet<usize> = y.iter().copied().collect();
        let mut probe = Self {
            weight: Array2::zeros((k, d)),
            bias: Array1::zeros(k),
            mean,
            scale,
            degenerate: distinct.len() < 2,
        };
        if probe.degenerate {
            log::warn!("linear probe trained on a single class");
            probe.bias[y[0]] = 1.0;
            return Ok(probe);
        }
        let mut onehot = Array2::<f64>::zeros((n, k));
        for (i, &c) in y.iter().enumerate() {
            onehot[[i, c]] = 1.0;
        }
        let mut vw = Array2::<f64>::zeros((k, d));
        let mut vb = Array1::<f64>::zeros(k);
        let mut prev = f64::INFINITY;
        for _ in 0..cfg.max_iter {
            let mut p = xs.dot(&probe.weight.t()) + &probe.bias;
            let mut loss = 0.0;
            for (mut row, t) in p.rows_mut().into_iter().zip(onehot.rows()) {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|v| (v - m).exp());
                let s = row.sum();
                row /= s;
                loss -= row
                    .iter()
                    .zip(t)
                    .map(|(&pi, &ti)| ti * pi.max(1e-300).ln())
                    .sum::<f64>();
            }
            loss /= n as f64;
            loss += 0.5 * cfg.l2 * probe.weight.iter().map(|w| w * w).sum::<f64>();
            let diff = (&p - &onehot) / n as f64;
            let gw = diff.t().dot(&xs) + &(&probe.weight * cfg.l2);
            let gb = diff.sum_axis(Axis(0));
            vw = &vw * 0.9 - &(gw * cfg.lr);
            vb = &vb * 0.9 - &(gb * cfg.lr);
            probe.weight += &vw;
            probe.bias += &vb;
            if (prev - loss).abs() < cfg.tol {
                break;
            }
            prev = loss;
        }
        Ok(probe)
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let xs = (x - &self.mean) * &self.scale;
        let logits = xs.dot(&self.weight.t()) + &self.bias;
        logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = (0, f64::NEG_INFINITY);
                for (i, &v) in r.iter().enumerate() {
                    if v > best.1 {
                        best = (i, v);
                    }
                }
                best.0
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub degenerate: bool,
}

/// Fits a probe on `train` features and scores it on `test`.
pub fn fit_probe(
    train_x: &Array2<f64>,
    train_y: &[usize],
    test_x: &Array2<f64>,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<(LogisticProbe, ProbeReport)> {
    let k = train_y.iter().chain(test_y).max().map_or(1, |m| m + 1);
    let probe = LogisticProbe::fit(train_x, train_y, k, cfg)?;
    let report = ProbeReport {
        train_accuracy: accuracy(&probe.predict(train_x), train_y)?,
        test_accuracy: accuracy(&probe.predict(test_x), test_y)?,
        degenerate: probe.degenerate,
    };
    Ok((probe, report))
}

/// Text-classification adaptation: pooled embeddings from the frozen
/// backbone (with the TC adapter group active when given) feed a logistic
/// regression probe. Only the probe is trained.
pub fn adapt_tc(
    backbone: &EncoderParams<f32>,
    tpl: Option<&AdapterGroup<f32>>,
    train: &ClassifiedTexts,
    test: &ClassifiedTexts,
    vocab: &Vocab,
    cfg: &ProbeConfig,
) -> Result<(LogisticProbe, ProbeReport)> {
    let embedder = EncoderEmbedder::new(backbone, vocab).with_group(tpl);
    let embed = |d: &ClassifiedTexts| -> Result<Array2<f64>> {
        let words: Vec<Vec<String>> = d
            .texts
            .iter()
            .map(|t| crate::data::split_words(t))
            .collect();
        let refs: Vec<&[String]> = words.iter().map(Vec::as_slice).collect();
        embedder.text_embeddings(&refs)
    };
    fit_probe(
        &embed(train)?,
        &train.labels,
        &embed(test)?,
        &test.labels,
        cfg,
    )
}
