//! Pseudo-label construction for token-level pre-finetuning.
//!
//! A frozen teacher encoder embeds every word (mean of its sub-token states),
//! mini-batch k-means groups the word embeddings, and each word's cluster id
//! becomes its label `C<id>`.

use std::ops::Range;
use std::path::PathBuf;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::data::{LabelSet, LabeledSentence, TokenDataset};
use crate::encoder::{encode_tokens, EncodedSentence, EncoderParams, Mode, TokenBatch, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_kmeans_batch")]
    pub kmeans_batch: usize,
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_iters: usize,
    #[serde(default)]
    pub seed: u64,
    /// Teacher checkpoint; `None` means the caller supplies the encoder.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
}

fn default_k() -> usize {
    200
}

fn default_kmeans_batch() -> usize {
    1024
}

fn default_kmeans_iters() -> usize {
    10
}

/// Cluster counts searched when tuning `k`.
pub const CLUSTER_GRID: [usize; 5] = [50, 100, 200, 500, 1000];

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            kmeans_batch: default_kmeans_batch(),
            kmeans_iters: default_kmeans_iters(),
            seed: 0,
            teacher: None,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("k must be >= 2"));
        }
        if self.kmeans_batch < self.k {
            return Err(Error::config("kmeans_batch must be >= k"));
        }
        if self.kmeans_iters == 0 {
            return Err(Error::config("kmeans_iters must be >= 1"));
        }
        Ok(())
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.k,
            batch_size: self.kmeans_batch,
            epochs: self.kmeans_iters,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub batch_size: usize,
    /// Full passes over the shuffled points.
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Array2<f64>,
    /// Sum of squared distances to the nearest centroid over the fitted points.
    pub inertia: f64,
    /// Full-data inertia after each epoch.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(centroids: &Array2<f64>, p: ArrayView1<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn inertia(centroids: &Array2<f64>, points: &Array2<f64>) -> f64 {
    points
        .rows()
        .into_iter()
        .map(|p| nearest(centroids, p).1)
        .sum()
}

/// k-means++ seeding.
fn seed_centroids(points: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, points.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            // Never re-pick a point that already coincides with a centroid.
            if d2[idx] == 0.0 {
                d2.iter().position(|&d| d > 0.0).unwrap_or(idx)
            } else {
                idx
            }
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(pick)));
        }
    }
    centroids
}

/// Mini-batch k-means: per-centroid learning rate `1/count`, nearest-centroid
/// assignment with lowest-index tie break, k-means++ seeding, and empty
/// clusters re-seeded at the point farthest from its centroid.
pub fn minibatch_kmeans<T: Real>(points: &Array2<T>, cfg: &KMeansConfig) -> Result<ClusterModel> {
    let n = points.nrows();
    if cfg.k == 0 {
        return Err(Error::Clustering("k must be >= 1".into()));
    }
    if cfg.k > n {
        return Err(Error::Clustering(format!(
            "k = {} exceeds {n} points",
            cfg.k
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Clustering("batch_size must be >= 1".into()));
    }
    let pts: Array2<f64> = points.mapv(|v| v.as_f64());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = seed_centroids(&pts, cfg.k, &mut rng);
    let mut counts = vec![0u64; cfg.k];
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs.max(1) {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let assign: Vec<usize> = chunk
                .iter()
                .map(|&i| nearest(&centroids, pts.row(i)).0)
                .collect();
            for (&i, &c) in chunk.iter().zip(&assign) {
                counts[c] += 1;
                let eta = 1.0 / counts[c] as f64;
                let p = pts.row(i);
                let mut row = centroids.row_mut(c);
                row.zip_mut_with(&p, |cv, &pv| *cv = (1.0 - eta) * *cv + eta * pv);
            }
        }
        history.push(inertia(&centroids, &pts));
    }

    reseed_empty(&mut centroids, &pts);
    let inertia = inertia(&centroids, &pts);
    Ok(ClusterModel {
        centroids,
        inertia,
        inertia_history: history,
    })
}

fn reseed_empty(centroids: &mut Array2<f64>, pts: &Array2<f64>) {
    let k = centroids.nrows();
    for _ in 0..k {
        let assign: Vec<(usize, f64)> = pts
            .rows()
            .into_iter()
            .map(|p| nearest(centroids, p))
            .collect();
        let mut sizes = vec![0usize; k];
        for &(c, _) in &assign {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        // Farthest point among clusters that can spare one.
        let far = assign
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| sizes[*c] > 1)
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        match far {
            Some(i) if assign[i].1 > 0.0 => centroids.row_mut(empty).assign(&pts.row(i)),
            _ => return,
        }
    }
}

pub fn assign_clusters<T: Real>(model: &ClusterModel, points: &Array2<T>) -> Result<Vec<usize>> {
    if points.nrows() == 0 {
        return Ok(Vec::new());
    }
    if points.ncols() != model.dim() {
        return Err(Error::shape(format!(
            "points have dim {} but centroids have {}",
            points.ncols(),
            model.dim()
        )));
    }
    let pts = points.mapv(|v| v.as_f64());
    Ok(pts
        .rows()
        .into_iter()
        .map(|p| nearest(&model.centroids, p).0)
        .collect())
}

/// One row per aligned word: the mean of its sub-token embeddings.
/// `token_embeddings` is `seq_len × hidden` for a single sequence.
pub fn word_embeddings_from_subtokens<T: Real>(
    token_embeddings: &Array2<T>,
    alignment: &[Range<usize>],
) -> Result<Array2<T>> {
    let mut out = Array2::zeros((alignment.len(), token_embeddings.ncols()));
    for (w, r) in alignment.iter().enumerate() {
        if r.is_empty() || r.end > token_embeddings.nrows() {
            return Err(Error::Alignment(format!("word {w}: bad range {r:?}")));
        }
        let mean = token_embeddings
            .slice(ndarray::s![r.clone(), ..])
            .mean_axis(Axis(0))
            .expect("non-empty range");
        out.row_mut(w).assign(&mean);
    }
    Ok(out)
}

/// Word embeddings for a corpus from a frozen teacher, in corpus order.
/// Returns the stacked embeddings and each sentence's encoding.
pub fn teacher_word_embeddings(
    corpus: &[Vec<String>],
    vocab: &Vocab,
    teacher: &EncoderParams<f32>,
    chunk: usize,
) -> Result<(Array2<f32>, Vec<EncodedSentence>)> {
    let max_len = teacher.config.max_seq_len;
    let encoded: Vec<EncodedSentence> = corpus.iter().map(|w| vocab.encode(w, max_len)).collect();
    let parts: Vec<Result<Vec<Array2<f32>>>> = encoded
        .par_chunks(chunk.max(1))
        .map(|sents| {
            let refs: Vec<&EncodedSentence> = sents.iter().collect();
            let batch = TokenBatch::from_encoded(&refs, None);
            let states = encode_tokens(&batch, teacher, None, None, Mode::Eval)?;
            sents
                .iter()
                .enumerate()
                .map(|(r, s)| {
                    let rows = states.index_axis(Axis(0), r).to_owned();
                    word_embeddings_from_subtokens(&rows, &s.word_ranges)
                })
                .collect()
        })
        .collect();
    let mut rows: Vec<Array2<f32>> = Vec::new();
    for p in parts {
        rows.extend(p?);
    }
    let views: Vec<_> = rows.iter().map(|a| a.view()).collect();
    let stacked = if views.is_empty() {
        Array2::zeros((0, teacher.hidden_dim()))
    } else {
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?
    };
    Ok((stacked, encoded))
}

pub fn cluster_tag(id: usize) -> String {
    format!("C{id}")
}

pub fn cluster_label_set(k: usize) -> LabelSet {
    LabelSet::new((0..k).map(cluster_tag).collect())
}

/// A corpus tagged with cluster ids, plus the clustering that produced it.
#[derive(Debug, Clone)]
pub struct PseudoDataset {
    pub dataset: TokenDataset,
    pub model: ClusterModel,
    pub labels: LabelSet,
}

/// Clusters teacher word embeddings and tags every kept word with its
/// cluster id. Words dropped by truncation are dropped from the output too.
pub fn build_pseudo_dataset(
    corpus: &[Vec<String>],
    vocab: &Vocab,
    teacher: &EncoderParams<f32>,
    cfg: &PseudoLabelConfig,
) -> Result<PseudoDataset> {
    cfg.validate()?;
    let (emb, _) = teacher_word_embeddings(corpus, vocab, teacher, 64)?;
    if emb.nrows() < cfg.k {
        return Err(Error::Clustering(format!(
            "{} words cannot fill {} clusters",
            emb.nrows(),
            cfg.k
        )));
    }
    let model = minibatch_kmeans(&emb, &cfg.kmeans())?;
    label_with_model(corpus, vocab, teacher, model)
}

/// Tags a corpus using an already fitted clustering.
pub fn label_with_model(
    corpus: &[Vec<String>],
    vocab: &Vocab,
    teacher: &EncoderParams<f32>,
    model: ClusterModel,
) -> Result<PseudoDataset> {
    if teacher.hidden_dim() != model.dim() {
        return Err(Error::config(format!(
            "teacher hidden dim {} does not match clustering dim {}",
            teacher.hidden_dim(),
            model.dim()
        )));
    }
    let (emb, encoded) = teacher_word_embeddings(corpus, vocab, teacher, 64)?;
    let ids = assign_clusters(&model, &emb)?;
    let mut it = ids.into_iter();
    let mut sentences = Vec::with_capacity(corpus.len());
    for (words, enc) in corpus.iter().zip(&encoded) {
        let kept = enc.num_words();
        let tags: Vec<String> = it.by_ref().take(kept).map(cluster_tag).collect();
        sentences.push(LabeledSentence::new(words[..kept].to_vec(), tags)?);
    }
    Ok(PseudoDataset {
        dataset: TokenDataset::new(sentences),
        labels: cluster_label_set(model.k()),
        model,
    })
}
