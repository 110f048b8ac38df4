//! Pre-finetuning objectives: InfoNCE with in-batch negatives and token-level
//! cross-entropy.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{stable_nce_rows, Graph, NodeId, Real};
use crate::encoder::{encode_graph, EncoderParams, Mode, TokenBatch, EPS_NORM};
use crate::error::{Error, Result};
use crate::lora::AdapterGroup;
use crate::params::{Head, Linear};

/// Label value for positions that carry no supervision (padding, `[CLS]`,
/// `[SEP]`).
pub const IGNORE_LABEL: i64 = -100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.05 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be > 0"));
        }
        Ok(())
    }
}

/// Anchors and positives, aligned row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: TokenBatch,
    pub positives: TokenBatch,
}

impl ContrastiveBatch {
    pub fn new(anchors: TokenBatch, positives: TokenBatch) -> Result<Self> {
        if anchors.len() != positives.len() {
            return Err(Error::shape(format!(
                "{} anchors vs {} positives",
                anchors.len(),
                positives.len()
            )));
        }
        Ok(Self { anchors, positives })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenLabeledBatch {
    pub tokens: TokenBatch,
    pub labels: Array2<i64>,
}

impl TokenLabeledBatch {
    pub fn new(tokens: TokenBatch, labels: Array2<i64>) -> Result<Self> {
        if tokens.dims() != labels.dim() {
            return Err(Error::shape("labels must match token batch shape"));
        }
        for ((r, c), &l) in labels.indexed_iter() {
            if l != IGNORE_LABEL && (l < 0 || tokens.attention_mask[[r, c]] == 0) {
                return Err(Error::shape(format!(
                    "label {l} at ({r}, {c}) is negative or on a padded position"
                )));
            }
        }
        Ok(Self { tokens, labels })
    }

    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        if let Some(&bad) = self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            return Err(Error::LabelMismatch(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(())
    }

    pub(crate) fn graph_labels(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .map(|&l| (l != IGNORE_LABEL).then_some(l as usize))
            .collect()
    }
}

fn renormalize<T: Real>(z: &Array2<T>, what: &str) -> Result<Array2<T>> {
    let mut out = z.clone();
    let mut warned = false;
    for mut row in out.rows_mut() {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(n.as_f64() > EPS_NORM) {
            return Err(Error::DegenerateEmbedding(n.as_f64()));
        }
        if (n.as_f64() - 1.0).abs() > 1e-3 && !warned {
            log::warn!("info_nce: {what} not L2-normalised (norm {n}); renormalising");
            warned = true;
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

/// `−(1/|B|) Σᵢ log( exp(⟨zᵢ,zᵢ⁺⟩/τ) / Σⱼ exp(⟨zᵢ,zⱼ⁺⟩/τ) )`.
///
/// The denominator runs over every positive in the batch; anchors never act
/// as negatives for each other.
pub fn info_nce<T: Real>(z: &Array2<T>, z_plus: &Array2<T>, tau: f64) -> Result<T> {
    if z.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if z.dim() != z_plus.dim() {
        return Err(Error::shape("anchor/positive shapes differ"));
    }
    if !(tau > 0.0) {
        return Err(Error::config("temperature must be > 0"));
    }
    let z = renormalize(z, "anchors")?;
    let zp = renormalize(z_plus, "positives")?;
    let mut sims = z.dot(&zp.t()) / T::lit(tau);
    Ok(stable_nce_rows(&mut sims))
}

/// Mean `−log softmax(logits)[label]` over positions whose label is not
/// `ignore`.
pub fn token_cross_entropy<T: Real>(
    logits: &Array3<T>,
    labels: &Array2<i64>,
    ignore: i64,
) -> Result<T> {
    let (b, s, k) = logits.dim();
    if labels.dim() != (b, s) {
        return Err(Error::shape("labels must be batch × seq_len"));
    }
    if k < 2 {
        return Err(Error::config(
            "token classification needs at least 2 classes",
        ));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ((r, c), &l) in labels.indexed_iter() {
        if l == ignore {
            continue;
        }
        if l < 0 || l as usize >= k {
            return Err(Error::LabelMismatch(format!("label {l} outside [0, {k})")));
        }
        let row: Vec<f64> = (0..k).map(|j| logits[[r, c, j]].as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ln_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total -= (row[l as usize] - max) - ln_sum;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptySupervision);
    }
    Ok(T::lit(total / count as f64))
}

/// Affine token classifier applied position-wise: `batch × seq × K`.
pub fn ner_linear_head<T: Real>(tokens: &Array3<T>, head: &Linear<T>) -> Result<Array3<T>> {
    let (b, s, d) = tokens.dim();
    if head.in_dim() != d {
        return Err(Error::shape(format!(
            "head expects hidden {} but tokens have {d}",
            head.in_dim()
        )));
    }
    let flat = tokens
        .to_shape((b * s, d))
        .map_err(|e| Error::shape(e.to_string()))?
        .to_owned();
    let logits = head.apply(&flat);
    Ok(logits
        .into_shape_with_order((b, s, head.out_dim()))
        .expect("row-major"))
}

/// Pooled, normalised sentence embeddings for `batch` on the tape.
pub fn sentence_embedding_graph<T: Real>(
    g: &mut Graph<T>,
    batch: &TokenBatch,
    params: &EncoderParams<T>,
    adapter: Option<&AdapterGroup<T>>,
    mode: &mut Mode<'_>,
) -> Result<NodeId> {
    let h = encode_graph(g, batch, params, adapter, mode)?;
    let (_, seq) = batch.dims();
    let pooled = g.mean_pool(h, seq, &batch.mask_flat())?;
    g.l2_normalize(pooled, T::lit(EPS_NORM))
}

/// InfoNCE over a contrastive batch; anchors and positives share weights.
pub fn contrastive_loss_graph<T: Real>(
    g: &mut Graph<T>,
    batch: &ContrastiveBatch,
    params: &EncoderParams<T>,
    adapter: Option<&AdapterGroup<T>>,
    cfg: &ContrastiveConfig,
    mode: &mut Mode<'_>,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let z = sentence_embedding_graph(g, &batch.anchors, params, adapter, mode)?;
    let zp = sentence_embedding_graph(g, &batch.positives, params, adapter, mode)?;
    g.info_nce(z, zp, T::lit(cfg.temperature))
}

/// Token cross-entropy through the encoder and a linear head.
pub fn token_loss_graph<T: Real>(
    g: &mut Graph<T>,
    batch: &TokenLabeledBatch,
    params: &EncoderParams<T>,
    adapter: Option<&AdapterGroup<T>>,
    head: &Head<T>,
    mode: &mut Mode<'_>,
) -> Result<NodeId> {
    batch.validate_classes(head.linear.out_dim())?;
    let h = encode_graph(g, &batch.tokens, params, adapter, mode)?;
    let logits = head.linear.graph(g, &head.prefix(), h)?;
    g.cross_entropy(logits, &batch.graph_labels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn single_pair_has_zero_loss() {
        let z = array![[0.6, 0.8]];
        assert_eq!(info_nce(&z, &z, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_pairs_closed_form() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let l1: f64 = info_nce(&e, &e, 1.0).unwrap();
        let expect1 = (1.0 + (-1.0f64).exp()).ln();
        assert!((l1 - expect1).abs() < 1e-12);
        assert!((l1 - 0.31326).abs() < 1e-5);
        let l2: f64 = info_nce(&e, &e, 0.05).unwrap();
        let expect2 = (-20.0f64).exp().ln_1p();
        assert!((l2 - expect2).abs() / expect2 < 1e-6, "{l2} vs {expect2}");
        assert!((l2 - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn empty_batch_errors() {
        let z: Array2<f64> = Array2::zeros((0, 3));
        assert!(matches!(info_nce(&z, &z, 0.05), Err(Error::EmptyBatch)));
    }

    #[test]
    fn unnormalised_input_is_renormalised() {
        let z = array![[3.0, 0.0], [0.0, 0.5]];
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let a: f64 = info_nce(&z, &e, 1.0).unwrap();
        let b: f64 = info_nce(&e, &e, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_as_negatives_separate() {
        let mut prev = f64::INFINITY;
        for angle in [0.3f64, 0.8, 1.3, 2.0, 2.8] {
            let z = array![[1.0, 0.0], [angle.cos(), angle.sin()]];
            let l: f64 = info_nce(&z, &z, 0.5).unwrap();
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Array3::<f64>::zeros((2, 3, 4));
        let labels = array![[0, 1, 2], [3, IGNORE_LABEL, 1]];
        let l = token_cross_entropy(&logits, &labels, IGNORE_LABEL).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-5);
        assert!((l - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn saturated_softmax_is_near_zero() {
        let mut logits = Array3::<f64>::zeros((1, 2, 3));
        logits[[0, 0, 1]] = 30.0;
        logits[[0, 1, 2]] = 30.0;
        let labels = array![[1, 2]];
        let l = token_cross_entropy(&logits, &labels, IGNORE_LABEL).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn all_ignored_errors() {
        let logits = Array3::<f64>::zeros((1, 2, 3));
        let labels = array![[IGNORE_LABEL, IGNORE_LABEL]];
        assert!(matches!(
            token_cross_entropy(&logits, &labels, IGNORE_LABEL),
            Err(Error::EmptySupervision)
        ));
    }

    #[test]
    fn head_cases() {
        let tokens = Array3::from_shape_fn((2, 5, 4), |(a, b, c)| (a + b + c) as f64);
        let zero = Linear::<f64>::zeros(4, 9);
        let out = ner_linear_head(&tokens, &zero).unwrap();
        assert_eq!(out.dim(), (2, 5, 9));
        assert!(out.iter().all(|&v| v == 0.0));

        let t2 = Array3::from_shape_fn((1, 3, 2), |(_, b, c)| (b * 2 + c) as f64 - 1.5);
        let mut id = Linear::<f64>::zeros(2, 2);
        id.weight = Array2::eye(2);
        assert_eq!(ner_linear_head(&t2, &id).unwrap(), t2);
    }

    proptest! {
        #[test]
        fn info_nce_is_permutation_invariant(
            raw in proptest::collection::vec(-1.0f64..1.0, 24),
            seed in 0u64..1000,
        ) {
            let z = Array2::from_shape_vec((4, 3), raw[..12].to_vec()).unwrap();
            let p = Array2::from_shape_vec((4, 3), raw[12..].to_vec()).unwrap();
            prop_assume!(z.rows().into_iter().chain(p.rows()).all(|r| r.dot(&r) > 1e-3));
            let mut perm: Vec<usize> = (0..4).collect();
            let mut s = seed;
            for i in (1..4).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let zp = z.select(ndarray::Axis(0), &perm);
            let pp = p.select(ndarray::Axis(0), &perm);
            let a: f64 = info_nce(&z, &p, 0.1).unwrap();
            let b: f64 = info_nce(&zp, &pp, 0.1).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn cross_entropy_shift_invariant(
            raw in proptest::collection::vec(-5.0f64..5.0, 8),
            shift in -50.0f64..50.0,
        ) {
            let logits = Array3::from_shape_vec((1, 2, 4), raw).unwrap();
            let labels = array![[1, 3]];
            let mut shifted = logits.clone();
            for j in 0..4 {
                shifted[[0, 0, j]] += shift;
            }
            let a = token_cross_entropy(&logits, &labels, IGNORE_LABEL).unwrap();
            let b = token_cross_entropy(&shifted, &labels, IGNORE_LABEL).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
