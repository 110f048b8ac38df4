//! Downstream scoring and the interference diagnostics.

pub mod bio;
pub mod perturb;
pub mod split;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    encode_with_group, pool_mean, EncoderParams, Mode, TokenBatch, Vocab, EPS_NORM,
};
use crate::error::{Error, Result};
use crate::lora::AdapterGroup;

pub use bio::{decode_spans, encode_spans, is_bio_tag, span_f1, Span, SpanScores};
pub use perturb::{
    perturb_entities, perturbation_similarity, EntityBank, PerturbedSet, SimilarityReport,
};
pub use split::limited_data_split;

/// Source of text and token embeddings for the diagnostics.
pub trait Embedder: Sync {
    /// Mean-pooled text embeddings, one row per sentence.
    fn text_embeddings(&self, sentences: &[&[String]]) -> Result<Array2<f64>>;
    /// Embeddings of the content tokens of one sentence, without the reserved
    /// `[CLS]`/`[SEP]` positions or padding.
    fn token_embeddings(&self, sentence: &[String]) -> Result<Array2<f64>>;
}

/// A read-only encoder snapshot, optionally with one adapter group active.
pub struct EncoderEmbedder<'a> {
    pub params: &'a EncoderParams<f32>,
    pub group: Option<&'a AdapterGroup<f32>>,
    pub vocab: &'a Vocab,
    pub max_len: usize,
    pub chunk: usize,
}

impl<'a> EncoderEmbedder<'a> {
    pub fn new(params: &'a EncoderParams<f32>, vocab: &'a Vocab) -> Self {
        Self {
            params,
            group: None,
            vocab,
            max_len: params.config.max_seq_len,
            chunk: 64,
        }
    }

    pub fn with_group(mut self, group: Option<&'a AdapterGroup<f32>>) -> Self {
        self.group = group;
        self
    }

    fn batch(&self, sentences: &[&[String]]) -> TokenBatch {
        let enc: Vec<_> = sentences
            .iter()
            .map(|w| self.vocab.encode(w, self.max_len))
            .collect();
        let refs: Vec<_> = enc.iter().collect();
        TokenBatch::from_encoded(&refs, None)
    }

    /// Per-token states for a batch of sentences (eval mode).
    pub fn token_states(
        &self,
        sentences: &[&[String]],
    ) -> Result<(TokenBatch, ndarray::Array3<f32>)> {
        let batch = self.batch(sentences);
        let states = encode_with_group(&batch, self.params, self.group, &mut Mode::Eval)?;
        Ok((batch, states))
    }
}

impl Embedder for EncoderEmbedder<'_> {
    fn text_embeddings(&self, sentences: &[&[String]]) -> Result<Array2<f64>> {
        let parts: Vec<Result<Array2<f32>>> = sentences
            .par_chunks(self.chunk.max(1))
            .map(|c| {
                let (batch, states) = self.token_states(c)?;
                pool_mean(&states, &batch.attention_mask)
            })
            .collect();
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        if views.is_empty() {
            return Ok(Array2::zeros((0, self.params.hidden_dim())));
        }
        Ok(ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::shape(e.to_string()))?
            .mapv(f64::from))
    }

    fn token_embeddings(&self, sentence: &[String]) -> Result<Array2<f64>> {
        let (batch, states) = self.token_states(&[sentence])?;
        let len = batch.lengths()[0];
        // Positions 0 and len-1 are [CLS] and [SEP].
        let inner = if len >= 2 { 1..len - 1 } else { 0..0 };
        Ok(states
            .index_axis(Axis(0), 0)
            .slice(ndarray::s![inner, ..])
            .mapv(f64::from))
    }
}

/// Mean pairwise cosine among the rows of `tokens`. `None` when there are
/// fewer than two rows or a row is degenerate.
pub fn sentence_homogeneity(tokens: &Array2<f64>) -> Option<f64> {
    let n = tokens.nrows();
    if n < 2 {
        return None;
    }
    let norms: Vec<f64> = tokens
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    if norms.iter().any(|&x| x <= EPS_NORM) {
        return None;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += tokens.row(i).dot(&tokens.row(j)) / (norms[i] * norms[j]);
        }
    }
    Some(sum / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HomogeneityReport {
    pub mean: f64,
    pub sentences: usize,
    /// Sentences with fewer than two content tokens (or degenerate ones).
    pub skipped: usize,
}

/// Default ceiling on sampled sentences.
pub const HOMOGENEITY_SAMPLES: usize = 2000;

/// Mean over sentences of the within-sentence token cosine. When more than
/// `n_samples` sentences are given a seeded subset is used.
pub fn token_homogeneity(
    embedder: &dyn Embedder,
    sentences: &[Vec<String>],
    n_samples: usize,
    seed: u64,
) -> Result<HomogeneityReport> {
    let picks: Vec<usize> = if sentences.len() > n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, sentences.len(), n_samples).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..sentences.len()).collect()
    };
    let values: Vec<Result<Option<f64>>> = picks
        .par_iter()
        .map(|&i| {
            Ok(sentence_homogeneity(
                &embedder.token_embeddings(&sentences[i])?,
            ))
        })
        .collect();
    let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        match v? {
            Some(h) => {
                sum += h;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Err(Error::EmptyDataset(
            "no sentence with two or more content tokens".into(),
        ));
    }
    Ok(HomogeneityReport {
        mean: sum / used as f64,
        sentences: used,
        skipped,
    })
}

/// `(step, value)` points with strictly increasing steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub points: Vec<(u64, f64)>,
}

impl SimilarityCurve {
    pub fn push(&mut self, step: u64, value: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if step <= last {
                return Err(Error::config(format!("curve step {step} not after {last}")));
            }
        }
        self.points.push((step, value));
        Ok(())
    }

    pub fn first(&self) -> Option<f64> {
        self.points.first().map(|p| p.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,value\n");
        for (st, v) in &self.points {
            s.push_str(&format!("{st},{v}\n"));
        }
        s
    }
}

/// Fraction of `predicted == gold`.
pub fn accuracy(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions vs {} labels",
            predicted.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::EmptyDataset("accuracy over zero items".into()));
    }
    let hits = predicted.iter().zip(gold).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gold.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn homogeneity_fixtures() {
        assert!(
            (sentence_homogeneity(&array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap() - 1.0)
                .abs()
                < 1e-12
        );
        assert_eq!(
            sentence_homogeneity(&array![[1.0, 0.0], [0.0, 3.0]]),
            Some(0.0)
        );
        assert_eq!(sentence_homogeneity(&array![[1.0, 0.0]]), None);
        // Three unit vectors at 60° from each other: pairwise cosine 0.5.
        let s = (0.5f64).sqrt();
        let t = array![[s, s, 0.0], [s, 0.0, s], [0.0, s, s]];
        assert!((sentence_homogeneity(&t).unwrap() - 0.5).abs() < 1e-12);
    }

    struct Antipodal;

    impl Embedder for Antipodal {
        fn text_embeddings(&self, sentences: &[&[String]]) -> Result<Array2<f64>> {
            Ok(Array2::from_shape_fn((sentences.len(), 2), |(i, j)| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                if j == 0 {
                    sign
                } else {
                    0.0
                }
            }))
        }

        fn token_embeddings(&self, sentence: &[String]) -> Result<Array2<f64>> {
            Ok(Array2::ones((sentence.len(), 2)))
        }
    }

    #[test]
    fn stub_antipodal_similarity() {
        let s = crate::data::LabeledSentence::new(vec!["a".into()], vec!["O".into()]).unwrap();
        let set = PerturbedSet {
            original: s.clone(),
            variants: vec![s],
        };
        let r = perturbation_similarity(&Antipodal, &[set]).unwrap();
        assert_eq!(r.mean, -1.0);
        let h = token_homogeneity(
            &Antipodal,
            &[vec!["x".into(), "y".into()], vec!["z".into()]],
            10,
            0,
        )
        .unwrap();
        assert!((h.mean - 1.0).abs() < 1e-12);
        assert_eq!((h.sentences, h.skipped), (1, 1));
    }

    #[test]
    fn zero_layer_identical_variants_similarity_one() {
        let words: Vec<Vec<String>> = vec![vec!["a".into(), "b".into()], vec!["c".into()]];
        let vocab = Vocab::build(words.iter().map(|v| v.as_slice()), 1, None);
        let cfg = EncoderConfig {
            num_layers: 0,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 8,
            vocab_size: vocab.len(),
            max_seq_len: 8,
            dropout_rate: 0.0,
            seed: 3,
        };
        let p = EncoderParams::init(&cfg).unwrap();
        let e = EncoderEmbedder::new(&p, &vocab);
        let sets: Vec<PerturbedSet> = words
            .iter()
            .map(|w| {
                let s = crate::data::LabeledSentence::new(w.clone(), vec!["O".into(); w.len()])
                    .unwrap();
                PerturbedSet {
                    original: s.clone(),
                    variants: vec![s; 4],
                }
            })
            .collect();
        let r = perturbation_similarity(&e, &sets).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-6);
        assert_eq!(r.pairs, 8);
    }

    #[test]
    fn curve_steps_must_increase() {
        let mut c = SimilarityCurve::default();
        c.push(0, 0.1).unwrap();
        c.push(5, 0.2).unwrap();
        assert!(c.push(5, 0.3).is_err());
        assert_eq!(c.to_csv(), "step,value\n0,0.1\n5,0.2\n");
    }

    fn rotation(theta: f64, phi: f64) -> Array2<f64> {
        let (c1, s1) = (theta.cos(), theta.sin());
        let (c2, s2) = (phi.cos(), phi.sin());
        let rz = array![[c1, -s1, 0.0], [s1, c1, 0.0], [0.0, 0.0, 1.0]];
        let rx = array![[1.0, 0.0, 0.0], [0.0, c2, -s2], [0.0, s2, c2]];
        rz.dot(&rx)
    }

    proptest! {
        #[test]
        fn homogeneity_rotation_invariant(
            vals in prop::collection::vec(0.1f64..2.0, 12),
            theta in 0.0f64..std::f64::consts::TAU,
            phi in 0.0f64..std::f64::consts::TAU,
        ) {
            let t = Array2::from_shape_vec((4, 3), vals).unwrap();
            let r = rotation(theta, phi);
            let a = sentence_homogeneity(&t).unwrap();
            let b = sentence_homogeneity(&t.dot(&r.t())).unwrap();
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}
