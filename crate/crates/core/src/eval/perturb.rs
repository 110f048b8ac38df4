//! Same-type entity substitution and the text-similarity probe built on it.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::data::{LabeledSentence, TokenDataset};
use crate::encoder::cosine_similarity;
use crate::error::{Error, Result};
use crate::eval::bio::{decode_spans, encode_spans, Span};
use crate::eval::Embedder;

/// Entity surface forms by type, in first-seen order without duplicates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityBank {
    pub by_type: BTreeMap<String, Vec<Vec<String>>>,
}

impl EntityBank {
    pub fn harvest(data: &TokenDataset) -> Self {
        let mut bank = Self::default();
        for s in &data.sentences {
            for span in decode_spans(&s.tags) {
                bank.add(&span.label, s.words[span.start..span.end].to_vec());
            }
        }
        bank
    }

    pub fn add(&mut self, ty: &str, surface: Vec<String>) {
        let list = self.by_type.entry(ty.to_string()).or_default();
        if !surface.is_empty() && !list.contains(&surface) {
            list.push(surface);
        }
    }

    pub fn types(&self) -> impl Iterator<Item = &str> {
        self.by_type.keys().map(String::as_str)
    }

    fn candidates(&self, ty: &str) -> Result<&[Vec<String>]> {
        match self.by_type.get(ty) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(Error::MissingEntityType(ty.to_string())),
        }
    }
}

/// An original sentence and its variants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbedSet {
    pub original: LabeledSentence,
    pub variants: Vec<LabeledSentence>,
}

pub const DEFAULT_VARIANTS: usize = 4;

/// Builds `v` variants, each replacing every entity with a uniformly drawn
/// surface of the same type. The original surface is excluded whenever the
/// bank holds another candidate for that type.
pub fn perturb_entities<R: Rng + ?Sized>(
    sentence: &LabeledSentence,
    bank: &EntityBank,
    v: usize,
    rng: &mut R,
) -> Result<PerturbedSet> {
    let spans = decode_spans(&sentence.tags);
    for s in &spans {
        bank.candidates(&s.label)?;
    }
    let mut variants = Vec::with_capacity(v);
    for _ in 0..v {
        let mut words = Vec::with_capacity(sentence.len());
        let mut new_spans = Vec::with_capacity(spans.len());
        let mut at = 0;
        for s in &spans {
            words.extend_from_slice(&sentence.words[at..s.start]);
            let current = &sentence.words[s.start..s.end];
            let pool: Vec<&Vec<String>> = bank.candidates(&s.label)?.iter().collect();
            let pool: Vec<&Vec<String>> = if pool.len() >= 2 {
                pool.into_iter()
                    .filter(|c| c.as_slice() != current)
                    .collect()
            } else {
                pool
            };
            let pick = pool[rng.random_range(0..pool.len())];
            let start = words.len();
            words.extend_from_slice(pick);
            new_spans.push(Span {
                start,
                end: words.len(),
                label: s.label.clone(),
            });
            at = s.end;
        }
        words.extend_from_slice(&sentence.words[at..]);
        let tags = merge_outside(&sentence.tags, &spans, &new_spans, words.len());
        variants.push(LabeledSentence::new(words, tags)?);
    }
    Ok(PerturbedSet {
        original: sentence.clone(),
        variants,
    })
}

/// Tags for the rebuilt sentence: entity positions are re-spanned; outside
/// positions keep their original tag text.
fn merge_outside(orig_tags: &[String], old: &[Span], new: &[Span], len: usize) -> Vec<String> {
    let mut tags = encode_spans(new, len);
    let mut src = 0;
    let mut dst = 0;
    for (o, n) in old.iter().zip(new) {
        while src < o.start {
            tags[dst] = orig_tags[src].clone();
            src += 1;
            dst += 1;
        }
        src = o.end;
        dst = n.end;
    }
    while src < orig_tags.len() {
        tags[dst] = orig_tags[src].clone();
        src += 1;
        dst += 1;
    }
    tags
}

/// Perturbs every sentence of a corpus with one RNG stream.
pub fn perturb_corpus<R: Rng + ?Sized>(
    sentences: &[LabeledSentence],
    bank: &EntityBank,
    v: usize,
    rng: &mut R,
) -> Result<Vec<PerturbedSet>> {
    sentences
        .iter()
        .map(|s| perturb_entities(s, bank, v, rng))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub mean: f64,
    pub pairs: usize,
    /// Pairs dropped because an embedding had (near) zero norm.
    pub skipped: usize,
}

/// Mean cosine between each original and each of its variants.
pub fn perturbation_similarity(
    embedder: &dyn Embedder,
    sets: &[PerturbedSet],
) -> Result<SimilarityReport> {
    let mut texts: Vec<&[String]> = Vec::new();
    for s in sets {
        texts.push(&s.original.words);
        for v in &s.variants {
            texts.push(&v.words);
        }
    }
    let emb = embedder.text_embeddings(&texts)?;
    let mut row = 0;
    let (mut sum, mut pairs, mut skipped) = (0.0, 0usize, 0usize);
    for s in sets {
        let orig = emb.row(row).to_vec();
        row += 1;
        for _ in &s.variants {
            let var = emb.row(row).to_vec();
            row += 1;
            match cosine_similarity(&orig, &var) {
                Ok(c) => {
                    sum += c;
                    pairs += 1;
                }
                Err(_) => skipped += 1,
            }
        }
    }
    if pairs == 0 {
        return Err(Error::EmptyDataset(
            "no scorable original/variant pairs".into(),
        ));
    }
    Ok(SimilarityReport {
        mean: sum / pairs as f64,
        pairs,
        skipped,
    })
}
