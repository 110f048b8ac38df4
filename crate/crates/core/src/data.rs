//! In-memory datasets and their conversion into model batches.

use std::collections::BTreeMap;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::encoder::{EncodedSentence, TokenBatch, Vocab};
use crate::error::{Error, Result};
use crate::objectives::{ContrastiveBatch, TokenLabeledBatch, IGNORE_LABEL};

/// A sentence with one tag per word (`B-PER`, `O`, or a pseudo label `C17`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    pub words: Vec<String>,
    pub tags: Vec<String>,
}

impl LabeledSentence {
    pub fn new(words: Vec<String>, tags: Vec<String>) -> Result<Self> {
        if words.len() != tags.len() {
            return Err(Error::LengthMismatch(format!(
                "{} words vs {} tags",
                words.len(),
                tags.len()
            )));
        }
        Ok(Self { words, tags })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenDataset {
    pub sentences: Vec<LabeledSentence>,
}

impl TokenDataset {
    pub fn new(sentences: Vec<LabeledSentence>) -> Self {
        Self { sentences }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn word_lists(&self) -> Vec<Vec<String>> {
        self.sentences.iter().map(|s| s.words.clone()).collect()
    }

    /// Sorted distinct tags.
    pub fn tag_set(&self) -> Vec<String> {
        let mut m: BTreeMap<&str, ()> = BTreeMap::new();
        for s in &self.sentences {
            for t in &s.tags {
                m.insert(t, ());
            }
        }
        m.into_keys().map(str::to_string).collect()
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.sentences {
            for (w, t) in s.words.iter().zip(&s.tags) {
                h.update(w.as_bytes());
                h.update([0x1f]);
                h.update(t.as_bytes());
                h.update([0x1e]);
            }
            h.update([0x1d]);
        }
        hex::encode(h.finalize())
    }
}

/// Anchor/positive text pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairDataset {
    pub pairs: Vec<(String, String)>,
}

impl PairDataset {
    pub fn new(pairs: Vec<(String, String)>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (a, p) in &self.pairs {
            h.update(a.as_bytes());
            h.update([0x1f]);
            h.update(p.as_bytes());
            h.update([0x1e]);
        }
        hex::encode(h.finalize())
    }
}

/// Texts with an integer class, used by the linear probe.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassifiedTexts {
    pub texts: Vec<String>,
    pub labels: Vec<usize>,
}

impl ClassifiedTexts {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

pub fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Tag ↔ id mapping with a stable order.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LabelSet {
    pub tags: Vec<String>,
}

impl LabelSet {
    pub fn new(tags: Vec<String>) -> Self {
        Self { tags }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn tag(&self, id: usize) -> &str {
        &self.tags[id]
    }

    /// Errors when `data` uses a tag this set does not know.
    pub fn check_covers(&self, data: &TokenDataset) -> Result<()> {
        let missing: Vec<String> = data
            .tag_set()
            .into_iter()
            .filter(|t| self.id(t).is_none())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::LabelMismatch(format!(
                "tags not in label set: {}",
                missing.join(", ")
            )))
        }
    }
}

/// How word tags map onto the word's sub-tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubtokenLabels {
    /// Every sub-token carries the word's label.
    Inherit,
    /// Only the first sub-token is supervised.
    FirstOnly,
}

pub fn encode_sentences<S: AsRef<str>>(
    sentences: &[&[S]],
    vocab: &Vocab,
    max_len: usize,
) -> Vec<EncodedSentence> {
    sentences.iter().map(|w| vocab.encode(w, max_len)).collect()
}

pub fn text_batch(texts: &[&str], vocab: &Vocab, max_len: usize) -> TokenBatch {
    let enc: Vec<EncodedSentence> = texts
        .iter()
        .map(|t| vocab.encode(&split_words(t), max_len))
        .collect();
    let refs: Vec<&EncodedSentence> = enc.iter().collect();
    TokenBatch::from_encoded(&refs, None)
}

pub fn contrastive_batch(
    pairs: &[&(String, String)],
    vocab: &Vocab,
    max_len: usize,
) -> Result<ContrastiveBatch> {
    let anchors: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
    let positives: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
    ContrastiveBatch::new(
        text_batch(&anchors, vocab, max_len),
        text_batch(&positives, vocab, max_len),
    )
}

/// Tokenises labelled sentences. `[CLS]`, `[SEP]`, padding and words lost to
/// truncation get [`IGNORE_LABEL`].
pub fn labeled_batch(
    sentences: &[&LabeledSentence],
    vocab: &Vocab,
    labels: &LabelSet,
    max_len: usize,
    policy: SubtokenLabels,
) -> Result<TokenLabeledBatch> {
    let enc: Vec<EncodedSentence> = sentences
        .iter()
        .map(|s| vocab.encode(&s.words, max_len))
        .collect();
    let refs: Vec<&EncodedSentence> = enc.iter().collect();
    let tokens = TokenBatch::from_encoded(&refs, None);
    let (b, seq) = tokens.dims();
    let mut lab = Array2::from_elem((b, seq), IGNORE_LABEL);
    for (r, (s, e)) in sentences.iter().zip(&enc).enumerate() {
        for (w, range) in e.word_ranges.iter().enumerate() {
            let id = labels
                .id(&s.tags[w])
                .ok_or_else(|| Error::LabelMismatch(format!("unknown tag {}", s.tags[w])))?;
            let end = match policy {
                SubtokenLabels::Inherit => range.end,
                SubtokenLabels::FirstOnly => range.start + 1,
            };
            for c in range.start..end {
                lab[[r, c]] = id as i64;
            }
        }
    }
    TokenLabeledBatch::new(tokens, lab)
}
