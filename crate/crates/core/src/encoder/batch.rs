use std::ops::Range;

use ndarray::Array2;

use super::tokenizer::{EncodedSentence, PAD_ID};
use super::EncoderConfig;
use crate::error::{Error, Result};

/// Right-padded token ids with their attention mask and word alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub token_ids: Array2<u32>,
    pub attention_mask: Array2<u8>,
    /// Per sequence: word index → sub-token position range.
    pub word_alignment: Vec<Vec<Range<usize>>>,
}

impl TokenBatch {
    /// Pads raw id sequences to `seq_len`; every token is its own word.
    pub fn from_sequences(seqs: &[Vec<u32>], seq_len: usize) -> Self {
        let mut ids = Array2::from_elem((seqs.len(), seq_len), PAD_ID);
        let mut mask = Array2::zeros((seqs.len(), seq_len));
        let mut align = Vec::with_capacity(seqs.len());
        for (r, s) in seqs.iter().enumerate() {
            let n = s.len().min(seq_len);
            for (c, &t) in s.iter().take(n).enumerate() {
                ids[[r, c]] = t;
                mask[[r, c]] = 1;
            }
            align.push((0..n).map(|i| i..i + 1).collect());
        }
        Self {
            token_ids: ids,
            attention_mask: mask,
            word_alignment: align,
        }
    }

    /// Pads encoded sentences to the longest one (or `seq_len` when given).
    pub fn from_encoded(sents: &[&EncodedSentence], seq_len: Option<usize>) -> Self {
        let len = seq_len.unwrap_or_else(|| sents.iter().map(|s| s.ids.len()).max().unwrap_or(1));
        let len = len.max(1);
        let seqs: Vec<Vec<u32>> = sents.iter().map(|s| s.ids.clone()).collect();
        let mut b = Self::from_sequences(&seqs, len);
        b.word_alignment = sents
            .iter()
            .map(|s| {
                s.word_ranges
                    .iter()
                    .filter(|r| r.end <= len)
                    .cloned()
                    .collect()
            })
            .collect();
        b
    }

    pub fn dims(&self) -> (usize, usize) {
        self.token_ids.dim()
    }

    pub fn len(&self) -> usize {
        self.token_ids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.nrows() == 0
    }

    pub fn mask_flat(&self) -> Vec<u8> {
        self.attention_mask.iter().copied().collect()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.attention_mask
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|&&m| m != 0).count())
            .collect()
    }

    /// Structural checks plus bounds against an encoder config.
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        self.validate_structure()?;
        let (_, seq) = self.dims();
        if seq > cfg.max_seq_len {
            return Err(Error::config(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = self
            .token_ids
            .iter()
            .find(|&&t| t as usize >= cfg.vocab_size)
        {
            return Err(Error::config(format!(
                "token id {bad} >= vocab_size {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }

    pub fn validate_structure(&self) -> Result<()> {
        if self.token_ids.dim() != self.attention_mask.dim() {
            return Err(Error::shape("token_ids and attention_mask differ in shape"));
        }
        if self.word_alignment.len() != self.len() {
            return Err(Error::Alignment(
                "one alignment list per sequence required".into(),
            ));
        }
        for (r, row) in self.attention_mask.rows().into_iter().enumerate() {
            let n = row.iter().take_while(|&&m| m == 1).count();
            if row.iter().skip(n).any(|&m| m != 0) {
                return Err(Error::shape(format!(
                    "row {r}: attention mask must be a prefix of ones (right padding)"
                )));
            }
            for range in &self.word_alignment[r] {
                if range.is_empty() || range.end > n {
                    return Err(Error::Alignment(format!(
                        "row {r}: range {range:?} empty or outside masked region (len {n})"
                    )));
                }
            }
        }
        Ok(())
    }
}
