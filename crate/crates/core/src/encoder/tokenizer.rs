//! Corpus-derived word-level vocabulary with character fallback.
//!
//! Words at or above the frequency cutoff map to a single id. Any other word
//! is spelled out with `##c` character pieces, so one word can span several
//! sub-tokens and the emitted word ranges matter downstream.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
const CHAR_PREFIX: &str = "##";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_tokens(r.tokens)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

/// Token ids of one sentence (with `[CLS]`/`[SEP]`) and each kept word's
/// sub-token range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSentence {
    pub ids: Vec<u32>,
    pub word_ranges: Vec<Range<usize>>,
}

impl EncodedSentence {
    /// Number of words that survived truncation.
    pub fn num_words(&self) -> usize {
        self.word_ranges.len()
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Builds a vocabulary from tokenised sentences. Words seen at least
    /// `min_freq` times get their own id (most frequent first, capped at
    /// `max_words`); every character seen becomes a fallback piece.
    pub fn build<'a, I, S>(sentences: I, min_freq: usize, max_words: Option<usize>) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars: BTreeMap<char, ()> = BTreeMap::new();
        for sent in sentences {
            for w in sent {
                let w = w.as_ref();
                *freq.entry(w.to_string()).or_default() += 1;
                for c in w.chars() {
                    chars.insert(c, ());
                }
            }
        }
        let mut words: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(_, n)| *n >= min_freq.max(1))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(cap) = max_words {
            words.truncate(cap);
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(|(w, _)| w));
        tokens.extend(chars.into_keys().map(|c| format!("{CHAR_PREFIX}{c}")));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Sub-token ids for one word.
    pub fn word_pieces(&self, word: &str) -> Vec<u32> {
        if let Some(&id) = self.index.get(word) {
            if id >= RESERVED.len() as u32 {
                return vec![id];
            }
        }
        let pieces: Vec<u32> = word
            .chars()
            .map(|c| {
                self.index
                    .get(&format!("{CHAR_PREFIX}{c}"))
                    .copied()
                    .unwrap_or(UNK_ID)
            })
            .collect();
        if pieces.is_empty() {
            vec![UNK_ID]
        } else {
            pieces
        }
    }

    /// `[CLS] pieces… [SEP]`, truncated to `max_len` ids. A word that does not
    /// fit entirely is dropped along with every word after it.
    pub fn encode<S: AsRef<str>>(&self, words: &[S], max_len: usize) -> EncodedSentence {
        let max_len = max_len.max(2);
        let mut ids = vec![CLS_ID];
        let mut ranges = Vec::with_capacity(words.len());
        for w in words {
            let pieces = self.word_pieces(w.as_ref());
            if ids.len() + pieces.len() + 1 > max_len {
                break;
            }
            let start = ids.len();
            ids.extend(pieces);
            ranges.push(start..ids.len());
        }
        ids.push(SEP_ID);
        EncodedSentence {
            ids,
            word_ranges: ranges,
        }
    }
}
