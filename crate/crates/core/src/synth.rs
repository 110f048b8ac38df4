//! Synthetic corpora in the same formats as the real ones: BIO-tagged
//! sentences, topical anchor/positive pairs, and a bi-task benchmark whose
//! two tasks want opposite groupings of the same words.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassifiedTexts, LabeledSentence, PairDataset, TokenDataset};
use crate::error::{Error, Result};

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh",
];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

/// Unique pronounceable pseudo-words.
pub struct WordMint {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl WordMint {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: BTreeSet::new(),
        }
    }

    pub fn word(&mut self, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables.max(1) {
                w.push_str(ONSETS.choose(&mut self.rng).expect("non-empty"));
                w.push_str(NUCLEI.choose(&mut self.rng).expect("non-empty"));
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    pub fn words(&mut self, n: usize, syllables: usize) -> Vec<String> {
        (0..n).map(|_| self.word(syllables)).collect()
    }
}

fn capitalise(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthNerConfig {
    pub sentences: usize,
    #[serde(default = "default_types")]
    pub entity_types: Vec<String>,
    #[serde(default = "default_names")]
    pub names_per_type: usize,
    /// Longest entity surface, in words.
    #[serde(default = "default_entity_len")]
    pub max_entity_len: usize,
    /// Cue words per type that tend to precede its mentions.
    #[serde(default = "default_cues")]
    pub cues_per_type: usize,
    #[serde(default = "default_fillers")]
    pub filler_words: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_types() -> Vec<String> {
    ["PER", "LOC", "ORG", "MISC"].map(String::from).to_vec()
}
fn default_names() -> usize {
    40
}
fn default_entity_len() -> usize {
    3
}
fn default_cues() -> usize {
    4
}
fn default_fillers() -> usize {
    60
}

impl SynthNerConfig {
    pub fn new(sentences: usize, seed: u64) -> Self {
        Self {
            sentences,
            entity_types: default_types(),
            names_per_type: default_names(),
            max_entity_len: default_entity_len(),
            cues_per_type: default_cues(),
            filler_words: default_fillers(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sentences == 0 || self.entity_types.is_empty() || self.names_per_type == 0 {
            return Err(Error::config(
                "synthetic NER corpus needs sentences, types and names",
            ));
        }
        if self.max_entity_len == 0 || self.filler_words == 0 {
            return Err(Error::config(
                "max_entity_len and filler_words must be >= 1",
            ));
        }
        Ok(())
    }
}

/// Lexicon behind a synthetic NER corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct NerLexicon {
    pub types: Vec<String>,
    /// Surface forms per type (each 1..=max_entity_len words).
    pub names: Vec<Vec<Vec<String>>>,
    pub cues: Vec<Vec<String>>,
    pub fillers: Vec<String>,
}

impl NerLexicon {
    pub fn new(cfg: &SynthNerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut mint = WordMint::new(cfg.seed ^ 0x6c65_7869);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e61_6d65);
        let mut names = Vec::new();
        let mut cues = Vec::new();
        for _ in &cfg.entity_types {
            let pool = (0..cfg.names_per_type)
                .map(|_| {
                    let len = rng.random_range(1..=cfg.max_entity_len);
                    (0..len).map(|_| capitalise(&mint.word(2))).collect()
                })
                .collect();
            names.push(pool);
            cues.push(mint.words(cfg.cues_per_type, 1));
        }
        Ok(Self {
            types: cfg.entity_types.clone(),
            names,
            cues,
            fillers: mint.words(cfg.filler_words, 2),
        })
    }

    /// One sentence with 1–3 mentions, each usually preceded by a cue word
    /// of its type, padded with filler.
    pub fn sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> LabeledSentence {
        let mentions = rng.random_range(1..=3);
        let (mut words, mut tags) = (Vec::new(), Vec::new());
        let push_filler =
            |words: &mut Vec<String>, tags: &mut Vec<String>, rng: &mut R, n: usize| {
                for _ in 0..n {
                    words.push(self.fillers.choose(rng).expect("fillers").clone());
                    tags.push("O".to_string());
                }
            };
        let n = rng.random_range(0..3);
        push_filler(&mut words, &mut tags, rng, n);
        for _ in 0..mentions {
            let t = rng.random_range(0..self.types.len());
            if !self.cues[t].is_empty() && rng.random_bool(0.8) {
                words.push(self.cues[t].choose(rng).expect("cues").clone());
                tags.push("O".to_string());
            }
            let name = self.names[t].choose(rng).expect("names");
            for (k, w) in name.iter().enumerate() {
                words.push(w.clone());
                tags.push(if k == 0 {
                    format!("B-{}", self.types[t])
                } else {
                    format!("I-{}", self.types[t])
                });
            }
            let n = rng.random_range(1..4);
            push_filler(&mut words, &mut tags, rng, n);
        }
        LabeledSentence::new(words, tags).expect("equal lengths")
    }
}

/// A BIO corpus drawn from a fresh lexicon.
pub fn synth_ner_corpus(cfg: &SynthNerConfig) -> Result<TokenDataset> {
    let lex = NerLexicon::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(TokenDataset::new(
        (0..cfg.sentences).map(|_| lex.sentence(&mut rng)).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthPairConfig {
    pub pairs: usize,
    #[serde(default = "default_topics")]
    pub topics: usize,
    #[serde(default = "default_topic_words")]
    pub words_per_topic: usize,
    #[serde(default = "default_shared")]
    pub shared_words: usize,
    /// Share of each sentence drawn from its topic's words.
    #[serde(default = "default_topicality")]
    pub topicality: f64,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_topics() -> usize {
    16
}
fn default_topic_words() -> usize {
    24
}
fn default_shared() -> usize {
    80
}
fn default_topicality() -> f64 {
    0.5
}
fn default_min_len() -> usize {
    6
}
fn default_max_len() -> usize {
    12
}

impl SynthPairConfig {
    pub fn new(pairs: usize, seed: u64) -> Self {
        Self {
            pairs,
            topics: default_topics(),
            words_per_topic: default_topic_words(),
            shared_words: default_shared(),
            topicality: default_topicality(),
            min_len: default_min_len(),
            max_len: default_max_len(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 || self.topics < 2 || self.words_per_topic == 0 || self.shared_words == 0
        {
            return Err(Error::config(
                "synthetic pairs need pairs >= 1, topics >= 2 and non-empty word pools",
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("need 1 <= min_len <= max_len"));
        }
        if !(0.0..=1.0).contains(&self.topicality) {
            return Err(Error::config("topicality must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Topic word pools plus a shared pool.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicLexicon {
    pub topics: Vec<Vec<String>>,
    pub shared: Vec<String>,
    pub topicality: f64,
    pub len: (usize, usize),
}

impl TopicLexicon {
    pub fn new(cfg: &SynthPairConfig) -> Result<Self> {
        cfg.validate()?;
        let mut mint = WordMint::new(cfg.seed ^ 0x746f_7063);
        Ok(Self {
            topics: (0..cfg.topics)
                .map(|_| mint.words(cfg.words_per_topic, 2))
                .collect(),
            shared: mint.words(cfg.shared_words, 2),
            topicality: cfg.topicality,
            len: (cfg.min_len, cfg.max_len),
        })
    }

    pub fn sentence<R: Rng + ?Sized>(&self, topic: usize, rng: &mut R) -> String {
        let n = rng.random_range(self.len.0..=self.len.1);
        let words: Vec<&str> = (0..n)
            .map(|_| {
                let pool = if rng.random_bool(self.topicality) {
                    &self.topics[topic]
                } else {
                    &self.shared
                };
                pool.choose(rng).expect("non-empty").as_str()
            })
            .collect();
        words.join(" ")
    }
}

/// Anchor/positive pairs that share a topic and nothing else.
pub fn synth_topic_pairs(cfg: &SynthPairConfig) -> Result<PairDataset> {
    let lex = TopicLexicon::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(PairDataset::new(
        (0..cfg.pairs)
            .map(|_| {
                let t = rng.random_range(0..lex.topics.len());
                (lex.sentence(t, &mut rng), lex.sentence(t, &mut rng))
            })
            .collect(),
    ))
}

/// Topic-labelled texts from the same lexicon as [`synth_topic_pairs`].
pub fn synth_topic_texts(cfg: &SynthPairConfig, n: usize, seed: u64) -> Result<ClassifiedTexts> {
    let lex = TopicLexicon::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ClassifiedTexts::default();
    for i in 0..n {
        let t = i % lex.topics.len();
        out.texts.push(lex.sentence(t, &mut rng));
        out.labels.push(t);
    }
    Ok(out)
}

/// Entity-style token task and sentence-pair task over one vocabulary.
///
/// Every content word belongs to a cell `(type, topic)`. Token labels depend
/// only on the type; pairs and the downstream topic labels depend only on
/// the topic. A representation that groups words by topic (what the pair
/// task rewards) is the wrong grouping for the token task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConflictConfig {
    #[serde(default = "default_conflict_types")]
    pub entity_types: usize,
    #[serde(default = "default_conflict_topics")]
    pub topics: usize,
    /// Entity words per (type, topic) cell.
    #[serde(default = "default_cell")]
    pub words_per_cell: usize,
    /// Non-entity words per topic.
    #[serde(default = "default_topic_fillers")]
    pub fillers_per_topic: usize,
    /// Non-entity words shared by every topic.
    #[serde(default = "default_shared_fillers")]
    pub shared_fillers: usize,
    /// Chance that a filler slot draws from the topic pool rather than the
    /// shared one.
    #[serde(default = "default_topic_rate")]
    pub topic_rate: f64,
    #[serde(default = "default_sentence_len")]
    pub sentence_len: usize,
    #[serde(default = "default_pretrain_sentences")]
    pub pretrain_sentences: usize,
    #[serde(default = "default_pretrain_pairs")]
    pub pretrain_pairs: usize,
    #[serde(default = "default_downstream")]
    pub downstream_train: usize,
    #[serde(default = "default_downstream")]
    pub downstream_test: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_conflict_types() -> usize {
    3
}
fn default_conflict_topics() -> usize {
    4
}
fn default_cell() -> usize {
    6
}
fn default_topic_fillers() -> usize {
    10
}
fn default_shared_fillers() -> usize {
    40
}
fn default_topic_rate() -> f64 {
    0.3
}
fn default_sentence_len() -> usize {
    10
}
fn default_pretrain_sentences() -> usize {
    600
}
fn default_pretrain_pairs() -> usize {
    600
}
fn default_downstream() -> usize {
    200
}

impl Default for ConflictConfig {
    fn default() -> Self {
        Self {
            entity_types: default_conflict_types(),
            topics: default_conflict_topics(),
            words_per_cell: default_cell(),
            fillers_per_topic: default_topic_fillers(),
            shared_fillers: default_shared_fillers(),
            topic_rate: default_topic_rate(),
            sentence_len: default_sentence_len(),
            pretrain_sentences: default_pretrain_sentences(),
            pretrain_pairs: default_pretrain_pairs(),
            downstream_train: default_downstream(),
            downstream_test: default_downstream(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConflictBenchmark {
    pub types: Vec<String>,
    /// `cells[type][topic]` entity words.
    pub cells: Vec<Vec<Vec<String>>>,
    pub fillers: Vec<Vec<String>>,
    pub shared: Vec<String>,
    pub pretrain_ner: TokenDataset,
    pub pretrain_pairs: PairDataset,
    pub ner_train: TokenDataset,
    pub ner_test: TokenDataset,
    pub tc_train: ClassifiedTexts,
    pub tc_test: ClassifiedTexts,
}

impl ConflictConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entity_types < 1
            || self.topics < 2
            || self.words_per_cell == 0
            || self.fillers_per_topic == 0
        {
            return Err(Error::config(
                "conflict benchmark needs >= 1 type, >= 2 topics and non-empty pools",
            ));
        }
        if !(0.0..=1.0).contains(&self.topic_rate)
            || (self.topic_rate < 1.0 && self.shared_fillers == 0)
        {
            return Err(Error::config(
                "topic_rate must lie in [0, 1], with shared fillers when below 1",
            ));
        }
        if self.sentence_len < 3 {
            return Err(Error::config("sentence_len must be >= 3"));
        }
        if self.pretrain_sentences == 0
            || self.pretrain_pairs == 0
            || self.downstream_train == 0
            || self.downstream_test == 0
        {
            return Err(Error::config(
                "every split of the conflict benchmark must be non-empty",
            ));
        }
        Ok(())
    }
}

impl ConflictBenchmark {
    pub fn generate(cfg: &ConflictConfig) -> Result<Self> {
        cfg.validate()?;
        let mut mint = WordMint::new(cfg.seed ^ 0x636f_6e66);
        let types: Vec<String> = (0..cfg.entity_types).map(|t| format!("T{t}")).collect();
        let cells: Vec<Vec<Vec<String>>> = (0..cfg.entity_types)
            .map(|_| {
                (0..cfg.topics)
                    .map(|_| mint.words(cfg.words_per_cell, 2))
                    .collect()
            })
            .collect();
        let fillers: Vec<Vec<String>> = (0..cfg.topics)
            .map(|_| mint.words(cfg.fillers_per_topic, 2))
            .collect();
        let shared = mint.words(cfg.shared_fillers, 2);
        let mut bench = Self {
            types,
            cells,
            fillers,
            shared,
            pretrain_ner: TokenDataset::default(),
            pretrain_pairs: PairDataset::default(),
            ner_train: TokenDataset::default(),
            ner_test: TokenDataset::default(),
            tc_train: ClassifiedTexts::default(),
            tc_test: ClassifiedTexts::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        bench.pretrain_ner = bench.token_split(cfg, cfg.pretrain_sentences, &mut rng);
        bench.pretrain_pairs = PairDataset::new(
            (0..cfg.pretrain_pairs)
                .map(|_| {
                    let k = rng.random_range(0..cfg.topics);
                    (
                        bench.sentence(cfg, k, &mut rng).words.join(" "),
                        bench.sentence(cfg, k, &mut rng).words.join(" "),
                    )
                })
                .collect(),
        );
        bench.ner_train = bench.token_split(cfg, cfg.downstream_train, &mut rng);
        bench.ner_test = bench.token_split(cfg, cfg.downstream_test, &mut rng);
        bench.tc_train = bench.topic_split(cfg, cfg.downstream_train, &mut rng);
        bench.tc_test = bench.topic_split(cfg, cfg.downstream_test, &mut rng);
        Ok(bench)
    }

    /// A topic-`k` sentence: fillers (topic or shared) with 1–2 single-word
    /// entities drawn from cells of the same topic.
    fn sentence<R: Rng + ?Sized>(
        &self,
        cfg: &ConflictConfig,
        k: usize,
        rng: &mut R,
    ) -> LabeledSentence {
        let n = cfg.sentence_len;
        let mut words: Vec<String> = (0..n)
            .map(|_| {
                let pool = if rng.random_bool(cfg.topic_rate) {
                    &self.fillers[k]
                } else {
                    &self.shared
                };
                pool.choose(rng).expect("fillers").clone()
            })
            .collect();
        let mut tags = vec!["O".to_string(); n];
        let mentions = rng.random_range(1..=2usize);
        let mut slots: Vec<usize> = (0..n).collect();
        let (picked, _) = slots.partial_shuffle(rng, mentions);
        for &pos in picked.iter() {
            let t = rng.random_range(0..self.types.len());
            words[pos] = self.cells[t][k].choose(rng).expect("cell").clone();
            tags[pos] = format!("B-{}", self.types[t]);
        }
        LabeledSentence::new(words, tags).expect("equal lengths")
    }

    fn token_split<R: Rng + ?Sized>(
        &self,
        cfg: &ConflictConfig,
        n: usize,
        rng: &mut R,
    ) -> TokenDataset {
        TokenDataset::new(
            (0..n)
                .map(|_| {
                    let k = rng.random_range(0..cfg.topics);
                    self.sentence(cfg, k, rng)
                })
                .collect(),
        )
    }

    fn topic_split<R: Rng + ?Sized>(
        &self,
        cfg: &ConflictConfig,
        n: usize,
        rng: &mut R,
    ) -> ClassifiedTexts {
        let mut out = ClassifiedTexts::default();
        for i in 0..n {
            let k = i % cfg.topics;
            out.texts.push(self.sentence(cfg, k, rng).words.join(" "));
            out.labels.push(k);
        }
        out
    }
}
