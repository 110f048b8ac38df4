//! BIO decoding and exact-match span scoring.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};

/// A typed entity span over word positions `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BioTag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

pub fn parse_tag(tag: &str) -> Option<BioTag<'_>> {
    if tag == "O" {
        return Some(BioTag::Outside);
    }
    let (prefix, ty) = tag.split_once('-')?;
    if ty.is_empty() {
        return None;
    }
    match prefix {
        "B" => Some(BioTag::Begin(ty)),
        "I" => Some(BioTag::Inside(ty)),
        _ => None,
    }
}

pub fn is_bio_tag(tag: &str) -> bool {
    parse_tag(tag).is_some()
}

/// Spans of a tag sequence. An `I-X` that does not continue an `X` span opens
/// a new one. Unparseable tags count as `O`.
pub fn decode_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, t) in tags.iter().enumerate() {
        let tag = parse_tag(t.as_ref()).unwrap_or(BioTag::Outside);
        let continues = matches!((tag, open), (BioTag::Inside(ty), Some((_, cur))) if ty == cur);
        if continues {
            continue;
        }
        if let Some((s, ty)) = open.take() {
            spans.push(Span {
                start: s,
                end: i,
                label: ty.to_string(),
            });
        }
        match tag {
            BioTag::Begin(ty) | BioTag::Inside(ty) => open = Some((i, ty)),
            BioTag::Outside => {}
        }
    }
    if let Some((s, ty)) = open {
        spans.push(Span {
            start: s,
            end: tags.len(),
            label: ty.to_string(),
        });
    }
    spans
}

/// Canonical BIO tags for a span list over `len` words.
pub fn encode_spans(spans: &[Span], len: usize) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for s in spans {
        for (k, t) in tags[s.start..s.end].iter_mut().enumerate() {
            *t = if k == 0 {
                format!("B-{}", s.label)
            } else {
                format!("I-{}", s.label)
            };
        }
    }
    tags
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpanScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Micro-averaged exact-match span precision, recall and F1 over a corpus.
pub fn span_f1<S: AsRef<str>, G: AsRef<str>>(
    predicted: &[Vec<S>],
    gold: &[Vec<G>],
) -> Result<SpanScores> {
    if predicted.len() != gold.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predicted vs {} gold sentences",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (i, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::LengthMismatch(format!(
                "sentence {i}: {} predicted vs {} gold tags",
                p.len(),
                g.len()
            )));
        }
        let ps: BTreeSet<Span> = decode_spans(p).into_iter().collect();
        let gs: BTreeSet<Span> = decode_spans(g).into_iter().collect();
        tp += ps.intersection(&gs).count();
        np += ps.len();
        ng += gs.len();
    }
    Ok(scores(tp, np, ng))
}

pub(crate) fn scores(tp: usize, np: usize, ng: usize) -> SpanScores {
    let precision = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
    let recall = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    SpanScores {
        precision,
        recall,
        f1,
        true_positives: tp,
        predicted: np,
        gold: ng,
    }
}
