//! Sentence-level subsampling for the limited-data protocol.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LabeledSentence, TokenDataset};
use crate::error::{Error, Result};
use crate::eval::bio::decode_spans;

/// Data portions evaluated by the protocol.
pub const FRACTIONS: [f64; 4] = [0.1, 0.2, 0.5, 1.0];

fn entity_types(s: &LabeledSentence) -> BTreeSet<String> {
    decode_spans(&s.tags)
        .into_iter()
        .map(|sp| sp.label)
        .collect()
}

/// `⌈fraction·N⌉` sentences chosen with a seeded shuffle, returned in corpus
/// order. A greedy pass then swaps in sentences for entity types the sample
/// lost, as long as each swap keeps every type already covered.
pub fn limited_data_split(data: &TokenDataset, fraction: f64, seed: u64) -> Result<TokenDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction {fraction} outside (0, 1]")));
    }
    let n_total = data.len();
    let n = ((fraction * n_total as f64) - 1e-9).ceil().max(0.0) as usize;
    if n == 0 {
        return Err(Error::EmptyDataset("split would be empty".into()));
    }
    if n >= n_total {
        return Ok(data.clone());
    }
    let mut order: Vec<usize> = (0..n_total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let types: Vec<BTreeSet<String>> = data.sentences.iter().map(entity_types).collect();
    let mut chosen: Vec<usize> = order[..n].to_vec();
    let rest: Vec<usize> = order[n..].to_vec();

    let all: BTreeSet<String> = types.iter().flatten().cloned().collect();
    for ty in &all {
        let coverage = |sel: &[usize]| -> BTreeSet<String> {
            sel.iter().flat_map(|&i| types[i].iter().cloned()).collect()
        };
        if coverage(&chosen).contains(ty) {
            continue;
        }
        let Some(&donor) = rest
            .iter()
            .find(|&&i| types[i].contains(ty) && !chosen.contains(&i))
        else {
            continue;
        };
        let before = coverage(&chosen);
        // Replace the latest-drawn sentence whose removal keeps coverage.
        let victim = (0..chosen.len()).rev().find(|&k| {
            let mut trial = chosen.clone();
            trial[k] = donor;
            before.is_subset(&coverage(&trial))
        });
        if let Some(k) = victim {
            chosen[k] = donor;
        }
    }
    chosen.sort_unstable();
    Ok(TokenDataset::new(
        chosen
            .into_iter()
            .map(|i| data.sentences[i].clone())
            .collect(),
    ))
}
