//! Oracles and fixtures shared by the integration tests. Everything here is
//! written independently of the library code it checks.

#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tplf::data::{LabelSet, LabeledSentence, PairDataset, TokenDataset};
use tplf::encoder::{EncoderConfig, Vocab};
use tplf::params::Parameters;
use tplf::trainer::PretrainData;

// ---------------------------------------------------------------- spans

/// Every `(start, end, type)` chunk, found by testing every interval against
/// the chunk definition: it opens on `B-X`, or on `I-X` not continuing an
/// `X` chunk; it continues on `I-X` only; it ends before anything else.
pub fn brute_force_spans(tags: &[String]) -> BTreeSet<(usize, usize, String)> {
    let ty = |t: &str| t.get(2..).unwrap_or("").to_string();
    let is_b = |t: &str| t.starts_with("B-");
    let is_i = |t: &str| t.starts_with("I-");
    let n = tags.len();
    let mut out = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..=n {
            let x = ty(&tags[i]);
            let opens = is_b(&tags[i])
                || (is_i(&tags[i])
                    && (i == 0
                        || !((is_b(&tags[i - 1]) || is_i(&tags[i - 1])) && ty(&tags[i - 1]) == x)));
            if !opens {
                continue;
            }
            let inner = (i + 1..j).all(|k| is_i(&tags[k]) && ty(&tags[k]) == x);
            let closed = j == n || !(is_i(&tags[j]) && ty(&tags[j]) == x);
            if inner && closed {
                out.insert((i, j, x));
            }
        }
    }
    out
}

/// `(tp, predicted, gold, precision, recall, f1)` from materialised span sets.
pub fn oracle_f1(
    pred: &[Vec<String>],
    gold: &[Vec<String>],
) -> (usize, usize, usize, f64, f64, f64) {
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let ps = brute_force_spans(p);
        let gs = brute_force_spans(g);
        tp += ps.intersection(&gs).count();
        np += ps.len();
        ng += gs.len();
    }
    let p = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
    let r = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
    let f = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (tp, np, ng, p, r, f)
}

/// A random tag sequence over `O`, `B-X` and `I-X` for a few types,
/// including stray `I-` tags.
pub fn random_bio<R: Rng>(rng: &mut R, len: usize) -> Vec<String> {
    const TYPES: [&str; 3] = ["PER", "LOC", "ORG"];
    (0..len)
        .map(|_| match rng.random_range(0..5) {
            0 | 1 => "O".to_string(),
            2 | 3 => format!("B-{}", TYPES[rng.random_range(0..3)]),
            _ => format!("I-{}", TYPES[rng.random_range(0..3)]),
        })
        .collect()
}

/// `gold` with each tag independently replaced with probability `p_noise`.
pub fn corrupt<R: Rng>(rng: &mut R, gold: &[String], p_noise: f64) -> Vec<String> {
    let fresh = random_bio(rng, gold.len());
    gold.iter()
        .zip(fresh)
        .map(|(g, f)| {
            if rng.random_bool(p_noise) {
                f
            } else {
                g.clone()
            }
        })
        .collect()
}

// ---------------------------------------------------------------- k-means

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Full-batch Lloyd iterations from the given centroids. Returns final
/// assignments and the inertia after every assignment step.
pub fn lloyd(points: &Array2<f64>, init: &Array2<f64>, iters: usize) -> (Vec<usize>, Vec<f64>) {
    let rows: Vec<Vec<f64>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut cents: Vec<Vec<f64>> = init.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut history = Vec::new();
    let mut assign = vec![0; rows.len()];
    for _ in 0..iters {
        let mut total = 0.0;
        for (i, p) in rows.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, m) in cents.iter().enumerate() {
                let d = sq(p, m);
                if d < best.1 {
                    best = (c, d);
                }
            }
            assign[i] = best.0;
            total += best.1;
        }
        history.push(total);
        for (c, m) in cents.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = rows
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in m.iter_mut().enumerate() {
                *v = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    (assign, history)
}

/// True when the two labelings induce the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    use std::collections::BTreeMap;
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = BTreeMap::new();
    let mut bwd = BTreeMap::new();
    a.iter()
        .zip(b)
        .all(|(x, y)| *fwd.entry(x).or_insert(y) == y && *bwd.entry(y).or_insert(x) == x)
}

/// `n` points per blob around each center with uniform noise of half-width
/// `spread`.
pub fn blobs(centers: &[Vec<f64>], n: usize, spread: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = centers[0].len();
    let mut x = Array2::zeros((centers.len() * n, d));
    let mut y = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for i in 0..n {
            for k in 0..d {
                x[[c * n + i, k]] = center[k] + rng.random_range(-spread..spread);
            }
            y.push(c);
        }
    }
    (x, y)
}

// ---------------------------------------------------------------- gradients

/// Central finite difference of `loss` for up to `per_tensor` entries of
/// every tensor of `model`; returns the largest relative error against
/// `analytic`, skipping entries where both sides are below `floor`.
pub fn finite_difference_check<P: Parameters<f64>>(
    model: &mut P,
    analytic: &std::collections::BTreeMap<String, Array2<f64>>,
    mut loss: impl FnMut(&P) -> f64,
    eps: f64,
    per_tensor: usize,
    floor: f64,
    seed: u64,
) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes = Vec::new();
    model.visit(&mut |n, a| shapes.push((n.to_string(), a.dim())));
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for (name, (r, c)) in shapes {
        for _ in 0..per_tensor.min(r * c) {
            let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
            let nudge = |m: &mut P, delta: f64| {
                m.visit_mut(&mut |n, a| {
                    if n == name {
                        a[[i, j]] += delta;
                    }
                })
            };
            nudge(model, eps);
            let up = loss(model);
            nudge(model, -2.0 * eps);
            let down = loss(model);
            nudge(model, eps);
            let numeric = (up - down) / (2.0 * eps);
            let exact = analytic.get(&name).map_or(0.0, |g| g[[i, j]]);
            if numeric.abs() < floor && exact.abs() < floor {
                continue;
            }
            worst = worst.max((numeric - exact).abs() / numeric.abs().max(exact.abs()));
            checked += 1;
        }
    }
    (worst, checked)
}

// ---------------------------------------------------------------- fixtures

pub fn tiny_config(vocab_size: usize, layers: usize, hidden: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        hidden_dim: hidden,
        num_heads: 2,
        ffn_dim: hidden * 2,
        vocab_size,
        max_seq_len: 12,
        dropout_rate: 0.0,
        seed: 7,
    }
}

/// A 24-sentence two-class token task and matching pairs over 8 words.
pub fn toy_data() -> PretrainData {
    let words = ["red", "blue", "cat", "dog", "runs", "sleeps", "the", "a"];
    let mut sents = Vec::new();
    let mut pairs = Vec::new();
    for i in 0..24 {
        let w: Vec<String> = (0..5)
            .map(|j| words[(i * 7 + j * 3) % 8].to_string())
            .collect();
        let t: Vec<String> = w
            .iter()
            .map(|x| {
                if x == "cat" || x == "dog" {
                    "B-ANIMAL"
                } else {
                    "O"
                }
                .to_string()
            })
            .collect();
        pairs.push((
            w.join(" "),
            w.iter().rev().cloned().collect::<Vec<_>>().join(" "),
        ));
        sents.push(LabeledSentence::new(w, t).unwrap());
    }
    let corpus: Vec<Vec<String>> = sents.iter().map(|s| s.words.clone()).collect();
    PretrainData {
        vocab: Vocab::build(corpus.iter().map(|v| v.as_slice()), 1, None),
        max_len: 12,
        ner: Some((
            vec![TokenDataset::new(sents)],
            LabelSet::new(vec!["B-ANIMAL".into(), "O".into()]),
        )),
        tc: vec![PairDataset::new(pairs)],
    }
}

/// Random word sentences over `vocab`'s words (3 to `max_words` words).
pub fn random_sentences(words: &[&str], n: usize, max_words: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(3..=max_words);
            (0..len)
                .map(|_| words[rng.random_range(0..words.len())].to_string())
                .collect()
        })
        .collect()
}
