//! Pseudo-labelling a raw corpus: word embeddings from a teacher encoder,
//! mini-batch k-means, and cluster ids as BIO tags.
//!
//! `cargo run --example pseudo_labels -- [k]`

use tplf::encoder::{EncoderConfig, EncoderParams, Vocab};
use tplf::pseudo_label::{build_pseudo_dataset, PseudoLabelConfig};
use tplf::synth::{synth_ner_corpus, SynthNerConfig};

fn main() -> tplf::Result<()> {
    let k: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(8);
    let corpus: Vec<Vec<String>> = synth_ner_corpus(&SynthNerConfig::new(300, 0))?.word_lists();
    let vocab = Vocab::build(corpus.iter().map(Vec::as_slice), 1, None);
    let teacher = EncoderParams::init(&EncoderConfig {
        num_layers: 2,
        hidden_dim: 32,
        num_heads: 4,
        ffn_dim: 64,
        vocab_size: vocab.len(),
        max_seq_len: 32,
        dropout_rate: 0.0,
        seed: 0,
    })?;
    let cfg = PseudoLabelConfig {
        k,
        ..Default::default()
    };
    let p = build_pseudo_dataset(&corpus, &vocab, &teacher, &cfg)?;
    let h = &p.model.inertia_history;
    println!(
        "{} sentences, {} clusters, inertia {:.1} -> {:.1}",
        p.dataset.len(),
        p.model.k(),
        h[0],
        h[h.len() - 1]
    );
    for s in p.dataset.sentences.iter().take(3) {
        let line: Vec<String> = s
            .words
            .iter()
            .zip(&s.tags)
            .map(|(w, t)| format!("{w}/{t}"))
            .collect();
        println!("  {}", line.join(" "));
    }
    Ok(())
}
