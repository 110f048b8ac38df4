//! Writes the synthetic corpora to disk in the formats the CLI reads:
//! CoNLL for token tasks, JSONL for pairs, TSV for classified texts.
//!
//! `cargo run --example synthetic_corpora -- <dir> [seed]`

use std::path::PathBuf;

use tplf::io::formats::{write_classified_tsv, write_conll, write_pairs_jsonl};
use tplf::synth::{
    synth_ner_corpus, synth_topic_pairs, ConflictBenchmark, ConflictConfig, SynthNerConfig,
    SynthPairConfig,
};

fn main() -> tplf::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synthetic".into()));
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    std::fs::create_dir_all(&dir)?;

    write_conll(
        &dir.join("ner.conll"),
        &synth_ner_corpus(&SynthNerConfig::new(500, seed))?,
    )?;
    write_pairs_jsonl(
        &dir.join("pairs.jsonl"),
        &synth_topic_pairs(&SynthPairConfig::new(2000, seed))?,
    )?;

    let b = ConflictBenchmark::generate(&ConflictConfig {
        seed,
        ..Default::default()
    })?;
    write_conll(&dir.join("conflict_pretrain.conll"), &b.pretrain_ner)?;
    write_pairs_jsonl(&dir.join("conflict_pairs.jsonl"), &b.pretrain_pairs)?;
    write_conll(&dir.join("conflict_ner_train.conll"), &b.ner_train)?;
    write_conll(&dir.join("conflict_ner_test.conll"), &b.ner_test)?;
    write_classified_tsv(&dir.join("conflict_tc_train.tsv"), &b.tc_train)?;
    write_classified_tsv(&dir.join("conflict_tc_test.tsv"), &b.tc_test)?;

    for entry in std::fs::read_dir(&dir)? {
        let p = entry?.path();
        println!("{:>9} bytes  {}", std::fs::metadata(&p)?.len(), p.display());
    }
    Ok(())
}
