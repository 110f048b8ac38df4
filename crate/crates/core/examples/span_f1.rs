//! Entity-level F1 over BIO tags, including stray `I-` tags.

use tplf::eval::{decode_spans, span_f1};

fn tags(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn main() -> tplf::Result<()> {
    let gold = vec![tags("B-PER I-PER O B-LOC O"), tags("O B-ORG I-ORG I-ORG")];
    let pred = vec![tags("B-PER I-PER O B-ORG O"), tags("O I-ORG I-ORG I-ORG")];
    for (p, g) in pred.iter().zip(&gold) {
        println!("gold {:?}", decode_spans(g));
        println!("pred {:?}", decode_spans(p));
    }
    let s = span_f1(&pred, &gold)?;
    println!(
        "tp {} / predicted {} / gold {}  P {:.3} R {:.3} F1 {:.3}",
        s.true_positives, s.predicted, s.gold, s.precision, s.recall, s.f1
    );
    Ok(())
}
