//! Corpus readers and writers: CoNLL columns, anchor/positive pairs and
//! labelled texts.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClassifiedTexts, LabeledSentence, PairDataset, TokenDataset};
use crate::error::{Error, Result};
use crate::eval::is_bio_tag;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a CoNLL-style file: first column is the token, last is the BIO
/// tag, blank lines end sentences and `-DOCSTART-` lines are skipped.
pub fn load_conll(path: &Path) -> Result<TokenDataset> {
    let text = fs::read_to_string(path)?;
    parse_conll(&text, path)
}

pub fn parse_conll(text: &str, path: &Path) -> Result<TokenDataset> {
    let mut sentences = Vec::new();
    let (mut words, mut tags) = (Vec::new(), Vec::new());
    let mut flush = |words: &mut Vec<String>, tags: &mut Vec<String>| -> Result<()> {
        if !words.is_empty() {
            sentences.push(LabeledSentence::new(
                std::mem::take(words),
                std::mem::take(tags),
            )?);
        }
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            flush(&mut words, &mut tags)?;
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            flush(&mut words, &mut tags)?;
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(parse_err(
                path,
                line_no,
                "expected at least a token and a tag column",
            ));
        }
        let tag = cols[cols.len() - 1];
        if !is_bio_tag(tag) {
            return Err(parse_err(
                path,
                line_no,
                format!("unknown tag scheme: `{tag}`"),
            ));
        }
        words.push(cols[0].to_string());
        tags.push(tag.to_string());
    }
    flush(&mut words, &mut tags)?;
    if sentences.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(TokenDataset::new(sentences))
}

pub fn write_conll(path: &Path, data: &TokenDataset) -> Result<()> {
    let mut out = String::new();
    for s in &data.sentences {
        for (w, t) in s.words.iter().zip(&s.tags) {
            out.push_str(w);
            out.push(' ');
            out.push_str(t);
            out.push('\n');
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Deserialize)]
struct PairLine {
    anchor: Option<String>,
    positive: Option<String>,
}

fn is_jsonl(path: &Path, text: &str) -> bool {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "json" | "ndjson") => true,
        Some("tsv" | "txt") => false,
        _ => text.trim_start().starts_with('{'),
    }
}

/// Reads anchor/positive pairs from JSONL (`anchor`, `positive` fields) or
/// a two-column TSV.
pub fn load_pairs(path: &Path) -> Result<PairDataset> {
    let text = fs::read_to_string(path)?;
    let jsonl = is_jsonl(path, &text);
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (a, p) = if jsonl {
            let rec: PairLine =
                serde_json::from_str(line).map_err(|e| parse_err(path, line_no, e.to_string()))?;
            let a = rec
                .anchor
                .ok_or_else(|| parse_err(path, line_no, "missing field `anchor`"))?;
            let p = rec
                .positive
                .ok_or_else(|| parse_err(path, line_no, "missing field `positive`"))?;
            (a, p)
        } else {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 2 {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected 2 tab-separated columns, found {}", cols.len()),
                ));
            }
            (cols[0].to_string(), cols[1].to_string())
        };
        if a.trim().is_empty() {
            return Err(parse_err(path, line_no, "empty anchor"));
        }
        if p.trim().is_empty() {
            return Err(parse_err(path, line_no, "empty positive"));
        }
        pairs.push((a, p));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(PairDataset::new(pairs))
}

#[derive(Serialize)]
struct PairOut<'a> {
    anchor: &'a str,
    positive: &'a str,
}

pub fn write_pairs_jsonl(path: &Path, data: &PairDataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (a, p) in &data.pairs {
        serde_json::to_writer(
            &mut f,
            &PairOut {
                anchor: a,
                positive: p,
            },
        )?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Texts with string class names, as read from disk.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NamedClassTexts {
    pub texts: Vec<String>,
    pub classes: Vec<String>,
}

impl NamedClassTexts {
    /// Integer labels against `names` (sorted distinct classes when `None`).
    pub fn indexed(&self, names: Option<&[String]>) -> Result<(ClassifiedTexts, Vec<String>)> {
        let names: Vec<String> = match names {
            Some(n) => n.to_vec(),
            None => self
                .classes
                .iter()
                .cloned()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        };
        let labels =
            self.classes
                .iter()
                .map(|c| {
                    names.iter().position(|n| n == c).ok_or_else(|| {
                        Error::LabelMismatch(format!("class `{c}` not in label set"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
        Ok((
            ClassifiedTexts {
                texts: self.texts.clone(),
                labels,
            },
            names,
        ))
    }
}

#[derive(Deserialize)]
struct ClassLine {
    text: Option<String>,
    label: Option<serde_json::Value>,
}

/// Reads labelled texts from JSONL (`text`, `label`) or a TSV of
/// `label<TAB>text`.
pub fn load_classified(path: &Path) -> Result<NamedClassTexts> {
    let text = fs::read_to_string(path)?;
    let jsonl = is_jsonl(path, &text);
    let mut out = NamedClassTexts::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = if jsonl {
            let rec: ClassLine =
                serde_json::from_str(line).map_err(|e| parse_err(path, line_no, e.to_string()))?;
            let label = match rec.label {
                Some(serde_json::Value::String(s)) => s,
                Some(serde_json::Value::Number(n)) => n.to_string(),
                Some(_) => {
                    return Err(parse_err(
                        path,
                        line_no,
                        "`label` must be a string or number",
                    ))
                }
                None => return Err(parse_err(path, line_no, "missing field `label`")),
            };
            (
                label,
                rec.text
                    .ok_or_else(|| parse_err(path, line_no, "missing field `text`"))?,
            )
        } else {
            let (l, t) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(path, line_no, "expected `label<TAB>text`"))?;
            (l.to_string(), t.to_string())
        };
        if body.trim().is_empty() {
            return Err(parse_err(path, line_no, "empty text"));
        }
        out.texts.push(body);
        out.classes.push(label);
    }
    if out.texts.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(out)
}

pub fn write_classified_tsv(path: &Path, data: &ClassifiedTexts) -> Result<()> {
    let mut out = String::new();
    for (t, l) in data.texts.iter().zip(&data.labels) {
        out.push_str(&format!("{l}\t{t}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::decode_spans;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn conll_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.conll",
            "-DOCSTART- -X- O O\n\nJohn NNP B-PER\nSmith NNP I-PER\nran VBD O\n\nMary NNP B-PER\nsang VBD O\n",
        );
        let d = load_conll(&p).unwrap();
        assert_eq!(d.len(), 2);
        for s in &d.sentences {
            let spans = decode_spans(&s.tags);
            assert_eq!(spans.len(), 1);
            assert_eq!(spans[0].label, "PER");
        }
    }

    #[test]
    fn conll_docstart_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.conll",
            "-DOCSTART- -X- O O\n\n-DOCSTART- -X- O O\n",
        );
        assert!(matches!(load_conll(&p), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn conll_leading_inside_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.conll", "Paris I-LOC\nis O\n");
        let d = load_conll(&p).unwrap();
        assert_eq!(decode_spans(&d.sentences[0].tags)[0].label, "LOC");
    }

    #[test]
    fn conll_bad_tag_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.conll", "a O\nb E-PER\n");
        match load_conll(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pairs_jsonl_and_tsv_agree() {
        let dir = tempfile::tempdir().unwrap();
        let j = write(
            dir.path(),
            "p.jsonl",
            "{\"anchor\":\"a b\",\"positive\":\"c\"}\n{\"anchor\":\"d\",\"positive\":\"e f\"}\n{\"anchor\":\"g\",\"positive\":\"h\"}\n",
        );
        let t = write(dir.path(), "p.tsv", "a b\tc\nd\te f\ng\th\n");
        let a = load_pairs(&j).unwrap();
        let b = load_pairs(&t).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn pairs_errors_carry_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "p.jsonl",
            "{\"anchor\":\"a\",\"positive\":\"b\"}\n{\"anchor\":\"a\",\"positive\":\"\"}\n",
        );
        assert!(matches!(load_pairs(&p), Err(Error::Parse { line: 2, .. })));
        let p = write(dir.path(), "q.jsonl", "{\"anchor\":\"a\"}\n");
        match load_pairs(&p) {
            Err(Error::Parse { line: 1, msg, .. }) => assert!(msg.contains("positive")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn classified_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.tsv",
            "sports\tgoal scored\nnews\tvote held\nsports\tmatch won\n",
        );
        let named = load_classified(&p).unwrap();
        let (c, names) = named.indexed(None).unwrap();
        assert_eq!(names, vec!["news".to_string(), "sports".to_string()]);
        assert_eq!(c.labels, vec![1, 0, 1]);
        let j = write(dir.path(), "c.jsonl", "{\"text\":\"x y\",\"label\":3}\n");
        assert_eq!(load_classified(&j).unwrap().classes, vec!["3".to_string()]);
        assert!(named.indexed(Some(&["news".to_string()])).is_err());
    }
}
