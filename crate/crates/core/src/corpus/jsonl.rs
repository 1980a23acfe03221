//! JSONL corpus storage.
//!
//! A corpus directory holds `train.jsonl` and `test.jsonl`, optionally
//! `probe.jsonl` (held-out parallel groups), `vocab.txt` (one surface
//! token per line, in id order, reserved tokens excluded) and
//! `alignment.tsv` (tab-separated surface tokens realizing one concept).
//! Each JSONL line is one record with exactly the fields
//! `id`, `translated`, `language`, `text`, `stars`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusSplit, Example, Group, GroupId, TokenId, Vocab};
use crate::error::{Error, Result};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const PROBE_FILE: &str = "probe.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const ALIGNMENT_FILE: &str = "alignment.tsv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonlRecord {
    pub id: GroupId,
    pub translated: u8,
    pub language: String,
    pub text: String,
    pub stars: u8,
}

/// Writes one record per example.
pub fn write_examples<'a>(
    path: &Path,
    examples: impl IntoIterator<Item = &'a Example>,
    vocab: &Vocab,
) -> Result<()> {
    let mut out = String::new();
    for e in examples {
        let rec = JsonlRecord {
            id: e.id,
            translated: u8::from(e.translated),
            language: e.language.clone(),
            text: vocab.render(&e.tokens)?,
            stars: e.stars,
        };
        let line = serde_json::to_string(&rec).map_err(|err| Error::Data(err.to_string()))?;
        writeln!(out, "{line}").expect("writing to a String");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses and schema-checks every line of a JSONL file.
pub fn read_examples(path: &Path) -> Result<Vec<JsonlRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if rec.translated > 1 {
            return Err(parse_err(format!(
                "translated must be 0 or 1, got {}",
                rec.translated
            )));
        }
        if !(1..=5).contains(&rec.stars) {
            return Err(parse_err(format!(
                "stars must be in 1..=5, got {}",
                rec.stars
            )));
        }
        if rec.language.is_empty() {
            return Err(parse_err("empty language".into()));
        }
        if rec.text.split_whitespace().next().is_none() {
            return Err(parse_err("empty text".into()));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn save_jsonl(corpus: &CorpusSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let v = &corpus.vocab;
    write_examples(
        &dir.join(TRAIN_FILE),
        corpus.train.iter().flat_map(|g| &g.examples),
        v,
    )?;
    write_examples(&dir.join(TEST_FILE), &corpus.test, v)?;
    if !corpus.probe.is_empty() {
        write_examples(
            &dir.join(PROBE_FILE),
            corpus.probe.iter().flat_map(|g| &g.examples),
            v,
        )?;
    }
    let mut vocab_text = String::new();
    for t in v.surface_tokens() {
        writeln!(vocab_text, "{t}").expect("writing to a String");
    }
    let vp = dir.join(VOCAB_FILE);
    fs::write(&vp, vocab_text).map_err(|e| Error::io(vp, e))?;
    if !corpus.alignment.is_empty() {
        let mut text = String::new();
        for set in &corpus.alignment {
            let line = v.render(set)?.replace(' ', "\t");
            writeln!(text, "{line}").expect("writing to a String");
        }
        let ap = dir.join(ALIGNMENT_FILE);
        fs::write(&ap, text).map_err(|e| Error::io(ap, e))?;
    }
    Ok(())
}

/// Loads a corpus directory written by [`save_jsonl`] or assembled by
/// hand from real data (only `train.jsonl` and `test.jsonl` required).
pub fn load_jsonl(dir: &Path) -> Result<CorpusSplit> {
    let train_recs = read_examples(&dir.join(TRAIN_FILE))?;
    let test_recs = read_examples(&dir.join(TEST_FILE))?;
    let probe_path = dir.join(PROBE_FILE);
    let probe_recs = if probe_path.exists() {
        read_examples(&probe_path)?
    } else {
        Vec::new()
    };

    let vocab_path = dir.join(VOCAB_FILE);
    let vocab = if vocab_path.exists() {
        let text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        Vocab::new(text.lines().filter(|l| !l.is_empty()))?
    } else {
        let distinct: BTreeSet<&str> = train_recs
            .iter()
            .chain(&test_recs)
            .chain(&probe_recs)
            .flat_map(|r| r.text.split_whitespace())
            .collect();
        Vocab::new(distinct)?
    };

    let mut languages: Vec<String> = Vec::new();
    for r in train_recs.iter().chain(&test_recs).chain(&probe_recs) {
        if !languages.contains(&r.language) {
            languages.push(r.language.clone());
        }
    }

    let to_example = |r: &JsonlRecord, file: &str, line: usize| -> Result<Example> {
        let tokens = r
            .text
            .split_whitespace()
            .map(|t| {
                vocab.id(t).ok_or_else(|| Error::Parse {
                    path: dir.join(file),
                    line,
                    msg: format!("token {t:?} not in vocabulary"),
                })
            })
            .collect::<Result<Vec<TokenId>>>()?;
        Ok(Example {
            id: r.id,
            language: r.language.clone(),
            translated: r.translated == 1,
            tokens,
            stars: r.stars,
        })
    };

    let group = |recs: &[JsonlRecord], file: &str| -> Result<Vec<Group>> {
        let mut order: Vec<GroupId> = Vec::new();
        let mut by_id: HashMap<GroupId, Vec<Example>> = HashMap::new();
        for (i, r) in recs.iter().enumerate() {
            let e = to_example(r, file, i + 1)?;
            by_id
                .entry(r.id)
                .or_insert_with(|| {
                    order.push(r.id);
                    Vec::new()
                })
                .push(e);
        }
        order
            .into_iter()
            .map(|id| {
                let g = Group {
                    id,
                    examples: by_id.remove(&id).unwrap_or_default(),
                };
                g.validate()?;
                Ok(g)
            })
            .collect()
    };

    let train = group(&train_recs, TRAIN_FILE)?;
    let probe = group(&probe_recs, PROBE_FILE)?;
    let test = test_recs
        .iter()
        .enumerate()
        .map(|(i, r)| to_example(r, TEST_FILE, i + 1))
        .collect::<Result<Vec<_>>>()?;

    let align_path = dir.join(ALIGNMENT_FILE);
    let alignment = if align_path.exists() {
        let text = fs::read_to_string(&align_path).map_err(|e| Error::io(&align_path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| {
                l.split('\t')
                    .map(|t| {
                        vocab.id(t).ok_or_else(|| Error::Parse {
                            path: align_path.clone(),
                            line: i + 1,
                            msg: format!("token {t:?} not in vocabulary"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let split = CorpusSplit {
        languages,
        vocab,
        train,
        test,
        probe,
        alignment,
    };
    split.validate()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, lines: &[&str]) {
        fs::write(dir.join(name), lines.join("\n")).unwrap();
    }

    #[test]
    fn missing_field_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            TRAIN_FILE,
            &[
                r#"{"id":1,"translated":0,"language":"en","text":"a b","stars":5}"#,
                r#"{"id":2,"translated":0,"language":"en","text":"c"}"#,
            ],
        );
        write(dir.path(), TEST_FILE, &[]);
        let err = load_jsonl(dir.path()).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("stars"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn extra_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            TRAIN_FILE,
            &[r#"{"id":1,"translated":0,"language":"en","text":"a","stars":5,"x":1}"#],
        );
        write(dir.path(), TEST_FILE, &[]);
        assert!(matches!(
            load_jsonl(dir.path()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn shared_stars_enforced_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let en = r#"{"id":2,"translated":0,"language":"en","text":"This product is BS","stars":1}"#;
        write(dir.path(), TEST_FILE, &[]);
        write(
            dir.path(),
            TRAIN_FILE,
            &[
                en,
                r#"{"id":2,"translated":1,"language":"fr","text":"Ce produit est BS","stars":1}"#,
            ],
        );
        let c = load_jsonl(dir.path()).unwrap();
        assert_eq!(c.train.len(), 1);
        assert_eq!(c.languages, vec!["en", "fr"]);
        write(
            dir.path(),
            TRAIN_FILE,
            &[
                en,
                r#"{"id":2,"translated":1,"language":"fr","text":"Ce produit est BS","stars":2}"#,
            ],
        );
        assert!(matches!(load_jsonl(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn translated_test_row_is_contract_violation() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), TRAIN_FILE, &[]);
        write(
            dir.path(),
            TEST_FILE,
            &[r#"{"id":9,"translated":1,"language":"fr","text":"x","stars":3}"#],
        );
        assert!(matches!(load_jsonl(dir.path()), Err(Error::Contract(_))));
    }
}
