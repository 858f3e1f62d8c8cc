//! Tokenization, vocabulary, control annotation, range splits and
//! synthetic corpora.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{self, ControlKind, SENTIMENT_RANGE};
use crate::error::{Error, Result};

pub mod split;
pub mod synth;
pub mod tokenize;
pub mod vocab;

pub use split::{split_by_range, write_manifest, RangeSplit, SplitFractions, Splits};
pub use synth::{synth_corpus, SynthParams};
pub use tokenize::{detokenize, tokenize};
pub use vocab::Vocabulary;

/// A tokenized input line before control annotation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub source: Option<Vec<String>>,
    pub target: Vec<String>,
    /// Rating for sentiment; optional precomputed value for length/edit.
    pub c: Option<i64>,
}

/// An annotated example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub source: Option<Vec<String>>,
    pub target: Vec<String>,
    pub c: i64,
}

/// Parses `c? \t source? \t target` lines. A line with one field is a
/// bare target; with two fields the first is `c` when it parses as an
/// integer and a source otherwise.
pub fn parse_tsv(text: &str) -> Result<Vec<RawExample>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_c = |s: &str| -> Result<Option<i64>> {
            let s = s.trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse()
                .map(Some)
                .map_err(|_| Error::Data(format!("line {}: control value {s:?} is not an integer", lineno + 1)))
        };
        let opt_text = |s: &str| {
            let toks = tokenize::tokenize(s);
            (!toks.is_empty()).then_some(toks)
        };
        let ex = match fields.as_slice() {
            [target] => RawExample {
                source: None,
                target: tokenize::tokenize(target),
                c: None,
            },
            [first, target] => match first.trim().parse::<i64>() {
                Ok(c) => RawExample {
                    source: None,
                    target: tokenize::tokenize(target),
                    c: Some(c),
                },
                Err(_) => RawExample {
                    source: opt_text(first),
                    target: tokenize::tokenize(target),
                    c: None,
                },
            },
            [c, source, target] => RawExample {
                source: opt_text(source),
                target: tokenize::tokenize(target),
                c: parse_c(c)?,
            },
            _ => {
                return Err(Error::Data(format!(
                    "line {}: expected at most 3 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )))
            }
        };
        out.push(ex);
    }
    Ok(out)
}

pub fn read_tsv(path: &Path) -> Result<Vec<RawExample>> {
    parse_tsv(&fs::read_to_string(path)?)
}

pub fn format_tsv(examples: &[RawExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        let c = ex.c.map(|c| c.to_string()).unwrap_or_default();
        let src = ex.source.as_deref().map(detokenize).unwrap_or_default();
        out.push_str(&format!("{c}\t{src}\t{}\n", detokenize(&ex.target)));
    }
    out
}

pub fn write_tsv(path: &Path, examples: &[RawExample]) -> Result<()> {
    fs::write(path, format_tsv(examples))?;
    Ok(())
}

/// Attaches the gold control value of each example. Length and edit
/// values are recomputed from the text; a supplied value must agree.
/// Sentiment takes the supplied rating.
pub fn annotate_controls(raw: &[RawExample], kind: ControlKind) -> Result<Vec<Example>> {
    raw.iter()
        .enumerate()
        .map(|(id, ex)| {
            let c = match kind {
                ControlKind::Length | ControlKind::Edit => {
                    let gold = control::gold_value(kind, ex.source.as_deref(), &ex.target)
                        .map_err(|e| Error::Data(format!("example {id}: {e}")))?;
                    if let Some(given) = ex.c {
                        if given != gold {
                            return Err(Error::Data(format!(
                                "example {id}: annotated {kind} {given} disagrees with recomputed {gold}"
                            )));
                        }
                    }
                    gold
                }
                ControlKind::Sentiment => {
                    let r = ex
                        .c
                        .ok_or_else(|| Error::Data(format!("example {id}: missing rating for sentiment")))?;
                    SENTIMENT_RANGE
                        .check(r)
                        .map_err(|_| Error::Data(format!("example {id}: rating {r} outside 1..5")))?;
                    r
                }
            };
            Ok(Example {
                id,
                source: ex.source.clone(),
                target: ex.target.clone(),
                c,
            })
        })
        .collect()
}

/// Drops examples whose target is empty or longer than `max_len`, and
/// edit examples without a source.
pub fn filter_examples(raw: Vec<RawExample>, kind: ControlKind, max_len: usize) -> Vec<RawExample> {
    raw.into_iter()
        .filter(|ex| !ex.target.is_empty() && ex.target.len() <= max_len)
        .filter(|ex| !kind.needs_source() || ex.source.as_ref().is_some_and(|s| !s.is_empty()))
        .collect()
}
