//! Gold control values of a text and running control values of a prefix.

use std::collections::HashSet;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{BOS, BOS_TOKEN, EOS, EOS_TOKEN, PAD, PAD_TOKEN};
use crate::embedding::ValueRange;
use crate::error::{Error, Result};

pub mod classifier;

pub use classifier::{BagClassifier, LexiconOracle, SentimentClassifier};

/// Inclusive bounds of edit values.
pub const EDIT_RANGE: ValueRange = ValueRange { lo: 0, hi: 10 };
/// Inclusive bounds of sentiment ratings.
pub const SENTIMENT_RANGE: ValueRange = ValueRange { lo: 1, hi: 5 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Length,
    Edit,
    Sentiment,
}

impl ControlKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlKind::Length => "length",
            ControlKind::Edit => "edit",
            ControlKind::Sentiment => "sentiment",
        }
    }

    /// Whether a running value of the prefix is defined mid-generation.
    pub fn has_tracker(self) -> bool {
        !matches!(self, ControlKind::Sentiment)
    }

    /// Whether the task conditions on a source text.
    pub fn needs_source(self) -> bool {
        matches!(self, ControlKind::Edit)
    }
}

impl fmt::Display for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "length" => Ok(ControlKind::Length),
            "edit" => Ok(ControlKind::Edit),
            "sentiment" => Ok(ControlKind::Sentiment),
            _ => Err(Error::Config(format!("unknown control kind {s:?}"))),
        }
    }
}

/// Anything that can appear in a token sequence. Sequence markers are
/// excluded from every control computation.
pub trait Token: Eq + Hash + Clone {
    fn is_marker(&self) -> bool;
}

impl Token for String {
    fn is_marker(&self) -> bool {
        self.as_str().is_marker()
    }
}

impl Token for &str {
    fn is_marker(&self) -> bool {
        matches!(*self, BOS_TOKEN | EOS_TOKEN | PAD_TOKEN)
    }
}

/// Vocabulary ids.
impl Token for usize {
    fn is_marker(&self) -> bool {
        matches!(*self, PAD | BOS | EOS)
    }
}

pub fn length_value<T: Token>(tokens: &[T]) -> i64 {
    tokens.iter().filter(|t| !t.is_marker()).count() as i64
}

fn content_set<T: Token>(tokens: &[T]) -> HashSet<&T> {
    tokens.iter().filter(|t| !t.is_marker()).collect()
}

/// `round(10 * d)` with `d` the distance `(union - inter) / union`,
/// rounding half up, computed in integers.
fn rounded_edit(inter: usize, union: usize) -> i64 {
    debug_assert!(union > 0 && inter <= union);
    let diff = (union - inter) as i64;
    let union = union as i64;
    (20 * diff + union).div_euclid(2 * union)
}

/// Jaccard distance between the token sets, scaled to `0..=10`.
pub fn jaccard_edit<T: Token>(input: &[T], output: &[T]) -> Result<i64> {
    let a = content_set(input);
    let b = content_set(output);
    if a.is_empty() && b.is_empty() {
        return Err(Error::Data("jaccard edit undefined for two empty token sets".into()));
    }
    if a.is_empty() {
        return Err(Error::Data("jaccard edit needs a non-empty input".into()));
    }
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    Ok(rounded_edit(inter, union))
}

/// Running control value of a partially generated sequence.
#[derive(Clone, Debug)]
pub enum ControlTracker<T: Token> {
    Length { count: i64 },
    Edit {
        reference: HashSet<T>,
        seen: HashSet<T>,
        inter: usize,
    },
}

impl<T: Token> ControlTracker<T> {
    pub fn new(kind: ControlKind, reference: Option<&[T]>) -> Result<Self> {
        match kind {
            ControlKind::Length => Ok(ControlTracker::Length { count: 0 }),
            ControlKind::Edit => {
                let reference: HashSet<T> = reference
                    .ok_or_else(|| Error::Data("edit tracker needs the source tokens".into()))?
                    .iter()
                    .filter(|t| !t.is_marker())
                    .cloned()
                    .collect();
                if reference.is_empty() {
                    return Err(Error::Data("edit tracker needs a non-empty source".into()));
                }
                Ok(ControlTracker::Edit {
                    reference,
                    seen: HashSet::new(),
                    inter: 0,
                })
            }
            ControlKind::Sentiment => Err(Error::Unsupported("sentiment has no running control value".into())),
        }
    }

    pub fn value(&self) -> i64 {
        match self {
            ControlTracker::Length { count } => *count,
            ControlTracker::Edit { reference, seen, inter } => {
                let union = reference.len() + seen.len() - inter;
                rounded_edit(*inter, union)
            }
        }
    }

    /// Consumes one token and returns the updated value.
    pub fn step(&mut self, token: T) -> i64 {
        if !token.is_marker() {
            match self {
                ControlTracker::Length { count } => *count += 1,
                ControlTracker::Edit { reference, seen, inter } => {
                    if !seen.contains(&token) {
                        if reference.contains(&token) {
                            *inter += 1;
                        }
                        seen.insert(token);
                    }
                }
            }
        }
        self.value()
    }
}

pub fn sentiment_value(tokens: &[String], clf: &dyn SentimentClassifier) -> Result<i64> {
    if tokens.iter().all(|t| t.is_marker()) {
        return Err(Error::Data("cannot classify an empty sequence".into()));
    }
    clf.predict(tokens)
}

/// Gold control of a target, given its source when the kind needs one.
pub fn gold_value<T: Token>(kind: ControlKind, source: Option<&[T]>, target: &[T]) -> Result<i64> {
    match kind {
        ControlKind::Length => Ok(length_value(target)),
        ControlKind::Edit => {
            let src = source.ok_or_else(|| Error::Data("edit control needs a source text".into()))?;
            jaccard_edit(src, target)
        }
        ControlKind::Sentiment => Err(Error::Unsupported(
            "sentiment labels come from ratings or a classifier, not from the text alone".into(),
        )),
    }
}
