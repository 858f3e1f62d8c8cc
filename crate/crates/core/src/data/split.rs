use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Example;
use crate::embedding::ValueRange;
use crate::error::{Error, Result};

/// Which control values are trained on and which intervals are reported.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeSplit {
    pub observed: Vec<ValueRange>,
    pub evaluated: Vec<ValueRange>,
}

impl RangeSplit {
    pub fn is_observed(&self, c: i64) -> bool {
        self.observed.iter().any(|r| r.contains(c))
    }

    /// Smallest interval covering every observed and evaluated value.
    pub fn span(&self) -> Option<ValueRange> {
        self.observed
            .iter()
            .chain(&self.evaluated)
            .copied()
            .reduce(|a, b| a.union(&b))
    }

    fn validate(&self) -> Result<()> {
        if self.observed.is_empty() {
            return Err(Error::Config("at least one observed interval is required".into()));
        }
        if self.evaluated.is_empty() {
            return Err(Error::Config("at least one evaluated interval is required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { valid: 0.1, test: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    /// Held-out examples per evaluated interval, in the configured order.
    pub intervals: Vec<(ValueRange, Vec<Example>)>,
}

impl Splits {
    pub fn interval(&self, range: &ValueRange) -> Option<&[Example]> {
        self.intervals.iter().find(|(r, _)| r == range).map(|(_, v)| v.as_slice())
    }

    /// `(split name, example count)` in manifest order.
    pub fn counts(&self) -> Vec<(String, usize)> {
        let mut out = vec![("train".to_string(), self.train.len()), ("valid".to_string(), self.valid.len())];
        for (r, v) in &self.intervals {
            out.push((format!("eval:{r}"), v.len()));
        }
        out
    }

    /// JSON-lines manifest: one `{"id", "split", "c"}` record per membership.
    pub fn manifest(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            id: usize,
            split: &'a str,
            c: i64,
        }
        let mut out = String::new();
        let mut emit = |name: &str, exs: &[Example]| {
            for ex in exs {
                let line = serde_json::to_string(&Line { id: ex.id, split: name, c: ex.c }).expect("manifest line");
                let _ = writeln!(out, "{line}");
            }
        };
        emit("train", &self.train);
        emit("valid", &self.valid);
        for (r, v) in &self.intervals {
            emit(&format!("eval:{r}"), v);
        }
        out
    }
}

/// Partitions examples into train/valid/held-out pools and buckets the
/// held-out pool by evaluated interval.
///
/// Examples sharing a source text always land in the same pool. A group
/// containing any unobserved value goes entirely to the held-out pool;
/// other groups are assigned by a seeded draw against `fractions`.
pub fn split_by_range(examples: &[Example], split: &RangeSplit, fractions: SplitFractions, seed: u64) -> Result<Splits> {
    split.validate()?;
    let mut groups: Vec<Vec<&Example>> = Vec::new();
    let mut by_source: HashMap<Vec<String>, usize> = HashMap::new();
    for ex in examples {
        match &ex.source {
            Some(src) => {
                let key: Vec<String> = src.iter().map(|t| t.to_lowercase()).collect();
                let idx = *by_source.entry(key).or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
                groups[idx].push(ex);
            }
            None => groups.push(vec![ex]),
        }
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let (mut train, mut valid, mut held) = (Vec::new(), Vec::new(), Vec::new());
    for gi in order {
        let group = &groups[gi];
        let draw: f64 = rng.gen();
        let pool = if group.iter().any(|ex| !split.is_observed(ex.c)) || (draw >= fractions.valid && draw < fractions.valid + fractions.test) {
            &mut held
        } else if draw < fractions.valid {
            &mut valid
        } else {
            &mut train
        };
        pool.extend(group.iter().map(|ex| (*ex).clone()));
    }
    for pool in [&mut train, &mut valid, &mut held] {
        pool.sort_by_key(|ex| ex.id);
    }
    if train.is_empty() {
        return Err(Error::Data("no training examples fall in the observed range".into()));
    }
    let intervals = split
        .evaluated
        .iter()
        .map(|r| (*r, held.iter().filter(|ex| r.contains(ex.c)).cloned().collect()))
        .collect();
    Ok(Splits { train, valid, intervals })
}

pub fn write_manifest(path: &Path, splits: &Splits) -> Result<()> {
    std::fs::write(path, splits.manifest())?;
    Ok(())
}
