//! Seeded synthetic corpora with exactly known control values.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RawExample;
use crate::control::{ControlKind, LexiconOracle};
use crate::embedding::ValueRange;
use crate::error::{Error, Result};

/// Shortest sentence the grammar produces (`DET NOUN VERB`).
pub const GRAMMAR_MIN_LEN: i64 = 3;
/// Longest sentence the synthetic generators accept.
pub const GRAMMAR_MAX_LEN: i64 = 40;

const DET: &[&str] = &["the", "a", "every", "some"];
const ADJ: &[&str] = &["big", "small", "red", "old", "young", "happy", "quiet", "tall"];
const NOUN: &[&str] = &["man", "woman", "dog", "cat", "child", "bird", "car", "house"];
const VERB: &[&str] = &["sees", "likes", "finds", "follows", "holds", "watches"];
const PREP: &[&str] = &["near", "behind", "under", "with"];
const ADV: &[&str] = &["today", "quickly", "again", "slowly"];

/// Disjoint stand-ins for every grammar word, used by the edit corpus.
const SYNONYMS: &[(&str, &str)] = &[
    ("the", "this"),
    ("a", "one"),
    ("every", "each"),
    ("some", "several"),
    ("big", "large"),
    ("small", "little"),
    ("red", "crimson"),
    ("old", "aged"),
    ("young", "youthful"),
    ("happy", "glad"),
    ("quiet", "silent"),
    ("tall", "high"),
    ("man", "guy"),
    ("woman", "lady"),
    ("dog", "hound"),
    ("cat", "kitten"),
    ("child", "kid"),
    ("bird", "sparrow"),
    ("car", "auto"),
    ("house", "home"),
    ("sees", "spots"),
    ("likes", "enjoys"),
    ("finds", "locates"),
    ("follows", "trails"),
    ("holds", "grips"),
    ("watches", "observes"),
    ("near", "beside"),
    ("behind", "after"),
    ("under", "beneath"),
    ("with", "alongside"),
    ("today", "now"),
    ("quickly", "fast"),
    ("again", "anew"),
    ("slowly", "gradually"),
];

const SENTIMENT_NOUNS: &[&str] = &["food", "service", "staff", "place", "price", "menu"];
const SENTIMENT_NEUTRAL: &[&str] = &["busy", "typical", "normal", "new"];
/// `(word, score)`; ratings are `3 + clamp(sum of scores, -2, 2)`.
pub const SENTIMENT_LEXICON: &[(&str, i64)] = &[
    ("excellent", 2),
    ("amazing", 2),
    ("wonderful", 2),
    ("good", 1),
    ("nice", 1),
    ("fine", 1),
    ("bad", -1),
    ("slow", -1),
    ("bland", -1),
    ("awful", -2),
    ("terrible", -2),
    ("horrible", -2),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n: usize,
    /// Target lengths (length task) or source lengths (edit task).
    pub lengths: ValueRange,
}

impl SynthParams {
    pub fn new(n: usize, lo: i64, hi: i64) -> Result<Self> {
        Ok(Self {
            n,
            lengths: ValueRange::new(lo, hi)?,
        })
    }
}

pub fn synth_corpus(kind: ControlKind, params: &SynthParams, seed: u64) -> Result<Vec<RawExample>> {
    let r = params.lengths;
    if r.lo < GRAMMAR_MIN_LEN || r.hi > GRAMMAR_MAX_LEN {
        return Err(Error::Data(format!(
            "synthetic lengths {r} outside grammar limits {GRAMMAR_MIN_LEN}..{GRAMMAR_MAX_LEN}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(params.n);
    for _ in 0..params.n {
        let len = rng.gen_range(r.lo..=r.hi) as usize;
        let ex = match kind {
            ControlKind::Length => RawExample {
                source: None,
                target: grammar_sentence(len, &mut rng),
                c: None,
            },
            ControlKind::Edit => paraphrase_pair(len, &mut rng),
            ControlKind::Sentiment => rated_review(len, &mut rng),
        };
        out.push(ex);
    }
    Ok(out)
}

fn pick(words: &[&str], rng: &mut impl Rng) -> String {
    words.choose(rng).expect("non-empty word list").to_string()
}

fn noun_phrase(adjectives: usize, rng: &mut impl Rng) -> Vec<String> {
    let mut np = vec![pick(DET, rng)];
    np.extend((0..adjectives).map(|_| pick(ADJ, rng)));
    np.push(pick(NOUN, rng));
    np
}

/// `DET ADJ* NOUN VERB [NP] (PREP NP)* [ADV]` with exactly `len` tokens.
pub fn grammar_sentence(len: usize, rng: &mut impl Rng) -> Vec<String> {
    assert!(len >= GRAMMAR_MIN_LEN as usize, "grammar needs at least 3 tokens");
    const MAX_ADJ: usize = 2;
    // (object, prepositional phrases, adverb, adjectives)
    let mut plans = Vec::new();
    for object in 0..=1usize {
        for pps in 0..=len / 3 {
            for adverb in 0..=1usize {
                let fixed = 3 + 2 * object + 3 * pps + adverb;
                if fixed > len {
                    continue;
                }
                let adjectives = len - fixed;
                if adjectives <= MAX_ADJ * (1 + object + pps) {
                    plans.push((object, pps, adverb, adjectives));
                }
            }
        }
    }
    let &(object, pps, adverb, adjectives) = plans.choose(rng).expect("every length >= 3 has a plan");
    let n_phrases = 1 + object + pps;
    let mut per_np = vec![0usize; n_phrases];
    for _ in 0..adjectives {
        let open: Vec<usize> = (0..n_phrases).filter(|&i| per_np[i] < MAX_ADJ).collect();
        per_np[*open.choose(rng).unwrap()] += 1;
    }
    let mut out = noun_phrase(per_np[0], rng);
    out.push(pick(VERB, rng));
    if object == 1 {
        out.extend(noun_phrase(per_np[1], rng));
    }
    for i in 0..pps {
        out.push(pick(PREP, rng));
        out.extend(noun_phrase(per_np[1 + object + i], rng));
    }
    if adverb == 1 {
        out.push(pick(ADV, rng));
    }
    debug_assert_eq!(out.len(), len);
    out
}

/// Source sentence plus a target where each distinct source word is
/// swapped for its synonym with probability `p_replace` or dropped with
/// probability `p_drop`, both drawn per pair.
fn paraphrase_pair(len: usize, rng: &mut impl Rng) -> RawExample {
    let synonyms: HashMap<&str, &str> = SYNONYMS.iter().copied().collect();
    let source = grammar_sentence(len, rng);
    let p_replace: f64 = rng.gen();
    let p_drop: f64 = rng.gen_range(0.0..0.2);
    let mut types: Vec<&String> = source.iter().collect();
    types.sort();
    types.dedup();
    let mut fate: HashMap<&str, u8> = HashMap::new();
    for t in types {
        let u: f64 = rng.gen();
        let f = if u < p_replace {
            1
        } else if u < p_replace + p_drop {
            2
        } else {
            0
        };
        fate.insert(t.as_str(), f);
    }
    let mut target: Vec<String> = source
        .iter()
        .filter_map(|w| match fate[w.as_str()] {
            0 => Some(w.clone()),
            1 => Some(synonyms[w.as_str()].to_string()),
            _ => None,
        })
        .collect();
    if target.is_empty() {
        target.push(synonyms[source[0].as_str()].to_string());
    }
    RawExample {
        source: Some(source),
        target,
        c: None,
    }
}

/// Clauses `the NOUN was WORD` joined by `and`, with a rating drawn
/// uniformly and sentiment words chosen so the lexicon score sums to it.
fn rated_review(len: usize, rng: &mut impl Rng) -> RawExample {
    let rating = rng.gen_range(1..=5i64);
    let target_sum = rating - 3;
    // clause = 4 tokens, joiner "and" = 1; fit as many clauses as len allows
    let clauses = ((len + 1) / 5).max(1);
    let mut words: Vec<String> = Vec::new();
    let mut remaining = target_sum;
    for i in 0..clauses {
        let left = clauses - i;
        // spread the score so every clause can still reach the target
        let word = if remaining == 0 {
            pick(SENTIMENT_NEUTRAL, rng)
        } else if remaining.abs() >= 2 && (left == 1 || rng.gen_bool(0.5)) {
            let s = 2 * remaining.signum();
            remaining -= s;
            lexicon_word(s, rng)
        } else {
            let s = remaining.signum();
            remaining -= s;
            lexicon_word(s, rng)
        };
        words.push(word);
    }
    if remaining != 0 {
        // collapse onto the last clause
        let last = words.last_mut().unwrap();
        let current = SENTIMENT_LEXICON.iter().find(|(w, _)| w == last).map(|(_, s)| *s).unwrap_or(0);
        *last = lexicon_word((current + remaining).clamp(-2, 2), rng);
    }
    let mut target = Vec::new();
    for (i, w) in words.into_iter().enumerate() {
        if i > 0 {
            target.push("and".to_string());
        }
        target.extend(["the".to_string(), pick(SENTIMENT_NOUNS, rng), "was".to_string(), w]);
    }
    let oracle = LexiconOracle::synthetic();
    debug_assert_eq!(oracle.rate(&target), rating);
    RawExample {
        source: None,
        target,
        c: Some(rating),
    }
}

fn lexicon_word(score: i64, rng: &mut impl Rng) -> String {
    if score == 0 {
        return pick(SENTIMENT_NEUTRAL, rng);
    }
    let options: Vec<&str> = SENTIMENT_LEXICON.iter().filter(|(_, s)| *s == score).map(|(w, _)| *w).collect();
    pick(&options, rng)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::control::{jaccard_edit, SentimentClassifier};
    use crate::data::annotate_controls;

    #[test]
    fn length_corpus_respects_interval() {
        let p = SynthParams::new(5000, 3, 18).unwrap();
        let raw = synth_corpus(ControlKind::Length, &p, 1).unwrap();
        assert_eq!(raw.len(), 5000);
        let lens: BTreeSet<usize> = raw.iter().map(|r| r.target.len()).collect();
        assert_eq!(lens, (3..=18).collect());
    }

    #[test]
    fn grammar_reaches_every_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for len in 3..=GRAMMAR_MAX_LEN as usize {
            assert_eq!(grammar_sentence(len, &mut rng).len(), len);
        }
    }

    #[test]
    fn infeasible_lengths_rejected() {
        let p = SynthParams::new(10, 2, 10).unwrap();
        assert!(synth_corpus(ControlKind::Length, &p, 0).is_err());
        let p = SynthParams::new(10, 3, 41).unwrap();
        assert!(synth_corpus(ControlKind::Length, &p, 0).is_err());
    }

    #[test]
    fn same_seed_same_corpus() {
        let p = SynthParams::new(50, 4, 9).unwrap();
        assert_eq!(
            synth_corpus(ControlKind::Edit, &p, 3).unwrap(),
            synth_corpus(ControlKind::Edit, &p, 3).unwrap()
        );
    }

    #[test]
    fn edit_corpus_covers_full_support() {
        let p = SynthParams::new(5000, 5, 9).unwrap();
        let raw = synth_corpus(ControlKind::Edit, &p, 2).unwrap();
        let exs = annotate_controls(&raw, ControlKind::Edit).unwrap();
        let seen: BTreeSet<i64> = exs.iter().map(|e| e.c).collect();
        assert_eq!(seen, (0..=10).collect());
    }

    #[test]
    fn zero_replacement_pair_has_zero_edit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let source = grammar_sentence(7, &mut rng);
        assert_eq!(jaccard_edit(&source, &source.clone()).unwrap(), 0);
    }

    #[test]
    fn sentiment_labels_match_lexicon_oracle() {
        let p = SynthParams::new(2000, 4, 14).unwrap();
        let raw = synth_corpus(ControlKind::Sentiment, &p, 4).unwrap();
        let oracle = LexiconOracle::synthetic();
        let mut ratings = BTreeSet::new();
        for ex in &raw {
            assert_eq!(oracle.predict(&ex.target).unwrap(), ex.c.unwrap());
            ratings.insert(ex.c.unwrap());
        }
        assert_eq!(ratings, (1..=5).collect());
    }
}
