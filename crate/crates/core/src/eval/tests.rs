use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::kernels::log_sum_exp;
use crate::control::ControlKind;
use crate::data::vocab::{BOS, EOS};
use crate::data::{annotate_controls, split_by_range, synth_corpus, RangeSplit, SplitFractions, SynthParams};
use crate::decode::Generation;
use crate::embedding::StrategyKind;
use crate::model::{ControlSpec, Family, ModelConfig};

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn mse_examples() {
    assert_eq!(control_mse(&[(3, 3), (7, 7)]).unwrap(), 0.0);
    assert_eq!(control_mse(&[(10, 8), (10, 12)]).unwrap(), 4.0);
    assert!(control_mse(&[]).is_err());
}

#[test]
fn accuracy_examples() {
    assert_eq!(control_accuracy(&[(1, 1), (2, 2)]).unwrap(), 100.0);
    assert_eq!(control_accuracy(&[(1, 2), (2, 1)]).unwrap(), 0.0);
    assert_eq!(control_accuracy(&[(5, 5), (5, 6), (5, 5), (5, 4)]).unwrap(), 50.0);
    assert!(control_accuracy(&[]).is_err());
}

proptest! {
    #[test]
    fn mse_is_translation_invariant(pairs in prop::collection::vec((-50i64..50, -50i64..50), 1..30), k in -100i64..100) {
        let shifted: Vec<(i64, i64)> = pairs.iter().map(|&(d, r)| (d + k, r + k)).collect();
        prop_assert_eq!(control_mse(&pairs).unwrap(), control_mse(&shifted).unwrap());
    }

    #[test]
    fn full_accuracy_iff_zero_mse(pairs in prop::collection::vec((0i64..4, 0i64..4), 1..12)) {
        let acc = control_accuracy(&pairs).unwrap();
        let mse = control_mse(&pairs).unwrap();
        prop_assert!((0.0..=100.0).contains(&acc));
        prop_assert!(mse >= 0.0);
        prop_assert_eq!(acc == 100.0, mse == 0.0);
    }
}

/// Counts n-grams by linear search over a list.
fn naive_bleu(refs: &[Vec<String>], hyps: &[Vec<String>]) -> f64 {
    let grams = |s: &[String], n: usize| -> Vec<Vec<String>> {
        if s.len() < n {
            return vec![];
        }
        (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
    };
    let mut m = [0f64; 4];
    let mut t = [0f64; 4];
    let (mut hl, mut rl) = (0f64, 0f64);
    for (r, h) in refs.iter().zip(hyps) {
        hl += h.len() as f64;
        rl += r.len() as f64;
        for n in 1..=4 {
            let mut pool = grams(r, n);
            for g in grams(h, n) {
                t[n - 1] += 1.0;
                if let Some(pos) = pool.iter().position(|x| *x == g) {
                    pool.remove(pos);
                    m[n - 1] += 1.0;
                }
            }
        }
    }
    if m[0] == 0.0 {
        return 0.0;
    }
    let p = [m[0] / t[0], (m[1] + 1.0) / (t[1] + 1.0), (m[2] + 1.0) / (t[2] + 1.0), (m[3] + 1.0) / (t[3] + 1.0)];
    let geo = (p.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp();
    let bp = if hl > rl { 1.0 } else { (1.0 - rl / hl).exp() };
    100.0 * bp * geo
}

#[test]
fn bleu_of_identical_corpus_is_100() {
    let refs = vec![words("a b c d e"), words("the cat sat on the mat")];
    assert!((bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn bleu_of_disjoint_corpus_is_zero() {
    assert_eq!(bleu(&[words("a b c d")], &[words("w x y z")]).unwrap(), 0.0);
    assert_eq!(bleu(&[words("a b c d")], &[vec![]]).unwrap(), 0.0);
}

#[test]
fn bleu_single_pair_by_hand() {
    // unigram 5/6, bigram (3+1)/(5+1), trigram (1+1)/(4+1), 4-gram (0+1)/(3+1), no brevity penalty
    let got = bleu(&[words("the cat sat on the mat")], &[words("the cat is on the mat")]).unwrap();
    let want = 100.0 * (1.0f64 / 18.0).powf(0.25);
    assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    // every precision is 1 (the 4-gram one is 1/1 after smoothing); BP = e^(1 - 6/3)
    let got = bleu(&[words("the cat sat on the mat")], &[words("the cat sat")]).unwrap();
    let want = 100.0 * (-1.0f64).exp();
    assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
}

#[test]
fn bleu_rejects_misaligned_lists() {
    assert!(bleu(&[words("a")], &[]).is_err());
    assert!(bleu(&[], &[]).is_err());
}

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let alphabet = ["a", "b", "c", "d", "e"];
    for _ in 0..1000 {
        let n = rng.gen_range(1..8);
        let pairs: Vec<(i64, i64)> = (0..n).map(|_| (rng.gen_range(0..6), rng.gen_range(0..6))).collect();
        let mut sq = 0i64;
        let mut hits = 0;
        for &(d, r) in &pairs {
            sq += (d - r) * (d - r);
            hits += i32::from(d == r);
        }
        assert_eq!(control_mse(&pairs).unwrap(), sq as f64 / n as f64);
        assert_eq!(control_accuracy(&pairs).unwrap(), 100.0 * hits as f64 / n as f64);

        let sent = |rng: &mut ChaCha8Rng, lo: usize| -> Vec<String> {
            (0..rng.gen_range(lo..9)).map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string()).collect()
        };
        let refs: Vec<Vec<String>> = (0..n).map(|_| sent(&mut rng, 1)).collect();
        let hyps: Vec<Vec<String>> = (0..n).map(|_| sent(&mut rng, 0)).collect();
        let (got, want) = (bleu(&refs, &hyps).unwrap(), naive_bleu(&refs, &hyps));
        assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12), "{got} vs {want}");
    }
}

#[test]
fn pearson_values() {
    let xs = [1.0, 2.0, 3.0, 4.0];
    assert!((pearson(&xs, &[2.0, 4.0, 6.0, 8.0]) - 1.0).abs() < 1e-12);
    assert!((pearson(&xs, &[8.0, 6.0, 4.0, 2.0]) + 1.0).abs() < 1e-12);
    assert_eq!(pearson(&xs, &[5.0; 4]), 0.0);
    // deviations give sxy = 4, sxx = syy = 5
    let r = pearson(&xs, &[1.0, 3.0, 2.0, 4.0]);
    assert!((r - 0.8).abs() < 1e-12, "{r}");
}

fn vocab() -> Vocabulary {
    let w: Vec<String> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
    Vocabulary::build([w.as_slice()], 1)
}

fn tiny_model(family: Family, kind: ControlKind, strategy: Option<StrategyKind>, seed: u64) -> DecoderModel {
    let r = ValueRange::new(0, 15).unwrap();
    let control = match strategy {
        Some(s) => ControlSpec::with_strategy(kind, s, 2, r, r),
        None => ControlSpec::none(kind),
    };
    let cfg = ModelConfig {
        family,
        vocab_size: vocab().len(),
        token_dim: 4,
        hidden_dim: 6,
        n_layers: 1,
        n_heads: 2,
        control,
        has_encoder: kind == ControlKind::Edit,
        max_seq_len: 30,
    };
    DecoderModel::new(cfg, seed).unwrap()
}

/// Per-example, per-token NLL through the step interface.
fn naive_ppl(m: &DecoderModel, examples: &[Example], vocab: &Vocabulary) -> f64 {
    let kind = m.config.control.kind;
    let v = m.config.vocab_size;
    let (mut total, mut count) = (0.0, 0usize);
    for ex in examples {
        let src = ex.source.as_ref().map(|s| vec![vocab.encode(s)]);
        let mut st = m.start(1, src.as_deref()).unwrap();
        let mut tracker = m
            .has_tracker()
            .then(|| crate::control::ControlTracker::new(kind, ex.source.as_deref()).unwrap());
        let mut prev = BOS;
        let mut gold = vocab.encode(&ex.target);
        gold.push(EOS);
        for (t, &y) in gold.iter().enumerate() {
            let tr: Vec<i64> = tracker.iter().map(|t| t.value()).collect();
            let logits = m.step(&mut st, &[prev], &[ex.c], &tr).unwrap();
            total += log_sum_exp(&logits[..v]) - logits[y];
            count += 1;
            if let Some(tk) = tracker.as_mut() {
                if t < ex.target.len() {
                    tk.step(ex.target[t].clone());
                }
            }
            prev = y;
        }
    }
    (total / count as f64).exp()
}

#[test]
fn perplexity_matches_token_loop_on_random_instances() {
    let v = vocab();
    let alphabet = ["a", "b", "c", "d", "e", "zz"];
    let variants = [
        (Family::Lstm, ControlKind::Length, Some(StrategyKind::Scalar)),
        (Family::Transformer, ControlKind::Length, Some(StrategyKind::Learnable)),
        (Family::Lstm, ControlKind::Edit, Some(StrategyKind::Sinusoidal)),
        (Family::Transformer, ControlKind::Edit, None),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (k, &(family, kind, strategy)) in variants.iter().enumerate() {
        let m = tiny_model(family, kind, strategy, k as u64);
        for _ in 0..250 {
            let n = rng.gen_range(1..4);
            let mut sent = |lo: usize| -> Vec<String> {
                (0..rng.gen_range(lo..7)).map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string()).collect()
            };
            let raw: Vec<crate::data::RawExample> = (0..n)
                .map(|_| crate::data::RawExample {
                    source: (kind == ControlKind::Edit).then(|| sent(1)),
                    target: sent(1),
                    c: None,
                })
                .collect();
            let exs = annotate_controls(&raw, kind).unwrap();
            let got = perplexity(&m, &exs, &v, 2, Exec::Sequential).unwrap();
            let want = naive_ppl(&m, &exs, &v);
            assert!(((got - want) / want).abs() <= 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn uniform_model_has_vocabulary_perplexity() {
    let v = vocab();
    let mut m = tiny_model(Family::Lstm, ControlKind::Length, Some(StrategyKind::Scalar), 1);
    for t in m.store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let raw = synth_corpus(ControlKind::Length, &SynthParams::new(5, 3, 6).unwrap(), 1).unwrap();
    let exs = annotate_controls(&raw, ControlKind::Length).unwrap();
    let ppl = perplexity(&m, &exs, &v, 3, Exec::Sequential).unwrap();
    assert!((ppl - v.len() as f64).abs() < 1e-9);
    assert!(perplexity(&m, &[], &v, 3, Exec::Sequential).is_err());
}

#[test]
fn perplexity_is_independent_of_batching_and_exec() {
    let v = vocab();
    let m = tiny_model(Family::Transformer, ControlKind::Length, Some(StrategyKind::ScalarRepeat), 3);
    let raw = synth_corpus(ControlKind::Length, &SynthParams::new(23, 3, 12).unwrap(), 2).unwrap();
    let exs = annotate_controls(&raw, ControlKind::Length).unwrap();
    let base = perplexity(&m, &exs, &v, 1, Exec::Sequential).unwrap();
    for bs in [4, 100] {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let p = perplexity(&m, &exs, &v, bs, exec).unwrap();
            assert!(((p - base) / base).abs() <= 1e-12);
        }
    }
}

fn outcome(desired: i64, realized: i64, truncated: bool) -> Result<Outcome> {
    Ok(Outcome {
        generation: Generation {
            desired,
            tokens: vec!["a".into(); realized as usize],
            truncated,
            trace: vec![],
        },
        realized,
    })
}

#[test]
fn scoring_counts_truncation_as_a_miss() {
    let echo: Vec<Result<Outcome>> = (3..9).map(|d| outcome(d, d, false)).collect();
    let s = score_outcomes(&echo).unwrap();
    assert_eq!((s.accuracy, s.mse, s.failed), (100.0, 0.0, 0));

    let mixed = vec![
        outcome(5, 5, false),
        outcome(5, 5, true),
        outcome(5, 7, false),
        Err(Error::Data("bad".into())),
    ];
    let s = score_outcomes(&mixed).unwrap();
    assert!((s.accuracy - 100.0 / 3.0).abs() < 1e-12);
    assert!((s.mse - 4.0 / 3.0).abs() < 1e-12);
    assert_eq!(s.failed, 1);
    assert!(score_outcomes(&[Err(Error::Data("x".into()))]).is_err());
}

fn length_setup() -> (Vec<Example>, Splits, Vocabulary) {
    let raw = synth_corpus(ControlKind::Length, &SynthParams::new(120, 3, 9).unwrap(), 5).unwrap();
    let exs = annotate_controls(&raw, ControlKind::Length).unwrap();
    let split = RangeSplit {
        observed: vec!["3..6".parse().unwrap()],
        evaluated: vec!["3..6".parse().unwrap(), "7..9".parse().unwrap()],
    };
    let splits = split_by_range(&exs, &split, SplitFractions::default(), 5).unwrap();
    let v = Vocabulary::build(exs.iter().map(|e| e.target.as_slice()), 1);
    (exs, splits, v)
}

#[test]
fn range_report_counts_match_the_split() {
    let (_, splits, v) = length_setup();
    let cfg = ModelConfig {
        vocab_size: v.len(),
        ..tiny_model(Family::Lstm, ControlKind::Length, Some(StrategyKind::Scalar), 1).config
    };
    let m = DecoderModel::new(cfg.clone(), 2).unwrap();
    let base = DecoderModel::new(ModelConfig { control: ControlSpec::none(ControlKind::Length), ..cfg }, 2).unwrap();
    let ev = Evaluator::new(&m, &v);
    let dc = DecodeConfig::greedy(13);
    let rep = ev.range_report(&splits, &dc, Some(&base)).unwrap();
    let counts = splits.counts();
    assert_eq!(rep.intervals.len(), 2);
    for r in &rep.intervals {
        let name = format!("eval:{}", r.range);
        let n = counts.iter().find(|(k, _)| *k == name).unwrap().1;
        assert_eq!(r.n_examples, n);
        assert!(r.n_examples > 0 && (0.0..=100.0).contains(&r.accuracy) && r.mse >= 0.0);
        assert!(r.baseline_ppl.is_some() && r.bleu.is_none());
    }
    assert_eq!((rep.task.as_str(), rep.family.as_str(), rep.strategy.as_str()), ("length", "lstm", "scalar"));
    // fixed seed + greedy decoding reproduces the report exactly
    let again = ev.range_report(&splits, &dc, Some(&base)).unwrap();
    assert_eq!(rep.to_json(), again.to_json());
    assert_eq!(rep.to_table(), again.to_table());
    assert!(rep.to_table().contains("PPL") && rep.to_table().contains("MSE"));
}

#[test]
fn sentiment_report_needs_a_classifier() {
    let v = vocab();
    let m = tiny_model(Family::Lstm, ControlKind::Sentiment, Some(StrategyKind::Scalar), 1);
    let ev = Evaluator::new(&m, &v);
    let reqs = vec![Request { desired: 3, source: None }];
    assert!(ev.run(&reqs, &DecodeConfig::greedy(5)).is_err());
}

#[test]
fn curve_has_one_row_per_value() {
    let (_, _, v) = length_setup();
    let cfg = ModelConfig {
        vocab_size: v.len(),
        ..tiny_model(Family::Lstm, ControlKind::Length, Some(StrategyKind::Scalar), 1).config
    };
    let m = DecoderModel::new(cfg, 3).unwrap();
    let ev = Evaluator::new(&m, &v);
    let r = ValueRange::new(3, 9).unwrap();
    let pts = ev.emit_curve(r, 4, None, &DecodeConfig::sample(1.0, 13, 1)).unwrap();
    assert_eq!(pts.len(), r.len());
    for (p, d) in pts.iter().zip(3..) {
        assert_eq!((p.desired, p.n), (d, 4));
        assert!(p.stddev >= 0.0);
    }
    let csv = curve_csv(&pts);
    assert!(csv.starts_with("desired,mean_realized,stddev,n\n"));
    assert_eq!(csv.lines().count(), 1 + r.len());
}
