//! Perplexity, BLEU, control MSE and accuracy, range reports and
//! desired-vs-realized curves.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::control::SentimentClassifier;
use crate::data::{Example, Splits, Vocabulary};
use crate::decode::{generate_and_measure, DecodeConfig, Outcome, Request};
use crate::embedding::ValueRange;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::DecoderModel;
use crate::train::{encode_example, make_batch, Encoded};

/// Summed NLL (nats) and token count, end-of-sequence steps included.
pub fn nll_totals(model: &DecoderModel, examples: &[Example], vocab: &Vocabulary, batch_size: usize, exec: Exec) -> Result<(f64, usize)> {
    let kind = model.config.control.kind;
    let encoded = examples
        .iter()
        .map(|ex| encode_example(ex, vocab, kind, model.has_tracker()))
        .collect::<Result<Vec<Encoded>>>()?;
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.sort_by_key(|&i| (encoded[i].inputs.len(), i));
    let chunks: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    let parts = exec.map(&chunks, |idx| -> Result<(f64, usize)> {
        let items: Vec<&Encoded> = idx.iter().map(|&i| &encoded[i]).collect();
        let batch = make_batch(&items, model.config.has_encoder);
        let mut g = Graph::inference();
        let loss = model.loss(&mut g, &batch)?;
        let count: usize = items.iter().map(|e| e.targets.len()).sum();
        Ok((g.scalar(loss) * count as f64, count))
    });
    let mut total = 0.0;
    let mut count = 0;
    for p in parts {
        let (t, c) = p?;
        total += t;
        count += c;
    }
    Ok((total, count))
}

/// `exp(total NLL / token count)` with gold controls as conditioning.
pub fn perplexity(model: &DecoderModel, examples: &[Example], vocab: &Vocabulary, batch_size: usize, exec: Exec) -> Result<f64> {
    let (total, count) = nll_totals(model, examples, vocab, batch_size, exec)?;
    if count == 0 {
        return Err(Error::Data("perplexity over zero tokens".into()));
    }
    Ok((total / count as f64).exp())
}

pub fn control_mse(pairs: &[(i64, i64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("MSE over zero pairs".into()));
    }
    let sum: f64 = pairs.iter().map(|&(d, r)| ((d - r) as f64).powi(2)).sum();
    Ok(sum / pairs.len() as f64)
}

/// Percentage of exact matches.
pub fn control_accuracy(pairs: &[(i64, i64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("accuracy over zero pairs".into()));
    }
    let hits = pairs.iter().filter(|(d, r)| d == r).count();
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 on a 0..100 scale with brevity penalty. Orders 2..4 use
/// add-one smoothing; unigram precision is unsmoothed.
pub fn bleu(references: &[Vec<String>], hypotheses: &[Vec<String>]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::Data(format!(
            "BLEU needs aligned lists, got {} references and {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Data("BLEU over an empty corpus".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (r, h) in references.iter().zip(hypotheses) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_p / 4.0).exp())
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n == 0 {
        return 0.0;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub desired: i64,
    pub mean_realized: f64,
    /// Population standard deviation.
    pub stddev: f64,
    pub n: usize,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("desired,mean_realized,stddev,n\n");
    for p in points {
        let _ = writeln!(out, "{},{:.6},{:.6},{}", p.desired, p.mean_realized, p.stddev, p.n);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub range: ValueRange,
    pub n_examples: usize,
    pub ppl: f64,
    pub baseline_ppl: Option<f64>,
    pub bleu: Option<f64>,
    pub accuracy: f64,
    pub mse: f64,
    /// Generations that could not be produced or measured.
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub family: String,
    pub strategy: String,
    pub intervals: Vec<IntervalReport>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("task {}  family {}  strategy {}\n", self.task, self.family, self.strategy);
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>9} {:>9} {:>7} {:>8} {:>9} {:>6}",
            "interval", "n", "PPL", "base_PPL", "BLEU", "Acc", "MSE", "failed"
        );
        for r in &self.intervals {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>9.3} {:>9} {:>7} {:>8.2} {:>9.3} {:>6}",
                r.range.to_string(),
                r.n_examples,
                r.ppl,
                r.baseline_ppl.map_or_else(|| "-".to_string(), |x| format!("{x:.3}")),
                fmt_opt(r.bleu),
                r.accuracy,
                r.mse,
                r.failed
            );
        }
        out
    }
}

/// Metrics over one set of outcomes. Truncated outputs count as misses.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlScores {
    pub pairs: Vec<(i64, i64)>,
    pub accuracy: f64,
    pub mse: f64,
    pub failed: usize,
}

pub fn score_outcomes(outcomes: &[Result<Outcome>]) -> Result<ControlScores> {
    let ok: Vec<&Outcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let pairs: Vec<(i64, i64)> = ok.iter().map(|o| (o.generation.desired, o.realized)).collect();
    let mse = control_mse(&pairs)?;
    let hits = ok
        .iter()
        .filter(|o| !o.generation.truncated && o.generation.desired == o.realized)
        .count();
    let accuracy = 100.0 * hits as f64 / ok.len() as f64;
    Ok(ControlScores {
        pairs,
        accuracy,
        mse,
        failed: outcomes.len() - ok.len(),
    })
}

/// Evaluation context over an immutable model.
#[derive(Clone, Copy)]
pub struct Evaluator<'a> {
    pub model: &'a DecoderModel,
    pub vocab: &'a Vocabulary,
    pub classifier: Option<&'a dyn SentimentClassifier>,
    pub exec: Exec,
    pub batch_size: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a DecoderModel, vocab: &'a Vocabulary) -> Self {
        Self {
            model,
            vocab,
            classifier: None,
            exec: Exec::default(),
            batch_size: 32,
        }
    }

    pub fn with_classifier(mut self, clf: Option<&'a dyn SentimentClassifier>) -> Self {
        self.classifier = clf;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn perplexity(&self, examples: &[Example]) -> Result<f64> {
        perplexity(self.model, examples, self.vocab, self.batch_size, self.exec)
    }

    pub fn run(&self, requests: &[Request], cfg: &DecodeConfig) -> Result<Vec<Result<Outcome>>> {
        generate_and_measure(self.model, self.vocab, requests, cfg, self.classifier, self.batch_size, self.exec)
    }

    /// `per_value` generations for each desired value, sources cycled.
    pub fn sweep(&self, values: &[i64], per_value: usize, sources: Option<&[Vec<String>]>, cfg: &DecodeConfig) -> Result<Vec<Result<Outcome>>> {
        let mut requests = Vec::with_capacity(values.len() * per_value);
        for &d in values {
            for i in 0..per_value {
                let source = match sources {
                    Some(s) if !s.is_empty() => Some(s[i % s.len()].clone()),
                    _ => None,
                };
                requests.push(Request { desired: d, source });
            }
        }
        self.run(&requests, cfg)
    }

    /// Per-interval PPL on held-out examples (gold controls) and control
    /// metrics of generations asked for each example's value. Empty
    /// intervals are omitted.
    pub fn range_report(&self, splits: &Splits, cfg: &DecodeConfig, baseline: Option<&DecoderModel>) -> Result<EvalReport> {
        let mut intervals = Vec::new();
        for (range, examples) in &splits.intervals {
            if examples.is_empty() {
                continue;
            }
            let ppl = self.perplexity(examples)?;
            let baseline_ppl = baseline
                .map(|b| perplexity(b, examples, self.vocab, self.batch_size, self.exec))
                .transpose()?;
            let requests: Vec<Request> = examples
                .iter()
                .map(|ex| Request {
                    desired: ex.c,
                    source: ex.source.clone(),
                })
                .collect();
            let outcomes = self.run(&requests, cfg)?;
            let scores = score_outcomes(&outcomes)?;
            let bleu = if self.model.config.has_encoder {
                let refs: Vec<Vec<String>> = examples.iter().map(|e| e.target.clone()).collect();
                let hyps: Vec<Vec<String>> = outcomes
                    .iter()
                    .map(|o| o.as_ref().map(|o| o.generation.tokens.clone()).unwrap_or_default())
                    .collect();
                Some(bleu(&refs, &hyps)?)
            } else {
                None
            };
            intervals.push(IntervalReport {
                range: *range,
                n_examples: examples.len(),
                ppl,
                baseline_ppl,
                bleu,
                accuracy: scores.accuracy,
                mse: scores.mse,
                failed: scores.failed,
            });
        }
        Ok(EvalReport {
            task: self.model.config.control.kind.to_string(),
            family: self.model.config.family.to_string(),
            strategy: self.model.config.control.strategy_name(),
            intervals,
        })
    }

    /// One row per desired value with `n` generations each.
    pub fn emit_curve(&self, range: ValueRange, n: usize, sources: Option<&[Vec<String>]>, cfg: &DecodeConfig) -> Result<Vec<CurvePoint>> {
        let values: Vec<i64> = range.values().collect();
        let outcomes = self.sweep(&values, n, sources, cfg)?;
        Ok(values
            .iter()
            .zip(outcomes.chunks(n.max(1)))
            .map(|(&d, chunk)| {
                let r: Vec<f64> = chunk.iter().filter_map(|o| o.as_ref().ok()).map(|o| o.realized as f64).collect();
                let k = r.len() as f64;
                let mean = r.iter().sum::<f64>() / k;
                let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k;
                CurvePoint {
                    desired: d,
                    mean_realized: mean,
                    stddev: var.sqrt(),
                    n: r.len(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests;
