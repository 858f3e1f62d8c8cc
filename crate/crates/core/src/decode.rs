//! Greedy and temperature decoding with live tracker updates.
//!
//! Requests are decoded in lockstep chunks. Each stream owns its tracker
//! and its random stream (seeded from `(seed, index)`), and every kernel
//! treats rows independently, so outputs do not depend on chunking or
//! scheduling.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::softmax_row;
use crate::control::{self, ControlKind, ControlTracker, SentimentClassifier};
use crate::data::vocab::{BOS, EOS, PAD};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::DecoderModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Temperature,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Temperature => "temperature",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "temperature" => Ok(DecodeMode::Temperature),
            _ => Err(Error::Config(format!("unknown decode mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            max_len,
            seed: 0,
        }
    }

    pub fn sample(temperature: f64, max_len: usize, seed: u64) -> Self {
        Self {
            mode: DecodeMode::Temperature,
            temperature,
            max_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be finite and > 0, got {}", self.temperature)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// 1.5x the top of the evaluated range for length control, 50 otherwise.
pub fn default_max_len(kind: ControlKind, eval_hi: i64) -> usize {
    match kind {
        ControlKind::Length => ((eval_hi.max(1) as usize) * 3).div_ceil(2),
        _ => 50,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Request {
    pub desired: i64,
    pub source: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub desired: i64,
    pub tokens: Vec<String>,
    /// Hit `max_len` without emitting end-of-sequence.
    pub truncated: bool,
    /// Tracker value fed at each step (empty without a tracker).
    pub trace: Vec<i64>,
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Draws from `softmax(logits / tau)`.
pub fn sample_index(logits: &[f64], tau: f64, rng: &mut impl Rng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    let mut p = vec![0.0; scaled.len()];
    softmax_row(&scaled, &mut p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn stream_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn check_request(model: &DecoderModel, req: &Request) -> Result<()> {
    if let Some(r) = model.desired_range() {
        r.check(req.desired)?;
    }
    match (&req.source, model.config.has_encoder) {
        (Some(s), true) if !s.is_empty() => Ok(()),
        (None, false) => Ok(()),
        (_, true) => Err(Error::Data("this model needs a non-empty source text".into())),
        (Some(_), false) => Err(Error::Data("this model takes no source text".into())),
    }
}

/// Decodes valid requests of one chunk in lockstep. `first_index` is the
/// global index of `reqs[0]`, used for per-stream seeds.
fn decode_chunk(model: &DecoderModel, vocab: &Vocabulary, reqs: &[Request], cfg: &DecodeConfig, first_index: usize) -> Result<Vec<Generation>> {
    let n = reqs.len();
    let kind = model.config.control.kind;
    let sources: Option<Vec<Vec<usize>>> = model
        .config
        .has_encoder
        .then(|| reqs.iter().map(|r| vocab.encode(r.source.as_deref().unwrap_or(&[]))).collect());
    let mut state = model.start(n, sources.as_deref())?;
    let mut trackers: Vec<Option<ControlTracker<String>>> = reqs
        .iter()
        .map(|r| {
            model
                .has_tracker()
                .then(|| ControlTracker::new(kind, r.source.as_deref()))
                .transpose()
        })
        .collect::<Result<_>>()?;
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| stream_rng(cfg.seed, first_index + i)).collect();
    let mut out: Vec<Generation> = reqs
        .iter()
        .map(|r| Generation {
            desired: r.desired,
            tokens: Vec::new(),
            truncated: false,
            trace: Vec::new(),
        })
        .collect();
    let mut done = vec![false; n];
    let mut prev = vec![BOS; n];
    let desired: Vec<i64> = reqs.iter().map(|r| r.desired).collect();
    let v = model.config.vocab_size;
    for _ in 0..cfg.max_len {
        let tvals: Vec<i64> = trackers.iter().map(|t| t.as_ref().map_or(0, ControlTracker::value)).collect();
        let fed: &[i64] = if model.has_tracker() { &tvals } else { &[] };
        let logits = model.step(&mut state, &prev, &desired, fed)?;
        for i in 0..n {
            if done[i] {
                prev[i] = PAD;
                continue;
            }
            if model.has_tracker() {
                out[i].trace.push(tvals[i]);
            }
            let mut row = logits[i * v..(i + 1) * v].to_vec();
            row[PAD] = f64::NEG_INFINITY;
            row[BOS] = f64::NEG_INFINITY;
            let next = match cfg.mode {
                DecodeMode::Greedy => argmax(&row),
                DecodeMode::Temperature => sample_index(&row, cfg.temperature, &mut rngs[i]),
            };
            if next == EOS {
                done[i] = true;
                prev[i] = PAD;
                continue;
            }
            let tok = vocab.token(next).to_string();
            if let Some(t) = trackers[i].as_mut() {
                t.step(tok.clone());
            }
            out[i].tokens.push(tok);
            prev[i] = next;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    for (g, d) in out.iter_mut().zip(&done) {
        g.truncated = !d;
    }
    Ok(out)
}

/// One controlled generation.
pub fn generate(model: &DecoderModel, vocab: &Vocabulary, desired: i64, source: Option<&[String]>, cfg: &DecodeConfig) -> Result<Generation> {
    let req = Request {
        desired,
        source: source.map(<[String]>::to_vec),
    };
    let mut out = batch_generate(model, vocab, &[req], cfg, 1, Exec::Sequential)?;
    out.pop().expect("one request")
}

/// Decodes every request; invalid or failing elements are returned as
/// errors in place, the rest succeed. The result is independent of
/// `chunk` and `exec`.
pub fn batch_generate(
    model: &DecoderModel,
    vocab: &Vocabulary,
    requests: &[Request],
    cfg: &DecodeConfig,
    chunk: usize,
    exec: Exec,
) -> Result<Vec<Result<Generation>>> {
    cfg.validate()?;
    if cfg.max_len > model.config.max_seq_len {
        return Err(Error::Config(format!(
            "max_len {} exceeds the model's max_seq_len {}",
            cfg.max_len, model.config.max_seq_len
        )));
    }
    let chunk = chunk.max(1);
    let starts: Vec<usize> = (0..requests.len()).step_by(chunk).collect();
    let per_chunk = exec.map(&starts, |&start| {
        let end = (start + chunk).min(requests.len());
        let mut results: Vec<Option<Result<Generation>>> = Vec::with_capacity(end - start);
        let mut valid = Vec::new();
        for (i, req) in requests[start..end].iter().enumerate() {
            match check_request(model, req) {
                Ok(()) => {
                    valid.push(start + i);
                    results.push(None);
                }
                Err(e) => results.push(Some(Err(e))),
            }
        }
        // streams keep their global index for seeding even when a
        // neighbour was rejected, so decode valid runs separately
        for run in contiguous_runs(&valid) {
            let reqs = &requests[run.0..run.1];
            match decode_chunk(model, vocab, reqs, cfg, run.0) {
                Ok(gens) => {
                    for (k, g) in gens.into_iter().enumerate() {
                        results[run.0 + k - start] = Some(Ok(g));
                    }
                }
                Err(e) => {
                    let msg = e.to_string();
                    for k in run.0..run.1 {
                        results[k - start] = Some(Err(Error::Data(msg.clone())));
                    }
                }
            }
        }
        results.into_iter().map(|r| r.expect("every slot filled")).collect::<Vec<_>>()
    });
    Ok(per_chunk.into_iter().flatten().collect())
}

fn contiguous_runs(sorted: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &i in sorted {
        match runs.last_mut() {
            Some(r) if r.1 == i => r.1 = i + 1,
            _ => runs.push((i, i + 1)),
        }
    }
    runs
}

/// Control value of a generated sequence.
pub fn realized_value(
    kind: ControlKind,
    source: Option<&[String]>,
    tokens: &[String],
    classifier: Option<&dyn SentimentClassifier>,
) -> Result<i64> {
    match kind {
        ControlKind::Length | ControlKind::Edit => control::gold_value(kind, source, tokens),
        ControlKind::Sentiment => {
            let clf = classifier.ok_or_else(|| Error::Config("sentiment evaluation needs a classifier".into()))?;
            control::sentiment_value(tokens, clf)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub generation: Generation,
    pub realized: i64,
}

/// [`batch_generate`] plus the realized control value of each output.
pub fn generate_and_measure(
    model: &DecoderModel,
    vocab: &Vocabulary,
    requests: &[Request],
    cfg: &DecodeConfig,
    classifier: Option<&dyn SentimentClassifier>,
    chunk: usize,
    exec: Exec,
) -> Result<Vec<Result<Outcome>>> {
    let kind = model.config.control.kind;
    if kind == ControlKind::Sentiment && classifier.is_none() {
        return Err(Error::Config("sentiment evaluation needs a classifier".into()));
    }
    let gens = batch_generate(model, vocab, requests, cfg, chunk, exec)?;
    Ok(gens
        .into_iter()
        .zip(requests)
        .map(|(g, req)| {
            let g = g?;
            let realized = realized_value(kind, req.source.as_deref(), &g.tokens, classifier)?;
            Ok(Outcome { generation: g, realized })
        })
        .collect())
}
