//! Teacher-forced maximum-likelihood training.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::control::{ControlKind, ControlTracker};
use crate::data::vocab::{BOS, EOS, PAD};
use crate::data::{Example, Vocabulary};
use crate::error::{Error, Result};
use crate::eval;
use crate::exec::Exec;
use crate::model::{Batch, DecoderModel};

pub mod optim;

pub use optim::{clip_grad_norm, Optimizer, OptimizerConfig, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            batch_size: 32,
            epochs: 10,
            optimizer: o.kind,
            learning_rate: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            grad_clip: 1.0,
            seed: 0,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        // zero is accepted as a frozen run
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Mean `-log softmax(logits)[gold]` over rows whose gold is not padding.
pub fn nll_loss(g: &mut Graph, logits: Var, gold: &[Option<usize>]) -> Result<Var> {
    g.cross_entropy(logits, gold)
}

/// Desired value and per-step tracker inputs for a gold target.
///
/// Step `t` (0-based) sees the tracker of the first `t` gold tokens. There
/// is one step per target token plus the final end-of-sequence step, whose
/// tracker already equals the example's control value.
pub fn teacher_forced_controls(example: &Example, kind: ControlKind) -> Result<(i64, Vec<i64>)> {
    if !kind.has_tracker() {
        return Ok((example.c, Vec::new()));
    }
    let mut tracker = ControlTracker::new(kind, example.source.as_deref())?;
    let mut values = Vec::with_capacity(example.target.len() + 1);
    values.push(tracker.value());
    for tok in &example.target {
        values.push(tracker.step(tok.clone()));
    }
    Ok((example.c, values))
}

/// One example in id form, ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub desired: i64,
    pub trackers: Vec<i64>,
    pub source: Option<Vec<usize>>,
}

pub fn encode_example(ex: &Example, vocab: &Vocabulary, kind: ControlKind, with_tracker: bool) -> Result<Encoded> {
    let ids = vocab.encode(&ex.target);
    let mut inputs = Vec::with_capacity(ids.len() + 1);
    inputs.push(BOS);
    inputs.extend_from_slice(&ids);
    let mut targets = ids;
    targets.push(EOS);
    let (desired, trackers) = if with_tracker {
        teacher_forced_controls(ex, kind)?
    } else {
        (ex.c, Vec::new())
    };
    Ok(Encoded {
        inputs,
        targets,
        desired,
        trackers,
        source: ex.source.as_ref().map(|s| vocab.encode(s)),
    })
}

/// Pads encoded examples to a common length. Padded steps repeat the last
/// tracker value so every fed value stays in range.
pub fn make_batch(items: &[&Encoded], with_source: bool) -> Batch {
    let t = items.iter().map(|e| e.inputs.len()).max().unwrap_or(0);
    let mut batch = Batch {
        inputs: Vec::with_capacity(items.len()),
        targets: Vec::with_capacity(items.len()),
        desired: Vec::with_capacity(items.len()),
        trackers: Vec::with_capacity(items.len()),
        sources: with_source.then(Vec::new),
    };
    for e in items {
        let pad = t - e.inputs.len();
        let mut inp = e.inputs.clone();
        inp.resize(t, PAD);
        let mut tgt: Vec<Option<usize>> = e.targets.iter().map(|&x| Some(x)).collect();
        tgt.resize(t, None);
        batch.inputs.push(inp);
        batch.targets.push(tgt);
        batch.desired.push(e.desired);
        if !e.trackers.is_empty() {
            let mut tr = e.trackers.clone();
            let last = *tr.last().unwrap();
            tr.extend(std::iter::repeat_n(last, pad));
            batch.trackers.push(tr);
        }
        if let (Some(srcs), Some(s)) = (&mut batch.sources, &e.source) {
            srcs.push(s.clone());
        }
    }
    batch
}

/// Groups indices of similar length, then shuffles batch order. Ties in
/// length are broken by a seeded shuffle.
pub fn length_buckets(lengths: &[usize], batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(rng);
    idx.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ppl: f64,
}

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,valid_ppl\n");
    for e in log {
        let _ = writeln!(out, "{},{:.6},{:.6}", e.epoch, e.train_loss, e.valid_ppl);
    }
    out
}

pub fn write_metrics(path: &Path, log: &[EpochLog]) -> Result<()> {
    std::fs::write(path, metrics_csv(log))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation perplexity.
    pub model: DecoderModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Trains in place and keeps the best-validation parameters. Without
/// validation data every epoch counts as an improvement.
pub fn train(mut model: DecoderModel, train: &[Example], valid: &[Example], vocab: &Vocabulary, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let kind = model.config.control.kind;
    let with_tracker = model.has_tracker();
    let with_source = model.config.has_encoder;
    let encoded = train
        .iter()
        .map(|ex| encode_example(ex, vocab, kind, with_tracker))
        .collect::<Result<Vec<_>>>()?;
    let lengths: Vec<usize> = encoded.iter().map(|e| e.inputs.len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer_config(), &model.store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, crate::autodiff::ParamStore)> = None;
    let mut stale = 0;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for idx in length_buckets(&lengths, cfg.batch_size, &mut rng) {
            let items: Vec<&Encoded> = idx.iter().map(|&i| &encoded[i]).collect();
            let batch = make_batch(&items, with_source);
            let mut g = Graph::new();
            let loss = model.loss(&mut g, &batch)?;
            let value = g.scalar(loss);
            step += 1;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            let count = items.iter().map(|e| e.targets.len()).sum::<usize>();
            loss_sum += value * count as f64;
            tokens += count;
            let grads = g.backward(loss)?;
            model.store.zero_grad();
            g.accumulate_param_grads(&grads, &mut model.store);
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut model.store, cfg.grad_clip);
            }
            opt.step(&mut model.store);
        }
        model.store.zero_grad();
        let valid_ppl = if valid.is_empty() {
            f64::NAN
        } else {
            eval::perplexity(&model, valid, vocab, cfg.batch_size, Exec::default())?
        };
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / tokens as f64,
            valid_ppl,
        });
        let improved = match &best {
            None => true,
            Some((b, _, _)) => valid.is_empty() || valid_ppl < *b,
        };
        if improved {
            best = Some((valid_ppl, epoch, model.store.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, store)) => {
            model.store = store;
            e
        }
        None => 0,
    };
    Ok(TrainOutcome { model, log, best_epoch })
}
