//! LSTM and Transformer decoders with scalar control inputs.
//!
//! Every decoder step consumes `[token ‖ desired ‖ tracker]`, where the
//! desired part embeds the requested control value and the tracker part
//! embeds the value realized by the prefix so far. Either part may be
//! absent; with both absent the model is the unconditioned baseline.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::checkpoint;
use crate::control::ControlKind;
use crate::data::Vocabulary;
use crate::embedding::{ScalarEmbedder, StrategyKind, ValueRange};
use crate::error::{Error, Result};

pub mod lstm;
pub mod transformer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Lstm,
    Transformer,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Lstm => "lstm",
            Family::Transformer => "transformer",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(Family::Lstm),
            "transformer" => Ok(Family::Transformer),
            _ => Err(Error::Config(format!("unknown model family {s:?}"))),
        }
    }
}

/// One control embedding: strategy, requested width and accepted values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedSpec {
    pub strategy: StrategyKind,
    pub dim: usize,
    pub range: ValueRange,
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl EmbedSpec {
    pub fn new(strategy: StrategyKind, dim: usize, range: ValueRange) -> Self {
        Self {
            strategy,
            dim,
            range,
            scale: 1.0,
        }
    }

    pub fn width(&self) -> usize {
        self.strategy.width(self.dim)
    }
}

/// Which attribute is controlled and how its values enter the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSpec {
    pub kind: ControlKind,
    pub desired: Option<EmbedSpec>,
    pub tracker: Option<EmbedSpec>,
}

impl ControlSpec {
    /// The baseline: no control input of either kind.
    pub fn none(kind: ControlKind) -> Self {
        Self {
            kind,
            desired: None,
            tracker: None,
        }
    }

    /// Desired and (when the kind has one) tracker embeddings sharing a
    /// strategy but not parameters.
    pub fn with_strategy(kind: ControlKind, strategy: StrategyKind, dim: usize, desired: ValueRange, tracker: ValueRange) -> Self {
        Self {
            kind,
            desired: Some(EmbedSpec::new(strategy, dim, desired)),
            tracker: kind.has_tracker().then(|| EmbedSpec::new(strategy, dim, tracker)),
        }
    }

    pub fn desired_width(&self) -> usize {
        self.desired.as_ref().map_or(0, EmbedSpec::width)
    }

    pub fn tracker_width(&self) -> usize {
        self.tracker.as_ref().map_or(0, EmbedSpec::width)
    }

    pub fn strategy_name(&self) -> String {
        self.desired
            .map_or_else(|| "no_control".to_string(), |d| d.strategy.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tracker.is_some() && !self.kind.has_tracker() {
            return Err(Error::Config(format!("{} control has no tracker", self.kind)));
        }
        for spec in self.desired.iter().chain(&self.tracker) {
            if spec.dim == 0 {
                return Err(Error::Config(format!("{} embedding width must be >= 1", spec.strategy)));
            }
            if spec.strategy == StrategyKind::Sinusoidal && spec.dim % 2 != 0 {
                return Err(Error::Config(format!("sinusoidal width must be even, got {}", spec.dim)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub vocab_size: usize,
    pub token_dim: usize,
    /// LSTM state width, or the Transformer feed-forward width.
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub control: ControlSpec,
    pub has_encoder: bool,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn step_width(&self) -> usize {
        self.token_dim + self.control.desired_width() + self.control.tracker_width()
    }

    pub fn validate(&self) -> Result<()> {
        self.control.validate()?;
        if self.vocab_size < 4 {
            return Err(Error::Config("vocabulary must hold at least the four reserved tokens".into()));
        }
        if self.token_dim == 0 || self.hidden_dim == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("token_dim, hidden_dim, n_layers and max_seq_len must be >= 1".into()));
        }
        if self.control.kind.needs_source() && !self.has_encoder {
            return Err(Error::Config(format!("{} control needs an encoder", self.control.kind)));
        }
        match self.family {
            Family::Lstm => {
                if self.has_encoder && !self.hidden_dim.is_multiple_of(2) {
                    return Err(Error::Config(format!(
                        "bidirectional encoder needs an even hidden_dim, got {}",
                        self.hidden_dim
                    )));
                }
            }
            Family::Transformer => {
                let width = self.step_width();
                if self.n_heads == 0 || !width.is_multiple_of(self.n_heads) {
                    return Err(Error::Config(format!(
                        "input size {width} (token {} + desired {} + tracker {}) is not divisible by n_heads {}",
                        self.token_dim,
                        self.control.desired_width(),
                        self.control.tracker_width(),
                        self.n_heads
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Teacher-forced batch. Rows of `inputs`, `targets` and `trackers` share
/// one length `T`; short sequences are padded with `PAD` inputs and `None`
/// targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<Option<usize>>>,
    pub desired: Vec<i64>,
    /// Empty rows when the model has no tracker.
    pub trackers: Vec<Vec<i64>>,
    pub sources: Option<Vec<Vec<usize>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// Targets in time-major order, matching [`DecoderModel::forward`].
    pub fn targets_time_major(&self) -> Vec<Option<usize>> {
        let (b, t) = (self.len(), self.steps());
        (0..t * b).map(|r| self.targets[r % b][r / b]).collect()
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (b, t) = (self.len(), self.steps());
        if b == 0 || t == 0 {
            return Err(Error::shape("batch", "at least one non-empty row", format!("{b} x {t}")));
        }
        if t > cfg.max_seq_len {
            return Err(Error::shape("batch", format!("at most {} steps", cfg.max_seq_len), format!("{t}")));
        }
        let ragged = self.inputs.iter().any(|r| r.len() != t) || self.targets.iter().any(|r| r.len() != t);
        if ragged || self.targets.len() != b || self.desired.len() != b {
            return Err(Error::shape("batch", format!("{b} rows of {t} steps"), "ragged rows".to_string()));
        }
        if cfg.control.tracker.is_some() && (self.trackers.len() != b || self.trackers.iter().any(|r| r.len() != t)) {
            return Err(Error::shape("batch", format!("{b} tracker rows of {t}"), "missing or ragged trackers"));
        }
        if cfg.has_encoder != self.sources.is_some() {
            return Err(Error::Data(format!(
                "model {} an encoder but the batch {} sources",
                if cfg.has_encoder { "has" } else { "has no" },
                if self.sources.is_some() { "has" } else { "lacks" }
            )));
        }
        if let Some(src) = &self.sources {
            if src.len() != b {
                return Err(Error::shape("batch", format!("{b} sources"), format!("{}", src.len())));
            }
        }
        Ok(())
    }
}

/// Parameter leaves bound into one graph, each copied in at most once.
pub(crate) struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
    bound: HashMap<ParamId, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore) -> Self {
        Self {
            g,
            store,
            bound: HashMap::new(),
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.g.param(self.store, id);
        self.bound.insert(id, v);
        v
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let w = self.p(w);
        let y = self.g.matmul(x, w)?;
        match b {
            Some(b) => {
                let b = self.p(b);
                self.g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn layer_norm(&mut self, x: Var, ln: &LayerNormIds) -> Result<Var> {
        let (gamma, beta) = (self.p(ln.gamma), self.p(ln.beta));
        self.g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Creates fresh parameters (seeded) or rebinds existing ones by name.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Builder<'a> {
    fn lookup(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
        if self.store.get(id).shape() != shape {
            return Err(Error::shape(
                "restore",
                format!("{name} {shape:?}"),
                format!("{:?}", self.store.get(id).shape()),
            ));
        }
        Ok(id)
    }

    fn make(&mut self, name: &str, shape: &[usize], init: impl FnOnce(&mut ChaCha8Rng) -> Tensor) -> Result<ParamId> {
        match &mut self.rng {
            Some(rng) => {
                let t = init(rng);
                self.store.add(name, t)
            }
            None => self.lookup(name, shape),
        }
    }

    /// `[rows, cols]` matrix, uniform in `±1/sqrt(rows)`.
    pub fn weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let bound = 1.0 / (rows as f64).sqrt();
        self.make(name, &[rows, cols], |rng| Tensor::uniform(&[rows, cols], bound, rng))
    }

    pub fn table(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> Result<ParamId> {
        self.make(name, &[rows, cols], |rng| Tensor::uniform(&[rows, cols], bound, rng))
    }

    pub fn zeros(&mut self, name: &str, n: usize) -> Result<ParamId> {
        self.make(name, &[n], |_| Tensor::zeros(&[n]))
    }

    pub fn layer_norm(&mut self, name: &str, n: usize) -> Result<LayerNormIds> {
        Ok(LayerNormIds {
            gamma: self.make(&format!("{name}.gamma"), &[n], |_| Tensor::from_vec(vec![1.0; n]))?,
            beta: self.zeros(&format!("{name}.beta"), n)?,
        })
    }

    fn embedder(&mut self, spec: &EmbedSpec, name: &str) -> Result<ScalarEmbedder> {
        match &mut self.rng {
            Some(rng) => ScalarEmbedder::new(spec.strategy, spec.dim, spec.range, spec.scale, self.store, name, rng),
            None => ScalarEmbedder::restore(spec.strategy, spec.dim, spec.range, spec.scale, self.store, name),
        }
    }
}

#[derive(Clone, Debug)]
enum Net {
    Lstm(lstm::LstmNet),
    Transformer(transformer::TransformerNet),
}

/// Encoder output: per-token states (`[batch * max_len, width]`, grouped
/// by batch element) plus the summary that seeds an LSTM decoder.
#[derive(Clone, Debug)]
pub struct EncoderOut {
    pub memory: Var,
    pub lens: Vec<usize>,
    pub max_len: usize,
    pub summary: Option<(Var, Var)>,
}

/// Per-stream decoding state, held as plain values so it outlives graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub streams: usize,
    /// Steps consumed so far.
    pub pos: usize,
    /// LSTM: per layer `(h, c)`, each `[streams * hidden]`.
    pub lstm: Vec<(Vec<f64>, Vec<f64>)>,
    /// Transformer: per layer, per stream, cached key and value rows.
    pub kv: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    /// Transformer cross-attention: per layer projected `(keys, values)`.
    pub cross: Vec<(Vec<f64>, Vec<f64>)>,
    pub src_lens: Vec<usize>,
    pub src_max: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: ModelConfig,
    vocab: Vocabulary,
}

const HEADER_KIND: &str = "decoder";

#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    tok: ParamId,
    desired: Option<ScalarEmbedder>,
    tracker: Option<ScalarEmbedder>,
    net: Net,
}

/// `[token ‖ desired ‖ tracker]` with each width checked against the config.
pub fn build_step_input(g: &mut Graph, cfg: &ModelConfig, token: Var, desired: Option<Var>, tracker: Option<Var>) -> Result<Var> {
    let mut parts = vec![token];
    let checks = [
        ("token", Some(token), cfg.token_dim),
        ("desired", desired, cfg.control.desired_width()),
        ("tracker", tracker, cfg.control.tracker_width()),
    ];
    for (what, var, want) in checks {
        let got = var.map_or(0, |v| *g.shape(v).last().unwrap_or(&0));
        if got != want {
            return Err(Error::shape("build_step_input", format!("{what} width {want}"), format!("{got}")));
        }
        if let (Some(v), false) = (var, what == "token") {
            parts.push(v);
        }
    }
    g.concat(&parts)
}

impl DecoderModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let b = Builder {
            store: &mut store,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        let (tok, desired, tracker, net) = Self::build(&config, b)?;
        Ok(Self {
            config,
            store,
            tok,
            desired,
            tracker,
            net,
        })
    }

    /// Rebinds a saved parameter store to its architecture.
    pub fn restore(config: ModelConfig, mut store: ParamStore) -> Result<Self> {
        let b = Builder { store: &mut store, rng: None };
        let (tok, desired, tracker, net) = Self::build(&config, b)?;
        Ok(Self {
            config,
            store,
            tok,
            desired,
            tracker,
            net,
        })
    }

    fn build(cfg: &ModelConfig, mut b: Builder<'_>) -> Result<(ParamId, Option<ScalarEmbedder>, Option<ScalarEmbedder>, Net)> {
        cfg.validate()?;
        let tok = b.table("tok_emb", cfg.vocab_size, cfg.token_dim, 0.1)?;
        let desired = cfg.control.desired.as_ref().map(|s| b.embedder(s, "ctrl.desired")).transpose()?;
        let tracker = cfg.control.tracker.as_ref().map(|s| b.embedder(s, "ctrl.tracker")).transpose()?;
        let net = match cfg.family {
            Family::Lstm => Net::Lstm(lstm::LstmNet::build(cfg, &mut b)?),
            Family::Transformer => Net::Transformer(transformer::TransformerNet::build(cfg, &mut b)?),
        };
        Ok((tok, desired, tracker, net))
    }

    pub fn desired_range(&self) -> Option<ValueRange> {
        self.desired.as_ref().map(|e| e.range)
    }

    pub fn has_tracker(&self) -> bool {
        self.tracker.is_some()
    }

    /// Control embeddings for one row per value, or `None` when absent.
    fn control_rows(&self, ctx: &mut Ctx<'_>, desired: &[i64], trackers: &[i64]) -> Result<(Option<Var>, Option<Var>)> {
        let d = match &self.desired {
            Some(e) => {
                let table = e.param().map(|p| ctx.p(p));
                Some(e.embed_batch(ctx.g, table, desired)?)
            }
            None => None,
        };
        let t = match &self.tracker {
            Some(e) => {
                let table = e.param().map(|p| ctx.p(p));
                Some(e.embed_batch(ctx.g, table, trackers)?)
            }
            None => None,
        };
        Ok((d, t))
    }

    /// Step inputs for rows `(token id, desired value, tracker value)`.
    pub(crate) fn step_inputs(&self, ctx: &mut Ctx<'_>, ids: &[usize], desired: &[i64], trackers: &[i64], positions: Option<&[usize]>) -> Result<Var> {
        let table = ctx.p(self.tok);
        let mut tok = ctx.g.embedding(table, ids)?;
        if let Some(pos) = positions {
            let pe = transformer::positions(pos, self.config.token_dim);
            let pe = ctx.g.constant(&[ids.len(), self.config.token_dim], pe)?;
            tok = ctx.g.add(tok, pe)?;
        }
        let (d, t) = self.control_rows(ctx, desired, trackers)?;
        build_step_input(ctx.g, &self.config, tok, d, t)
    }

    pub(crate) fn token_table(&self) -> ParamId {
        self.tok
    }

    /// Encodes ragged sources.
    pub fn encode(&self, g: &mut Graph, sources: &[Vec<usize>]) -> Result<EncoderOut> {
        if sources.is_empty() || sources.iter().any(Vec::is_empty) {
            return Err(Error::Data("encoder input must be non-empty".into()));
        }
        let mut ctx = Ctx::new(g, &self.store);
        match &self.net {
            Net::Lstm(n) => n.encode(self, &mut ctx, sources),
            Net::Transformer(n) => n.encode(self, &mut ctx, sources),
        }
    }

    /// Teacher-forced logits, time-major: row `t * B + b`.
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        batch.validate(&self.config)?;
        let mut ctx = Ctx::new(g, &self.store);
        match &self.net {
            Net::Lstm(n) => n.forward(self, &mut ctx, batch),
            Net::Transformer(n) => n.forward(self, &mut ctx, batch),
        }
    }

    /// Mean negative log-likelihood over non-padding targets.
    pub fn loss(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let logits = self.forward(g, batch)?;
        crate::train::nll_loss(g, logits, &batch.targets_time_major())
    }

    /// Fresh state for `streams` parallel decodes.
    pub fn start(&self, streams: usize, sources: Option<&[Vec<usize>]>) -> Result<DecoderState> {
        if self.config.has_encoder != sources.is_some() {
            return Err(Error::Data(format!(
                "source text must be given iff the model has an encoder (encoder: {})",
                self.config.has_encoder
            )));
        }
        if let Some(src) = sources {
            if src.len() != streams {
                return Err(Error::shape("start", format!("{streams} sources"), format!("{}", src.len())));
            }
        }
        let mut state = DecoderState {
            streams,
            pos: 0,
            lstm: Vec::new(),
            kv: Vec::new(),
            cross: Vec::new(),
            src_lens: Vec::new(),
            src_max: 0,
        };
        let mut g = Graph::inference();
        let enc = sources.map(|s| self.encode(&mut g, s)).transpose()?;
        let mut ctx = Ctx::new(&mut g, &self.store);
        match &self.net {
            Net::Lstm(n) => n.init_state(&self.config, &mut ctx, enc.as_ref(), &mut state),
            Net::Transformer(n) => n.init_state(&self.config, &mut ctx, enc.as_ref(), &mut state)?,
        }
        Ok(state)
    }

    /// Feeds one token per stream and returns next-token logits
    /// (`[streams * vocab]`, row per stream).
    pub fn step(&self, state: &mut DecoderState, tokens: &[usize], desired: &[i64], trackers: &[i64]) -> Result<Vec<f64>> {
        let n = state.streams;
        if tokens.len() != n || desired.len() != n || (self.tracker.is_some() && trackers.len() != n) {
            return Err(Error::shape("step", format!("{n} tokens/controls"), format!("{}", tokens.len())));
        }
        if state.pos >= self.config.max_seq_len {
            return Err(Error::shape("step", format!("at most {} steps", self.config.max_seq_len), format!("{}", state.pos + 1)));
        }
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &self.store);
        let logits = match &self.net {
            Net::Lstm(net) => net.step(self, &mut ctx, state, tokens, desired, trackers)?,
            Net::Transformer(net) => net.step(self, &mut ctx, state, tokens, desired, trackers)?,
        };
        state.pos += 1;
        Ok(g.value(logits).to_vec())
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        let header = Header {
            kind: HEADER_KIND.into(),
            config: self.config.clone(),
            vocab: vocab.clone(),
        };
        checkpoint::save(path, &header, &self.store)
    }

    pub fn load(path: &Path) -> Result<(Self, Vocabulary)> {
        let (header, store): (Header, ParamStore) = checkpoint::load(path)?;
        if header.kind != HEADER_KIND {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("expected a {HEADER_KIND} checkpoint, found {}", header.kind),
            });
        }
        if header.vocab.len() != header.config.vocab_size {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: "vocabulary size disagrees with the architecture".into(),
            });
        }
        Ok((Self::restore(header.config, store)?, header.vocab))
    }
}

#[cfg(test)]
mod tests;
