//! Experiment configuration, single-cell runs and the strategy grid.
//!
//! A config file is TOML with `[data]`, `[model]`, `[train]`, `[decode]`,
//! `[eval]`, `[paths]` and `[grid]` sections. Every cell of a grid writes
//! its artifacts under `<workdir>/cells/<hash>/`, where the hash covers
//! the cell's full configuration and nothing else.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::control::classifier::BagConfig;
use crate::control::{BagClassifier, ControlKind, LexiconOracle, SentimentClassifier};
use crate::data::{self, filter_examples, split_by_range, synth_corpus, Example, RangeSplit, SplitFractions, Splits, SynthParams, Vocabulary};
use crate::decode::{default_max_len, DecodeConfig, DecodeMode};
use crate::embedding::{StrategyKind, ValueRange};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Evaluator};
use crate::exec::Exec;
use crate::model::{ControlSpec, DecoderModel, Family, ModelConfig};
use crate::train::{self, TrainConfig, TrainOutcome};

pub const SEED_ENV: &str = "CTRLGEN_SEED";

/// A control strategy, or none for the baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Strategy(pub Option<StrategyKind>);

impl Strategy {
    pub const NO_CONTROL: Strategy = Strategy(None);
    pub const NO_CONTROL_NAME: &'static str = "no_control";
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0.map_or(Self::NO_CONTROL_NAME, StrategyKind::as_str))
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == Self::NO_CONTROL_NAME {
            Ok(Strategy(None))
        } else {
            s.parse().map(|k| Strategy(Some(k)))
        }
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Source of sentiment labels for generated text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClassifierChoice {
    /// The exact scorer behind the synthetic sentiment corpus.
    Lexicon,
    /// A bag-of-embeddings model trained on the training split.
    Bag,
    /// A saved bag-of-embeddings model.
    File(PathBuf),
}

impl fmt::Display for ClassifierChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassifierChoice::Lexicon => f.write_str("lexicon"),
            ClassifierChoice::Bag => f.write_str("bag"),
            ClassifierChoice::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl Serialize for ClassifierChoice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ClassifierChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match String::deserialize(d)?.as_str() {
            "lexicon" => ClassifierChoice::Lexicon,
            "bag" => ClassifierChoice::Bag,
            p => ClassifierChoice::File(PathBuf::from(p)),
        })
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<ValueRange>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(ValueRange),
        Many(Vec<ValueRange>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(r) => vec![r],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// TSV corpus; mutually exclusive with `synth`.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthParams>,
    #[serde(deserialize_with = "one_or_many")]
    pub observed: Vec<ValueRange>,
    pub evaluated: Vec<ValueRange>,
    #[serde(default = "default_fraction")]
    pub valid_fraction: f64,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    /// Longer targets are dropped at ingestion.
    #[serde(default = "default_max_target")]
    pub max_target_len: usize,
}

fn default_fraction() -> f64 {
    0.1
}
fn default_min_count() -> usize {
    1
}
fn default_max_target() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    pub strategy: Strategy,
    /// Width of learnable, sinusoidal and scalar_repeat embeddings.
    pub dim: usize,
    /// Multiplier applied to raw values by the scalar strategies.
    pub scale: f64,
    /// Feed the running control value; defaults to on where it exists.
    pub tracker: Option<bool>,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    /// Defaults to the largest of 4, 3, 2, 1 dividing the input width.
    pub n_heads: Option<usize>,
    pub max_seq_len: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            family: Family::Lstm,
            strategy: Strategy(Some(StrategyKind::Scalar)),
            dim: 8,
            scale: 1.0,
            tracker: None,
            token_dim: 64,
            hidden_dim: 128,
            n_layers: 1,
            n_heads: None,
            max_seq_len: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    /// Greedy for tasks with a source text, temperature otherwise.
    pub mode: Option<DecodeMode>,
    pub temperature: f64,
    pub max_len: Option<usize>,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            mode: None,
            temperature: 1.0,
            max_len: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Defaults to `lexicon` for synthetic data and `bag` otherwise.
    pub classifier: Option<ClassifierChoice>,
    pub batch_size: usize,
    pub curve_samples: usize,
    /// Defaults to the span of all configured ranges.
    pub curve_range: Option<ValueRange>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            classifier: None,
            batch_size: 64,
            curve_samples: 50,
            curve_range: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { workdir: PathBuf::from("runs") }
    }
}

/// Axes expanded by [`ExperimentConfig::expand`]; empty axes keep the
/// base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub families: Vec<Family>,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: ControlKind,
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub decode: DecodeSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub grid: Option<GridSection>,
}

fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `section.key=value` assignments; values are TOML literals, or
/// bare strings when they do not parse as one.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for ov in overrides {
        let (path, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(Error::Config(format!("override {ov:?} has an empty key")));
        }
        let mut cur = &mut *table;
        for k in &keys[..keys.len() - 1] {
            let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {ov:?}: {k} is not a section")))?;
        }
        cur.insert(keys[keys.len() - 1].to_string(), override_value(raw.trim()));
    }
    Ok(())
}

pub enum Classifier {
    Lexicon(LexiconOracle),
    Bag(BagClassifier),
}

impl Classifier {
    pub fn as_dyn(&self) -> &dyn SentimentClassifier {
        match self {
            Classifier::Lexicon(c) => c,
            Classifier::Bag(c) => c,
        }
    }
}

/// Everything derived from the data that a model needs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub splits: Splits,
    pub vocab: Vocabulary,
    pub max_target: usize,
}

impl ExperimentConfig {
    /// Parses, applies overrides and the seed override, then validates.
    pub fn parse(text: &str, overrides: &[String], seed_override: Option<u64>) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        apply_overrides(&mut table, overrides)?;
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, honouring the seed environment variable.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, overrides, env_seed()?)?;
        if let Some(corpus) = &cfg.data.corpus {
            if corpus.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.corpus = Some(base.join(corpus));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.corpus, &self.data.synth) {
            (Some(_), Some(_)) => return Err(Error::Config("data.corpus and data.synth are mutually exclusive".into())),
            (None, None) => return Err(Error::Config("one of data.corpus or data.synth is required".into())),
            _ => {}
        }
        if self.data.observed.is_empty() || self.data.evaluated.is_empty() {
            return Err(Error::Config("data.observed and data.evaluated must be non-empty".into()));
        }
        let f = (self.data.valid_fraction, self.data.test_fraction);
        if !(f.0 >= 0.0 && f.1 >= 0.0 && f.0 + f.1 < 1.0) {
            return Err(Error::Config(format!("split fractions {f:?} must be >= 0 and sum below 1")));
        }
        if self.model.tracker == Some(true) && !self.task.has_tracker() {
            return Err(Error::Config(format!("{} control has no running value, so model.tracker must be off", self.task)));
        }
        self.train.validate()?;
        self.decode_config(0)?.validate()?;
        self.model_config(4, 0)?.validate()
    }

    pub fn span(&self) -> ValueRange {
        self.data
            .observed
            .iter()
            .chain(&self.data.evaluated)
            .copied()
            .reduce(|a, b| a.union(&b))
            .expect("validated non-empty ranges")
    }

    pub fn range_split(&self) -> RangeSplit {
        RangeSplit {
            observed: self.data.observed.clone(),
            evaluated: self.data.evaluated.clone(),
        }
    }

    fn desired_range(&self) -> ValueRange {
        match self.task {
            ControlKind::Length => self.span(),
            ControlKind::Edit => ValueRange { lo: 0, hi: 10 },
            ControlKind::Sentiment => ValueRange { lo: 1, hi: 5 },
        }
    }

    fn decode_max_len(&self) -> usize {
        let hi = self.data.evaluated.iter().map(|r| r.hi).max().unwrap_or(0);
        self.decode.max_len.unwrap_or_else(|| default_max_len(self.task, hi))
    }

    /// Decoding settings; `max_target` is the longest target in the data.
    pub fn decode_config(&self, _max_target: usize) -> Result<DecodeConfig> {
        let mode = self.decode.mode.unwrap_or(if self.task.needs_source() {
            DecodeMode::Greedy
        } else {
            DecodeMode::Temperature
        });
        Ok(DecodeConfig {
            mode,
            temperature: self.decode.temperature,
            max_len: self.decode_max_len(),
            seed: self.seed,
        })
    }

    pub fn model_config(&self, vocab_size: usize, max_target: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let max_seq_len = m.max_seq_len.unwrap_or_else(|| self.decode_max_len().max(max_target + 1));
        let control = match m.strategy.0 {
            None => ControlSpec::none(self.task),
            Some(kind) => {
                let tracker_range = match self.task {
                    ControlKind::Length => ValueRange { lo: 0, hi: max_seq_len as i64 },
                    _ => ValueRange { lo: 0, hi: 10 },
                };
                let mut spec = ControlSpec::with_strategy(self.task, kind, m.dim, self.desired_range(), tracker_range);
                for e in spec.desired.iter_mut().chain(spec.tracker.iter_mut()) {
                    e.scale = m.scale;
                }
                if m.tracker == Some(false) {
                    spec.tracker = None;
                }
                spec
            }
        };
        let width = m.token_dim + control.desired_width() + control.tracker_width();
        let n_heads = match (m.family, m.n_heads) {
            (_, Some(h)) => h,
            (Family::Transformer, None) => [4, 3, 2, 1].into_iter().find(|h| width.is_multiple_of(*h)).unwrap_or(1),
            (Family::Lstm, None) => 1,
        };
        Ok(ModelConfig {
            family: m.family,
            vocab_size,
            token_dim: m.token_dim,
            hidden_dim: m.hidden_dim,
            n_layers: m.n_layers,
            n_heads,
            control,
            has_encoder: self.task.needs_source(),
            max_seq_len,
        })
    }

    pub fn is_synthetic(&self) -> bool {
        self.data.synth.is_some()
    }

    /// Loads or generates the corpus and annotates it.
    pub fn load_examples(&self) -> Result<Vec<Example>> {
        let raw = match (&self.data.corpus, &self.data.synth) {
            (Some(path), _) => data::read_tsv(path)?,
            (None, Some(params)) => synth_corpus(self.task, params, self.seed)?,
            (None, None) => return Err(Error::Config("no data source configured".into())),
        };
        let raw = filter_examples(raw, self.task, self.data.max_target_len);
        data::annotate_controls(&raw, self.task)
    }

    pub fn prepare(&self) -> Result<Prepared> {
        let examples = self.load_examples()?;
        let fractions = SplitFractions {
            valid: self.data.valid_fraction,
            test: self.data.test_fraction,
        };
        let splits = split_by_range(&examples, &self.range_split(), fractions, self.seed)?;
        let texts = splits
            .train
            .iter()
            .flat_map(|e| std::iter::once(e.target.as_slice()).chain(e.source.as_deref()));
        let vocab = Vocabulary::build(texts, self.data.min_count);
        let max_target = examples.iter().map(|e| e.target.len()).max().unwrap_or(0);
        Ok(Prepared { splits, vocab, max_target })
    }

    pub fn build_model(&self, prepared: &Prepared) -> Result<DecoderModel> {
        DecoderModel::new(self.model_config(prepared.vocab.len(), prepared.max_target)?, self.seed)
    }

    pub fn train_model(&self, prepared: &Prepared) -> Result<TrainOutcome> {
        let model = self.build_model(prepared)?;
        train::train(model, &prepared.splits.train, &prepared.splits.valid, &prepared.vocab, &self.train)
    }

    pub fn classifier_choice(&self) -> ClassifierChoice {
        self.eval.classifier.clone().unwrap_or(if self.is_synthetic() {
            ClassifierChoice::Lexicon
        } else {
            ClassifierChoice::Bag
        })
    }

    /// The sentiment classifier for this experiment; `None` for other tasks.
    pub fn classifier(&self, prepared: &Prepared) -> Result<Option<Classifier>> {
        if self.task != ControlKind::Sentiment {
            return Ok(None);
        }
        Ok(Some(match self.classifier_choice() {
            ClassifierChoice::Lexicon => Classifier::Lexicon(LexiconOracle::synthetic()),
            ClassifierChoice::Bag => {
                let cfg = BagConfig {
                    seed: self.seed,
                    ..BagConfig::default()
                };
                Classifier::Bag(BagClassifier::train(&prepared.splits.train, &cfg)?)
            }
            ClassifierChoice::File(p) => Classifier::Bag(BagClassifier::load(&p)?),
        }))
    }

    /// The config with location-only fields cleared.
    fn canonical(&self) -> ExperimentConfig {
        let mut c = self.clone();
        c.paths = Paths::default();
        c.grid = None;
        c
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.canonical()).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// One config per grid cell: families x strategies x seeds, with the
    /// no_control baseline always present.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        let grid = self.grid.clone().unwrap_or_default();
        let families = if grid.families.is_empty() { vec![self.model.family] } else { grid.families };
        let mut strategies = if grid.strategies.is_empty() { vec![self.model.strategy] } else { grid.strategies };
        if !strategies.contains(&Strategy::NO_CONTROL) {
            strategies.insert(0, Strategy::NO_CONTROL);
        }
        let seeds = if grid.seeds.is_empty() { vec![self.seed] } else { grid.seeds };
        let mut out = Vec::new();
        for &family in &families {
            for &strategy in &strategies {
                for &seed in &seeds {
                    let mut c = self.clone();
                    c.grid = None;
                    c.model.family = family;
                    c.model.strategy = strategy;
                    c.seed = seed;
                    c.train.seed = seed;
                    out.push(c);
                }
            }
        }
        out
    }
}

/// Seed from the environment, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Artifacts of one trained and evaluated cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub dir: PathBuf,
    pub report: EvalReport,
}

pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";

/// A trained model reloaded from its checkpoint, with the data it was
/// trained on.
pub struct TrainedCell {
    pub prepared: Prepared,
    pub model: DecoderModel,
    pub vocab: Vocabulary,
    pub classifier: Option<Classifier>,
    pub best_epoch: usize,
}

/// Trains one configuration and writes `config.json`, `manifest.jsonl`,
/// `metrics.csv`, the checkpoint and, for a trained sentiment classifier,
/// its checkpoint into `dir`.
///
/// The returned model is the reloaded checkpoint, so evaluating it
/// reproduces a later evaluation of the same file.
pub fn train_cell(cfg: &ExperimentConfig, dir: &Path) -> Result<TrainedCell> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg.canonical())?)?;
    let prepared = cfg.prepare()?;
    data::write_manifest(&dir.join("manifest.jsonl"), &prepared.splits)?;
    let outcome = cfg.train_model(&prepared)?;
    train::write_metrics(&dir.join("metrics.csv"), &outcome.log)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    outcome.model.save(&ckpt, &prepared.vocab)?;
    let (model, vocab) = DecoderModel::load(&ckpt)?;
    let classifier = cfg.classifier(&prepared)?;
    if let Some(Classifier::Bag(bag)) = &classifier {
        bag.save(&dir.join(CLASSIFIER_FILE))?;
    }
    Ok(TrainedCell {
        prepared,
        model,
        vocab,
        classifier,
        best_epoch: outcome.best_epoch,
    })
}

/// Trains, checkpoints and evaluates one configuration in `dir`.
pub fn run_cell(cfg: &ExperimentConfig, dir: &Path, exec: Exec) -> Result<CellResult> {
    let cell = train_cell(cfg, dir)?;
    let clf = cell.classifier.as_ref().map(Classifier::as_dyn);
    let report = evaluate(cfg, &cell.prepared, &cell.model, &cell.vocab, clf, None, exec)?;
    fs::write(dir.join("report.txt"), report.to_table())?;
    fs::write(dir.join(REPORT_FILE), report.to_json())?;
    Ok(CellResult {
        dir: dir.to_path_buf(),
        report,
    })
}

/// Directory of a cell under `root`.
pub fn cell_dir(cfg: &ExperimentConfig, root: &Path) -> PathBuf {
    root.join("cells").join(cfg.hash())
}

/// Range report of `model` on the experiment's held-out intervals.
pub fn evaluate(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    model: &DecoderModel,
    vocab: &Vocabulary,
    clf: Option<&dyn SentimentClassifier>,
    baseline: Option<&DecoderModel>,
    exec: Exec,
) -> Result<EvalReport> {
    let mut ev = Evaluator::new(model, vocab).with_exec(exec).with_classifier(clf);
    ev.batch_size = cfg.eval.batch_size;
    ev.range_report(&prepared.splits, &cfg.decode_config(prepared.max_target)?, baseline)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Done { hash: String, report: EvalReport },
    Skipped { reason: String },
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub task: String,
    pub family: String,
    pub strategy: String,
    pub seed: u64,
    #[serde(flatten)]
    pub status: CellStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".to_string())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn grid_cell(cfg: &ExperimentConfig, root: &Path, exec: Exec, force: bool) -> GridRow {
    let row = |status| GridRow {
        task: cfg.task.to_string(),
        family: cfg.model.family.to_string(),
        strategy: cfg.model.strategy.to_string(),
        seed: cfg.seed,
        status,
    };
    // construction-time rejections are expected grid holes, not crashes
    if let Err(e) = cfg.validate() {
        return row(CellStatus::Skipped { reason: one_line(&e.to_string()) });
    }
    let hash = cfg.hash();
    let dir = cell_dir(cfg, root);
    if !force {
        if let Ok(text) = fs::read_to_string(dir.join(REPORT_FILE)) {
            if let Ok(report) = serde_json::from_str::<EvalReport>(&text) {
                return row(CellStatus::Done { hash, report });
            }
        }
    }
    match panic::catch_unwind(AssertUnwindSafe(|| run_cell(cfg, &dir, exec))) {
        Ok(Ok(res)) => row(CellStatus::Done { hash, report: res.report }),
        Ok(Err(e)) => row(CellStatus::Failed { reason: one_line(&e.to_string()) }),
        Err(p) => row(CellStatus::Failed {
            reason: one_line(&format!("panic: {}", panic_message(p))),
        }),
    }
}

/// Runs every cell of every config and writes `merged.txt` and
/// `merged.json` under `root`. Cells whose report already exists are
/// reused unless `force` is set.
pub fn run_grid(configs: &[ExperimentConfig], root: &Path, exec: Exec, force: bool) -> Result<GridReport> {
    fs::create_dir_all(root)?;
    let cells: Vec<ExperimentConfig> = configs.iter().flat_map(ExperimentConfig::expand).collect();
    let rows = exec.map(&cells, |c| grid_cell(c, root, Exec::Sequential, force));
    let report = GridReport { rows };
    fs::write(root.join("merged.txt"), report.to_table())?;
    fs::write(root.join("merged.json"), report.to_json())?;
    Ok(report)
}

impl GridReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid report serializes")
    }

    /// One line per (cell, interval), or one status line per skipped or
    /// failed cell.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:<12} {:<14} {:>5}  {:<10} {:>6} {:>9} {:>8} {:>9} {:>7}",
            "task", "family", "strategy", "seed", "interval", "n", "PPL", "Acc", "MSE", "BLEU"
        );
        for r in &self.rows {
            let head = format!("{:<10} {:<12} {:<14} {:>5}", r.task, r.family, r.strategy, r.seed);
            match &r.status {
                CellStatus::Done { report, .. } => {
                    for i in &report.intervals {
                        let _ = writeln!(
                            out,
                            "{head}  {:<10} {:>6} {:>9.3} {:>8.2} {:>9.3} {:>7}",
                            i.range.to_string(),
                            i.n_examples,
                            i.ppl,
                            i.accuracy,
                            i.mse,
                            i.bleu.map_or_else(|| "-".to_string(), |b| format!("{b:.2}"))
                        );
                    }
                }
                CellStatus::Skipped { reason } => {
                    let _ = writeln!(out, "{head}  SKIPPED({reason})");
                }
                CellStatus::Failed { reason } => {
                    let _ = writeln!(out, "{head}  FAILED({reason})");
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
task = "length"
seed = 3

[data]
synth = { n = 200, lengths = "3..10" }
observed = "3..7"
evaluated = ["3..7", "8..10"]

[model]
strategy = "scalar"
token_dim = 8
hidden_dim = 16

[train]
epochs = 1
batch_size = 16

[decode]
mode = "greedy"
"#;

    fn parse(overrides: &[&str]) -> Result<ExperimentConfig> {
        let ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        ExperimentConfig::parse(BASE, &ov, None)
    }

    #[test]
    fn parses_sections_and_defaults() {
        let c = parse(&[]).unwrap();
        assert_eq!(c.task, ControlKind::Length);
        assert_eq!(c.data.observed, vec![ValueRange { lo: 3, hi: 7 }]);
        assert_eq!(c.data.evaluated.len(), 2);
        assert_eq!(c.model.strategy, Strategy(Some(StrategyKind::Scalar)));
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.train.learning_rate, 1e-3);
        let d = c.decode_config(0).unwrap();
        assert_eq!((d.mode, d.max_len, d.seed), (DecodeMode::Greedy, 15, 3));
        let m = c.model_config(20, 10).unwrap();
        assert_eq!(m.max_seq_len, 15);
        assert_eq!(m.control.desired.unwrap().range, ValueRange { lo: 3, hi: 10 });
        assert_eq!(m.control.tracker.unwrap().range, ValueRange { lo: 0, hi: 15 });
    }

    #[test]
    fn overrides_and_seed_take_precedence() {
        let c = ExperimentConfig::parse(
            BASE,
            &["model.family=transformer".into(), "train.learning_rate=0.01".into(), "model.strategy=no_control".into()],
            Some(11),
        )
        .unwrap();
        assert_eq!(c.model.family, Family::Transformer);
        assert_eq!(c.model.strategy, Strategy::NO_CONTROL);
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!((c.seed, c.train.seed), (11, 11));
        assert!(parse(&["nonsense"]).is_err());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = parse(&["model.hiden_dim=3"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(parse(&["train.optimizer=rmsprop"]).is_err());
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let e = parse(&["task=sentiment", "model.tracker=true"]).unwrap_err();
        assert!(e.to_string().contains("tracker"), "{e}");
        let e = parse(&["model.family=transformer", "model.n_heads=4", "model.token_dim=8"]).unwrap_err();
        assert!(e.to_string().contains("10") && e.to_string().contains('4'), "{e}");
        assert!(parse(&["model.strategy=sinusoidal", "model.dim=3"]).is_err());
        assert!(parse(&["data.corpus=x.tsv"]).is_err());
        assert!(parse(&["train.batch_size=0"]).is_err());
        assert!(parse(&["decode.temperature=0"]).is_err());
    }

    #[test]
    fn heads_default_to_a_divisor_of_the_width() {
        let c = parse(&["model.family=transformer", "model.token_dim=8"]).unwrap();
        // 8 + 1 + 1
        assert_eq!(c.model_config(10, 5).unwrap().n_heads, 2);
        let c = parse(&["model.family=transformer", "model.token_dim=7"]).unwrap();
        assert_eq!(c.model_config(10, 5).unwrap().n_heads, 3);
    }

    #[test]
    fn sentiment_models_have_no_tracker() {
        let c = parse(&["task=sentiment", "data.observed=[\"1..2\", \"4..5\"]", "data.evaluated=[\"1..5\"]"]).unwrap();
        let m = c.model_config(10, 5).unwrap();
        assert!(m.control.tracker.is_none());
        assert_eq!(m.control.desired.unwrap().range, ValueRange { lo: 1, hi: 5 });
        assert_eq!(c.data.observed.len(), 2);
        assert_eq!(c.classifier_choice(), ClassifierChoice::Lexicon);
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = parse(&[]).unwrap();
        let b = parse(&["paths.workdir=elsewhere"]).unwrap();
        let c = parse(&["train.epochs=2"]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn expansion_always_includes_the_baseline() {
        let c = parse(&["grid.strategies=[\"scalar\", \"learnable\"]", "grid.families=[\"lstm\"]", "grid.seeds=[1, 2]"]).unwrap();
        let cells = c.expand();
        assert_eq!(cells.len(), 6);
        let names: Vec<String> = cells.iter().map(|c| format!("{}/{}", c.model.strategy, c.seed)).collect();
        assert_eq!(names, ["no_control/1", "no_control/2", "scalar/1", "scalar/2", "learnable/1", "learnable/2"]);
        assert!(cells.iter().all(|c| c.grid.is_none() && c.train.seed == c.seed));
    }

    #[test]
    fn cell_writes_its_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let c = parse(&[]).unwrap();
        let res = run_cell(&c, dir.path(), Exec::Sequential).unwrap();
        for f in ["config.json", "manifest.jsonl", "metrics.csv", CHECKPOINT_FILE, "report.txt", REPORT_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(res.report.intervals.len(), 2);
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 2);
    }

    #[test]
    fn grid_records_skipped_and_reuses_finished_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = parse(&["model.family=transformer", "model.token_dim=8", "grid.strategies=[\"scalar\", \"learnable\"]"]).unwrap();
        c.model.n_heads = Some(4);
        c.model.dim = 2;
        let report = run_grid(std::slice::from_ref(&c), dir.path(), Exec::Sequential, false).unwrap();
        let statuses: Vec<&str> = report
            .rows
            .iter()
            .map(|r| match r.status {
                CellStatus::Done { .. } => "done",
                CellStatus::Skipped { .. } => "skipped",
                CellStatus::Failed { .. } => "failed",
            })
            .collect();
        // widths: 8 (no control), 10 (scalar), 12 (learnable, dim 2)
        assert_eq!(statuses, ["done", "skipped", "done"]);
        let table = fs::read_to_string(dir.path().join("merged.txt")).unwrap();
        assert!(table.contains("SKIPPED(configuration error"), "{table}");
        let first = fs::read(dir.path().join("merged.json")).unwrap();
        let again = run_grid(&[c], dir.path(), Exec::Sequential, false).unwrap();
        assert_eq!(again, report);
        assert_eq!(fs::read(dir.path().join("merged.json")).unwrap(), first);
    }
}
