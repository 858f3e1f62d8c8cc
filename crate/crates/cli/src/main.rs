//! `ctrlgen`: data preparation, training, evaluation, generation and the
//! strategy grid. Exit codes: 0 success, 2 configuration error, 3 data
//! or I/O error, 4 training divergence.

use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctrlgen::control::ControlKind;
use ctrlgen::data::{self, detokenize, filter_examples, synth_corpus, tokenize, SynthParams};
use ctrlgen::decode::{batch_generate, Request};
use ctrlgen::embedding::ValueRange;
use ctrlgen::eval::{curve_csv, Evaluator};
use ctrlgen::exec::Exec;
use ctrlgen::experiment::{self, cell_dir, run_grid, train_cell, Classifier, ExperimentConfig};
use ctrlgen::model::DecoderModel;
use ctrlgen::{Error, Result};

#[derive(Parser)]
#[command(name = "ctrlgen", version, about = "Scalar-controlled text generation")]
struct Cli {
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize and annotate a text corpus into a TSV file.
    Ingest(IngestArgs),
    /// Write a synthetic corpus.
    Synth(SynthArgs),
    /// Train one configuration and write its checkpoint.
    Train(ConfigArgs),
    /// Per-interval report of a checkpoint on the configured splits.
    Evaluate(EvaluateArgs),
    /// Print generations, one per line, prefixed by `c=<value>\t`.
    Generate(GenerateArgs),
    /// Mean realized value per desired value as CSV.
    Curve(CurveArgs),
    /// Train and evaluate every cell of one or more configs.
    Grid(GridArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set model.family=transformer`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workdir: Option<PathBuf>,
}

impl ConfigArgs {
    /// Precedence: `--seed`, then the seed environment variable, then
    /// `--set`, then the file.
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config, &self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if let Some(w) = &self.workdir {
            cfg.paths.workdir = w.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    task: ControlKind,
    /// Lines of `target`, `c<TAB>target`, `source<TAB>target` or
    /// `c<TAB>source<TAB>target`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Drop targets longer than this many tokens.
    #[arg(long, default_value_t = 50)]
    max_len: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    task: ControlKind,
    #[arg(long)]
    n: usize,
    /// Target lengths for the length task, source lengths for edit.
    #[arg(long, default_value = "3..20")]
    lengths: ValueRange,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Defaults to the checkpoint of the config's cell.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Checkpoint whose PPL is reported alongside.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Desired values as a range `lo..hi` or a single value.
    #[arg(long)]
    values: ValueRange,
    /// Generations per value.
    #[arg(long, short, default_value_t = 1)]
    n: usize,
    /// Source sentence for edit control; defaults to test sources.
    #[arg(long)]
    source: Option<String>,
}

#[derive(Args)]
struct CurveArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to `eval.curve_range`, then the span of all ranges.
    #[arg(long)]
    range: Option<ValueRange>,
    /// Defaults to `eval.curve_samples`.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct GridArgs {
    /// One or more TOML experiment configs.
    #[arg(long = "config", short, required = true)]
    configs: Vec<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Defaults to the first config's `paths.workdir`.
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Retrain cells that already have a report.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ctrlgen: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command, exec: Exec) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(&a),
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Evaluate(a) => evaluate(&a, exec),
        Command::Generate(a) => generate(&a, exec),
        Command::Curve(a) => curve(&a, exec),
        Command::Grid(a) => grid(&a, exec),
    }
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let raw = data::read_tsv(&a.input)?;
    let total = raw.len();
    let kept = filter_examples(raw, a.task, a.max_len);
    let annotated = data::annotate_controls(&kept, a.task)?;
    let rows: Vec<data::RawExample> = annotated
        .into_iter()
        .map(|e| data::RawExample {
            source: e.source,
            target: e.target,
            c: Some(e.c),
        })
        .collect();
    data::write_tsv(&a.output, &rows)?;
    eprintln!("kept {} of {total} examples", rows.len());
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let params = SynthParams { n: a.n, lengths: a.lengths };
    data::write_tsv(&a.output, &synth_corpus(a.task, &params, a.seed)?)
}

fn train(a: &ConfigArgs) -> Result<()> {
    let cfg = a.load()?;
    let dir = cell_dir(&cfg, &cfg.paths.workdir);
    let cell = train_cell(&cfg, &dir)?;
    println!("{}", dir.join(experiment::CHECKPOINT_FILE).display());
    eprintln!("best epoch {}", cell.best_epoch);
    Ok(())
}

fn checkpoint_path(cfg: &ExperimentConfig, given: &Option<PathBuf>) -> PathBuf {
    given
        .clone()
        .unwrap_or_else(|| cell_dir(cfg, &cfg.paths.workdir).join(experiment::CHECKPOINT_FILE))
}

struct Loaded {
    cfg: ExperimentConfig,
    prepared: experiment::Prepared,
    model: DecoderModel,
    vocab: data::Vocabulary,
    classifier: Option<Classifier>,
}

fn load(a: &ConfigArgs, checkpoint: &Option<PathBuf>) -> Result<Loaded> {
    let cfg = a.load()?;
    let (model, vocab) = DecoderModel::load(&checkpoint_path(&cfg, checkpoint))?;
    if model.config.control.kind != cfg.task {
        return Err(Error::Config(format!(
            "checkpoint controls {}, config task is {}",
            model.config.control.kind, cfg.task
        )));
    }
    let prepared = cfg.prepare()?;
    let classifier = cfg.classifier(&prepared)?;
    Ok(Loaded {
        cfg,
        prepared,
        model,
        vocab,
        classifier,
    })
}

fn evaluate(a: &EvaluateArgs, exec: Exec) -> Result<()> {
    let l = load(&a.config, &a.checkpoint)?;
    let baseline = a.baseline.as_deref().map(DecoderModel::load).transpose()?.map(|(m, _)| m);
    let clf = l.classifier.as_ref().map(Classifier::as_dyn);
    let report = experiment::evaluate(&l.cfg, &l.prepared, &l.model, &l.vocab, clf, baseline.as_ref(), exec)?;
    print!("{}", if a.json { report.to_json() + "\n" } else { report.to_table() });
    Ok(())
}

fn sources(l: &Loaded, given: &Option<String>) -> Option<Vec<Vec<String>>> {
    if !l.cfg.task.needs_source() {
        return None;
    }
    Some(match given {
        Some(s) => vec![tokenize(s)],
        None => l
            .prepared
            .splits
            .intervals
            .iter()
            .flat_map(|(_, exs)| exs.iter().filter_map(|e| e.source.clone()))
            .collect(),
    })
}

fn generate(a: &GenerateArgs, exec: Exec) -> Result<()> {
    let l = load(&a.config, &a.checkpoint)?;
    let srcs = sources(&l, &a.source);
    let mut requests = Vec::new();
    for d in a.values.values() {
        for i in 0..a.n {
            let source = srcs.as_ref().filter(|s| !s.is_empty()).map(|s| s[i % s.len()].clone());
            requests.push(Request { desired: d, source });
        }
    }
    let cfg = l.cfg.decode_config(l.prepared.max_target)?;
    let out = batch_generate(&l.model, &l.vocab, &requests, &cfg, l.cfg.eval.batch_size, exec)?;
    let stdout = io::stdout();
    let mut w = stdout.lock();
    for (req, g) in requests.iter().zip(out) {
        let g = g?;
        writeln!(w, "c={}\t{}", req.desired, detokenize(&g.tokens))?;
    }
    Ok(())
}

fn curve(a: &CurveArgs, exec: Exec) -> Result<()> {
    let l = load(&a.config, &a.checkpoint)?;
    let range = a.range.or(l.cfg.eval.curve_range).unwrap_or_else(|| l.cfg.span());
    let n = a.samples.unwrap_or(l.cfg.eval.curve_samples);
    let srcs = sources(&l, &None);
    let mut ev = Evaluator::new(&l.model, &l.vocab)
        .with_exec(exec)
        .with_classifier(l.classifier.as_ref().map(Classifier::as_dyn));
    ev.batch_size = l.cfg.eval.batch_size;
    let points = ev.emit_curve(range, n, srcs.as_deref(), &l.cfg.decode_config(l.prepared.max_target)?)?;
    print!("{}", curve_csv(&points));
    Ok(())
}

fn grid(a: &GridArgs, exec: Exec) -> Result<()> {
    let configs = a
        .configs
        .iter()
        .map(|p| ExperimentConfig::load(p, &a.overrides))
        .collect::<Result<Vec<_>>>()?;
    let root = a.workdir.clone().unwrap_or_else(|| configs[0].paths.workdir.clone());
    let report = run_grid(&configs, &root, exec, a.force)?;
    print!("{}", report.to_table());
    eprintln!("merged report in {}", root.join("merged.txt").display());
    Ok(())
}
