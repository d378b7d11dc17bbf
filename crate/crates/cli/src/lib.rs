//! The `hgcn` command suite. Machine-readable output goes to files or stdout;
//! progress and diagnostics go to stderr.

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use annotate_server::Store;
use clap::{Parser, Subcommand, ValueEnum};
use hgcn::bio::Span;
use hgcn::checkpoint;
use hgcn::corpus::{load_dataset, records_to_jsonl, AnnotatedSentence, CorpusError};
use hgcn::metrics::{evaluate, EvalReport};
use hgcn::model::HgcnModel;
use hgcn::scope::{pre_annotate, ExclusionPolicy, Lexicon, OpinionRule, ScopeError};
use hgcn::toy::{self, ToyOptions};
use hgcn::train::{train, TrainReport};
use hgcn::ModelConfig;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] hgcn::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Scope(#[from] ScopeError),
    #[error(transparent)]
    Store(#[from] annotate_server::StoreError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hgcn", version, about = "Hybrid graph convolutional network for aspect-level sentiment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    Nearest,
    Clause,
}

impl From<RuleArg> for OpinionRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Nearest => OpinionRule::Nearest,
            RuleArg::Clause => OpinionRule::Clause,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus a JSON-lines epoch log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Whitespace-separated pretrained vectors, one word per line.
        #[arg(long)]
        emb: Option<PathBuf>,
        /// JSON object with any subset of the model configuration keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Epoch log path; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Held-out data scored after every epoch.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Where to write the parameters of the best dev epoch.
        #[arg(long, requires = "dev")]
        best: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print accuracy, per-bucket accuracy and scope exact-match scores as JSON.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Write one JSON line per target with its polarity and scope prediction.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill scope_bio and provenance from lexicon-driven scope selection.
    AnnotateAuto {
        #[arg(long)]
        data: PathBuf,
        /// One opinion word per line; the bundled toy lexicon when omitted.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "nearest")]
        rule: RuleArg,
    },
    /// Write the constituent-token attention matrix of one sentence.
    DumpAttention {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sentence: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic toy corpus.
    GenToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        min_targets: usize,
        #[arg(long, default_value_t = 2)]
        max_targets: usize,
    },
    /// Start the annotation HTTP service.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "nearest")]
        rule: RuleArg,
        /// Directory of static UI files served at `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable output")
}

fn lexicon(path: Option<&Path>) -> Result<Lexicon> {
    match path {
        Some(p) => Ok(Lexicon::load(p)?),
        None => Ok(Lexicon::new(toy::lexicon_words())),
    }
}

pub fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    let config = match path {
        None => ModelConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|source| CliError::Json {
                path: p.display().to_string(),
                source,
            })?
        }
    };
    config.validate()?;
    Ok(config)
}

/// Metrics as printed by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutput {
    pub accuracy: f64,
    pub instances: usize,
    pub correct: usize,
    pub by_target_count: Vec<BucketOutput>,
    pub scope_precision: f64,
    pub scope_recall: f64,
    pub scope_f1: f64,
    pub scope_matched: usize,
    pub scope_predicted: usize,
    pub scope_gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketOutput {
    pub targets: usize,
    pub accuracy: f64,
    pub instances: usize,
    pub correct: usize,
}

impl From<&EvalReport> for EvalOutput {
    fn from(r: &EvalReport) -> Self {
        EvalOutput {
            accuracy: r.accuracy(),
            instances: r.overall.instances,
            correct: r.overall.correct,
            by_target_count: r
                .by_target_count
                .iter()
                .map(|(&targets, a)| BucketOutput {
                    targets,
                    accuracy: a.value(),
                    instances: a.instances,
                    correct: a.correct,
                })
                .collect(),
            scope_precision: r.scope.precision(),
            scope_recall: r.scope.recall(),
            scope_f1: r.scope.f1(),
            scope_matched: r.scope.matched,
            scope_predicted: r.scope.predicted,
            scope_gold: r.scope.gold,
        }
    }
}

/// One line of `predict` output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionLine {
    pub sentence: usize,
    pub target: usize,
    /// Inclusive token indices.
    pub span: [usize; 2],
    pub polarity: String,
    pub probabilities: [f64; 3],
    pub scope_bio: Vec<String>,
    pub scope: Option<[usize; 2]>,
}

pub struct TrainOutcome {
    pub model: HgcnModel,
    pub report: TrainReport,
}

/// Trains, writes the checkpoint and log, and hands back the model.
#[allow(clippy::too_many_arguments)]
pub fn train_command(
    data: &Path,
    emb: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    log: Option<&Path>,
    dev: Option<&Path>,
    best: Option<&Path>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<TrainOutcome> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let sentences = load_dataset(data)?;
    let dev_set = dev.map(load_dataset).transpose()?;
    let mut model = HgcnModel::for_corpus(cfg, &sentences, emb)?;
    let log_path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", out.display())));
    let mut log_file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut write_error = None;
    let report = train(&mut model, &sentences, dev_set.as_deref(), |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train acc {:.4}  scope match {:.4}{}  {:.2}s",
            e.epoch,
            e.loss,
            e.train_accuracy,
            e.scope_match,
            e.dev_accuracy.map(|a| format!("  dev acc {a:.4}")).unwrap_or_default(),
            e.seconds
        );
        match writeln!(log_file, "{}", to_json(e)) {
            Ok(()) => ControlFlow::Continue(()),
            Err(err) => {
                write_error = Some(err);
                ControlFlow::Break(())
            }
        }
    })?;
    if let Some(err) = write_error {
        return Err(io_err(&log_path)(err));
    }
    checkpoint::save(&model, out)?;
    if let (Some(path), Some((epoch, acc, params))) = (best, &report.best) {
        let mut best_model = model.clone();
        best_model.params = params.clone();
        checkpoint::save(&best_model, path)?;
        eprintln!("best dev accuracy {acc:.4} at epoch {epoch}, written to {}", path.display());
    }
    Ok(TrainOutcome { model, report })
}

pub fn eval_output(model: &HgcnModel, sentences: &[AnnotatedSentence]) -> Result<EvalOutput> {
    Ok(EvalOutput::from(&evaluate(model, sentences)?))
}

pub fn predictions(model: &HgcnModel, sentences: &[AnnotatedSentence]) -> Result<Vec<PredictionLine>> {
    let mut out = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        for (k, p) in model.predict(s)?.into_iter().enumerate() {
            out.push(PredictionLine {
                sentence: i,
                target: k,
                span: p.target.to_inclusive(),
                polarity: p.polarity.as_str().to_string(),
                probabilities: p.probabilities,
                scope_bio: p.tags.iter().map(|t| t.as_str().to_string()).collect(),
                scope: p.scope.map(Span::to_inclusive),
            });
        }
    }
    Ok(out)
}

/// Pre-annotates every target, replacing any existing scope.
pub fn annotate_auto(sentences: &[AnnotatedSentence], lexicon: &Lexicon, rule: OpinionRule) -> Result<String> {
    let policy = ExclusionPolicy::default();
    let mut records = Vec::with_capacity(sentences.len());
    for s in sentences {
        let pre = pre_annotate(s, lexicon, &policy, rule)?;
        let mut rec = s.to_record();
        for (t, p) in rec.targets.iter_mut().zip(pre) {
            t.scope_bio = Some(p.bio.iter().map(|x| x.as_str().to_string()).collect());
            t.opinion_spans = (!p.opinions.is_empty()).then(|| p.opinions.iter().map(|o| o.to_inclusive()).collect());
            t.provenance = Some(p.provenance);
        }
        records.push(rec);
    }
    Ok(records_to_jsonl(&records)?)
}

pub fn gen_toy(opts: &ToyOptions) -> Result<String> {
    Ok(records_to_jsonl(&toy::generate(opts))?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            data,
            emb,
            config,
            out,
            log,
            dev,
            best,
            epochs,
            seed,
        } => {
            let outcome = train_command(
                &data,
                emb.as_deref(),
                config.as_deref(),
                &out,
                log.as_deref(),
                dev.as_deref(),
                best.as_deref(),
                epochs,
                seed,
            )?;
            eprintln!(
                "trained {} epochs, checkpoint written to {}",
                outcome.report.epochs.len(),
                out.display()
            );
        }
        Command::Eval { data, ckpt } => {
            let model = checkpoint::load(&ckpt)?;
            let sentences = load_dataset(&data)?;
            println!("{}", to_json(&eval_output(&model, &sentences)?));
        }
        Command::Predict { data, ckpt, out } => {
            let model = checkpoint::load(&ckpt)?;
            let sentences = load_dataset(&data)?;
            let lines: String = predictions(&model, &sentences)?
                .iter()
                .map(|p| to_json(p) + "\n")
                .collect();
            write_file(&out, lines)?;
        }
        Command::AnnotateAuto {
            data,
            lexicon: lex,
            out,
            rule,
        } => {
            let sentences = load_dataset(&data)?;
            write_file(&out, annotate_auto(&sentences, &lexicon(lex.as_deref())?, rule.into())?)?;
        }
        Command::DumpAttention {
            data,
            ckpt,
            sentence,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let sentences = load_dataset(&data)?;
            let s = sentences.get(sentence).ok_or_else(|| {
                CliError::Usage(format!("sentence {sentence} out of range ({} sentences)", sentences.len()))
            })?;
            write_file(&out, to_json(&model.attention(s)?))?;
        }
        Command::GenToy {
            out,
            seed,
            size,
            min_targets,
            max_targets,
        } => {
            if min_targets == 0 || min_targets > max_targets {
                return Err(CliError::Usage("need 1 <= min-targets <= max-targets".into()));
            }
            let opts = ToyOptions {
                size,
                min_targets,
                max_targets,
                seed,
            };
            write_file(&out, gen_toy(&opts)?)?;
        }
        Command::Serve {
            data,
            port,
            store,
            lexicon: lex,
            rule,
            ui,
            host,
        } => {
            let sentences = load_dataset(&data)?;
            let store = Store::open(&store, &sentences, lexicon(lex.as_deref())?, ExclusionPolicy::default(), rule.into())?;
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| CliError::Usage(format!("bad address {host}:{port}: {e}")))?;
            let runtime = tokio::runtime::Runtime::new().map_err(io_err(Path::new("<runtime>")))?;
            runtime
                .block_on(annotate_server::serve(Arc::new(store), addr, ui))
                .map_err(io_err(Path::new("<server>")))?;
        }
    }
    Ok(())
}
