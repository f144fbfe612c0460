//! The `cws` command line.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::corpus::{read_corpus, Corpus, NormalizationConfig};
use crate::crf::CrfError;
use crate::eval::{EvalError, Scorer};
use crate::features::TemplateConfig;
use crate::lexicon::{self, Lexicon, LexiconError};
use crate::modelio::{self, ModelIoError};
use crate::segmenter::{SegmentOptions, Segmenter};
use crate::trainer::{self, ModelStart, Optimizer, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_MODEL: i32 = 3;
pub const EXIT_ALIGNMENT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "cws", version, about = "Chinese word segmentation with a lexicon-aware CRF")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment text, one sentence per line.
    Segment(SegmentArgs),
    /// Train a model from a segmented corpus.
    Train(TrainArgs),
    /// Score predicted segmentations against gold ones.
    Eval(EvalArgs),
    /// Word-list utilities.
    #[command(subcommand)]
    Dict(DictCommand),
    /// Print a model's weights as text.
    Dump(DumpArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model name or path.
    #[arg(long, default_value = "default")]
    model: String,
    /// Directory searched for named models [env: CWS_MODEL_DIR].
    #[arg(long)]
    model_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// User dictionary, one word per line.
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Print word/label pairs.
    #[arg(long)]
    pos: bool,
    /// Merge adjacent output words that form a user-dictionary word.
    #[arg(long)]
    force_dict_match: bool,
    /// Normalize full-width forms, digits and Latin letters for features.
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value = "-")]
    input: String,
    #[arg(long, default_value = "-")]
    output: String,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adf,
    Sgd,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Model to fine-tune from (name or path).
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    model_dir: Option<PathBuf>,
    /// Lexicon word lists (repeatable).
    #[arg(long)]
    dict: Vec<PathBuf>,
    /// Corpus tokens are word/label.
    #[arg(long)]
    pos: bool,
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long, default_value_t = 0.05)]
    eta0: f64,
    #[arg(long, default_value_t = 0.02)]
    rho: f64,
    #[arg(long, default_value_t = 1e-6)]
    l2: f64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "adf")]
    optimizer: OptimizerArg,
    /// Drop features seen fewer than N times.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    prune: Option<u64>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Both files are word/label; words must match in span and label.
    #[arg(long)]
    pos: bool,
}

#[derive(Debug, Subcommand)]
enum DictCommand {
    /// Union word lists into one file.
    Merge {
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Print per-list and total word counts.
    Stats {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct DumpArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Only list weights at least this large in magnitude.
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    #[arg(long, default_value = "-")]
    output: String,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Model(String),
    #[error("{0}")]
    Alignment(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Model(_) => EXIT_MODEL,
            CliError::Alignment(_) => EXIT_ALIGNMENT,
        }
    }
}

fn io_error(path: &str, e: io::Error) -> CliError {
    CliError::Io(format!("{path}: {e}"))
}

impl From<ModelIoError> for CliError {
    fn from(e: ModelIoError) -> Self {
        match e {
            ModelIoError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Model(e.to_string()),
        }
    }
}

impl From<LexiconError> for CliError {
    fn from(e: LexiconError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CrfError> for CliError {
    fn from(e: CrfError) -> Self {
        CliError::Model(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Corpus(_) => CliError::Io(e.to_string()),
            _ => CliError::Model(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Alignment(e.to_string())
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("cws: {e}");
            e.code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Segment(args) => segment(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Dict(DictCommand::Merge { out, inputs }) => dict_merge(&out, &inputs),
        Command::Dict(DictCommand::Stats { inputs }) => dict_stats(&inputs),
        Command::Dump(args) => dump(args),
    }
}

fn open_input(path: &str) -> Result<Box<dyn BufRead>, CliError> {
    if path == "-" {
        Ok(Box::new(BufReader::new(io::stdin().lock())))
    } else {
        let file = File::open(path).map_err(|e| io_error(path, e))?;
        Ok(Box::new(BufReader::new(file)))
    }
}

fn open_output(path: &str) -> Result<Box<dyn Write>, CliError> {
    if path == "-" {
        Ok(Box::new(BufWriter::new(io::stdout().lock())))
    } else {
        let file = File::create(path).map_err(|e| io_error(path, e))?;
        Ok(Box::new(BufWriter::new(file)))
    }
}

fn load_model(args: &ModelArgs) -> Result<crate::crf::CrfModel, CliError> {
    let path = modelio::resolve(&args.model, args.model_dir.as_deref())?;
    Ok(modelio::load(path)?)
}

fn read_corpus_file(path: &Path, pos: bool) -> Result<Corpus, CliError> {
    let file = File::open(path).map_err(|e| io_error(&path.display().to_string(), e))?;
    read_corpus(BufReader::new(file), pos).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

const SEGMENT_BATCH: usize = 4096;

fn segment(args: SegmentArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let dict = args.dict.as_ref().map(lexicon::load_wordlist).transpose()?;
    let options = SegmentOptions {
        pos: args.pos,
        force_dict_match: args.force_dict_match,
        normalization: if args.normalize {
            NormalizationConfig::all()
        } else {
            NormalizationConfig::default()
        },
    };
    if args.force_dict_match && dict.is_none() {
        return Err(CliError::Usage("--force-dict-match needs --dict".into()));
    }
    let segmenter = Segmenter::new(model, dict, options)?;
    let input = open_input(&args.input)?;
    let mut output = open_output(&args.output)?;
    let threads = args.threads as usize;

    let mut lines = input.lines();
    loop {
        let mut batch = Vec::with_capacity(SEGMENT_BATCH * threads);
        for line in lines.by_ref().take(SEGMENT_BATCH * threads) {
            batch.push(line.map_err(|e| io_error(&args.input, e))?);
        }
        if batch.is_empty() {
            break;
        }
        for out in segmenter.segment_lines(&batch, threads)? {
            writeln!(output, "{out}").map_err(|e| io_error(&args.output, e))?;
        }
    }
    output.flush().map_err(|e| io_error(&args.output, e))
}

/// Fails early if `out` cannot be written.
fn check_writable(out: &Path) -> Result<(), CliError> {
    let dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    tempfile::NamedTempFile::new_in(dir)
        .map(drop)
        .map_err(|e| CliError::Io(format!("{}: output is not writable: {e}", out.display())))
}

fn load_dicts(paths: &[PathBuf]) -> Result<Option<Lexicon>, CliError> {
    if paths.is_empty() {
        return Ok(None);
    }
    let lexicons = paths
        .iter()
        .map(lexicon::load_wordlist)
        .collect::<Result<Vec<_>, _>>()?;
    let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    let sources: Vec<(&str, &Lexicon)> = names.iter().map(String::as_str).zip(&lexicons).collect();
    Ok(Some(lexicon::merge(&sources).0))
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    check_writable(&args.out)?;
    let cfg = TrainConfig {
        epochs: args.epochs as usize,
        batch_size: args.batch as usize,
        eta0: args.eta0,
        rho: args.rho,
        l2: args.l2,
        seed: args.seed,
        optimizer: match args.optimizer {
            OptimizerArg::Adf => Optimizer::Adf,
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        dev_every: 1,
        prune: args.prune,
    };
    cfg.validate()?;
    let corpus = read_corpus_file(&args.corpus, args.pos)?;
    let dev = args.dev.as_deref().map(|p| read_corpus_file(p, args.pos)).transpose()?;
    let dict = load_dicts(&args.dict)?;
    let start = match &args.init {
        Some(init) => {
            let path = modelio::resolve(init, args.model_dir.as_deref())?;
            let model = modelio::load(path)?;
            if args.pos != model.scheme().is_joint() {
                return Err(CliError::Model(format!(
                    "initial model {} POS labels but --pos is {}",
                    if model.scheme().is_joint() { "has" } else { "has no" },
                    if args.pos { "set" } else { "not set" }
                )));
            }
            ModelStart::Warm {
                model,
                extra_lexicon: dict,
            }
        }
        None => {
            let mut templates = TemplateConfig::default();
            if args.normalize {
                templates.normalization = NormalizationConfig::all();
            }
            ModelStart::Cold {
                lexicon: dict.unwrap_or_default(),
                templates,
            }
        }
    };

    let quiet = args.quiet;
    let (model, report) = trainer::train(&corpus, dev.as_ref(), &cfg, start, |epoch, _| {
        if !quiet {
            eprintln!("{epoch}");
        }
    })?;
    modelio::save(&model, &args.out)?;
    let mut report_path = args.out.clone().into_os_string();
    report_path.push(".report.jsonl");
    let report_path = PathBuf::from(report_path);
    fs::write(&report_path, report.to_jsonl()).map_err(|e| io_error(&report_path.display().to_string(), e))?;
    if !quiet {
        eprintln!(
            "trained on {} sentences, {} features; model written to {}",
            report.sentences,
            model.num_features(),
            args.out.display()
        );
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let gold = read_corpus_file(&args.gold, args.pos)?;
    let pred = read_corpus_file(&args.pred, args.pos)?;
    if gold.len() != pred.len() {
        return Err(EvalError::SentenceCount {
            gold: gold.len(),
            pred: pred.len(),
        }
        .into());
    }
    let mut scorer = Scorer::new();
    for (g, p) in gold.examples.iter().zip(&pred.examples) {
        let outcome = match (&g.labels, &p.labels) {
            (Some(gl), Some(pl)) => scorer.add_labeled((&g.seg, gl), (&p.seg, pl)),
            _ => scorer.add(&g.seg, &p.seg),
        };
        outcome.map_err(|e| CliError::Alignment(format!("gold line {}: {e}", g.line)))?;
        if g.sentence.chars() != p.sentence.chars() {
            return Err(CliError::Alignment(format!(
                "gold line {} and prediction line {} have different characters",
                g.line, p.line
            )));
        }
    }
    println!("{}", scorer.result());
    Ok(())
}

fn dict_merge(out: &Path, inputs: &[PathBuf]) -> Result<(), CliError> {
    let merged = load_dicts(inputs)?.unwrap_or_default();
    let mut text = merged.words().join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(out, text).map_err(|e| io_error(&out.display().to_string(), e))
}

fn dict_stats(inputs: &[PathBuf]) -> Result<(), CliError> {
    let lexicons = inputs
        .iter()
        .map(lexicon::load_wordlist)
        .collect::<Result<Vec<_>, _>>()?;
    let names: Vec<String> = inputs
        .iter()
        .map(|p| {
            p.file_stem()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
        })
        .collect();
    let sources: Vec<(&str, &Lexicon)> = names.iter().map(String::as_str).zip(&lexicons).collect();
    let (_, stats) = lexicon::merge(&sources);
    for source in &stats.sources {
        println!("{}\t{}", source.name, source.words);
    }
    println!("total\t{}", stats.raw_total());
    println!("unique\t{}", stats.total);
    Ok(())
}

fn dump(args: DumpArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let mut output = open_output(&args.output)?;
    output
        .write_all(modelio::dump_text(&model, args.threshold).as_bytes())
        .and_then(|_| output.flush())
        .map_err(|e| io_error(&args.output, e))
}
