//! Command implementations behind the `phredgan` binary.

pub mod manifest;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use phredgan::checkpoint::Snapshot;
use phredgan::config::{ConfigError, RunConfig, Variant};
use phredgan::corpus::{ingest, ingest_with, Conversation, Format, EOS};
use phredgan::inference::{alpha_search, default_alpha_grid, generate, ContextTurn, GenerateRequest};
use phredgan::metrics::{evaluate_pairs, load_eval_pairs, perplexity, EvalPair, EvalReport};
use phredgan::model::PhredModel;
use phredgan::training::{train, TrainOutputs};
use phredgan_serve::{SeedMode, ServeConfig};
use serde::{Deserialize, Serialize};

pub use manifest::{RunManifest, MANIFEST_FILE};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, configuration or input layout. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Anything that failed while doing the work. Exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "phredgan", version, about = "Persona-conditioned adversarial dialogue models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a dialogue corpus.
    Train(TrainArgs),
    /// Score hypotheses against references, optionally with model perplexity.
    Eval(EvalArgs),
    /// Generate ranked responses for the last turn of every conversation.
    Generate(GenerateArgs),
    /// Search the noise scale that the adversarial discriminator prefers.
    AlphaSearch(AlphaSearchArgs),
    /// Write a synthetic persona corpus.
    Synth(SynthArgs),
    /// Run the HTTP chat service.
    Serve(ServeArgs),
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: ConfigError| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat JSON configuration file.
    #[arg(long, required_unless_present = "manifest")]
    pub config: Option<PathBuf>,
    /// Corpus directory holding train.jsonl and optionally valid.jsonl and attributes.txt.
    #[arg(long, required_unless_present = "manifest")]
    pub data: Option<PathBuf>,
    /// Output directory for the manifest, log, checkpoints and final snapshot.
    #[arg(long)]
    pub out: PathBuf,
    /// Model variant: phred, hredgan, phredgan_a or phredgan_d. Overrides the config.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Seed for initialization and training. Overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON-lines speaker records keyed by conversation id, for corpora without inline speakers.
    #[arg(long)]
    pub paired: Option<PathBuf>,
    /// Repeat the run recorded in this manifest.
    #[arg(long, conflicts_with_all = ["config", "data", "variant", "seed", "paired"])]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON-lines file of {context_id, hypothesis, reference}.
    #[arg(long, conflicts_with_all = ["hyp", "reference"], required_unless_present_all = ["hyp", "reference"])]
    pub pairs: Option<PathBuf>,
    /// Plain text hypotheses, one per line.
    #[arg(long, requires = "reference")]
    pub hyp: Option<PathBuf>,
    /// Plain text references, one per line.
    #[arg(long = "ref", requires = "hyp")]
    pub reference: Option<PathBuf>,
    /// Snapshot directory; with --data, adds teacher-forced perplexity.
    #[arg(long, requires = "data")]
    pub snapshot: Option<PathBuf>,
    /// Dialogue file for perplexity.
    #[arg(long, requires = "snapshot")]
    pub data: Option<PathBuf>,
    /// Seed for the perplexity noise draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub snapshot: PathBuf,
    /// Dialogue file; the last turn of each conversation is the reference.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of candidates per context.
    #[arg(long = "L", default_value_t = phredgan_serve::DEFAULT_CANDIDATES)]
    pub candidates: usize,
    /// Noise standard deviation; defaults to the training value.
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Maximum response length; defaults to the model's.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only the first N conversations.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AlphaSearchArgs {
    #[arg(long)]
    pub snapshot: PathBuf,
    /// Validation dialogue file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated noise scales; defaults to 1, 2, ..., 30.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f32>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub conversations: usize,
    #[arg(long, default_value_t = 2)]
    pub attributes: usize,
    /// Probability that a word is drawn from the speaker's signature block.
    #[arg(long, default_value_t = 0.8)]
    pub signature_rate: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Directory whose subdirectories are snapshots.
    #[arg(long)]
    pub snapshot_dir: PathBuf,
    /// Append session transcripts as JSON lines under this directory.
    #[arg(long)]
    pub persist: Option<PathBuf>,
    /// fixed: noise seeded from the transcript length; entropy: fresh noise per request.
    #[arg(long, default_value = "fixed")]
    pub seed_mode: SeedMode,
    /// Base seed for --seed-mode fixed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Static files to serve under /ui.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Generate(a) => cmd_generate(&a).map(|_| ()),
        Command::AlphaSearch(a) => cmd_alpha_search(&a).map(|_| ()),
        Command::Synth(a) => cmd_synth(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("serializable"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist", path.display())))
    }
}

fn load_snapshot(dir: &Path) -> Result<Snapshot, CliError> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::Usage(format!("no snapshot at {}", dir.display())));
    }
    Snapshot::load(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn load_conversations(snap: &Snapshot, path: &Path) -> Result<Vec<Conversation>, CliError> {
    require_file(path)?;
    let (convs, stats) = ingest_with(path, &Format::JsonLines, &snap.vocab, &snap.attributes).map_err(runtime)?;
    log::info!("read {} conversations from {} (OOV rate {:.4})", convs.len(), path.display(), stats.oov_rate());
    Ok(convs)
}

/// Summary written next to a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub steps: usize,
    pub final_mle_loss: Option<f64>,
    pub validation_perplexity: Option<f64>,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<PathBuf>,
    pub snapshot: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary, CliError> {
    let (config, data, paired, config_path) = match &args.manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            if m.command != "train" {
                return Err(CliError::Usage(format!("{} records a `{}` run, not `train`", path.display(), m.command)));
            }
            m.verify_inputs()?;
            let config = RunConfig::from_json(&m.config.clone().unwrap_or_default().to_string())?;
            let path_arg = |k: &str| m.arguments.get(k).and_then(|v| v.as_str()).map(PathBuf::from);
            let data = path_arg("data").ok_or_else(|| CliError::Usage("manifest lacks the data argument".into()))?;
            (config, data, path_arg("paired"), None)
        }
        None => {
            let path = args.config.as_ref().expect("required by clap");
            let mut config = RunConfig::load(path)?;
            if let Some(v) = args.variant {
                config.model.variant = v;
                if v != Variant::PhredganD && config.train.lambda_g_att.is_some_and(|x| x != 0.0) {
                    log::warn!("dropping lambda_g_att for {v}");
                    config.train.lambda_g_att = None;
                }
            }
            if let Some(s) = args.seed {
                config.train.seed = s;
            }
            config.validate()?;
            (config, args.data.clone().expect("required by clap"), args.paired.clone(), Some(path.clone()))
        }
    };
    let train_file = data.join("train.jsonl");
    let attributes_file = data.join("attributes.txt");
    let valid_file = data.join("valid.jsonl");
    require_file(&train_file)?;

    let mut manifest = RunManifest::new("train", config.train.seed, &args.out).argument("data", &data).input(&train_file)?;
    manifest.config = Some(config.to_json());
    if let Some(p) = &config_path {
        manifest = manifest.argument("config", p);
    }
    if attributes_file.is_file() {
        manifest = manifest.input(&attributes_file)?;
    }
    if valid_file.is_file() {
        manifest = manifest.input(&valid_file)?;
    }
    if let Some(p) = &paired {
        require_file(p)?;
        manifest = manifest.argument("paired", p).input(p)?;
    }
    manifest.write()?;

    let format = match &paired {
        Some(p) => Format::Paired { attributes: p.clone() },
        None => Format::JsonLines,
    };
    let attributes = if attributes_file.is_file() {
        Some(phredgan::corpus::AttributeVocabulary::load(&attributes_file).map_err(runtime)?)
    } else {
        None
    };
    let corpus = ingest(&train_file, &format, config.model.vocab_size, attributes).map_err(runtime)?;
    let model = PhredModel::new(&config.model, corpus.vocab.len(), corpus.attributes.len(), config.train.seed).map_err(runtime)?;
    log::info!("{} model with {} parameters", config.model.variant, model.store.num_scalars());
    let mut snap = Snapshot { model, train: config.train.clone(), vocab: corpus.vocab, attributes: corpus.attributes, step: 0 };
    let outputs = TrainOutputs::in_dir(&args.out);
    let report = train(&mut snap, &corpus.conversations, &outputs).map_err(runtime)?;
    let validation_perplexity = if valid_file.is_file() {
        let (valid, _) = ingest_with(&valid_file, &format, &snap.vocab, &snap.attributes).map_err(runtime)?;
        Some(perplexity(&snap.model, &valid, true, config.train.seed).map_err(runtime)?)
    } else {
        None
    };
    let summary = TrainSummary {
        variant: config.model.variant,
        steps: report.steps.len(),
        final_mle_loss: report.final_mle(),
        validation_perplexity,
        wall_clock_secs: report.wall_clock_secs,
        checkpoints: report.checkpoints,
        snapshot: outputs.snapshot_dir().expect("output directory set"),
    };
    write_json(&args.out.join("train_report.json"), &summary)?;
    log::info!("trained {} steps; final MLE loss {:?}", summary.steps, summary.final_mle_loss);
    Ok(summary)
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let mut manifest = RunManifest::new("eval", args.seed, &args.out);
    let pairs: Vec<EvalPair> = match (&args.pairs, &args.hyp, &args.reference) {
        (Some(p), _, _) => {
            require_file(p)?;
            manifest = manifest.input(p)?;
            load_eval_pairs(p).map_err(|e| CliError::Usage(e.to_string()))?
        }
        (None, Some(h), Some(r)) => {
            let (hyps, refs) = (read_lines(h)?, read_lines(r)?);
            if hyps.len() != refs.len() {
                return Err(CliError::Usage(format!("{} has {} lines but {} has {}", h.display(), hyps.len(), r.display(), refs.len())));
            }
            manifest = manifest.input(h)?.input(r)?;
            hyps.into_iter()
                .zip(refs)
                .enumerate()
                .map(|(i, (hypothesis, reference))| EvalPair { context_id: (i + 1).to_string(), hypothesis, reference })
                .collect()
        }
        _ => return Err(CliError::Usage("give --pairs or both --hyp and --ref".into())),
    };
    if let (Some(s), Some(d)) = (&args.snapshot, &args.data) {
        manifest = manifest.argument("snapshot", s).input(d)?;
    }
    manifest.write()?;
    let mut report = evaluate_pairs(&pairs).map_err(runtime)?;
    if let (Some(s), Some(d)) = (&args.snapshot, &args.data) {
        let snap = load_snapshot(s)?;
        let convs = load_conversations(&snap, d)?;
        report.perplexity = Some(perplexity(&snap.model, &convs, true, args.seed).map_err(runtime)?);
    }
    write_json(&args.out.join("eval_report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredText {
    pub text: String,
    pub score: f64,
}

/// One line of `generations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub context_id: String,
    pub respond_as: String,
    pub reference: String,
    pub candidates: Vec<ScoredText>,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<Vec<GenerationRecord>, CliError> {
    if args.candidates == 0 {
        return Err(CliError::Usage("--L must be at least 1".into()));
    }
    require_file(&args.data)?;
    RunManifest::new("generate", args.seed, &args.out)
        .argument("snapshot", &args.snapshot)
        .argument("L", args.candidates)
        .argument("alpha", args.alpha)
        .argument("max_len", args.max_len)
        .argument("limit", args.limit)
        .input(&args.data)?
        .write()?;
    let snap = load_snapshot(&args.snapshot)?;
    let convs = load_conversations(&snap, &args.data)?;
    let text = |tokens: &[usize]| snap.vocab.detokenize(&tokens.iter().copied().filter(|&t| t != EOS).collect::<Vec<_>>());
    let mut records = Vec::new();
    for conv in convs.iter().take(args.limit.unwrap_or(usize::MAX)) {
        let last = conv.turns.len() - 1;
        let req = GenerateRequest {
            context: conv.turns[..last].iter().map(|t| ContextTurn { attribute: t.attribute, tokens: t.tokens.clone() }).collect(),
            target: conv.turns[last].attribute,
            num_candidates: args.candidates,
            max_len: args.max_len,
            alpha: args.alpha,
            seed: args.seed,
        };
        let cands = generate(&snap.model, &req).map_err(|e| CliError::Runtime(format!("{}: {e}", conv.id)))?;
        records.push(GenerationRecord {
            context_id: conv.id.clone(),
            respond_as: snap.attributes.label(req.target).to_string(),
            reference: text(&conv.turns[last].tokens),
            candidates: cands.iter().map(|c| ScoredText { text: text(&c.tokens), score: c.rank_score }).collect(),
        });
    }
    let pairs: Vec<EvalPair> = records
        .iter()
        .map(|r| EvalPair { context_id: r.context_id.clone(), hypothesis: r.candidates[0].text.clone(), reference: r.reference.clone() })
        .collect();
    write_lines(&args.out.join("generations.jsonl"), &records)?;
    write_lines(&args.out.join("pairs.jsonl"), &pairs)?;
    log::info!("generated responses for {} contexts", records.len());
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f32,
    /// Mean `-log D_adv` per generated word.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaReport {
    pub best_alpha: f32,
    pub best_score: f64,
    pub table: Vec<AlphaRow>,
}

pub fn cmd_alpha_search(args: &AlphaSearchArgs) -> Result<AlphaReport, CliError> {
    let grid = args.grid.clone().unwrap_or_else(default_alpha_grid);
    if grid.is_empty() || grid.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(CliError::Usage("--grid needs nonnegative finite values".into()));
    }
    require_file(&args.data)?;
    RunManifest::new("alpha-search", args.seed, &args.out)
        .argument("snapshot", &args.snapshot)
        .argument("grid", &grid)
        .argument("batch_size", args.batch_size)
        .input(&args.data)?
        .write()?;
    let snap = load_snapshot(&args.snapshot)?;
    if !snap.model.variant().has_adversary() {
        return Err(CliError::Usage(format!("{} has no adversarial discriminator to score with", snap.model.variant())));
    }
    let convs = load_conversations(&snap, &args.data)?;
    let search = alpha_search(&snap.model, &convs, &grid, args.seed, args.batch_size).map_err(runtime)?;
    let report = AlphaReport {
        best_alpha: search.best_alpha,
        best_score: search.best_score,
        table: search.table.iter().map(|&(alpha, score)| AlphaRow { alpha, score }).collect(),
    };
    write_json(&args.out.join("alpha_search.json"), &report)?;
    log::info!("best alpha {} (score {:.6})", report.best_alpha, report.best_score);
    Ok(report)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let manifest = RunManifest::new("synth", args.seed, &args.out)
        .argument("conversations", args.conversations)
        .argument("attributes", args.attributes)
        .argument("signature_rate", args.signature_rate);
    manifest.write()?;
    let opts = phredgan::corpus::SynthOptions::default();
    let corpus = phredgan::corpus::generate_synthetic_persona_corpus(args.conversations, args.attributes, args.signature_rate, args.seed, &opts)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    corpus.write(&args.out).map_err(runtime)?;
    log::info!("wrote {} conversations to {}", args.conversations, args.out.display());
    Ok(())
}

pub fn cmd_serve(args: &ServeArgs) -> Result<(), CliError> {
    if !args.snapshot_dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", args.snapshot_dir.display())));
    }
    let seed_mode = match args.seed_mode {
        SeedMode::Fixed(_) => SeedMode::Fixed(args.seed),
        m => m,
    };
    let config = ServeConfig { snapshot_dir: args.snapshot_dir.clone(), persist: args.persist.clone(), seed_mode, ui_dir: args.ui.clone() };
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(phredgan_serve::serve(config, SocketAddr::new(args.host, args.port))).map_err(runtime)
}

/// Parses argument values the way the binary does; used by tests.
pub fn parse_args<I, T>(args: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Cli::try_parse_from(args)
}
