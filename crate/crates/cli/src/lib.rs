//! Command-line pipeline: synth, train, gradcheck, generate, eval.
//!
//! Every subcommand resolves its settings as defaults, then an optional
//! `--config` JSON file (a settings object or a previous manifest), then
//! flags. The resolved settings go into `manifest.json` next to the
//! outputs, and `--config <manifest>` reproduces the run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use faegen_core::checkpoint::{Checkpoint, CheckpointMeta};
use faegen_core::corpus::{encode_dataset, Dataset};
use faegen_core::decoder::{generate_dataset, read_hypotheses, write_hypotheses, DecodeConfig, DecodeMode};
use faegen_core::io::{read_text, write_atomic};
use faegen_core::layers::SigmaShape;
use faegen_core::metrics::{build_pairs, evaluate_pairs, CiderOptions, ScoreReport, Scores};
use faegen_core::model::{
    init_params, AttentionMode, EmbeddingMode, FaeGenConfig, Variant,
};
use faegen_core::synth::{synth_generate, SynthConfig};
use faegen_core::trainer::{format_loss_log, grad_check, train_from, GradCheckConfig, GradCheckReport, TrainConfig};
use faegen_core::vocab::Vocabulary;
use faegen_core::FaeError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "faegen", version, about = "Multi-view, multi-topic report generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic train/test corpus and its vocabulary.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint with its loss log.
    Train(TrainArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Decode one description per (sample, topic).
    Generate(GenerateArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unrecognized value {s:?}"))
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// JSON settings file or a previous manifest.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    topics: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    missing_prob: Option<f64>,
    #[arg(long)]
    repeat_prob: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// fae, fa-only, fe-only or vanilla; sets both modes.
    #[arg(long, value_parser = parse_enum::<Variant>)]
    variant: Option<Variant>,
    /// factored, plain or mean_pool.
    #[arg(long, value_parser = parse_enum::<AttentionMode>)]
    attention: Option<AttentionMode>,
    /// factored or shared.
    #[arg(long, value_parser = parse_enum::<EmbeddingMode>)]
    embedding: Option<EmbeddingMode>,
    /// full or diagonal.
    #[arg(long, value_parser = parse_enum::<SigmaShape>)]
    sigma_shape: Option<SigmaShape>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training corpus (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Vocabulary file written by `synth`.
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    topic_factors: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// A single variant, or `all` (the default) for all four.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, value_parser = parse_enum::<AttentionMode>)]
    attention: Option<AttentionMode>,
    #[arg(long, value_parser = parse_enum::<EmbeddingMode>)]
    embedding: Option<EmbeddingMode>,
    #[arg(long, value_parser = parse_enum::<SigmaShape>)]
    sigma_shape: Option<SigmaShape>,
    #[arg(long)]
    fd_step: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Samples to describe (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Optional vocabulary to check against the checkpoint's.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// greedy, beam or sample.
    #[arg(long, value_parser = parse_enum::<DecodeMode>)]
    mode: Option<DecodeMode>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rank beams by total rather than mean log-probability.
    #[arg(long)]
    no_length_norm: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    hyps: PathBuf,
    /// Reference corpus (JSONL).
    #[arg(long)]
    refs: PathBuf,
    /// Add one sub-report per topic.
    #[arg(long)]
    per_topic: bool,
    /// Restrict to these topics (comma separated).
    #[arg(long, value_delimiter = ',')]
    topics: Vec<String>,
    /// Use the D-variant of CIDEr.
    #[arg(long)]
    cider_d: bool,
}

// ---------------------------------------------------------------------------
// Resolved settings

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub hidden_dim: usize,
    pub topic_factor_dim: usize,
    pub max_len: usize,
    pub attention_mode: AttentionMode,
    pub embedding_mode: EmbeddingMode,
    pub topic_factor_shape: SigmaShape,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = FaeGenConfig::new(1, 1, 5);
        ModelSettings {
            hidden_dim: c.hidden_dim,
            topic_factor_dim: c.topic_factor_dim,
            max_len: c.max_len,
            attention_mode: c.attention_mode,
            embedding_mode: c.embedding_mode,
            topic_factor_shape: c.topic_factor_shape,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub model: ModelSettings,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckSettings {
    pub check: GradCheckConfig,
    pub threshold: f64,
    /// Variants to run; `None` checks `check.model` as configured.
    pub variants: Option<Vec<Variant>>,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            check: GradCheckConfig::tiny(1),
            threshold: 1e-4,
            variants: Some(Variant::ALL.to_vec()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub per_topic: bool,
    pub topics: Vec<String>,
    pub cider: CiderOptions,
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    config: &'a C,
    inputs: BTreeMap<&'static str, String>,
    outputs: Vec<String>,
}

// ---------------------------------------------------------------------------
// Errors and exit codes

#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Check(String),
    Numeric(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<FaeError>() {
            Some(FaeError::NonFinite { .. }) => Failure::Numeric(e),
            _ => Failure::Usage(e),
        }
    }
}

impl From<FaeError> for Failure {
    fn from(e: FaeError) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

type Outcome = Result<(), Failure>;

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
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
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            EXIT_CHECK
        }
        Err(Failure::Numeric(e)) => {
            eprintln!("numerical abort: {e:#}");
            EXIT_NUMERIC
        }
    }
}

/// Defaults, overlaid by the config file. A manifest is accepted in place
/// of a settings file; its `config` member is used.
fn load_settings<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = read_text(path)?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{}: not JSON", path.display()))?;
    if value.get("subcommand").is_some() {
        value = value.get("config").cloned().unwrap_or_default();
    }
    serde_json::from_value(value).with_context(|| format!("{}: bad settings", path.display()))
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_manifest<C: Serialize>(
    dir: &Path,
    subcommand: &'static str,
    config: &C,
    inputs: Vec<(&'static str, String)>,
    outputs: &[&str],
) -> anyhow::Result<()> {
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        config,
        inputs: inputs.into_iter().collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let body = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&dir.join("manifest.json"), format!("{body}\n").as_bytes())?;
    Ok(())
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_synth(a: SynthArgs) -> Outcome {
    let mut cfg: SynthConfig = load_settings(a.common.config.as_deref())?;
    set(&mut cfg.num_train, a.train);
    set(&mut cfg.num_test, a.test);
    set(&mut cfg.num_topics, a.topics);
    set(&mut cfg.feature_dim, a.feature_dim);
    set(&mut cfg.feature_noise, a.noise);
    set(&mut cfg.missing_prob, a.missing_prob);
    set(&mut cfg.repeat_prob, a.repeat_prob);
    set(&mut cfg.seed, a.seed);
    cfg.validate()?;

    let (train, test) = synth_generate(&cfg)?;
    let vocab = Vocabulary::build(train.report_texts(), 1);
    let out = &a.common.out;
    prepare_out(out)?;
    train.save(&out.join("train.jsonl"))?;
    test.save(&out.join("test.jsonl"))?;
    vocab.save(&out.join("vocab.json"))?;
    write_manifest(out, "synth", &cfg, vec![], &["train.jsonl", "test.jsonl", "vocab.json"])?;
    eprintln!(
        "wrote {} train and {} test samples, {} vocabulary entries to {}",
        train.len(),
        test.len(),
        vocab.len(),
        out.display()
    );
    Ok(())
}

fn resolve_train(a: &TrainArgs) -> anyhow::Result<TrainSettings> {
    let mut s: TrainSettings = load_settings(a.common.config.as_deref())?;
    if let Some(v) = a.model.variant {
        (s.model.attention_mode, s.model.embedding_mode) = v.modes();
    }
    set(&mut s.model.attention_mode, a.model.attention);
    set(&mut s.model.embedding_mode, a.model.embedding);
    set(&mut s.model.topic_factor_shape, a.model.sigma_shape);
    set(&mut s.model.hidden_dim, a.hidden);
    set(&mut s.model.topic_factor_dim, a.topic_factors);
    set(&mut s.model.max_len, a.max_len);
    set(&mut s.train.epochs, a.epochs);
    set(&mut s.train.learning_rate, a.lr);
    set(&mut s.train.clip_norm, a.clip);
    set(&mut s.train.seed, a.seed);
    s.train.validate()?;
    Ok(s)
}

/// The full model config for a corpus: feature and view sizes come from
/// the data, the rest from the settings.
pub fn model_config(
    settings: &ModelSettings,
    data: &Dataset,
    topics: usize,
    vocab: usize,
) -> anyhow::Result<FaeGenConfig> {
    let feature_dim = data.feature_dim().ok_or_else(|| anyhow!("empty corpus"))?;
    let num_views = data.num_views().ok_or_else(|| anyhow!("empty corpus"))?;
    let mut c = FaeGenConfig::new(feature_dim, topics, vocab);
    c.num_views = num_views;
    c.hidden_dim = settings.hidden_dim;
    c.topic_factor_dim = settings.topic_factor_dim;
    c.max_len = settings.max_len;
    c.attention_mode = settings.attention_mode;
    c.embedding_mode = settings.embedding_mode;
    c.topic_factor_shape = settings.topic_factor_shape;
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let s = resolve_train(&a)?;
    let data = Dataset::load(&a.data)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let topics = data.topics();
    let config = model_config(&s.model, &data, topics.len(), vocab.len())?;
    let examples = encode_dataset(&data, &vocab, &topics)?;
    if let Some(long) = examples
        .iter()
        .flat_map(|e| e.reports.iter().map(move |(_, t)| (e, t.len())))
        .find(|(_, n)| *n > config.max_len)
    {
        return Err(anyhow!("sample {}: report of {} tokens exceeds max_len {}", long.0.id, long.1, config.max_len).into());
    }

    let out = &a.common.out;
    prepare_out(out)?;
    let params = init_params(&config, s.train.seed)?;
    let outcome = train_from(params, &examples, &config, &s.train, |e| {
        eprintln!("epoch {:>4}  nll {:.6}", e.epoch, e.mean_token_nll)
    })
    .map_err(anyhow::Error::from)?;
    let ck = Checkpoint {
        config,
        topics,
        vocab,
        params: outcome.params,
        meta: CheckpointMeta {
            epoch: s.train.epochs,
            final_loss: outcome.log.last().map(|e| e.mean_token_nll),
            seed: s.train.seed,
        },
    };
    ck.save(&out.join("checkpoint.json"))?;
    write_atomic(&out.join("loss.log"), format_loss_log(&outcome.log).as_bytes())?;
    write_manifest(
        out,
        "train",
        &s,
        vec![("data", show(&a.data)), ("vocab", show(&a.vocab))],
        &["checkpoint.json", "loss.log"],
    )?;
    Ok(())
}

fn resolve_gradcheck(a: &GradcheckArgs) -> anyhow::Result<GradcheckSettings> {
    let mut s: GradcheckSettings = load_settings(a.common.config.as_deref())?;
    match a.variant.as_deref() {
        None => {}
        Some("all") => s.variants = Some(Variant::ALL.to_vec()),
        Some(v) => s.variants = Some(vec![parse_enum::<Variant>(v).map_err(|e| anyhow!(e))?]),
    }
    if a.attention.is_some() || a.embedding.is_some() {
        if a.variant.is_some() {
            return Err(anyhow!("--variant cannot be combined with --attention/--embedding"));
        }
        s.variants = None;
    }
    set(&mut s.check.model.attention_mode, a.attention);
    set(&mut s.check.model.embedding_mode, a.embedding);
    set(&mut s.check.model.topic_factor_shape, a.sigma_shape);
    set(&mut s.check.fd_step, a.fd_step);
    set(&mut s.check.seed, a.seed);
    set(&mut s.threshold, a.threshold);
    if !(s.check.fd_step > 0.0) || !(s.threshold > 0.0) {
        return Err(anyhow!("fd step and threshold must be positive"));
    }
    Ok(s)
}

#[derive(Serialize)]
struct GradcheckRun {
    label: String,
    report: GradCheckReport,
}

fn cmd_gradcheck(a: GradcheckArgs) -> Outcome {
    let s = resolve_gradcheck(&a)?;
    let runs: Vec<(String, GradCheckConfig)> = match &s.variants {
        Some(vs) => vs
            .iter()
            .map(|&v| {
                let mut c = s.check.clone();
                c.model = c.model.with_variant(v);
                (v.name().to_string(), c)
            })
            .collect(),
        None => vec![(
            format!("{:?}/{:?}", s.check.model.attention_mode, s.check.model.embedding_mode),
            s.check.clone(),
        )],
    };
    let mut results = Vec::new();
    let mut failed = Vec::new();
    for (label, cfg) in runs {
        let report = grad_check(&cfg)?;
        println!("{label}  (fd step {:e})", report.fd_step);
        print!("{}", report.to_table());
        for g in report.failures(s.threshold) {
            failed.push(format!("{label}:{} ({:.3e})", g.name, g.max_rel_error));
        }
        results.push(GradcheckRun { label, report });
    }
    let out = &a.common.out;
    prepare_out(out)?;
    let body = serde_json::to_string_pretty(&results).map_err(anyhow::Error::from)?;
    write_atomic(&out.join("gradcheck.json"), format!("{body}\n").as_bytes())?;
    write_manifest(out, "gradcheck", &s, vec![], &["gradcheck.json"])?;
    if failed.is_empty() {
        println!("all groups below {:e}", s.threshold);
        Ok(())
    } else {
        Err(Failure::Check(format!("groups at or above {:e}: {}", s.threshold, failed.join(", "))))
    }
}

fn cmd_generate(a: GenerateArgs) -> Outcome {
    let mut d: DecodeConfig = load_settings(a.common.config.as_deref())?;
    set(&mut d.mode, a.mode);
    set(&mut d.beam_width, a.beam);
    set(&mut d.max_len, a.max_len);
    set(&mut d.temperature, a.temperature);
    set(&mut d.seed, a.seed);
    if a.no_length_norm {
        d.length_normalize = false;
    }
    d.validate()?;

    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    if let Some(path) = &a.vocab {
        let vocab = Vocabulary::load(path)?;
        if vocab.len() != ck.config.vocab_size || vocab != ck.vocab {
            return Err(anyhow!(
                "vocabulary {} ({} entries) does not match the checkpoint's ({} entries)",
                path.display(),
                vocab.len(),
                ck.config.vocab_size
            )
            .into());
        }
    }
    if let Some(dim) = data.feature_dim() {
        if dim != ck.config.feature_dim {
            return Err(anyhow!("data features have {dim} dims, checkpoint expects {}", ck.config.feature_dim).into());
        }
    }
    let records = generate_dataset(&ck.params, &ck.config, &ck.vocab, &ck.topics, &data, &d)?;
    let out = &a.common.out;
    prepare_out(out)?;
    write_hypotheses(&out.join("hypotheses.jsonl"), &records)?;
    let mut inputs = vec![("checkpoint", show(&a.checkpoint)), ("data", show(&a.data))];
    if let Some(v) = &a.vocab {
        inputs.push(("vocab", show(v)));
    }
    write_manifest(out, "generate", &d, inputs, &["hypotheses.jsonl"])?;
    eprintln!("wrote {} hypotheses", records.len());
    Ok(())
}

/// The per-topic table: one row per topic with pair count and every score.
pub fn topic_table(report: &ScoreReport) -> String {
    let width = report.per_topic.keys().map(|t| t.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>5}  {}\n", "topic", "pairs", Scores::HEADER);
    for (topic, s) in &report.per_topic {
        out.push_str(&format!("{topic:<width$}  {:>5}  {}\n", s.pairs, s.row()));
    }
    out
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let mut s: EvalSettings = load_settings(a.common.config.as_deref())?;
    s.per_topic |= a.per_topic;
    if !a.topics.is_empty() {
        s.topics = a.topics.clone();
    }
    s.cider.d_variant |= a.cider_d;

    let hyps = read_hypotheses(&a.hyps)?;
    let refs = Dataset::load(&a.refs)?;
    let pairs = build_pairs(&hyps, &refs, &s.topics)?;
    let mut report = evaluate_pairs(&pairs, s.cider)?;
    println!("{}", Scores::HEADER);
    println!("{}", report.all.row());
    if s.per_topic {
        println!();
        print!("{}", topic_table(&report));
    } else {
        report.per_topic.clear();
    }
    let out = &a.common.out;
    prepare_out(out)?;
    let body = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    write_atomic(&out.join("scores.json"), format!("{body}\n").as_bytes())?;
    write_manifest(
        out,
        "eval",
        &s,
        vec![("hyps", show(&a.hyps)), ("refs", show(&a.refs))],
        &["scores.json"],
    )?;
    Ok(())
}
