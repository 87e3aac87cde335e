//! The `embedkit` command line: one binary wiring training, distillation,
//! checkpoint merging, vocabulary surgery, retrieval evaluation, sweeps,
//! throughput benches, and gradient checks.
//!
//! Conventions shared by every subcommand:
//! * all artifacts land under `--out` (or the `EMBEDKIT_OUT` environment
//!   variable), starting with a `manifest.toml` written before any work;
//! * `--config` points at a TOML document supplying defaults; explicit
//!   flags beat config values, and the manifest records the merged result
//!   (a previous run's manifest is itself a valid `--config`);
//! * exit 0 on success, 1 on usage errors, 2 on data or validation errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use embedkit_core::bench::{padding_delta, relative_speed, BenchConfig, Strategy};
use embedkit_core::checkpoint::{merge, CheckpointArchive, DType, MergeSpec};
use embedkit_core::encoder::{
    encode, init_weights, rope_rescale, Activation, EncoderConfig, EncoderWeights, Pooling,
    TokenSequence,
};
use embedkit_core::eval::{
    accuracy_at_1, context_sweep, mrl_sweep, ndcg_at_k, recall_at_k, round1, search, EvalTask,
    IndexedCorpus, SweepMetric,
};
use embedkit_core::gradcheck::{
    check_encoder, contrastive_instance, encoder_instance, finite_difference_check, kd_instance,
    mrl_instance,
};
use embedkit_core::losses::{ContrastiveParams, KDParams, MRLParams};
use embedkit_core::trainer::{
    train_contrastive, train_context_extension, train_distill, EncoderTeacher, TeacherSet,
    TrainConfig, TrainStage,
};
use embedkit_core::vocab::{fertility, prune_vocab, Segmenter};

use crate::io;
use crate::manifest::{load_config, write_manifest, RunManifest};
use crate::throughput::run_throughput;

#[derive(Debug, Parser)]
#[command(
    name = "embedkit",
    version,
    about = "Desk-scale embedding-model engineering: train, distill, merge, prune, evaluate, bench",
    arg_required_else_help = true
)]
struct Cli {
    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, env = "EMBEDKIT_OUT")]
    out: Option<PathBuf>,

    /// TOML config supplying defaults; flags given here override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Contrastive fine-tuning or context-extension continuation.
    Train(TrainArgs),
    /// Distill a student against one or more teacher checkpoints.
    Distill(DistillArgs),
    /// Merge checkpoint archives by linear averaging or slerp.
    Merge(MergeArgs),
    /// Shrink a tokenizer vocabulary to a target size by frequency.
    PruneVocab(PruneArgs),
    /// Measure tokens-per-word over a per-language corpus.
    Fertility(FertilityArgs),
    /// Encode queries and documents, search, and score a run.
    Eval(EvalArgs),
    /// Score one task across embedding widths or sequence-length caps.
    Sweep(SweepArgs),
    /// Measure encoding throughput under a batching strategy.
    Bench(BenchArgs),
    /// Compare analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

/// Parse argv and run. Returns the process exit code instead of exiting so
/// tests can drive it in-process.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let Some(out) = cli.out else {
        eprintln!("error: no output directory; pass --out or set EMBEDKIT_OUT");
        return 1;
    };
    let config = cli.config.as_deref();
    let result = match cli.command {
        Command::Train(args) => run_train(&out, config, args),
        Command::Distill(args) => run_distill(&out, config, args),
        Command::Merge(args) => run_merge(&out, config, args),
        Command::PruneVocab(args) => run_prune(&out, config, args),
        Command::Fertility(args) => run_fertility(&out, config, args),
        Command::Eval(args) => run_eval(&out, config, args),
        Command::Sweep(args) => run_sweep(&out, config, args),
        Command::Bench(args) => run_bench(&out, config, args),
        Command::GradCheck(args) => run_gradcheck(&out, config, args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

// ---------------------------------------------------------------------------
// Shared model configuration
// ---------------------------------------------------------------------------

/// Encoder architecture as it appears in config documents; strings instead
/// of enums so the TOML stays hand-writable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ModelDoc {
    vocab_size: usize,
    dim: usize,
    layers: usize,
    heads: usize,
    ffn_dim: usize,
    max_len: usize,
    rope_theta: f64,
    global_every_k: usize,
    /// Sliding-window width for local layers; omitted means the full window.
    local_window: Option<usize>,
    activation: String,
    pooling: String,
}

impl Default for ModelDoc {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            dim: 16,
            layers: 1,
            heads: 2,
            ffn_dim: 32,
            max_len: 64,
            rope_theta: 10_000.0,
            global_every_k: 1,
            local_window: None,
            activation: "gelu".to_string(),
            pooling: "mean".to_string(),
        }
    }
}

impl ModelDoc {
    fn to_config(&self) -> Result<EncoderConfig> {
        let activation = match self.activation.as_str() {
            "gelu" => Activation::Gelu,
            "silu" => Activation::Silu,
            other => bail!("unknown activation {other:?} (expected gelu or silu)"),
        };
        let pooling = match self.pooling.as_str() {
            "cls" => Pooling::Cls,
            "mean" => Pooling::Mean,
            "last_token" => Pooling::LastToken,
            other => bail!("unknown pooling {other:?} (expected cls, mean, or last_token)"),
        };
        let config = EncoderConfig {
            vocab_size: self.vocab_size,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            rope_theta: self.rope_theta,
            global_every_k: self.global_every_k,
            local_window: self.local_window.unwrap_or(self.max_len),
            activation,
            pooling,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Model flags shared by the subcommands that build an encoder; each one
/// overrides the matching `[model]` key.
#[derive(Debug, Args)]
struct ModelFlags {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

impl ModelFlags {
    fn apply(&self, doc: &mut ModelDoc) {
        if let Some(v) = self.dim {
            doc.dim = v;
        }
        if let Some(v) = self.layers {
            doc.layers = v;
        }
        if let Some(v) = self.heads {
            doc.heads = v;
        }
        if let Some(v) = self.vocab_size {
            doc.vocab_size = v;
        }
        if let Some(v) = self.max_len {
            doc.max_len = v;
        }
    }
}

fn load_weights(
    path: Option<&Path>,
    config: &EncoderConfig,
    seed: u64,
) -> Result<EncoderWeights> {
    match path {
        Some(path) => Ok(io::load_archive(path)?.to_weights(config)?),
        None => Ok(init_weights(config, seed)?),
    }
}

fn save_weights(path: &Path, weights: &EncoderWeights) -> Result<()> {
    io::save_archive(path, &CheckpointArchive::from_weights(weights, DType::F64)?)
}

fn truncate_all(items: &mut [(String, TokenSequence)], max: usize) -> Result<()> {
    for (_, seq) in items.iter_mut() {
        *seq = seq.truncated(max)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    Contrastive,
    ContextExtension,
}

impl TrainMode {
    fn as_doc(self) -> &'static str {
        match self {
            TrainMode::Contrastive => "contrastive",
            TrainMode::ContextExtension => "context-extension",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainDoc {
    mode: String,
    model: ModelDoc,
    seed: u64,
    /// Loop fields default from the mode's preset when absent.
    steps: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    msl: Option<usize>,
    tau: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
    /// Nested prefix widths; empty disables the prefix-ladder objective.
    mrl_dims: Vec<usize>,
    /// Context-extension targets, used only in that mode.
    new_rope_theta: f64,
    new_max_len: usize,
}

impl Default for TrainDoc {
    fn default() -> Self {
        Self {
            mode: "contrastive".to_string(),
            model: ModelDoc::default(),
            seed: 0,
            steps: None,
            learning_rate: None,
            batch_size: None,
            msl: None,
            tau: 0.02,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            mrl_dims: Vec::new(),
            new_rope_theta: 160_000.0,
            new_max_len: 256,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training records, one JSON object per line.
    #[arg(long)]
    data: PathBuf,
    /// Start from this checkpoint instead of random initialization.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<TrainMode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Sequence-length cap during training.
    #[arg(long)]
    msl: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Comma-separated prefix widths, e.g. 16,8,4.
    #[arg(long, value_delimiter = ',')]
    mrl_dims: Option<Vec<usize>>,
    #[command(flatten)]
    model: ModelFlags,
}

fn run_train(out: &Path, config_path: Option<&Path>, args: TrainArgs) -> Result<()> {
    let mut doc: TrainDoc = load_config(config_path)?;
    if let Some(mode) = args.mode {
        doc.mode = mode.as_doc().to_string();
    }
    if let Some(v) = args.seed {
        doc.seed = v;
    }
    if let Some(v) = args.steps {
        doc.steps = Some(v);
    }
    if let Some(v) = args.learning_rate {
        doc.learning_rate = Some(v);
    }
    if let Some(v) = args.batch_size {
        doc.batch_size = Some(v);
    }
    if let Some(v) = args.msl {
        doc.msl = Some(v);
    }
    if let Some(v) = args.tau {
        doc.tau = v;
    }
    if let Some(v) = &args.mrl_dims {
        doc.mrl_dims = v.clone();
    }
    args.model.apply(&mut doc.model);

    let stage = match doc.mode.as_str() {
        "contrastive" => TrainStage::ContrastiveFt,
        "context-extension" => TrainStage::ContextExtension,
        other => bail!("unknown train mode {other:?} (expected contrastive or context-extension)"),
    };
    let preset = match stage {
        TrainStage::ContrastiveFt => TrainConfig::contrastive_preset(doc.seed),
        TrainStage::ContextExtension => TrainConfig::context_extension_preset(doc.seed),
        TrainStage::ContrastiveKd => unreachable!("train never runs the distillation stage"),
    };
    let tconfig = TrainConfig {
        learning_rate: doc.learning_rate.unwrap_or(preset.learning_rate),
        batch_size: doc.batch_size.unwrap_or(preset.batch_size),
        steps: doc.steps.unwrap_or(preset.steps),
        seed: doc.seed,
        max_seq_len: doc.msl.unwrap_or(preset.max_seq_len),
        stage,
    };
    // Materialize the merged values so the manifest replays exactly.
    doc.learning_rate = Some(tconfig.learning_rate);
    doc.batch_size = Some(tconfig.batch_size);
    doc.steps = Some(tconfig.steps);
    doc.msl = Some(tconfig.max_seq_len);

    let mut manifest = RunManifest::new("train", &doc)?
        .input("data", &args.data)
        .output("weights", "weights.ckpt")
        .output("loss_trace", "loss_trace.csv");
    if let Some(init) = &args.init_from {
        manifest = manifest.input("init_from", init);
    }
    write_manifest(out, &manifest)?;

    let examples = io::load_training(&args.data)?;
    let base_config = doc.model.to_config()?;
    let config = match stage {
        TrainStage::ContextExtension => {
            rope_rescale(&base_config, doc.new_rope_theta, doc.new_max_len)?
        }
        _ => base_config,
    };
    let weights = load_weights(args.init_from.as_deref(), &config, doc.seed)?;
    let cparams = ContrastiveParams {
        tau: doc.tau,
        alpha: doc.alpha,
        beta: doc.beta,
        gamma: doc.gamma,
    };
    let mrl = if doc.mrl_dims.is_empty() {
        None
    } else {
        Some(MRLParams::uniform(doc.mrl_dims.clone())?)
    };
    let outcome = match stage {
        TrainStage::ContrastiveFt => {
            train_contrastive(weights, &config, &examples, &tconfig, &cparams, mrl.as_ref())?
        }
        _ => train_context_extension(weights, &config, &examples, &tconfig, &cparams)?,
    };

    save_weights(&out.join("weights.ckpt"), &outcome.weights)?;
    io::save_loss_trace(&out.join("loss_trace.csv"), &outcome.loss_trace)?;
    match (outcome.loss_trace.first(), outcome.loss_trace.last()) {
        (Some(first), Some(last)) => {
            println!(
                "trained {} steps on {} examples: loss {first:.6} -> {last:.6}",
                tconfig.steps,
                examples.len()
            );
        }
        _ => println!("dry run: 0 steps, weights passed through"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// distill
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DistillDoc {
    /// Student architecture.
    model: ModelDoc,
    /// Teacher architecture; defaults to the student's.
    teacher_model: Option<ModelDoc>,
    seed: u64,
    steps: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    msl: Option<usize>,
    tau_kd: f64,
    mean_reduce: bool,
}

impl Default for DistillDoc {
    fn default() -> Self {
        Self {
            model: ModelDoc::default(),
            teacher_model: None,
            seed: 0,
            steps: None,
            learning_rate: None,
            batch_size: None,
            msl: None,
            tau_kd: 1.0,
            mean_reduce: false,
        }
    }
}

#[derive(Debug, Args)]
struct DistillArgs {
    /// Training records, one JSON object per line.
    #[arg(long)]
    data: PathBuf,
    /// Default teacher checkpoint, used for any language without its own.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Per-language teacher checkpoint as language=path; repeatable.
    #[arg(long = "teacher-lang", value_name = "LANG=PATH")]
    teacher_lang: Vec<String>,
    /// Start the student from this checkpoint instead of random init.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    msl: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau_kd: Option<f64>,
    #[command(flatten)]
    model: ModelFlags,
}

fn run_distill(out: &Path, config_path: Option<&Path>, args: DistillArgs) -> Result<()> {
    let mut doc: DistillDoc = load_config(config_path)?;
    if let Some(v) = args.seed {
        doc.seed = v;
    }
    if let Some(v) = args.steps {
        doc.steps = Some(v);
    }
    if let Some(v) = args.learning_rate {
        doc.learning_rate = Some(v);
    }
    if let Some(v) = args.batch_size {
        doc.batch_size = Some(v);
    }
    if let Some(v) = args.msl {
        doc.msl = Some(v);
    }
    if let Some(v) = args.tau_kd {
        doc.tau_kd = v;
    }
    args.model.apply(&mut doc.model);

    let mut routes = Vec::new();
    for pair in &args.teacher_lang {
        let Some((lang, path)) = pair.split_once('=') else {
            bail!("--teacher-lang wants language=path, got {pair:?}");
        };
        routes.push((lang.to_string(), PathBuf::from(path)));
    }
    if args.teacher.is_none() && routes.is_empty() {
        bail!("no teacher given; pass --teacher and/or --teacher-lang");
    }

    let preset = TrainConfig::distill_preset(doc.seed);
    let tconfig = TrainConfig {
        learning_rate: doc.learning_rate.unwrap_or(preset.learning_rate),
        batch_size: doc.batch_size.unwrap_or(preset.batch_size),
        steps: doc.steps.unwrap_or(preset.steps),
        seed: doc.seed,
        max_seq_len: doc.msl.unwrap_or(preset.max_seq_len),
        stage: TrainStage::ContrastiveKd,
    };
    doc.learning_rate = Some(tconfig.learning_rate);
    doc.batch_size = Some(tconfig.batch_size);
    doc.steps = Some(tconfig.steps);
    doc.msl = Some(tconfig.max_seq_len);

    let mut manifest = RunManifest::new("distill", &doc)?
        .input("data", &args.data)
        .output("weights", "weights.ckpt")
        .output("loss_trace", "loss_trace.csv")
        .output("routing", "routing.csv");
    if let Some(teacher) = &args.teacher {
        manifest = manifest.input("teacher", teacher);
    }
    for (lang, path) in &routes {
        manifest = manifest.input(&format!("teacher.{lang}"), path);
    }
    if let Some(init) = &args.init_from {
        manifest = manifest.input("init_from", init);
    }
    write_manifest(out, &manifest)?;

    let examples = io::load_training(&args.data)?;
    let student_config = doc.model.to_config()?;
    let teacher_config = doc.teacher_model.clone().unwrap_or_else(|| doc.model.clone()).to_config()?;

    let teacher_from = |path: &Path| -> Result<EncoderTeacher> {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "teacher".to_string());
        let weights = io::load_archive(path)?.to_weights(&teacher_config)?;
        Ok(EncoderTeacher::new(name, weights, teacher_config.clone())?)
    };
    let mut teachers = TeacherSet::new();
    if let Some(path) = &args.teacher {
        teachers.set_default(Box::new(teacher_from(path)?));
    }
    for (lang, path) in &routes {
        teachers.insert(lang.clone(), Box::new(teacher_from(path)?));
    }

    let weights = load_weights(args.init_from.as_deref(), &student_config, doc.seed)?;
    let kdparams = KDParams {
        tau_kd: doc.tau_kd,
        mean_reduce: doc.mean_reduce,
    };
    let outcome = train_distill(weights, &student_config, &examples, &teachers, &tconfig, &kdparams)?;

    save_weights(&out.join("weights.ckpt"), &outcome.weights)?;
    io::save_loss_trace(&out.join("loss_trace.csv"), &outcome.loss_trace)?;
    io::save_routing(&out.join("routing.csv"), &outcome.routing)?;
    println!(
        "distilled {} steps on {} examples across {} routed batches",
        tconfig.steps,
        examples.len(),
        outcome.routing.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// merge
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MergeMethod {
    Linear,
    Slerp,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct MergeDoc {
    spec: Option<MergeSpec>,
}

#[derive(Debug, Args)]
struct MergeArgs {
    /// Input checkpoint archives, in order.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MergeMethod>,
    /// Interpolation position for slerp.
    #[arg(long)]
    t: Option<f64>,
    /// Comma-separated linear weights; defaults to uniform.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// JSON merge recipe; flags beat it when both are given.
    #[arg(long)]
    spec: Option<PathBuf>,
}

fn run_merge(out: &Path, config_path: Option<&Path>, args: MergeArgs) -> Result<()> {
    let doc: MergeDoc = load_config(config_path)?;
    let spec = if let Some(method) = args.method {
        match method {
            MergeMethod::Linear => MergeSpec::Linear {
                weights: args.weights.clone().unwrap_or_else(|| {
                    vec![1.0 / args.inputs.len() as f64; args.inputs.len()]
                }),
            },
            MergeMethod::Slerp => MergeSpec::Slerp {
                t: args.t.unwrap_or(0.5),
            },
        }
    } else if let Some(path) = &args.spec {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading merge spec {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing merge spec {}", path.display()))?
    } else if let Some(spec) = doc.spec.clone() {
        spec
    } else {
        bail!("no merge recipe; pass --method, --spec, or a config with [spec]");
    };
    spec.validate(args.inputs.len())?;

    let mut manifest = RunManifest::new("merge", &MergeDoc { spec: Some(spec.clone()) })?
        .output("merged", "merged.ckpt");
    for (i, input) in args.inputs.iter().enumerate() {
        manifest = manifest.input(&format!("input.{i}"), input);
    }
    write_manifest(out, &manifest)?;

    let archives: Vec<CheckpointArchive> = args
        .inputs
        .iter()
        .map(|p| io::load_archive(p))
        .collect::<Result<_>>()?;
    let refs: Vec<&CheckpointArchive> = archives.iter().collect();
    let merged = merge(&refs, &spec)?;
    io::save_archive(&out.join("merged.ckpt"), &merged)?;
    println!("merged {} archives ({} tensors)", archives.len(), merged.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// prune-vocab
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct PruneDoc {
    target: Option<usize>,
}

#[derive(Debug, Args)]
struct PruneArgs {
    /// Tokenizer document to shrink.
    #[arg(long)]
    tokenizer: PathBuf,
    /// Token frequency table (token_id,count CSV).
    #[arg(long)]
    counts: PathBuf,
    /// Vocabulary size to prune down to.
    #[arg(long)]
    target: Option<usize>,
}

fn run_prune(out: &Path, config_path: Option<&Path>, args: PruneArgs) -> Result<()> {
    let mut doc: PruneDoc = load_config(config_path)?;
    if let Some(v) = args.target {
        doc.target = Some(v);
    }
    let Some(target) = doc.target else {
        bail!("no target size; pass --target or set it in the config");
    };

    let manifest = RunManifest::new("prune-vocab", &doc)?
        .input("tokenizer", &args.tokenizer)
        .input("counts", &args.counts)
        .output("tokenizer", "tokenizer.json")
        .output("id_map", "id_map.csv");
    write_manifest(out, &manifest)?;

    let spec = io::load_tokenizer(&args.tokenizer)?;
    let counts = io::load_counts(&args.counts)?;
    let before = spec.vocab_size();
    let outcome = prune_vocab(&spec, &counts, target)?;
    io::save_tokenizer(&out.join("tokenizer.json"), &outcome.spec)?;
    io::save_id_map(&out.join("id_map.csv"), &outcome.id_map)?;
    println!(
        "pruned vocabulary {before} -> {} tokens, {} merges kept",
        outcome.spec.vocab_size(),
        outcome.spec.merges().len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fertility
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SegmenterOpt {
    Whitespace,
    PerChar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct FertilityDoc {
    segmenter: String,
}

impl Default for FertilityDoc {
    fn default() -> Self {
        Self {
            segmenter: "whitespace".to_string(),
        }
    }
}

#[derive(Debug, Args)]
struct FertilityArgs {
    #[arg(long)]
    tokenizer: PathBuf,
    /// JSON document mapping language tags to text lists.
    #[arg(long)]
    corpus: PathBuf,
    /// How to split words: whitespace, or per-char for unsegmented scripts.
    #[arg(long, value_enum)]
    segmenter: Option<SegmenterOpt>,
}

fn run_fertility(out: &Path, config_path: Option<&Path>, args: FertilityArgs) -> Result<()> {
    let mut doc: FertilityDoc = load_config(config_path)?;
    if let Some(seg) = args.segmenter {
        doc.segmenter = match seg {
            SegmenterOpt::Whitespace => "whitespace",
            SegmenterOpt::PerChar => "per_char",
        }
        .to_string();
    }
    let segmenter = match doc.segmenter.as_str() {
        "whitespace" => Segmenter::Whitespace,
        "per_char" => Segmenter::PerChar,
        other => bail!("unknown segmenter {other:?} (expected whitespace or per_char)"),
    };

    let manifest = RunManifest::new("fertility", &doc)?
        .input("tokenizer", &args.tokenizer)
        .input("corpus", &args.corpus)
        .output("report", "fertility.csv");
    write_manifest(out, &manifest)?;

    let spec = io::load_tokenizer(&args.tokenizer)?;
    let corpus = io::load_fertility_corpus(&args.corpus)?;
    let report = fertility(&spec, &corpus, segmenter)?;
    io::save_fertility_csv(&out.join("fertility.csv"), &report)?;
    println!(
        "fertility over {} languages: average {:.2} tokens per word",
        report.rows.len(),
        report.average
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricOpt {
    Ndcg,
    Accuracy,
    Recall,
}

impl MetricOpt {
    fn as_doc(self) -> &'static str {
        match self {
            MetricOpt::Ndcg => "ndcg",
            MetricOpt::Accuracy => "accuracy",
            MetricOpt::Recall => "recall",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct EvalDoc {
    model: ModelDoc,
    k: usize,
    metric: String,
    /// Documents and queries are clipped to this many tokens before
    /// encoding; defaults to the model window.
    msl: Option<usize>,
}

impl Default for EvalDoc {
    fn default() -> Self {
        Self {
            model: ModelDoc::default(),
            k: 10,
            metric: "ndcg".to_string(),
            msl: None,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Encoder checkpoint to evaluate.
    #[arg(long)]
    weights: PathBuf,
    /// Query sequences, one JSON object per line.
    #[arg(long)]
    queries: PathBuf,
    /// Document sequences, one JSON object per line.
    #[arg(long)]
    docs: PathBuf,
    /// Relevance judgments.
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    metric: Option<MetricOpt>,
    #[arg(long)]
    msl: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
}

fn run_eval(out: &Path, config_path: Option<&Path>, args: EvalArgs) -> Result<()> {
    let mut doc: EvalDoc = load_config(config_path)?;
    if let Some(v) = args.k {
        doc.k = v;
    }
    if let Some(m) = args.metric {
        doc.metric = m.as_doc().to_string();
    }
    if let Some(v) = args.msl {
        doc.msl = Some(v);
    }
    args.model.apply(&mut doc.model);

    let manifest = RunManifest::new("eval", &doc)?
        .input("weights", &args.weights)
        .input("queries", &args.queries)
        .input("docs", &args.docs)
        .input("qrels", &args.qrels)
        .output("run", "run.txt")
        .output("report", "report.csv");
    write_manifest(out, &manifest)?;

    let config = doc.model.to_config()?;
    let weights = io::load_archive(&args.weights)?.to_weights(&config)?;
    let mut queries = io::load_sequences(&args.queries)?;
    let mut docs = io::load_sequences(&args.docs)?;
    let qrels = io::load_qrels(&args.qrels)?;
    let msl = doc.msl.unwrap_or(config.max_len).min(config.max_len);
    truncate_all(&mut queries, msl)?;
    truncate_all(&mut docs, msl)?;

    let (qids, qseqs): (Vec<String>, Vec<TokenSequence>) = queries.into_iter().unzip();
    let (dids, dseqs): (Vec<String>, Vec<TokenSequence>) = docs.into_iter().unzip();
    let q_emb = encode(&weights, &config, &qseqs)?;
    let d_emb = encode(&weights, &config, &dseqs)?;
    let index = IndexedCorpus::new(dids, d_emb)?;
    let run = search(&index, &qids, &q_emb, doc.k)?;
    io::save_run(&out.join("run.txt"), &run, "embedkit")?;

    let (label, report) = match doc.metric.as_str() {
        "ndcg" => (format!("ndcg@{}", doc.k), ndcg_at_k(&run, &qrels, doc.k)?),
        "accuracy" => ("accuracy@1".to_string(), accuracy_at_1(&run, &qrels)?),
        "recall" => (format!("recall@{}", doc.k), recall_at_k(&run, &qrels, doc.k)?),
        other => bail!("unknown metric {other:?} (expected ndcg, accuracy, or recall)"),
    };
    io::save_metric_report(&out.join("report.csv"), &label, &report)?;
    println!(
        "{label} over {} scoreable queries: mean {:.4} ({:.1} on the 0-100 scale)",
        report.per_query.len(),
        report.mean,
        round1(report.mean * 100.0)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    Mrl,
    Context,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SweepDoc {
    model: ModelDoc,
    k: usize,
    metric: String,
    task_name: String,
    values: Vec<usize>,
}

impl Default for SweepDoc {
    fn default() -> Self {
        Self {
            model: ModelDoc::default(),
            k: 10,
            metric: "ndcg".to_string(),
            task_name: "main".to_string(),
            values: Vec::new(),
        }
    }
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Sweep embedding widths (mrl) or sequence-length caps (context).
    #[arg(long, value_enum)]
    kind: SweepKind,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    docs: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Comma-separated axis values, e.g. 16,8,4 or 64,128,256.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<usize>>,
    #[arg(long)]
    k: Option<usize>,
    /// Scoring metric (context sweeps only; mrl always scores ndcg).
    #[arg(long, value_enum)]
    metric: Option<MetricOpt>,
    #[command(flatten)]
    model: ModelFlags,
}

fn run_sweep(out: &Path, config_path: Option<&Path>, args: SweepArgs) -> Result<()> {
    let mut doc: SweepDoc = load_config(config_path)?;
    if let Some(v) = &args.values {
        doc.values = v.clone();
    }
    if let Some(v) = args.k {
        doc.k = v;
    }
    if let Some(m) = args.metric {
        doc.metric = m.as_doc().to_string();
    }
    args.model.apply(&mut doc.model);
    if doc.values.is_empty() {
        bail!("no axis values; pass --values or set them in the config");
    }

    let manifest = RunManifest::new("sweep", &doc)?
        .input("weights", &args.weights)
        .input("queries", &args.queries)
        .input("docs", &args.docs)
        .input("qrels", &args.qrels)
        .output("report", "sweep.csv");
    write_manifest(out, &manifest)?;

    let config = doc.model.to_config()?;
    let weights = io::load_archive(&args.weights)?.to_weights(&config)?;
    let queries = io::load_sequences(&args.queries)?;
    let docs = io::load_sequences(&args.docs)?;
    let qrels = io::load_qrels(&args.qrels)?;
    let task = EvalTask::new(queries, docs, qrels)?;
    let tasks = BTreeMap::from([(doc.task_name.clone(), task)]);

    let report = match args.kind {
        SweepKind::Mrl => mrl_sweep(&weights, &config, &tasks, &doc.values, doc.k)?,
        SweepKind::Context => {
            let metric = match doc.metric.as_str() {
                "ndcg" => SweepMetric::NdcgAtK,
                "accuracy" => SweepMetric::AccuracyAt1,
                "recall" => SweepMetric::RecallAtK,
                other => bail!("unknown metric {other:?} (expected ndcg, accuracy, or recall)"),
            };
            context_sweep(&weights, &config, &tasks, &doc.values, metric, doc.k)?
        }
    };
    io::save_sweep_csv(&out.join("sweep.csv"), &report)?;
    for row in &report.rows {
        println!("{} {}: mean {:.4}", report.axis, row.value, row.mean);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyOpt {
    Padded,
    SortedPacked,
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct BenchDoc {
    model: ModelDoc,
    batch_size: usize,
    msl: usize,
    strategy: String,
    warmup_batches: usize,
    measured_passes: usize,
    seed: u64,
}

impl Default for BenchDoc {
    fn default() -> Self {
        Self {
            model: ModelDoc::default(),
            batch_size: 8,
            msl: 64,
            strategy: "both".to_string(),
            warmup_batches: 3,
            measured_passes: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Corpus of token sequences, one JSON object per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Encoder checkpoint; omitted means seeded random weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    msl: Option<usize>,
    /// padded, sorted-packed, or both (both also reports the speed ratio).
    #[arg(long, value_enum)]
    strategy: Option<StrategyOpt>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    passes: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
}

fn run_bench(out: &Path, config_path: Option<&Path>, args: BenchArgs) -> Result<()> {
    let mut doc: BenchDoc = load_config(config_path)?;
    if let Some(v) = args.batch_size {
        doc.batch_size = v;
    }
    if let Some(v) = args.msl {
        doc.msl = v;
    }
    if let Some(s) = args.strategy {
        doc.strategy = match s {
            StrategyOpt::Padded => "padded",
            StrategyOpt::SortedPacked => "sorted_packed",
            StrategyOpt::Both => "both",
        }
        .to_string();
    }
    if let Some(v) = args.seed {
        doc.seed = v;
    }
    if let Some(v) = args.warmup {
        doc.warmup_batches = v;
    }
    if let Some(v) = args.passes {
        doc.measured_passes = v;
    }
    args.model.apply(&mut doc.model);

    let strategies: Vec<Strategy> = match doc.strategy.as_str() {
        "padded" => vec![Strategy::Padded],
        "sorted_packed" => vec![Strategy::SortedPacked],
        "both" => vec![Strategy::Padded, Strategy::SortedPacked],
        other => bail!("unknown strategy {other:?} (expected padded, sorted_packed, or both)"),
    };

    let mut manifest = RunManifest::new("bench", &doc)?
        .input("corpus", &args.corpus)
        .output("report", "bench.csv");
    if let Some(weights) = &args.weights {
        manifest = manifest.input("weights", weights);
    }
    write_manifest(out, &manifest)?;

    let config = doc.model.to_config()?;
    let weights = load_weights(args.weights.as_deref(), &config, doc.seed)?;
    let corpus = io::load_corpus(&args.corpus)?;

    let mut rows = Vec::new();
    for strategy in strategies {
        let bconfig = BenchConfig {
            batch_size: doc.batch_size,
            msl: doc.msl,
            strategy,
            warmup_batches: doc.warmup_batches,
            measured_passes: doc.measured_passes,
            seed: doc.seed,
        };
        let run = run_throughput(&weights, &config, &corpus, &bconfig)?;
        println!(
            "{}: {} docs in {:.4}s = {:.1} docs/s, {} padding tokens",
            strategy.as_str(),
            run.report.total_docs,
            run.report.wall_seconds,
            run.report.docs_per_second,
            run.plan.padding_tokens
        );
        rows.push(run);
    }
    if let [padded, packed] = rows.as_mut_slice() {
        packed.report.relative_percent = Some(relative_speed(&packed.report, &padded.report)?);
        println!(
            "sorted_packed runs at {:.1}% of padded speed; padded would change throughput by {:.1}%",
            packed.report.relative_percent.unwrap(),
            padding_delta(&packed.report, &padded.report)?
        );
    }
    let csv_rows: Vec<_> = rows
        .iter()
        .map(|r| (r.report.clone(), r.plan.padding_tokens))
        .collect();
    io::save_bench_csv(&out.join("bench.csv"), &csv_rows)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CheckTarget {
    All,
    Contrastive,
    Kd,
    Mrl,
    Encoder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GradCheckDoc {
    seed: u64,
    instances: usize,
    epsilon: f64,
}

impl Default for GradCheckDoc {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            epsilon: 1e-5,
        }
    }
}

/// Pinned pass thresholds for the finite-difference comparison.
const LOSS_TOLERANCE: f64 = 1e-5;
const ENCODER_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Args)]
struct GradCheckArgs {
    /// Comma-separated targets, or all.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
    losses: Vec<CheckTarget>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seeded random instances per target.
    #[arg(long)]
    instances: Option<usize>,
    /// Central-difference step size.
    #[arg(long)]
    epsilon: Option<f64>,
}

fn run_gradcheck(out: &Path, config_path: Option<&Path>, args: GradCheckArgs) -> Result<()> {
    let mut doc: GradCheckDoc = load_config(config_path)?;
    if let Some(v) = args.seed {
        doc.seed = v;
    }
    if let Some(v) = args.instances {
        doc.instances = v;
    }
    if let Some(v) = args.epsilon {
        doc.epsilon = v;
    }
    if doc.instances == 0 {
        bail!("instances must be at least 1");
    }

    let manifest = RunManifest::new("grad-check", &doc)?.output("report", "gradcheck.csv");
    write_manifest(out, &manifest)?;

    let all = args.losses.contains(&CheckTarget::All);
    let wants = |t: CheckTarget| all || args.losses.contains(&t);
    let mut targets: Vec<(&str, f64)> = Vec::new();
    if wants(CheckTarget::Contrastive) {
        targets.push(("contrastive", LOSS_TOLERANCE));
    }
    if wants(CheckTarget::Kd) {
        targets.push(("kd", LOSS_TOLERANCE));
    }
    if wants(CheckTarget::Mrl) {
        targets.push(("mrl", LOSS_TOLERANCE));
    }
    if wants(CheckTarget::Encoder) {
        targets.push(("encoder", ENCODER_TOLERANCE));
    }

    let kd_taus = [0.5, 1.0, 2.0];
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (target, tolerance) in targets {
        let mut worst = 0.0f64;
        let mut coords = 0usize;
        for i in 0..doc.instances {
            let seed = doc.seed.wrapping_add(i as u64);
            let report = match target {
                "contrastive" => {
                    finite_difference_check(&contrastive_instance(seed)?, doc.epsilon)?
                }
                "kd" => finite_difference_check(
                    &kd_instance(seed, kd_taus[i % kd_taus.len()])?,
                    doc.epsilon,
                )?,
                "mrl" => finite_difference_check(&mrl_instance(seed)?, doc.epsilon)?,
                _ => {
                    let (weights, config, batch, cotangent) = encoder_instance(seed)?;
                    check_encoder(&weights, &config, &batch, &cotangent, doc.epsilon)?
                }
            };
            worst = worst.max(report.max_rel_err);
            coords += report.coords;
        }
        let ok = worst <= tolerance;
        println!(
            "{target}: max rel err {worst:.3e} over {} instances / {coords} coords (tolerance {tolerance:.0e}) {}",
            doc.instances,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(target);
        }
        rows.push((target.to_string(), worst, coords, tolerance));
    }
    io::save_gradcheck_csv(&out.join("gradcheck.csv"), &rows)?;
    if !failed.is_empty() {
        bail!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(())
}
