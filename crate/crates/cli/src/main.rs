use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use halludetect::checkpoint::save_checkpoint;
use halludetect::client::{read_predictions, write_predictions, InferenceClient, Prediction};
use halludetect::data::{parse_dataset, parse_dataset_with, split_by_task, Label, ParseOptions, Split, SplitKind, Task, Track};
use halludetect::eval::report;
use halludetect::merge::{merge, MergeMethod, MergeSpec};
use halludetect::mock::{MockMode, MockRule, MockServer};
use halludetect::pipeline::{prepare_demos, Pipeline, RunConfig};
use halludetect::prompt::{assemble_prompt, InstructionVariant, RationaleCache};
use halludetect::synthetic::planted_split;
use halludetect::vote::{apply_voting, probabilities_by_point, search_weights, voted_predictions, VoteWeights, WeightSearchConfig};
use halludetect::weak::{export_sft, generate_weak_labels, WeakLabeledSet};
use halludetect::{Error, Result};

#[derive(Parser)]
#[command(name = "halludetect", version, about = "Hallucination detection pipeline for LLM outputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a dataset file, print per-task counts
    Ingest(IngestArgs),
    /// Print the prompt a config would send for one datapoint
    PromptPreview(PreviewArgs),
    /// Run one model with one parameter set over a split
    Infer(InferArgs),
    /// Generate consistency-filtered, balanced weak labels
    GenLabels(GenLabelsArgs),
    /// Convert weak labels into an instruction-tuning JSONL file
    ExportSft(ExportSftArgs),
    /// Score predictions against a labeled split
    Eval(EvalArgs),
    /// Search per-task voting weights on a labeled split
    VoteSearch(VoteSearchArgs),
    /// Fuse model predictions with saved voting weights
    VoteApply(VoteApplyArgs),
    /// Merge safetensors checkpoints
    Merge(MergeArgs),
    /// Serve the deterministic mock completion backend
    MockServe(MockServeArgs),
    /// Run every pipeline stage from a config file
    Run(RunArgs),
    /// Write a synthetic split with planted labels for the oracle mock
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Trial,
    Train,
    Validation,
    Test,
}

impl From<KindArg> for SplitKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Trial => SplitKind::Trial,
            KindArg::Train => SplitKind::UnlabeledTrain,
            KindArg::Validation => SplitKind::Validation,
            KindArg::Test => SplitKind::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TrackArg {
    Agnostic,
    Aware,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Linear,
    Slerp,
    Ties,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fixture,
    Oracle,
}

#[derive(Args)]
struct IngestArgs {
    input: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Treat the input as one JSON record per line
    #[arg(long)]
    jsonl: bool,
    #[arg(long, value_enum)]
    track: Option<TrackArg>,
    /// Write the normalized split here
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Which configured split to read.
#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Trial,
    Unlabeled,
    Validation,
    Test,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "validation")]
    split: SplitArg,
    /// Datapoint id
    #[arg(long)]
    id: String,
    /// Rationale cache for chain-of-thought prompts
    #[arg(long)]
    rationales: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "validation")]
    split: SplitArg,
    #[arg(long)]
    model: String,
    #[arg(long)]
    params: String,
    /// Rationale cache, read and updated when the prompt uses chain of thought
    #[arg(long)]
    rationales: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenLabelsArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output JSONL of balanced weak labels
    #[arg(long)]
    out: PathBuf,
    /// Also write every unanimous entry before balancing
    #[arg(long)]
    consistent_out: Option<PathBuf>,
    #[arg(long)]
    rationales: Option<PathBuf>,
}

#[derive(Args)]
struct ExportSftArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum, default_value = "ours")]
    variant: VariantArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Naive,
    Ours,
}

impl From<VariantArg> for InstructionVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Naive => InstructionVariant::Naive,
            VariantArg::Ours => InstructionVariant::Ours,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, value_enum, default_value = "validation")]
    kind: KindArg,
    /// Write the JSON report here as well
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct VoteSearchArgs {
    /// Prediction files, one per model
    #[arg(long, num_args = 2.., required = true)]
    predictions: Vec<PathBuf>,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VoteApplyArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    predictions: Vec<PathBuf>,
    /// Split whose points are voted on
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    kind: KindArg,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long = "input", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    density: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MockServeArgs {
    /// Fixture file: JSON map from prompt SHA-256 to answer
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "fixture")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.8)]
    accuracy: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-model seed override, `model=seed`
    #[arg(long = "model-seed", value_parser = parse_model_seed)]
    model_seeds: Vec<(String, u64)>,
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
}

fn parse_model_seed(s: &str) -> std::result::Result<(String, u64), String> {
    let (model, seed) = s.split_once('=').ok_or_else(|| format!("expected model=seed, got `{s}`"))?;
    let seed = seed.parse().map_err(|e| format!("bad seed in `{s}`: {e}"))?;
    Ok((model.to_string(), seed))
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn load_config_split(config: &RunConfig, which: SplitArg) -> Result<Split> {
    let paths = &config.paths;
    match which {
        SplitArg::Trial => parse_dataset(&paths.trial, SplitKind::Trial),
        SplitArg::Unlabeled => parse_dataset(&paths.unlabeled, SplitKind::UnlabeledTrain),
        SplitArg::Validation => parse_dataset(&paths.validation, SplitKind::Validation),
        SplitArg::Test => match &paths.test {
            Some(p) => parse_dataset(p, SplitKind::Test),
            None => Err(Error::Config("config has no test path".into())),
        },
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let config = RunConfig::load(path)?;
    config.validate()?;
    Ok(config)
}

fn load_cache(path: Option<&PathBuf>) -> Result<RationaleCache> {
    match path {
        Some(p) => RationaleCache::load(p),
        None => Ok(RationaleCache::new()),
    }
}

fn save_cache(path: Option<&PathBuf>, cache: &RationaleCache) -> Result<()> {
    match path {
        Some(p) if !cache.is_empty() => cache.save(p),
        _ => Ok(()),
    }
}

fn ingest(args: IngestArgs) -> Result<()> {
    let options = ParseOptions {
        jsonl: args.jsonl,
        track: args.track.map(|t| match t {
            TrackArg::Agnostic => Track::Agnostic,
            TrackArg::Aware => Track::Aware,
        }),
    };
    let split = parse_dataset_with(&args.input, args.kind.into(), &options)?;
    println!("{} points", split.len());
    for (task, points) in split_by_task(&split) {
        let h = points.iter().filter(|p| p.gold_label == Some(Label::Hallucination)).count();
        let n = points.iter().filter(|p| p.gold_label == Some(Label::NotHallucination)).count();
        println!("{task}: {} points, {h} hallucination, {n} not hallucination", points.len());
    }
    if let Some(out) = args.out {
        write_file(&out, &split.to_json()?)?;
    }
    Ok(())
}

async fn prompt_preview(args: PreviewArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let split = load_config_split(&config, args.split)?;
    let trial = load_config_split(&config, SplitArg::Trial)?;
    let point = split
        .points
        .iter()
        .find(|p| p.id == args.id)
        .ok_or_else(|| Error::UnknownPoint(args.id.clone()))?;
    let prompt = config.prompt_config();
    let mut demos = halludetect::prompt::sample_demonstrations(&trial, point.task, prompt.shots, prompt.seed)?;
    if prompt.cot {
        let cache = load_cache(args.rationales.as_ref())?;
        let model = &config.rationale_model()?.model_id;
        for demo in &mut demos {
            demo.rationale = cache.get(&demo.point.id, model);
        }
    }
    let rendered = assemble_prompt(point, &demos, &prompt)?;
    println!("{}", rendered.text);
    Ok(())
}

async fn infer(args: InferArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let endpoint = config.endpoint(&args.model)?.clone();
    let params = config.params(&args.params)?.clone();
    let split = load_config_split(&config, args.split)?;
    let trial = load_config_split(&config, SplitArg::Trial)?;
    let prompt = config.prompt_config();
    if prompt.cot && params.logprob_mode {
        return Err(Error::Config(format!(
            "param set `{}` scores by log-probability, which cannot read a chain-of-thought answer",
            params.id
        )));
    }
    let client = InferenceClient::new(config.max_in_flight);
    let cache = load_cache(args.rationales.as_ref())?;
    let demos = prepare_demos(&trial, &split.points, &prompt, &client, config.rationale_model()?, &cache).await?;
    save_cache(args.rationales.as_ref(), &cache)?;
    let preds = client.predict_batch(&split.points, &demos, &prompt, &endpoint, &params).await?;
    write_predictions(&args.out, &preds)?;
    let undecided = preds.iter().filter(|p| p.is_undecided()).count();
    println!("{} predictions, {undecided} undecided", preds.len());
    Ok(())
}

async fn gen_labels(args: GenLabelsArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let unlabeled = load_config_split(&config, SplitArg::Unlabeled)?;
    let trial = load_config_split(&config, SplitArg::Trial)?;
    let prompt = config.prompt_config();
    let client = InferenceClient::new(config.max_in_flight);
    let cache = load_cache(args.rationales.as_ref())?;
    let demos = prepare_demos(&trial, &unlabeled.points, &prompt, &client, config.rationale_model()?, &cache).await?;
    save_cache(args.rationales.as_ref(), &cache)?;
    let run = generate_weak_labels(
        &unlabeled,
        &config.consistency,
        &prompt,
        &demos,
        &config.endpoints,
        &config.param_sets,
        &client,
        config.seeds.balance,
    )
    .await?;
    run.set.save_jsonl(&args.out)?;
    if let Some(path) = &args.consistent_out {
        WeakLabeledSet {
            entries: run.consistent.clone(),
        }
        .save_jsonl(path)?;
    }
    let (h, n) = run.set.class_counts();
    println!(
        "{} points, {} consistent, {} kept after balancing ({h} hallucination, {n} not hallucination)",
        unlabeled.len(),
        run.consistent.len(),
        run.set.entries.len()
    );
    Ok(())
}

fn export(args: ExportSftArgs) -> Result<()> {
    let set = WeakLabeledSet::load_jsonl(&args.labels)?;
    export_sft(&set, args.variant.into(), &args.out)?;
    println!("{} records", set.entries.len());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let preds = read_predictions(&args.predictions)?;
    let gold = parse_dataset(&args.gold, args.kind.into())?;
    let r = report(&preds, &gold)?;
    print!("{}", r.to_table());
    if let Some(path) = args.json {
        write_json(&path, &r)?;
    }
    Ok(())
}

/// Reads prediction files and indexes probabilities by model id.
fn load_model_probs(paths: &[PathBuf]) -> Result<(Vec<String>, BTreeMap<String, BTreeMap<String, f64>>)> {
    let mut models = Vec::new();
    let mut probs = BTreeMap::new();
    for path in paths {
        let preds: Vec<Prediction> = read_predictions(path)?;
        let model = preds
            .first()
            .map(|p| p.model_id.clone())
            .ok_or_else(|| Error::Config(format!("{} holds no predictions", path.display())))?;
        if preds.iter().any(|p| p.model_id != model) {
            return Err(Error::Config(format!("{} mixes several models", path.display())));
        }
        if probs.insert(model.clone(), probabilities_by_point(&preds)).is_some() {
            return Err(Error::Config(format!("model `{model}` appears in more than one file")));
        }
        models.push(model);
    }
    models.sort();
    Ok((models, probs))
}

fn vote_search(args: VoteSearchArgs) -> Result<()> {
    let (models, probs) = load_model_probs(&args.predictions)?;
    let gold = parse_dataset(&args.gold, SplitKind::Validation)?;
    let cfg = WeightSearchConfig {
        step: args.step,
        threshold: args.threshold,
    };
    let mut weights: BTreeMap<Task, VoteWeights> = BTreeMap::new();
    for task in split_by_task(&gold).into_keys() {
        let w = search_weights(task, &models, &probs, &gold, &cfg)?;
        let shown: Vec<String> = w.weights.iter().map(|(m, x)| format!("{m}={x:.2}")).collect();
        println!("{task}: {}", shown.join(" "));
        weights.insert(task, w);
    }
    write_json(&args.out, &weights)
}

fn vote_apply(args: VoteApplyArgs) -> Result<()> {
    let weights: BTreeMap<Task, VoteWeights> = read_json(&args.weights)?;
    for w in weights.values() {
        w.validate()?;
    }
    let (_, probs) = load_model_probs(&args.predictions)?;
    let split = parse_dataset(&args.input, args.kind.into())?;
    let voted = apply_voting(&weights, &split.points, &probs, args.threshold)?;
    write_predictions(&args.out, &voted_predictions(&voted, "vote"))?;
    println!("{} voted predictions", voted.len());
    Ok(())
}

fn merge_cmd(args: MergeArgs) -> Result<()> {
    let spec = MergeSpec {
        method: match args.method {
            MethodArg::Linear => MergeMethod::Linear,
            MethodArg::Slerp => MergeMethod::Slerp,
            MethodArg::Ties => MergeMethod::Ties,
        },
        inputs: args.inputs,
        weights: args.weights,
        t: args.t,
        base: args.base,
        density: args.density,
        lambda: args.lambda,
    };
    let merged = merge(&spec)?;
    save_checkpoint(&merged, &args.out)?;
    println!("wrote {} tensors to {}", merged.tensors.len(), args.out.display());
    Ok(())
}

async fn mock_serve(args: MockServeArgs) -> Result<()> {
    let mut rule = match args.mode {
        ModeArg::Oracle => MockRule::oracle(args.accuracy, args.seed),
        ModeArg::Fixture => {
            let path = args
                .fixtures
                .as_ref()
                .ok_or_else(|| Error::Config("fixture mode needs --fixtures".into()))?;
            MockRule::fixtures(MockRule::load_fixtures(path)?)
        }
    };
    if matches!(rule.mode, MockMode::Oracle) {
        if let Some(path) = &args.fixtures {
            rule.fixtures = MockRule::load_fixtures(path)?;
        }
    }
    rule.model_seeds = args.model_seeds.into_iter().collect();
    rule.delay_ms = args.delay_ms;
    let server = MockServer::start(rule, args.bind).await?;
    println!("listening on {}", server.base_url());
    tokio::select! {
        _ = tokio::signal::ctrl_c() => server.stop().await,
    }
    Ok(())
}

async fn run(args: RunArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?;
    let pipeline = Pipeline::new(config)?;
    let outcome = pipeline.run().await?;
    for stage in &outcome.skipped {
        println!("{stage}: up to date");
    }
    for stage in &outcome.executed {
        println!("{stage}: done");
    }
    println!("{}", outcome.run_dir.display());
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let split = planted_split(args.kind.into(), args.n, args.seed);
    write_file(&args.out, &split.to_json()?)
}

async fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::PromptPreview(a) => prompt_preview(a).await,
        Command::Infer(a) => infer(a).await,
        Command::GenLabels(a) => gen_labels(a).await,
        Command::ExportSft(a) => export(a),
        Command::Eval(a) => eval(a),
        Command::VoteSearch(a) => vote_search(a),
        Command::VoteApply(a) => vote_apply(a),
        Command::Merge(a) => merge_cmd(a),
        Command::MockServe(a) => mock_serve(a).await,
        Command::Run(a) => run(a).await,
        Command::Synth(a) => synth(a),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
