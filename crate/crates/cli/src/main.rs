//! Command-line front end: builds distractor datasets, runs prompting
//! plans, and scores the transcripts they leave behind.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use r3prompt::client::{
    CachingProvider, ClientError, HttpProvider, Provider, ReplayProvider, ResponseCache,
};
use r3prompt::eval::{
    classify_errors, load_error_labels, noise_accuracy_series, render_report_table, score_run,
    ErrorClass, EvalError, EvalRecord, RunReport,
};
use r3prompt::noise::{
    build_graded_variants, build_ic_dataset, build_single_kind, builtin_templates, load_corpus,
    load_templates, save_corpus, subsample, CorpusFormat, NoiseError, NoiseKind, NoiseTemplate,
    Problem,
};
use r3prompt::pipeline::{
    evaluate_run, load_transcripts, planned_run_id, resolve_texts, run_ablation, run_dataset,
    BankSet, Method, PipelineError, PipelinePlan, RunConfig, RunOutput,
};
use r3prompt::prompts::{PromptError, Stage, DEFAULT_INSTRUCTED_TRIGGER};

use config::{load_config, AppConfig, ConfigError};

#[derive(Parser)]
#[command(
    name = "r3prompt",
    version,
    about = "Staged review/rephrase/resolve prompting over math word problems: \
             dataset building, runs, scoring, and reports"
)]
struct Cli {
    /// Configuration file (TOML); defaults to ./r3prompt.toml when present.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a distractor-injected dataset from a clean corpus.
    Build(BuildArgs),
    /// Run a prompting plan over a dataset and score it.
    Run(RunArgs),
    /// Re-score a finished run from its stored transcripts.
    Score(ScoreArgs),
    /// Aggregate scored runs into an accuracy-versus-distractor-count series.
    Report(ReportArgs),
}

#[derive(Args)]
struct BuildArgs {
    /// Clean corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Corpus layout: native, mawps (also addsub/multiarith/singleeq),
    /// svamp, gsm8k, or gsm-ic.
    #[arg(long, default_value = "native")]
    format: String,
    /// Distractor template file; defaults to the built-in pool (or the
    /// configured assets directory when it carries one).
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Probability of inserting one in-topic distractor per problem.
    #[arg(long, default_value_t = 0.5)]
    p_in: f64,
    /// Probability of inserting one off-topic distractor per problem.
    #[arg(long, default_value_t = 0.5)]
    p_off: f64,
    /// Graded build: one output file per distractor count 1..=N.
    #[arg(long, value_name = "N", conflicts_with_all = ["single_kind", "p_in", "p_off"])]
    graded: Option<usize>,
    /// Exactly one distractor of this kind per problem: in-topic or off-topic.
    #[arg(long, value_name = "KIND", conflicts_with_all = ["p_in", "p_off"])]
    single_kind: Option<String>,
    /// Subsample the corpus to N problems before injection.
    #[arg(long, value_name = "N")]
    sample: Option<usize>,
    /// Override the source tag recorded on every problem.
    #[arg(long)]
    label: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; graded builds insert -1..-N before the extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset file (native layout).
    #[arg(long)]
    dataset: PathBuf,
    /// r3, manual-cot, or instructed-cot.
    #[arg(long, default_value = "r3")]
    method: String,
    /// Comma-separated stage subset for r3, e.g. review,resolve.
    #[arg(long)]
    stages: Option<String>,
    /// Fixture file of recorded responses; runs offline against it.
    #[arg(long, value_name = "FILE")]
    replay: Option<PathBuf>,
    /// Self-consistency sample count for the final stage.
    #[arg(long, value_name = "N")]
    sc: Option<usize>,
    #[arg(long, value_name = "T")]
    sc_temperature: Option<f64>,
    /// Exemplar count per bank.
    #[arg(long)]
    k: Option<usize>,
    /// Problems processed concurrently.
    #[arg(long, value_name = "WIDTH")]
    parallel: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Output directory; defaults to <output_dir>/<run id>.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Directory holding review.txt, rephrase.txt, resolve.txt, baseline.txt.
    #[arg(long, value_name = "DIR")]
    banks_dir: Option<PathBuf>,
    /// Run all four stage-subset combinations instead of one plan.
    #[arg(long, conflicts_with_all = ["stages", "sc"])]
    ablation: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// Run directory holding transcripts.jsonl.
    #[arg(long, value_name = "DIR")]
    run_dir: PathBuf,
    /// Dataset the run executed against.
    #[arg(long)]
    dataset: PathBuf,
    /// Manual error-class labels (JSONL lines of problem_id, error_class).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Report file; defaults to <run-dir>/report.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory; repeat once per run.
    #[arg(long = "run-dir", value_name = "DIR", required = true)]
    run_dirs: Vec<PathBuf>,
    /// Dataset file; repeat once per run, in the same order.
    #[arg(long = "dataset", required = true)]
    datasets: Vec<PathBuf>,
    /// Series output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Provider(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Provider(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Provider(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<NoiseError> for CliError {
    fn from(e: NoiseError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::FixtureFormat { .. } => CliError::Data(e.to_string()),
            other => CliError::Provider(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Client(c) => CliError::from(c),
            PipelineError::InvalidPlan(_) | PipelineError::InvalidConfig(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    // Die silently when a downstream pipe closes (`r3prompt run ... | head`)
    // instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let config = match load_config(cli.config.as_deref()) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Build(args) => cmd_build(args, &config),
        Command::Run(args) => cmd_run(args, &config),
        Command::Score(args) => cmd_score(args, &config),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn parse_kind(s: &str) -> Result<NoiseKind, CliError> {
    match s.replace('-', "_").as_str() {
        "in_topic" => Ok(NoiseKind::InTopic),
        "off_topic" => Ok(NoiseKind::OffTopic),
        other => Err(CliError::Usage(format!(
            "unknown distractor kind {other:?} (expected in-topic or off-topic)"
        ))),
    }
}

fn templates_for(args_path: Option<&Path>, config: &AppConfig) -> Result<Vec<NoiseTemplate>, CliError> {
    if let Some(path) = args_path {
        return Ok(load_templates(path)?);
    }
    if let Some(assets) = &config.paths.assets_dir {
        let candidate = assets.join("noise_templates.jsonl");
        if candidate.exists() {
            return Ok(load_templates(&candidate)?);
        }
    }
    Ok(builtin_templates())
}

fn graded_path(out: &Path, n: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("jsonl");
    out.with_file_name(format!("{stem}-{n}.{ext}"))
}

fn write_dataset(path: &Path, problems: &[Problem]) -> Result<(), CliError> {
    save_corpus(path, problems)?;
    let total_in: usize = problems.iter().map(|p| p.noise_count(NoiseKind::InTopic)).sum();
    let total_off: usize = problems.iter().map(|p| p.noise_count(NoiseKind::OffTopic)).sum();
    let len = problems.len().max(1) as f64;
    println!(
        "wrote {} problems to {} (avg distractors: {:.2} in-topic, {:.2} off-topic)",
        problems.len(),
        path.display(),
        total_in as f64 / len,
        total_off as f64 / len,
    );
    Ok(())
}

fn cmd_build(args: BuildArgs, config: &AppConfig) -> Result<(), CliError> {
    let format = CorpusFormat::from_str(&args.format)?;
    let mut corpus = load_corpus(&args.corpus, format)?;
    if let Some(label) = &args.label {
        for problem in &mut corpus {
            problem.source = label.clone();
        }
    }
    if let Some(n) = args.sample {
        corpus = subsample(&corpus, n, args.seed);
    }
    let templates = templates_for(args.templates.as_deref(), config)?;

    if let Some(n_max) = args.graded {
        let variants = build_graded_variants(&corpus, &templates, n_max, args.seed)?;
        for (n, dataset) in &variants {
            write_dataset(&graded_path(&args.out, *n), dataset)?;
        }
        return Ok(());
    }
    let dataset = match &args.single_kind {
        Some(kind) => build_single_kind(&corpus, &templates, parse_kind(kind)?, args.seed)?,
        None => build_ic_dataset(&corpus, &templates, args.p_in, args.p_off, args.seed)?,
    };
    write_dataset(&args.out, &dataset)
}

fn parse_method(s: &str) -> Result<Method, CliError> {
    match s {
        "r3" => Ok(Method::R3),
        "manual-cot" => Ok(Method::ManualCot),
        "instructed-cot" => Ok(Method::InstructedCot),
        other => Err(CliError::Usage(format!(
            "unknown method {other:?} (expected r3, manual-cot, or instructed-cot)"
        ))),
    }
}

fn parse_stages(s: &str) -> Result<Vec<Stage>, CliError> {
    s.split(',')
        .map(|part| match part.trim() {
            "review" => Ok(Stage::Review),
            "rephrase" => Ok(Stage::Rephrase),
            "resolve" => Ok(Stage::Resolve),
            other => Err(CliError::Usage(format!(
                "unknown stage {other:?} (expected review, rephrase, resolve)"
            ))),
        })
        .collect()
}

fn build_plan(args: &RunArgs, config: &AppConfig) -> Result<PipelinePlan, CliError> {
    let method = parse_method(&args.method)?;
    let mut plan = match method {
        Method::R3 => match &args.stages {
            Some(s) => PipelinePlan::r3_with_stages(&parse_stages(s)?)?,
            None => PipelinePlan::r3(),
        },
        Method::ManualCot | Method::InstructedCot => {
            if args.stages.is_some() {
                return Err(CliError::Usage(
                    "--stages applies to --method r3 only".into(),
                ));
            }
            PipelinePlan::baseline(method)?
        }
    };
    plan.temperatures = config.run.temperatures;
    if method == Method::InstructedCot {
        match &config.run.instructed_trigger {
            Some(trigger) => plan.instructed_trigger = Some(trigger.clone()),
            None => eprintln!(
                "warning: run.instructed_trigger is not configured; \
                 using the default trigger: {DEFAULT_INSTRUCTED_TRIGGER:?}"
            ),
        }
    }
    let sc_n = args.sc.unwrap_or(config.run.sc_n);
    if sc_n > 1 {
        let temperature = args.sc_temperature.unwrap_or(config.run.sc_temperature);
        plan = plan.with_self_consistency(sc_n, temperature);
    }
    plan.validate()?;
    Ok(plan)
}

fn banks_for(args: &RunArgs, config: &AppConfig) -> Result<BankSet, CliError> {
    if let Some(dir) = &args.banks_dir {
        return Ok(BankSet::load_dir(dir)?);
    }
    if let Some(assets) = &config.paths.assets_dir {
        let dir = assets.join("banks");
        if dir.join("review.txt").exists() {
            return Ok(BankSet::load_dir(&dir)?);
        }
    }
    Ok(BankSet::builtin())
}

fn provider_for(args: &RunArgs, config: &AppConfig) -> Result<Box<dyn Provider>, CliError> {
    if let Some(path) = &args.replay {
        return Ok(Box::new(ReplayProvider::load(path)?));
    }
    if config.provider.endpoint_url.is_empty() {
        return Err(CliError::Usage(
            "provider.endpoint_url is not configured; set it in the config file or pass --replay"
                .into(),
        ));
    }
    let mut http = HttpProvider::new(
        &config.provider.endpoint_url,
        &config.provider.credential_env_name,
    )?;
    if config.provider.requests_per_minute > 0 {
        http = http.with_rate_limit(config.provider.requests_per_minute);
    }
    let cache = ResponseCache::new(&config.paths.cache_dir);
    Ok(Box::new(CachingProvider::new(http, cache)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("cannot serialize {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn score_output(
    output: &RunOutput,
    dataset: &[Problem],
    manual: &BTreeMap<String, ErrorClass>,
) -> Result<(RunReport, Vec<EvalRecord>), CliError> {
    let mut records = evaluate_run(&output.transcripts, dataset)?;
    let texts = resolve_texts(&output.transcripts);
    classify_errors(&texts, &mut records, manual);
    let report = score_run(&records)?;
    Ok((report, records))
}

fn persist_score(dir: &Path, report: &RunReport, records: &[EvalRecord]) -> Result<(), CliError> {
    write_json(&dir.join("report.json"), report)?;
    let mut lines = String::new();
    for record in records {
        lines.push_str(&serde_json::to_string(record).expect("record serializes"));
        lines.push('\n');
    }
    let path = dir.join("records.jsonl");
    std::fs::write(&path, lines)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn cmd_run(args: RunArgs, config: &AppConfig) -> Result<(), CliError> {
    let dataset = load_corpus(&args.dataset, CorpusFormat::Native)?;
    let plan = build_plan(&args, config)?;
    let banks = banks_for(&args, config)?;
    let provider = provider_for(&args, config)?;
    let mut run_cfg = RunConfig {
        model: args.model.clone().unwrap_or_else(|| config.provider.model.clone()),
        k: args.k.unwrap_or(config.run.k),
        parallel_width: args.parallel.unwrap_or(config.run.parallel_width),
        seed: args.seed.unwrap_or(config.run.seed),
        max_tokens: args.max_tokens.unwrap_or(config.run.max_tokens),
        output_dir: None,
        run_id: None,
    };

    if args.ablation {
        let base = args
            .out_dir
            .clone()
            .unwrap_or_else(|| config.paths.output_dir.join("ablation"));
        run_cfg.output_dir = Some(base.clone());
        let outputs = run_ablation(&run_cfg, &banks, &dataset, provider.as_ref())?;
        println!("ablation over {} problems:", dataset.len());
        for (label, output) in &outputs {
            let (report, records) = score_output(output, &dataset, &BTreeMap::new())?;
            let dir = base.join(label);
            persist_score(&dir, &report, &records)?;
            println!(
                "  {label:<24} accuracy {:.3} ({}/{})",
                report.accuracy, report.correct, report.total
            );
        }
        println!("reports written under {}", base.display());
        return Ok(());
    }

    let run_id = planned_run_id(&plan, &run_cfg, &dataset);
    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| config.paths.output_dir.join(&run_id));
    run_cfg.output_dir = Some(out_dir.clone());
    let output = run_dataset(&plan, &run_cfg, &banks, &dataset, provider.as_ref())?;
    let (report, records) = score_output(&output, &dataset, &BTreeMap::new())?;
    persist_score(&out_dir, &report, &records)?;
    println!("run {} over {} problems", output.run_id, dataset.len());
    println!("{}", render_report_table(&report));
    println!("transcripts and report written to {}", out_dir.display());
    Ok(())
}

fn cmd_score(args: ScoreArgs, _config: &AppConfig) -> Result<(), CliError> {
    let transcripts = load_transcripts(&args.run_dir.join("transcripts.jsonl"))?;
    let dataset = load_corpus(&args.dataset, CorpusFormat::Native)?;
    let manual = match &args.labels {
        Some(path) => load_error_labels(path)?,
        None => BTreeMap::new(),
    };
    let mut records = evaluate_run(&transcripts, &dataset)?;
    let texts = resolve_texts(&transcripts);
    classify_errors(&texts, &mut records, &manual);
    let report = score_run(&records)?;
    let out = args.out.clone().unwrap_or_else(|| args.run_dir.join("report.json"));
    write_json(&out, &report)?;
    println!("{}", render_report_table(&report));
    println!("report written to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct SeriesPoint {
    noise_count: usize,
    total: usize,
    correct: usize,
    accuracy: f64,
}

#[derive(Serialize)]
struct SeriesFile {
    points: Vec<SeriesPoint>,
    total: usize,
    accuracy: f64,
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    if args.run_dirs.len() != args.datasets.len() {
        return Err(CliError::Usage(format!(
            "{} run dirs but {} datasets; pass one --dataset per --run-dir",
            args.run_dirs.len(),
            args.datasets.len()
        )));
    }
    let mut records = Vec::new();
    for (run_dir, dataset_path) in args.run_dirs.iter().zip(&args.datasets) {
        let transcripts = load_transcripts(&run_dir.join("transcripts.jsonl"))?;
        let dataset = load_corpus(dataset_path, CorpusFormat::Native)?;
        records.extend(evaluate_run(&transcripts, &dataset)?);
    }
    let report = score_run(&records)?;
    let series = noise_accuracy_series(&report);
    let points: Vec<SeriesPoint> = series
        .iter()
        .map(|&(noise_count, accuracy)| {
            let (correct, total) = report.by_noise_count[&noise_count];
            SeriesPoint {
                noise_count,
                total,
                correct,
                accuracy,
            }
        })
        .collect();
    for point in &points {
        println!(
            "distractors {}: accuracy {:.3} ({}/{})",
            point.noise_count, point.accuracy, point.correct, point.total
        );
    }
    let file = SeriesFile {
        points,
        total: report.total,
        accuracy: report.accuracy,
    };
    write_json(&args.out, &file)?;
    println!("series written to {}", args.out.display());
    Ok(())
}
