//! Runs prompting plans over datasets: renders each stage's prompt, calls
//! the provider, parses stage outputs, chains them forward, and records
//! everything in transcripts.
//!
//! A plan is either the staged protocol (any stage subset that ends in
//! resolve) or a one-turn baseline. Problems run concurrently up to
//! `parallel_width`; the stages of one problem are strictly sequential.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, CompletionRequest, Provider, TokenUsage};
use crate::eval::{
    answers_equal, extract_answer, majority_vote, EvalRecord, Prediction,
};
use crate::noise::Problem;
use crate::prompts::{
    builtin, render_baseline_prompt, render_stage_prompt, parse_enumerated_response,
    BankKind, BaselineKind, ExemplarBank, PromptError, Stage, StagePromptSpec,
    DEFAULT_INSTRUCTED_TRIGGER,
};
use crate::seed::sha256_hex;

/// Sampling temperature used for self-consistency draws unless configured
/// otherwise.
pub const DEFAULT_SC_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    R3,
    ManualCot,
    InstructedCot,
}

/// Per-stage sampling temperatures. Every stage defaults to 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StageTemperatures {
    pub review: f64,
    pub rephrase: f64,
    pub resolve: f64,
}

impl StageTemperatures {
    fn for_stage(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Review => self.review,
            Stage::Rephrase => self.rephrase,
            Stage::Resolve => self.resolve,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistency {
    pub n: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub method: Method,
    /// Stage subset, in execution order. Used by [`Method::R3`] only; must
    /// include [`Stage::Resolve`]. Baselines leave it empty.
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub temperatures: StageTemperatures,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_consistency: Option<SelfConsistency>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructed_trigger: Option<String>,
}

impl PipelinePlan {
    /// The full three-stage protocol.
    pub fn r3() -> Self {
        PipelinePlan {
            method: Method::R3,
            stages: vec![Stage::Review, Stage::Rephrase, Stage::Resolve],
            temperatures: StageTemperatures::default(),
            self_consistency: None,
            instructed_trigger: None,
        }
    }

    /// A stage subset. Duplicates collapse, order normalizes to
    /// review, rephrase, resolve; the resolve stage is mandatory.
    pub fn r3_with_stages(stages: &[Stage]) -> Result<Self, PipelineError> {
        let mut stages = stages.to_vec();
        stages.sort();
        stages.dedup();
        let mut plan = Self::r3();
        plan.stages = stages;
        plan.validate()?;
        Ok(plan)
    }

    /// A one-turn comparison method. The instructed variant defaults to the
    /// shipped trigger sentence.
    pub fn baseline(method: Method) -> Result<Self, PipelineError> {
        let instructed_trigger = match method {
            Method::R3 => {
                return Err(PipelineError::InvalidPlan(
                    "baseline() takes a one-turn method".into(),
                ))
            }
            Method::ManualCot => None,
            Method::InstructedCot => Some(DEFAULT_INSTRUCTED_TRIGGER.to_string()),
        };
        Ok(PipelinePlan {
            method,
            stages: Vec::new(),
            temperatures: StageTemperatures::default(),
            self_consistency: None,
            instructed_trigger,
        })
    }

    pub fn with_self_consistency(mut self, n: usize, temperature: f64) -> Self {
        self.self_consistency = Some(SelfConsistency { n, temperature });
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        match self.method {
            Method::R3 => {
                if !self.stages.contains(&Stage::Resolve) {
                    return Err(PipelineError::InvalidPlan(
                        "the resolve stage is required".into(),
                    ));
                }
            }
            Method::ManualCot | Method::InstructedCot => {
                if !self.stages.is_empty() {
                    return Err(PipelineError::InvalidPlan(
                        "one-turn baselines take no stage list".into(),
                    ));
                }
            }
        }
        if let Some(sc) = &self.self_consistency {
            if sc.n == 0 {
                return Err(PipelineError::InvalidPlan(
                    "self-consistency needs at least one sample".into(),
                ));
            }
            if !sc.temperature.is_finite() || sc.temperature < 0.0 {
                return Err(PipelineError::InvalidPlan(
                    "self-consistency temperature must be non-negative".into(),
                ));
            }
        }
        Ok(())
    }

    fn has_stage(&self, stage: Stage) -> bool {
        self.method == Method::R3 && self.stages.contains(&stage)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: String,
    /// Exemplar count cap applied to every bank.
    pub k: usize,
    pub parallel_width: usize,
    pub seed: u64,
    pub max_tokens: u32,
    /// When set, the run writes `manifest.json` and `transcripts.jsonl`
    /// here, transcripts incrementally in dataset order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Overrides the fingerprint-derived run id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "local".into(),
            k: 8,
            parallel_width: 1,
            seed: 0,
            max_tokens: 512,
            output_dir: None,
            run_id: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 {
            return Err(PipelineError::InvalidConfig("k must be at least 1".into()));
        }
        if self.parallel_width == 0 {
            return Err(PipelineError::InvalidConfig(
                "parallel_width must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// The four exemplar banks a run draws from.
#[derive(Debug, Clone)]
pub struct BankSet {
    pub review: ExemplarBank,
    pub rephrase: ExemplarBank,
    pub resolve: ExemplarBank,
    pub baseline: ExemplarBank,
}

impl BankSet {
    pub fn builtin() -> Self {
        BankSet {
            review: builtin::review_bank(),
            rephrase: builtin::rephrase_bank(),
            resolve: builtin::resolve_bank(),
            baseline: builtin::baseline_bank(),
        }
    }

    /// Loads `review.txt`, `rephrase.txt`, `resolve.txt`, and `baseline.txt`
    /// from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        Ok(BankSet {
            review: ExemplarBank::load(&dir.join("review.txt"), BankKind::Review)?,
            rephrase: ExemplarBank::load(&dir.join("rephrase.txt"), BankKind::Rephrase)?,
            resolve: ExemplarBank::load(&dir.join("resolve.txt"), BankKind::Resolve)?,
            baseline: ExemplarBank::load(&dir.join("baseline.txt"), BankKind::Baseline)?,
        })
    }

    pub fn truncated(&self, k: usize) -> Self {
        BankSet {
            review: self.review.truncated(k),
            rephrase: self.rephrase.truncated(k),
            resolve: self.resolve.truncated(k),
            baseline: self.baseline.truncated(k),
        }
    }
}

/// One prompt/response exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub stage: Stage,
    pub sample_index: usize,
    pub prompt: String,
    pub response: String,
    pub temperature: f64,
    pub token_usage: Option<TokenUsage>,
    pub timestamp: String,
    pub latency_ms: u64,
}

/// Everything one problem produced in one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub run_id: String,
    pub problem_id: String,
    pub turns: Vec<Turn>,
    /// Parsed review output, when the review stage ran and parsed.
    pub key_sentences: Option<Vec<String>>,
    /// Parsed rephrase output, when the rephrase stage ran and parsed.
    pub variables: Option<Vec<String>>,
    pub prediction: Prediction,
    /// Per-draw predictions when the final stage was sampled more than once.
    pub per_sample: Option<Vec<Prediction>>,
    pub vote_tally: Option<Vec<(f64, usize)>>,
    /// Stages whose enumerated output failed to parse; the raw response was
    /// carried forward as a single item.
    pub parse_failures: Vec<Stage>,
}

impl Transcript {
    fn empty(run_id: &str, problem_id: &str) -> Self {
        Transcript {
            run_id: run_id.to_string(),
            problem_id: problem_id.to_string(),
            turns: Vec::new(),
            key_sentences: None,
            variables: None,
            prediction: Prediction::failed(),
            per_sample: None,
            vote_tally: None,
            parse_failures: Vec::new(),
        }
    }

    /// Checks turn ordering (review, rephrase, then resolve draws) and
    /// (stage, sample_index) uniqueness.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut seen = std::collections::HashSet::new();
        let mut last = None;
        for turn in &self.turns {
            if !seen.insert((turn.stage, turn.sample_index)) {
                return Err(PipelineError::InvalidTranscript(format!(
                    "duplicate turn for {} sample {}",
                    turn.stage, turn.sample_index
                )));
            }
            if let Some(prev) = last {
                if turn.stage < prev {
                    return Err(PipelineError::InvalidTranscript(format!(
                        "{} turn appears after {}",
                        turn.stage, prev
                    )));
                }
            }
            last = Some(turn.stage);
        }
        Ok(())
    }
}

/// Fills every derived field of a transcript from its turns: parsed stage
/// outputs, per-sample predictions, the vote, and the final prediction.
/// Loading a transcript from disk and running it fresh go through this same
/// path, so the two agree.
fn finalize(transcript: &mut Transcript) {
    transcript.parse_failures.clear();
    transcript.key_sentences = None;
    transcript.variables = None;
    if let Some(turn) = transcript.turns.iter().find(|t| t.stage == Stage::Review) {
        match parse_enumerated_response(&turn.response) {
            Ok(items) => transcript.key_sentences = Some(items),
            Err(_) => transcript.parse_failures.push(Stage::Review),
        }
    }
    if let Some(turn) = transcript.turns.iter().find(|t| t.stage == Stage::Rephrase) {
        match parse_enumerated_response(&turn.response) {
            Ok(items) => transcript.variables = Some(items),
            Err(_) => transcript.parse_failures.push(Stage::Rephrase),
        }
    }
    let samples: Vec<Prediction> = transcript
        .turns
        .iter()
        .filter(|t| t.stage == Stage::Resolve)
        .map(|t| extract_answer(&t.response))
        .collect();
    match samples.len() {
        0 => {
            transcript.prediction = Prediction::failed();
            transcript.per_sample = None;
            transcript.vote_tally = None;
        }
        1 => {
            transcript.prediction = samples[0].clone();
            transcript.per_sample = None;
            transcript.vote_tally = None;
        }
        _ => {
            let outcome = majority_vote(&samples);
            transcript.prediction = match outcome.winner {
                Some(winner) => samples
                    .iter()
                    .find(|p| p.value.is_some_and(|v| answers_equal(v, winner)))
                    .cloned()
                    .unwrap_or_else(Prediction::failed),
                None => Prediction::failed(),
            };
            transcript.vote_tally = Some(outcome.tally);
            transcript.per_sample = Some(samples);
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("invalid transcript: {0}")]
    InvalidTranscript(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    TranscriptFormat {
        path: String,
        line: usize,
        message: String,
    },
    #[error("transcript references unknown problem {0:?}")]
    UnknownProblem(String),
}

fn request(cfg: &RunConfig, prompt: String, temperature: f64, sample_index: usize) -> CompletionRequest {
    CompletionRequest {
        model: cfg.model.clone(),
        prompt,
        temperature,
        sample_index,
        max_tokens: cfg.max_tokens,
    }
}

fn take_turn(
    provider: &dyn Provider,
    cfg: &RunConfig,
    stage: Stage,
    prompt: String,
    temperature: f64,
    sample_index: usize,
) -> Result<Turn, PipelineError> {
    let req = request(cfg, prompt, temperature, sample_index);
    let result = provider.complete(&req)?;
    Ok(Turn {
        stage,
        sample_index,
        prompt: req.prompt,
        response: result.text,
        temperature,
        token_usage: result.token_usage,
        timestamp: chrono::Utc::now().to_rfc3339(),
        latency_ms: result.latency_ms,
    })
}

/// Runs one problem through the plan's stages, chaining each parsed output
/// into the next prompt, and returns the finished transcript.
///
/// Chaining: review's key sentences feed rephrase; rephrase's variables feed
/// resolve as hints. When a stage is skipped, the next stage falls back to
/// the closest available input: rephrase takes the problem's own sentence
/// segmentation, resolve takes the key sentences directly, and a plan with
/// nothing before resolve renders the resolve query without a hint clause.
/// A stage whose enumeration fails to parse is recorded in
/// `parse_failures` and its raw response is carried forward as one item.
pub fn run_problem(
    plan: &PipelinePlan,
    cfg: &RunConfig,
    banks: &BankSet,
    problem: &Problem,
    provider: &dyn Provider,
) -> Result<Transcript, PipelineError> {
    plan.validate()?;
    cfg.validate()?;
    let banks = banks.truncated(cfg.k);
    let run_id = cfg.run_id.clone().unwrap_or_else(|| "adhoc".to_string());
    let mut transcript = Transcript::empty(&run_id, &problem.id);

    let final_prompt = match plan.method {
        Method::R3 => {
            let mut carried: Option<Vec<String>> = None;
            if plan.has_stage(Stage::Review) {
                let spec = StagePromptSpec::default_for(Stage::Review);
                let prompt = render_stage_prompt(&spec, &banks.review, &problem.question, None)?;
                let turn = take_turn(
                    provider,
                    cfg,
                    Stage::Review,
                    prompt,
                    plan.temperatures.for_stage(Stage::Review),
                    0,
                )?;
                carried = Some(
                    parse_enumerated_response(&turn.response)
                        .unwrap_or_else(|_| vec![turn.response.trim().to_string()]),
                );
                transcript.turns.push(turn);
            }
            if plan.has_stage(Stage::Rephrase) {
                let input = carried.take().unwrap_or_else(|| problem.sentences.clone());
                let spec = StagePromptSpec::default_for(Stage::Rephrase);
                let prompt =
                    render_stage_prompt(&spec, &banks.rephrase, &problem.question, Some(&input))?;
                let turn = take_turn(
                    provider,
                    cfg,
                    Stage::Rephrase,
                    prompt,
                    plan.temperatures.for_stage(Stage::Rephrase),
                    0,
                )?;
                carried = Some(
                    parse_enumerated_response(&turn.response)
                        .unwrap_or_else(|_| vec![turn.response.trim().to_string()]),
                );
                transcript.turns.push(turn);
            }
            match carried {
                Some(hints) => {
                    let spec = StagePromptSpec::default_for(Stage::Resolve);
                    render_stage_prompt(&spec, &banks.resolve, &problem.question, Some(&hints))?
                }
                None => {
                    let spec = StagePromptSpec::resolve_without_hints();
                    render_stage_prompt(&spec, &banks.resolve, &problem.question, None)?
                }
            }
        }
        Method::ManualCot => render_baseline_prompt(
            BaselineKind::ManualCot,
            &banks.baseline,
            None,
            &problem.question,
        )?,
        Method::InstructedCot => render_baseline_prompt(
            BaselineKind::InstructedCot,
            &banks.baseline,
            plan.instructed_trigger.as_deref(),
            &problem.question,
        )?,
    };

    match plan.self_consistency {
        Some(sc) if sc.n >= 1 => {
            for sample_index in 0..sc.n {
                let turn = take_turn(
                    provider,
                    cfg,
                    Stage::Resolve,
                    final_prompt.clone(),
                    sc.temperature,
                    sample_index,
                )?;
                transcript.turns.push(turn);
            }
        }
        _ => {
            let turn = take_turn(
                provider,
                cfg,
                Stage::Resolve,
                final_prompt,
                plan.temperatures.for_stage(Stage::Resolve),
                0,
            )?;
            transcript.turns.push(turn);
        }
    }

    finalize(&mut transcript);
    Ok(transcript)
}

/// Persisted transcript line: one turn.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnRecord {
    pub run_id: String,
    pub problem_id: String,
    pub stage: Stage,
    pub sample_index: usize,
    pub prompt: String,
    pub response: String,
    pub temperature: f64,
    pub model: String,
    pub token_usage: Option<TokenUsage>,
    pub timestamp: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub plan: PipelinePlan,
    pub model: String,
    pub k: usize,
    pub parallel_width: usize,
    pub seed: u64,
    pub max_tokens: u32,
    pub dataset_digest: String,
    pub dataset_len: usize,
    pub created_at: String,
}

#[derive(Debug)]
pub struct RunOutput {
    pub run_id: String,
    pub manifest: RunManifest,
    pub transcripts: Vec<Transcript>,
}

fn digest12(bytes: &[u8]) -> String {
    sha256_hex(bytes)[..12].to_string()
}

pub fn dataset_digest(dataset: &[Problem]) -> String {
    let mut joined = String::new();
    for problem in dataset {
        joined.push_str(&serde_json::to_string(problem).expect("problem serializes"));
        joined.push('\n');
    }
    digest12(joined.as_bytes())
}

/// The run id folds in everything that determines responses: plan, model,
/// k, seed, token budget, and the dataset digest. Execution details like
/// parallel_width stay out, so a reordered execution keeps its identity.
fn fingerprint_run_id(plan: &PipelinePlan, cfg: &RunConfig, dataset_digest: &str) -> String {
    #[derive(Serialize)]
    struct Fingerprint<'a> {
        plan: &'a PipelinePlan,
        model: &'a str,
        k: usize,
        seed: u64,
        max_tokens: u32,
        dataset_digest: &'a str,
    }
    let canonical = serde_json::to_string(&Fingerprint {
        plan,
        model: &cfg.model,
        k: cfg.k,
        seed: cfg.seed,
        max_tokens: cfg.max_tokens,
        dataset_digest,
    })
    .expect("fingerprint serializes");
    digest12(canonical.as_bytes())
}

/// The run id [`run_dataset`] will assign for these inputs, computable
/// before any provider call (useful for naming output directories).
pub fn planned_run_id(plan: &PipelinePlan, cfg: &RunConfig, dataset: &[Problem]) -> String {
    cfg.run_id
        .clone()
        .unwrap_or_else(|| fingerprint_run_id(plan, cfg, &dataset_digest(dataset)))
}

fn turn_lines(transcript: &Transcript, model: &str) -> String {
    let mut out = String::new();
    for turn in &transcript.turns {
        let record = TurnRecord {
            run_id: transcript.run_id.clone(),
            problem_id: transcript.problem_id.clone(),
            stage: turn.stage,
            sample_index: turn.sample_index,
            prompt: turn.prompt.clone(),
            response: turn.response.clone(),
            temperature: turn.temperature,
            model: model.to_string(),
            token_usage: turn.token_usage,
            timestamp: turn.timestamp.clone(),
            latency_ms: turn.latency_ms,
        };
        out.push_str(&serde_json::to_string(&record).expect("turn record serializes"));
        out.push('\n');
    }
    out
}

struct OrderedWriter {
    file: Option<fs::File>,
    path: String,
    pending: BTreeMap<usize, String>,
    next: usize,
}

impl OrderedWriter {
    fn submit(&mut self, index: usize, chunk: String) -> Result<(), PipelineError> {
        self.pending.insert(index, chunk);
        while let Some(chunk) = self.pending.remove(&self.next) {
            if let Some(file) = &mut self.file {
                file.write_all(chunk.as_bytes())
                    .and_then(|()| file.flush())
                    .map_err(|source| PipelineError::Io {
                        path: self.path.clone(),
                        source,
                    })?;
            }
            self.next += 1;
        }
        Ok(())
    }
}

/// Runs the whole dataset, up to `parallel_width` problems at a time.
/// Transcripts come back in dataset order and, when an output directory is
/// configured, are appended to `transcripts.jsonl` incrementally in that
/// same order (a crashed run keeps every fully processed prefix).
pub fn run_dataset(
    plan: &PipelinePlan,
    cfg: &RunConfig,
    banks: &BankSet,
    dataset: &[Problem],
    provider: &dyn Provider,
) -> Result<RunOutput, PipelineError> {
    plan.validate()?;
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let digest = dataset_digest(dataset);
    let run_id = cfg
        .run_id
        .clone()
        .unwrap_or_else(|| fingerprint_run_id(plan, cfg, &digest));
    let mut cfg = cfg.clone();
    cfg.run_id = Some(run_id.clone());

    let manifest = RunManifest {
        run_id: run_id.clone(),
        plan: plan.clone(),
        model: cfg.model.clone(),
        k: cfg.k,
        parallel_width: cfg.parallel_width,
        seed: cfg.seed,
        max_tokens: cfg.max_tokens,
        dataset_digest: digest,
        dataset_len: dataset.len(),
        created_at: chrono::Utc::now().to_rfc3339(),
    };

    let transcript_file = match &cfg.output_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            let manifest_path = dir.join("manifest.json");
            fs::write(
                &manifest_path,
                serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
            )
            .map_err(|source| PipelineError::Io {
                path: manifest_path.display().to_string(),
                source,
            })?;
            let path = dir.join("transcripts.jsonl");
            Some(
                fs::File::create(&path).map_err(|source| PipelineError::Io {
                    path: path.display().to_string(),
                    source,
                })?,
            )
        }
        None => None,
    };

    let writer = Mutex::new(OrderedWriter {
        path: cfg
            .output_dir
            .as_ref()
            .map(|d| d.join("transcripts.jsonl").display().to_string())
            .unwrap_or_default(),
        file: transcript_file,
        pending: BTreeMap::new(),
        next: 0,
    });
    let results: Mutex<Vec<Option<Transcript>>> = Mutex::new(vec![None; dataset.len()]);
    let first_error: Mutex<Option<PipelineError>> = Mutex::new(None);
    let cursor = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = cfg.parallel_width.min(dataset.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if stop.load(Ordering::Relaxed) {
                    return;
                }
                let index = cursor.fetch_add(1, Ordering::Relaxed);
                if index >= dataset.len() {
                    return;
                }
                match run_problem(plan, &cfg, banks, &dataset[index], provider) {
                    Ok(transcript) => {
                        let chunk = turn_lines(&transcript, &cfg.model);
                        results.lock().expect("results lock")[index] = Some(transcript);
                        let flushed = writer.lock().expect("writer lock").submit(index, chunk);
                        if let Err(e) = flushed {
                            stop.store(true, Ordering::Relaxed);
                            first_error.lock().expect("error lock").get_or_insert(e);
                            return;
                        }
                    }
                    Err(e) => {
                        stop.store(true, Ordering::Relaxed);
                        first_error.lock().expect("error lock").get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });

    if let Some(e) = first_error.into_inner().expect("error lock") {
        return Err(e);
    }
    let transcripts: Vec<Transcript> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|t| t.expect("every index completed"))
        .collect();
    Ok(RunOutput {
        run_id,
        manifest,
        transcripts,
    })
}

/// The four stage-subset combinations, in presentation order: resolve only,
/// review+resolve, rephrase+resolve, and the full protocol. Per-problem
/// provider call counts are 1, 2, 2, 3.
pub const ABLATION_COMBINATIONS: [(&str, &[Stage]); 4] = [
    ("resolve", &[Stage::Resolve]),
    ("review-resolve", &[Stage::Review, Stage::Resolve]),
    ("rephrase-resolve", &[Stage::Rephrase, Stage::Resolve]),
    (
        "review-rephrase-resolve",
        &[Stage::Review, Stage::Rephrase, Stage::Resolve],
    ),
];

/// Runs every ablation combination over the dataset. Each combination
/// writes under its own subdirectory of the configured output dir.
pub fn run_ablation(
    cfg: &RunConfig,
    banks: &BankSet,
    dataset: &[Problem],
    provider: &dyn Provider,
) -> Result<Vec<(String, RunOutput)>, PipelineError> {
    let mut out = Vec::with_capacity(ABLATION_COMBINATIONS.len());
    for (label, stages) in ABLATION_COMBINATIONS {
        let plan = PipelinePlan::r3_with_stages(stages)?;
        let mut combo_cfg = cfg.clone();
        combo_cfg.run_id = None;
        combo_cfg.output_dir = cfg.output_dir.as_ref().map(|d| d.join(label));
        let output = run_dataset(&plan, &combo_cfg, banks, dataset, provider)?;
        out.push((label.to_string(), output));
    }
    Ok(out)
}

/// Runs the plan with its final stage sampled `n` times and majority-voted.
/// The sampling temperature comes from the plan's self-consistency setting,
/// falling back to [`DEFAULT_SC_TEMPERATURE`].
pub fn run_self_consistency(
    plan: &PipelinePlan,
    cfg: &RunConfig,
    banks: &BankSet,
    dataset: &[Problem],
    provider: &dyn Provider,
    n: usize,
) -> Result<RunOutput, PipelineError> {
    let temperature = plan
        .self_consistency
        .map(|sc| sc.temperature)
        .unwrap_or(DEFAULT_SC_TEMPERATURE);
    let plan = plan.clone().with_self_consistency(n, temperature);
    run_dataset(&plan, cfg, banks, dataset, provider)
}

/// Reads a `transcripts.jsonl` back into transcripts, re-deriving parsed
/// outputs and predictions. Problems appear in first-seen line order.
pub fn load_transcripts(path: &Path) -> Result<Vec<Transcript>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut order: Vec<String> = Vec::new();
    let mut by_problem: BTreeMap<String, Transcript> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TurnRecord =
            serde_json::from_str(line).map_err(|e| PipelineError::TranscriptFormat {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        let transcript = by_problem
            .entry(record.problem_id.clone())
            .or_insert_with(|| {
                order.push(record.problem_id.clone());
                Transcript::empty(&record.run_id, &record.problem_id)
            });
        transcript.turns.push(Turn {
            stage: record.stage,
            sample_index: record.sample_index,
            prompt: record.prompt,
            response: record.response,
            temperature: record.temperature,
            token_usage: record.token_usage,
            timestamp: record.timestamp,
            latency_ms: record.latency_ms,
        });
    }
    let mut transcripts = Vec::with_capacity(order.len());
    for problem_id in order {
        let mut transcript = by_problem.remove(&problem_id).expect("inserted above");
        finalize(&mut transcript);
        transcripts.push(transcript);
    }
    Ok(transcripts)
}

/// Transcript lines with timestamps and latencies blanked, for comparing
/// runs that should be identical.
pub fn canonical_transcript_lines(text: &str) -> Vec<String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut value: serde_json::Value =
                serde_json::from_str(line).unwrap_or(serde_json::Value::Null);
            if let Some(map) = value.as_object_mut() {
                map.insert("timestamp".into(), serde_json::Value::String(String::new()));
                map.insert("latency_ms".into(), serde_json::Value::from(0));
            }
            value.to_string()
        })
        .collect()
}

/// Manifest text with the creation stamp blanked.
pub fn canonical_manifest(text: &str) -> String {
    let mut value: serde_json::Value = serde_json::from_str(text).unwrap_or(serde_json::Value::Null);
    if let Some(map) = value.as_object_mut() {
        map.insert("created_at".into(), serde_json::Value::String(String::new()));
    }
    value.to_string()
}

/// The resolve response that best explains each transcript's prediction:
/// the first sampled response agreeing with the voted answer, else the last
/// resolve response.
pub fn resolve_texts(transcripts: &[Transcript]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for transcript in transcripts {
        let resolves: Vec<&Turn> = transcript
            .turns
            .iter()
            .filter(|t| t.stage == Stage::Resolve)
            .collect();
        if resolves.is_empty() {
            continue;
        }
        let representative = transcript
            .prediction
            .value
            .and_then(|v| {
                resolves.iter().find(|t| {
                    extract_answer(&t.response)
                        .value
                        .is_some_and(|x| answers_equal(x, v))
                })
            })
            .or(resolves.last())
            .expect("non-empty resolve list");
        out.insert(
            transcript.problem_id.clone(),
            representative.response.clone(),
        );
    }
    out
}

/// Joins transcripts with their problems into scoring records.
pub fn evaluate_run(
    transcripts: &[Transcript],
    problems: &[Problem],
) -> Result<Vec<EvalRecord>, PipelineError> {
    let by_id: BTreeMap<&str, &Problem> =
        problems.iter().map(|p| (p.id.as_str(), p)).collect();
    transcripts
        .iter()
        .map(|transcript| {
            let problem = by_id
                .get(transcript.problem_id.as_str())
                .ok_or_else(|| PipelineError::UnknownProblem(transcript.problem_id.clone()))?;
            Ok(EvalRecord::new(
                &transcript.problem_id,
                transcript.prediction.clone(),
                problem.gold_answer,
                transcript.vote_tally.clone(),
                &problem.source,
                problem.noise.len(),
            ))
        })
        .collect()
}
