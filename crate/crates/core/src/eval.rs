//! Answer extraction, scoring, majority voting, equation verification, and
//! error classification.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::HINT_CLAUSE_SUFFIX;

/// Numeric equality with relative tolerance: `|a - b| <= 1e-4 * max(1, |b|)`.
pub fn answers_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-4 * b.abs().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionRule {
    /// First numeral after the last "answer is".
    AnswerAnchor,
    /// No usable anchor; last numeral anywhere in the response.
    LastNumeral,
    /// The response contains no numeral.
    Failed,
}

/// A numeric prediction pulled out of a response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub value: Option<f64>,
    /// The numeral as it appeared, before cleaning.
    pub raw_span: String,
    pub extraction_rule: ExtractionRule,
}

impl Prediction {
    pub fn failed() -> Self {
        Prediction {
            value: None,
            raw_span: String::new(),
            extraction_rule: ExtractionRule::Failed,
        }
    }

    pub fn of(value: f64) -> Self {
        Prediction {
            value: Some(value),
            raw_span: value.to_string(),
            extraction_rule: ExtractionRule::AnswerAnchor,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractOptions {
    /// `"50%"` reads as 50 when set (the default), 0.5 otherwise.
    pub percent_as_number: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions { percent_as_number: true }
    }
}

fn anchor_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)answer\s+is").expect("static regex compiles"))
}

fn numeral_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"-?\$?\d[\d,]*(?:\.\d+)?%?").expect("static regex compiles")
    })
}

fn clean_numeral(span: &str, opts: ExtractOptions) -> Option<f64> {
    let percent = span.ends_with('%');
    let cleaned: String = span
        .chars()
        .filter(|c| !matches!(c, '$' | ',' | '%'))
        .collect();
    let value: f64 = cleaned.parse().ok()?;
    if percent && !opts.percent_as_number {
        return Some(value / 100.0);
    }
    Some(value)
}

pub fn extract_answer(response: &str) -> Prediction {
    extract_answer_with(response, ExtractOptions::default())
}

/// Looks for the last case-insensitive "answer is" and takes the first
/// numeral after it; otherwise falls back to the last numeral anywhere.
/// Currency signs, thousands commas, and a percent sign are stripped.
pub fn extract_answer_with(response: &str, opts: ExtractOptions) -> Prediction {
    if let Some(anchor) = anchor_regex().find_iter(response).last() {
        let tail = &response[anchor.end()..];
        if let Some(m) = numeral_regex().find(tail) {
            if let Some(value) = clean_numeral(m.as_str(), opts) {
                return Prediction {
                    value: Some(value),
                    raw_span: m.as_str().to_string(),
                    extraction_rule: ExtractionRule::AnswerAnchor,
                };
            }
        }
    }
    if let Some(m) = numeral_regex().find_iter(response).last() {
        if let Some(value) = clean_numeral(m.as_str(), opts) {
            return Prediction {
                value: Some(value),
                raw_span: m.as_str().to_string(),
                extraction_rule: ExtractionRule::LastNumeral,
            };
        }
    }
    Prediction::failed()
}

/// Result of a majority vote over self-consistency samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub winner: Option<f64>,
    /// Buckets in first-occurrence order: (representative value, count).
    pub tally: Vec<(f64, usize)>,
}

/// Buckets sample values under [`answers_equal`] equivalence and returns the
/// largest bucket's representative. Failed extractions are excluded; ties
/// break toward the bucket seen first. `winner` is `None` when every sample
/// failed.
pub fn majority_vote(samples: &[Prediction]) -> VoteOutcome {
    let mut tally: Vec<(f64, usize)> = Vec::new();
    for sample in samples {
        let Some(value) = sample.value else { continue };
        match tally.iter_mut().find(|(rep, _)| answers_equal(value, *rep)) {
            Some((_, count)) => *count += 1,
            None => tally.push((value, 1)),
        }
    }
    let mut winner: Option<(f64, usize)> = None;
    for (rep, count) in &tally {
        if winner.is_none_or(|(_, best)| *count > best) {
            winner = Some((*rep, *count));
        }
    }
    VoteOutcome {
        winner: winner.map(|(rep, _)| rep),
        tally,
    }
}

/// One `expr (= expr)+` chain found in a response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationChain {
    pub segments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckedChain {
    pub chain: EquationChain,
    pub values: Vec<f64>,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EquationReport {
    pub chains: Vec<CheckedChain>,
    /// Candidate chains that did not parse as arithmetic (prose around an
    /// `=`, missing sides, stray symbols). Skipped, never judged.
    pub skipped: usize,
}

impl EquationReport {
    pub fn has_inconsistency(&self) -> bool {
        self.chains.iter().any(|c| !c.consistent)
    }
}

/// Scans a response for equation chains and checks each one.
///
/// A candidate is a maximal run of arithmetic characters containing both an
/// `=` and a digit. The run splits on `=` into segments; a chain is
/// consistent iff every segment evaluates to the same value under
/// [`answers_equal`]. Division by zero makes a chain inconsistent, while a
/// segment that fails to parse (an irrelevance note, a unit word caught in
/// the run) skips the whole chain.
pub fn verify_equations(response: &str) -> EquationReport {
    let mut report = EquationReport::default();
    for run in arithmetic_runs(response) {
        if !run.contains('=') || !run.chars().any(|c| c.is_ascii_digit()) {
            continue;
        }
        let mut segments: Vec<String> = run.split('=').map(clean_segment).collect();
        while segments.first().is_some_and(|s| s.is_empty()) {
            segments.remove(0);
        }
        while segments.last().is_some_and(|s| s.is_empty()) {
            segments.pop();
        }
        if segments.len() < 2 {
            report.skipped += 1;
            continue;
        }
        let mut values = Vec::with_capacity(segments.len());
        let mut divided_by_zero = false;
        let mut parse_failed = false;
        for segment in &segments {
            match eval_expression(segment) {
                Ok(v) => values.push(v),
                Err(ExprError::DivisionByZero) => {
                    divided_by_zero = true;
                    break;
                }
                Err(ExprError::Syntax) => {
                    parse_failed = true;
                    break;
                }
            }
        }
        if parse_failed {
            report.skipped += 1;
            continue;
        }
        let consistent = !divided_by_zero
            && values.windows(2).all(|w| answers_equal(w[0], w[1]));
        report.chains.push(CheckedChain {
            chain: EquationChain { segments },
            values,
            consistent,
        });
    }
    report
}

fn arithmetic_runs(text: &str) -> Vec<&str> {
    let is_arith = |c: char| {
        c.is_ascii_digit() || matches!(c, '+' | '-' | '*' | '/' | '×' | '÷' | '(' | ')' | '.' | ',' | '$' | '%' | '=' | ' ')
    };
    let mut runs = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_arith(c) {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            runs.push(&text[s..i]);
        }
    }
    if let Some(s) = start {
        runs.push(&text[s..]);
    }
    runs
}

fn clean_segment(raw: &str) -> String {
    let mut s: String = raw
        .chars()
        .map(|c| match c {
            '×' => '*',
            '÷' => '/',
            other => other,
        })
        .filter(|c| !matches!(c, '$' | '%' | ','))
        .collect();
    s = s.trim().to_string();
    loop {
        let next_is_digit = s.chars().nth(1).is_some_and(|c| c.is_ascii_digit());
        if s.starts_with([';', ':']) || (s.starts_with(['.', ',']) && !next_is_digit) {
            s.remove(0);
            s = s.trim_start().to_string();
        } else {
            break;
        }
    }
    while s.ends_with(['.', ';', ':']) {
        s.pop();
        s = s.trim_end().to_string();
    }
    s
}

enum ExprError {
    Syntax,
    DivisionByZero,
}

/// Recursive-descent evaluation of `+ - * /` with parentheses and decimals.
fn eval_expression(segment: &str) -> Result<f64, ExprError> {
    let tokens = tokenize(segment)?;
    let mut pos = 0usize;
    let value = parse_expr(&tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(ExprError::Syntax);
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Token {
    Number(f64),
    Plus,
    Minus,
    Star,
    Slash,
    Open,
    Close,
}

fn tokenize(segment: &str) -> Result<Vec<Token>, ExprError> {
    let chars: Vec<char> = segment.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0usize;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' => i += 1,
            '+' => {
                tokens.push(Token::Plus);
                i += 1;
            }
            '-' => {
                tokens.push(Token::Minus);
                i += 1;
            }
            '*' => {
                tokens.push(Token::Star);
                i += 1;
            }
            '/' => {
                tokens.push(Token::Slash);
                i += 1;
            }
            '(' => {
                tokens.push(Token::Open);
                i += 1;
            }
            ')' => {
                tokens.push(Token::Close);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                let mut seen_dot = false;
                while i < chars.len() {
                    match chars[i] {
                        '0'..='9' => i += 1,
                        '.' if !seen_dot => {
                            seen_dot = true;
                            i += 1;
                        }
                        _ => break,
                    }
                }
                let text: String = chars[start..i].iter().collect();
                let value: f64 = text.parse().map_err(|_| ExprError::Syntax)?;
                tokens.push(Token::Number(value));
            }
            _ => return Err(ExprError::Syntax),
        }
    }
    if tokens.is_empty() {
        return Err(ExprError::Syntax);
    }
    Ok(tokens)
}

fn parse_expr(tokens: &[Token], pos: &mut usize) -> Result<f64, ExprError> {
    let mut value = parse_term(tokens, pos)?;
    while let Some(op) = tokens.get(*pos) {
        match op {
            Token::Plus => {
                *pos += 1;
                value += parse_term(tokens, pos)?;
            }
            Token::Minus => {
                *pos += 1;
                value -= parse_term(tokens, pos)?;
            }
            _ => break,
        }
    }
    Ok(value)
}

fn parse_term(tokens: &[Token], pos: &mut usize) -> Result<f64, ExprError> {
    let mut value = parse_factor(tokens, pos)?;
    while let Some(op) = tokens.get(*pos) {
        match op {
            Token::Star => {
                *pos += 1;
                value *= parse_factor(tokens, pos)?;
            }
            Token::Slash => {
                *pos += 1;
                let divisor = parse_factor(tokens, pos)?;
                if divisor.abs() < 1e-12 {
                    return Err(ExprError::DivisionByZero);
                }
                value /= divisor;
            }
            _ => break,
        }
    }
    Ok(value)
}

fn parse_factor(tokens: &[Token], pos: &mut usize) -> Result<f64, ExprError> {
    match tokens.get(*pos) {
        Some(Token::Minus) => {
            *pos += 1;
            Ok(-parse_factor(tokens, pos)?)
        }
        Some(Token::Number(v)) => {
            *pos += 1;
            Ok(*v)
        }
        Some(Token::Open) => {
            *pos += 1;
            let value = parse_expr(tokens, pos)?;
            match tokens.get(*pos) {
                Some(Token::Close) => {
                    *pos += 1;
                    Ok(value)
                }
                _ => Err(ExprError::Syntax),
            }
        }
        _ => Err(ExprError::Syntax),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    CalculationError,
    FalseNegativeReview,
    FalsePositiveReview,
    RephraseError,
    Other,
}

impl std::fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ErrorClass::CalculationError => "calculation_error",
            ErrorClass::FalseNegativeReview => "false_negative_review",
            ErrorClass::FalsePositiveReview => "false_positive_review",
            ErrorClass::RephraseError => "rephrase_error",
            ErrorClass::Other => "other",
        })
    }
}

/// Scoring row for one problem in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub problem_id: String,
    pub prediction: Prediction,
    pub gold: f64,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vote_tally: Option<Vec<(f64, usize)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_class: Option<ErrorClass>,
    pub source: String,
    pub noise_count: usize,
}

impl EvalRecord {
    pub fn new(
        problem_id: impl Into<String>,
        prediction: Prediction,
        gold: f64,
        vote_tally: Option<Vec<(f64, usize)>>,
        source: impl Into<String>,
        noise_count: usize,
    ) -> Self {
        let correct = prediction.value.is_some_and(|v| answers_equal(v, gold));
        EvalRecord {
            problem_id: problem_id.into(),
            prediction,
            gold,
            correct,
            vote_tally,
            error_class: None,
            source: source.into(),
            noise_count,
        }
    }
}

/// Assigns error classes to wrong answers: an inconsistent equation chain in
/// the response (after any echoed hint clause) marks a calculation error,
/// manual labels from an annotation file override the automatic `Other`, and
/// correct answers stay unclassified.
pub fn classify_errors(
    resolve_texts: &BTreeMap<String, String>,
    records: &mut [EvalRecord],
    manual: &BTreeMap<String, ErrorClass>,
) {
    for record in records.iter_mut() {
        if record.correct {
            record.error_class = None;
            continue;
        }
        let auto = resolve_texts.get(&record.problem_id).and_then(|text| {
            let scanned = match text.find(HINT_CLAUSE_SUFFIX) {
                Some(idx) => &text[idx + HINT_CLAUSE_SUFFIX.len()..],
                None => text.as_str(),
            };
            verify_equations(scanned)
                .has_inconsistency()
                .then_some(ErrorClass::CalculationError)
        });
        record.error_class = match auto {
            Some(class) => Some(class),
            None => Some(
                manual
                    .get(&record.problem_id)
                    .copied()
                    .unwrap_or(ErrorClass::Other),
            ),
        };
        if auto.is_none() {
            if let Some(label) = manual.get(&record.problem_id) {
                record.error_class = Some(*label);
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Labels {
        path: String,
        line: usize,
        message: String,
    },
    #[error("run has no records to score")]
    EmptyRun,
}

#[derive(Deserialize)]
struct LabelRecord {
    problem_id: String,
    error_class: ErrorClass,
}

/// Reads manual error labels from line-delimited
/// `{"problem_id": …, "error_class": …}` records.
pub fn load_error_labels(path: &Path) -> Result<BTreeMap<String, ErrorClass>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(line).map_err(|e| EvalError::Labels {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(rec.problem_id, rec.error_class);
    }
    Ok(out)
}

/// Aggregated accuracy report for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub extraction_failures: usize,
    /// source tag -> (correct, total)
    pub by_source: BTreeMap<String, (usize, usize)>,
    /// distractor count -> (correct, total)
    pub by_noise_count: BTreeMap<usize, (usize, usize)>,
    pub by_error_class: BTreeMap<ErrorClass, usize>,
}

pub fn score_run(records: &[EvalRecord]) -> Result<RunReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    let mut report = RunReport {
        total: records.len(),
        correct: 0,
        accuracy: 0.0,
        extraction_failures: 0,
        by_source: BTreeMap::new(),
        by_noise_count: BTreeMap::new(),
        by_error_class: BTreeMap::new(),
    };
    for record in records {
        let source = if record.source.is_empty() {
            "unknown".to_string()
        } else {
            record.source.clone()
        };
        let by_source = report.by_source.entry(source).or_insert((0, 0));
        let by_noise = report.by_noise_count.entry(record.noise_count).or_insert((0, 0));
        by_source.1 += 1;
        by_noise.1 += 1;
        if record.correct {
            report.correct += 1;
            by_source.0 += 1;
            by_noise.0 += 1;
        }
        if record.prediction.extraction_rule == ExtractionRule::Failed {
            report.extraction_failures += 1;
        }
        if let Some(class) = record.error_class {
            *report.by_error_class.entry(class).or_insert(0) += 1;
        }
    }
    report.accuracy = report.correct as f64 / report.total as f64;
    Ok(report)
}

/// Accuracy per distractor count, ready for plotting.
pub fn noise_accuracy_series(report: &RunReport) -> Vec<(usize, f64)> {
    report
        .by_noise_count
        .iter()
        .map(|(n, (correct, total))| (*n, *correct as f64 / (*total).max(1) as f64))
        .collect()
}

pub fn render_report_table(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "overall      {:>5}/{:<5}  accuracy {:.3}\n",
        report.correct, report.total, report.accuracy
    ));
    if report.extraction_failures > 0 {
        out.push_str(&format!(
            "extraction failures: {}\n",
            report.extraction_failures
        ));
    }
    if report.by_source.len() > 1 {
        out.push_str("\nby source\n");
        for (source, (correct, total)) in &report.by_source {
            out.push_str(&format!(
                "  {:<16} {:>5}/{:<5}  {:.3}\n",
                source,
                correct,
                total,
                *correct as f64 / (*total).max(1) as f64
            ));
        }
    }
    if report.by_noise_count.len() > 1 {
        out.push_str("\nby distractor count\n");
        for (n, (correct, total)) in &report.by_noise_count {
            out.push_str(&format!(
                "  {:<16} {:>5}/{:<5}  {:.3}\n",
                n,
                correct,
                total,
                *correct as f64 / (*total).max(1) as f64
            ));
        }
    }
    if !report.by_error_class.is_empty() {
        out.push_str("\nerror classes\n");
        for (class, count) in &report.by_error_class {
            out.push_str(&format!("  {class:<24} {count:>5}\n"));
        }
    }
    out
}
