//! Noisy-context dataset construction.
//!
//! Clean arithmetic corpora come in through [`load_corpus`], get segmented
//! into sentences, and gain distractor sentences instantiated from
//! [`NoiseTemplate`] patterns. In-topic distractors borrow the problem's own
//! role names and nouns so they read as part of the story; off-topic
//! distractors talk about a relative of a role name doing something
//! unrelated. Every insertion is annotated, so a noisy problem can always be
//! stripped back to its source.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::stream_rng;

/// Relations used by off-topic templates.
pub const RELATION_POOL: &[&str] = &["father", "mother", "sister", "grandmother", "neighbor"];

/// Names used when a problem text yields no role names.
pub const DEFAULT_NAME_POOL: &[&str] = &["Alex", "Sam", "Taylor"];

/// Nouns used when a problem text yields no counted nouns.
pub const DEFAULT_NOUN_POOL: &[&str] = &["items", "boxes", "cards"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    InTopic,
    OffTopic,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::InTopic => "in_topic",
            NoiseKind::OffTopic => "off_topic",
        })
    }
}

/// Marks one inserted distractor sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseAnnotation {
    pub sentence_index: usize,
    pub kind: NoiseKind,
    pub template_id: String,
}

/// A parameterized distractor sentence. Placeholders: `{name}`, `{relation}`,
/// `{number}`, `{noun}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseTemplate {
    pub template_id: String,
    pub kind: NoiseKind,
    pub pattern: String,
}

impl NoiseTemplate {
    pub fn validate(&self) -> Result<(), NoiseError> {
        let mut rest = self.pattern.as_str();
        while let Some(open) = rest.find('{') {
            let Some(close) = rest[open..].find('}') else {
                return Err(NoiseError::InvalidTemplate {
                    template_id: self.template_id.clone(),
                    reason: "unclosed placeholder".into(),
                });
            };
            let name = &rest[open + 1..open + close];
            if !matches!(name, "name" | "relation" | "number" | "noun") {
                return Err(NoiseError::InvalidTemplate {
                    template_id: self.template_id.clone(),
                    reason: format!("unknown placeholder {{{name}}}"),
                });
            }
            rest = &rest[open + close + 1..];
        }
        if !self.pattern.trim_end().ends_with('.') {
            return Err(NoiseError::InvalidTemplate {
                template_id: self.template_id.clone(),
                reason: "pattern must end with '.'".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("problem {id}: answer {value:?} is not numeric")]
    NonNumericAnswer { id: String, value: String },
    #[error("problem {id}: {reason}")]
    InvalidProblem { id: String, reason: String },
    #[error("no {kind} templates in pool")]
    TemplatePoolEmpty { kind: NoiseKind },
    #[error("template {template_id}: {reason}")]
    InvalidTemplate { template_id: String, reason: String },
    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("graded variants need n_max >= 1")]
    InvalidGradeCount,
    #[error("unknown corpus format {0:?}")]
    UnknownFormat(String),
}

/// Wire form of a problem, the line format of native dataset files.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProblemRecord {
    id: String,
    question: String,
    answer: f64,
    #[serde(default)]
    noise: Vec<NoiseAnnotation>,
    #[serde(default)]
    source: String,
    #[serde(default)]
    seed: u64,
}

/// One word problem, segmented into sentences.
///
/// `sentences` is derived from `question` at construction and the two stay
/// in sync: joining the sentences with single spaces reproduces the question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProblemRecord", into = "ProblemRecord")]
pub struct Problem {
    pub id: String,
    pub question: String,
    pub sentences: Vec<String>,
    pub gold_answer: f64,
    pub noise: Vec<NoiseAnnotation>,
    pub source: String,
    pub seed: u64,
}

impl Problem {
    /// Normalizes whitespace, segments the question, and checks the noise
    /// annotations against the resulting sentence list.
    pub fn new(
        id: impl Into<String>,
        question: &str,
        gold_answer: f64,
        noise: Vec<NoiseAnnotation>,
        source: impl Into<String>,
        seed: u64,
    ) -> Result<Self, NoiseError> {
        let id = id.into();
        let question = question.split_whitespace().collect::<Vec<_>>().join(" ");
        if question.is_empty() {
            return Err(NoiseError::InvalidProblem {
                id,
                reason: "question is empty".into(),
            });
        }
        if !gold_answer.is_finite() {
            return Err(NoiseError::NonNumericAnswer {
                id,
                value: gold_answer.to_string(),
            });
        }
        let sentences = segment_sentences(&question);
        for ann in &noise {
            if ann.sentence_index >= sentences.len() {
                return Err(NoiseError::InvalidProblem {
                    id,
                    reason: format!(
                        "noise annotation points at sentence {} but there are only {}",
                        ann.sentence_index,
                        sentences.len()
                    ),
                });
            }
        }
        Ok(Problem {
            id,
            question,
            sentences,
            gold_answer,
            noise,
            source: source.into(),
            seed,
        })
    }

    /// The problem with every annotated sentence removed.
    pub fn strip_noise(&self) -> Problem {
        let noisy: HashSet<usize> = self.noise.iter().map(|a| a.sentence_index).collect();
        let sentences: Vec<String> = self
            .sentences
            .iter()
            .enumerate()
            .filter(|(i, _)| !noisy.contains(i))
            .map(|(_, s)| s.clone())
            .collect();
        Problem {
            id: self.id.clone(),
            question: sentences.join(" "),
            sentences,
            gold_answer: self.gold_answer,
            noise: Vec::new(),
            source: self.source.clone(),
            seed: self.seed,
        }
    }

    pub fn noise_count(&self, kind: NoiseKind) -> usize {
        self.noise.iter().filter(|a| a.kind == kind).count()
    }
}

impl TryFrom<ProblemRecord> for Problem {
    type Error = NoiseError;

    fn try_from(rec: ProblemRecord) -> Result<Self, NoiseError> {
        Problem::new(rec.id, &rec.question, rec.answer, rec.noise, rec.source, rec.seed)
    }
}

impl From<Problem> for ProblemRecord {
    fn from(p: Problem) -> ProblemRecord {
        ProblemRecord {
            id: p.id,
            question: p.question,
            answer: p.gold_answer,
            noise: p.noise,
            source: p.source,
            seed: p.seed,
        }
    }
}

const ABBREVIATIONS: &[&str] = &[
    "Mr", "Mrs", "Ms", "Dr", "Prof", "St", "Mt", "Jr", "Sr", "vs", "etc", "No",
];

fn ends_with_abbreviation(prefix: &str) -> bool {
    let last_word: String = prefix
        .chars()
        .rev()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .chars()
        .rev()
        .collect();
    ABBREVIATIONS.iter().any(|a| *a == last_word)
}

/// Splits whitespace-normalized text into sentences on `.`, `!`, `?`
/// followed by a space and an uppercase letter or digit, skipping common
/// abbreviations. Joining the result with single spaces reproduces the
/// input.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let idxs: Vec<(usize, char)> = text.char_indices().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < idxs.len() {
        let (pos, c) = idxs[i];
        if matches!(c, '.' | '!' | '?') {
            if let (Some((_, ' ')), Some(&(next_pos, next))) = (
                idxs.get(i + 1).copied(),
                idxs.get(i + 2),
            ) {
                let breaks = (next.is_uppercase() || next.is_ascii_digit())
                    && !(c == '.' && ends_with_abbreviation(&text[start..pos]));
                if breaks {
                    sentences.push(text[start..pos + c.len_utf8()].to_string());
                    start = next_pos;
                    i += 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    if start < text.len() {
        sentences.push(text[start..].to_string());
    }
    sentences
}

const NON_NAME_WORDS: &[&str] = &[
    "I", "He", "She", "It", "We", "They", "You", "Him", "Them", "Us", "Me", "His", "Her",
    "Their", "Its", "Our", "My", "Your", "The", "A", "An", "This", "That", "These", "Those",
    "There", "Here", "Then", "Than", "When", "While", "Who", "Whom", "Whose", "What", "Which",
    "Why", "Where", "How", "If", "In", "On", "At", "By", "To", "Of", "For", "From", "With",
    "Without", "After", "Before", "During", "Under", "Over", "About", "Into", "Onto", "Up",
    "Down", "Out", "And", "But", "Or", "Nor", "So", "Yet", "As", "Also", "Both", "Each",
    "Every", "All", "Some", "Any", "No", "Not", "Now", "Today", "Yesterday", "Tomorrow",
    "Later", "Finally", "First", "Second", "Third", "Fourth", "Fifth", "Last", "Next", "One",
    "Two", "Three", "Four", "Five", "Six", "Seven", "Eight", "Nine", "Ten", "Eleven", "Twelve",
    "Twenty", "Thirty", "Forty", "Fifty", "Hundred", "Thousand", "Half", "Altogether",
    "Together", "Suppose", "Given", "Let", "Find", "Calculate", "Compute", "Determine",
    "Assume", "Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday",
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December", "Spring", "Summer", "Autumn", "Fall", "Winter",
    "Christmas", "Easter", "Thanksgiving", "Halloween", "New", "Year", "English", "Math",
    "Science", "History", "Spanish", "French", "Q", "A",
];

/// Candidate person names in the problem text: capitalized alphabetic tokens
/// (possessive `'s` stripped) that aren't common sentence openers, function
/// words, dates, or school subjects. Order of first appearance, deduplicated.
/// Falls back to [`DEFAULT_NAME_POOL`] when nothing qualifies.
pub fn extract_roles(problem: &Problem) -> Vec<String> {
    let mut roles: Vec<String> = Vec::new();
    for raw in problem.question.split_whitespace() {
        let token = raw.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'');
        let token = token
            .strip_suffix("'s")
            .or_else(|| token.strip_suffix('\''))
            .unwrap_or(token);
        if token.is_empty() || !token.chars().all(|c| c.is_alphabetic()) {
            continue;
        }
        if !token.chars().next().is_some_and(|c| c.is_uppercase()) {
            continue;
        }
        if NON_NAME_WORDS.iter().any(|w| w.eq_ignore_ascii_case(token)) {
            continue;
        }
        if !roles.iter().any(|r| r == token) {
            roles.push(token.to_string());
        }
    }
    if roles.is_empty() {
        roles = DEFAULT_NAME_POOL.iter().map(|s| s.to_string()).collect();
    }
    roles
}

const NON_NOUN_FOLLOWERS: &[&str] = &[
    "more", "less", "fewer", "times", "of", "and", "or", "is", "are", "was", "were", "new",
    "other", "each", "per", "than", "in", "on", "at", "to", "a", "an", "the",
];

fn numeric_token(tok: &str) -> bool {
    let cleaned: String = tok
        .chars()
        .filter(|c| !matches!(c, '$' | ',' | '%'))
        .collect();
    let cleaned = cleaned.trim_matches(|c: char| !c.is_ascii_digit() && c != '.' && c != '-');
    !cleaned.is_empty() && cleaned.parse::<f64>().is_ok()
}

/// Lowercased nouns that follow a number in the problem text, the things the
/// problem counts. Falls back to [`DEFAULT_NOUN_POOL`].
pub fn noun_inventory(problem: &Problem) -> Vec<String> {
    let tokens: Vec<&str> = problem.question.split_whitespace().collect();
    let mut nouns: Vec<String> = Vec::new();
    for pair in tokens.windows(2) {
        if !numeric_token(pair[0]) {
            continue;
        }
        let word = pair[1].trim_matches(|c: char| !c.is_alphabetic());
        if word.is_empty() || !word.chars().all(|c| c.is_alphabetic()) {
            continue;
        }
        let lower = word.to_lowercase();
        if NON_NOUN_FOLLOWERS.contains(&lower.as_str()) {
            continue;
        }
        if !nouns.contains(&lower) {
            nouns.push(lower);
        }
    }
    if nouns.is_empty() {
        nouns = DEFAULT_NOUN_POOL.iter().map(|s| s.to_string()).collect();
    }
    nouns
}

fn instantiate(
    pattern: &str,
    roles: &[String],
    nouns: &[String],
    rng: &mut ChaCha8Rng,
) -> String {
    let mut out = pattern.to_string();
    if out.contains("{name}") {
        let name = roles.choose(rng).expect("role pool has a fallback");
        out = out.replace("{name}", name);
    }
    if out.contains("{relation}") {
        let relation = RELATION_POOL.choose(rng).expect("relation pool is static");
        out = out.replace("{relation}", relation);
    }
    if out.contains("{number}") {
        let number: u32 = rng.random_range(2..=99);
        out = out.replace("{number}", &number.to_string());
    }
    if out.contains("{noun}") {
        let noun = nouns.choose(rng).expect("noun pool has a fallback");
        out = out.replace("{noun}", noun);
    }
    out
}

/// Returns a copy of `problem` with `count_in` in-topic and `count_off`
/// off-topic distractors inserted at seeded-uniform positions, never after
/// the final (question) sentence. Insertion alternates between the kinds
/// while both have budget left, so graded variants mix them evenly.
///
/// The RNG stream is keyed on the seed and the problem id, so two problems
/// built under one seed draw independent positions and templates.
pub fn inject_noise(
    problem: &Problem,
    templates: &[NoiseTemplate],
    count_in: usize,
    count_off: usize,
    seed: u64,
) -> Result<Problem, NoiseError> {
    let in_pool: Vec<&NoiseTemplate> = templates
        .iter()
        .filter(|t| t.kind == NoiseKind::InTopic)
        .collect();
    let off_pool: Vec<&NoiseTemplate> = templates
        .iter()
        .filter(|t| t.kind == NoiseKind::OffTopic)
        .collect();
    if count_in > 0 && in_pool.is_empty() {
        return Err(NoiseError::TemplatePoolEmpty { kind: NoiseKind::InTopic });
    }
    if count_off > 0 && off_pool.is_empty() {
        return Err(NoiseError::TemplatePoolEmpty { kind: NoiseKind::OffTopic });
    }
    let mut out = problem.clone();
    if count_in + count_off == 0 {
        return Ok(out);
    }
    let mut rng = stream_rng(seed, &["inject", &problem.id]);
    let roles = extract_roles(problem);
    let nouns = noun_inventory(problem);
    let start_in = rng.random_bool(0.5);
    let mut remaining_in = count_in;
    let mut remaining_off = count_off;
    let mut prev: Option<NoiseKind> = None;
    while remaining_in + remaining_off > 0 {
        let kind = if remaining_in > remaining_off {
            NoiseKind::InTopic
        } else if remaining_off > remaining_in {
            NoiseKind::OffTopic
        } else {
            match prev {
                Some(NoiseKind::InTopic) => NoiseKind::OffTopic,
                Some(NoiseKind::OffTopic) => NoiseKind::InTopic,
                None if start_in => NoiseKind::InTopic,
                None => NoiseKind::OffTopic,
            }
        };
        let pool = match kind {
            NoiseKind::InTopic => &in_pool,
            NoiseKind::OffTopic => &off_pool,
        };
        let template = pool.choose(&mut rng).expect("pool checked non-empty");
        let sentence = instantiate(&template.pattern, &roles, &nouns, &mut rng);
        let position = rng.random_range(0..out.sentences.len());
        for ann in &mut out.noise {
            if ann.sentence_index >= position {
                ann.sentence_index += 1;
            }
        }
        out.noise.push(NoiseAnnotation {
            sentence_index: position,
            kind,
            template_id: template.template_id.clone(),
        });
        out.sentences.insert(position, sentence);
        match kind {
            NoiseKind::InTopic => remaining_in -= 1,
            NoiseKind::OffTopic => remaining_off -= 1,
        }
        prev = Some(kind);
    }
    out.noise.sort_by_key(|a| a.sentence_index);
    out.question = out.sentences.join(" ");
    out.seed = seed;
    Ok(out)
}

/// Gives each problem one in-topic distractor with probability `p_in` and
/// one off-topic distractor with probability `p_off`, independently.
pub fn build_ic_dataset(
    corpus: &[Problem],
    templates: &[NoiseTemplate],
    p_in: f64,
    p_off: f64,
    seed: u64,
) -> Result<Vec<Problem>, NoiseError> {
    for p in [p_in, p_off] {
        if !(0.0..=1.0).contains(&p) {
            return Err(NoiseError::InvalidProbability(p));
        }
    }
    corpus
        .iter()
        .map(|problem| {
            let mut rng = stream_rng(seed, &["build:ic", &problem.id]);
            let count_in = usize::from(rng.random_bool(p_in));
            let count_off = usize::from(rng.random_bool(p_off));
            inject_noise(problem, templates, count_in, count_off, seed)
        })
        .collect()
}

/// One dataset per distractor count n = 1..=n_max; in dataset n every
/// problem carries exactly n distractors with the kinds split as evenly as
/// possible (a seeded coin decides which kind gets the odd one).
pub fn build_graded_variants(
    corpus: &[Problem],
    templates: &[NoiseTemplate],
    n_max: usize,
    seed: u64,
) -> Result<BTreeMap<usize, Vec<Problem>>, NoiseError> {
    if n_max < 1 {
        return Err(NoiseError::InvalidGradeCount);
    }
    let mut out = BTreeMap::new();
    for n in 1..=n_max {
        let mut dataset = Vec::with_capacity(corpus.len());
        for problem in corpus {
            let start_in = stream_rng(seed, &["graded", &problem.id]).random_bool(0.5);
            let count_in = if start_in { n.div_ceil(2) } else { n / 2 };
            dataset.push(inject_noise(problem, templates, count_in, n - count_in, seed)?);
        }
        out.insert(n, dataset);
    }
    Ok(out)
}

/// Exactly one distractor of the given kind per problem.
pub fn build_single_kind(
    corpus: &[Problem],
    templates: &[NoiseTemplate],
    kind: NoiseKind,
    seed: u64,
) -> Result<Vec<Problem>, NoiseError> {
    let (count_in, count_off) = match kind {
        NoiseKind::InTopic => (1, 0),
        NoiseKind::OffTopic => (0, 1),
    };
    corpus
        .iter()
        .map(|p| inject_noise(p, templates, count_in, count_off, seed))
        .collect()
}

/// A seeded sample of `n` problems, kept in corpus order.
pub fn subsample(corpus: &[Problem], n: usize, seed: u64) -> Vec<Problem> {
    if n >= corpus.len() {
        return corpus.to_vec();
    }
    let mut indices: Vec<usize> = (0..corpus.len()).collect();
    indices.shuffle(&mut stream_rng(seed, &["subsample"]));
    indices.truncate(n);
    indices.sort_unstable();
    indices.into_iter().map(|i| corpus[i].clone()).collect()
}

/// Input layouts [`load_corpus`] understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// Our own line-delimited records, as written by [`save_corpus`].
    Native,
    /// JSON array with `iIndex`, `sQuestion`, `lSolutions` (AddSub,
    /// MultiArith, SingleEq distributions).
    Mawps,
    /// JSON array with `ID`, `Body`, `Question`, `Answer`.
    Svamp,
    /// Line-delimited `question` / `answer`, answer ending in `#### N`.
    Gsm8k,
    /// Line-delimited `original_question` / `new_question` / `answer`; loads
    /// the noisy `new_question` (no annotation metadata survives from the
    /// published files).
    GsmIc,
}

impl FromStr for CorpusFormat {
    type Err = NoiseError;

    fn from_str(s: &str) -> Result<Self, NoiseError> {
        match s.to_ascii_lowercase().as_str() {
            "native" => Ok(CorpusFormat::Native),
            "mawps" | "addsub" | "multiarith" | "singleeq" => Ok(CorpusFormat::Mawps),
            "svamp" => Ok(CorpusFormat::Svamp),
            "gsm8k" => Ok(CorpusFormat::Gsm8k),
            "gsm-ic" | "gsmic" => Ok(CorpusFormat::GsmIc),
            other => Err(NoiseError::UnknownFormat(other.to_string())),
        }
    }
}

impl CorpusFormat {
    fn source_tag(self) -> &'static str {
        match self {
            CorpusFormat::Native => "",
            CorpusFormat::Mawps => "mawps",
            CorpusFormat::Svamp => "svamp",
            CorpusFormat::Gsm8k => "gsm8k",
            CorpusFormat::GsmIc => "gsm-ic",
        }
    }
}

#[derive(Deserialize)]
struct MawpsRecord {
    #[serde(rename = "iIndex")]
    index: serde_json::Value,
    #[serde(rename = "sQuestion")]
    question: String,
    #[serde(rename = "lSolutions")]
    solutions: Vec<f64>,
}

#[derive(Deserialize)]
struct SvampRecord {
    #[serde(rename = "ID")]
    id: serde_json::Value,
    #[serde(rename = "Body")]
    body: String,
    #[serde(rename = "Question")]
    question: String,
    #[serde(rename = "Answer")]
    answer: f64,
}

#[derive(Deserialize)]
struct Gsm8kRecord {
    question: String,
    answer: String,
}

#[derive(Deserialize)]
struct GsmIcRecord {
    new_question: String,
    answer: serde_json::Value,
}

fn json_id(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn numeric_answer(id: &str, v: &serde_json::Value) -> Result<f64, NoiseError> {
    let parsed = match v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().replace(',', "").parse::<f64>().ok(),
        _ => None,
    };
    parsed.ok_or_else(|| NoiseError::NonNumericAnswer {
        id: id.to_string(),
        value: v.to_string(),
    })
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Problem>, NoiseError> {
    let text = fs::read_to_string(path).map_err(|source| NoiseError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let path_str = path.display().to_string();
    let tag = format.source_tag();
    match format {
        CorpusFormat::Native => parse_lines(&text, &path_str, |line, _| {
            serde_json::from_str::<Problem>(line).map_err(|e| e.to_string())
        }),
        CorpusFormat::Gsm8k => parse_lines(&text, &path_str, |line, lineno| {
            let rec: Gsm8kRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
            let id = format!("{tag}-{lineno}");
            let tail = rec
                .answer
                .rsplit("####")
                .next()
                .map(str::trim)
                .unwrap_or("");
            let gold = tail
                .replace(',', "")
                .parse::<f64>()
                .map_err(|_| format!("answer has no numeric '#### N' tail: {:?}", rec.answer))?;
            Problem::new(id, &rec.question, gold, Vec::new(), tag, 0).map_err(|e| e.to_string())
        }),
        CorpusFormat::GsmIc => parse_lines(&text, &path_str, |line, lineno| {
            let rec: GsmIcRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
            let id = format!("{tag}-{lineno}");
            let gold = numeric_answer(&id, &rec.answer).map_err(|e| e.to_string())?;
            Problem::new(id, &rec.new_question, gold, Vec::new(), tag, 0)
                .map_err(|e| e.to_string())
        }),
        CorpusFormat::Mawps => {
            let records: Vec<MawpsRecord> =
                serde_json::from_str(&text).map_err(|e| NoiseError::Parse {
                    path: path_str.clone(),
                    line: e.line(),
                    message: e.to_string(),
                })?;
            records
                .iter()
                .map(|rec| {
                    let id = format!("{tag}-{}", json_id(&rec.index));
                    let gold = *rec.solutions.first().ok_or_else(|| {
                        NoiseError::NonNumericAnswer {
                            id: id.clone(),
                            value: "[]".into(),
                        }
                    })?;
                    Problem::new(id, &rec.question, gold, Vec::new(), tag, 0)
                })
                .collect()
        }
        CorpusFormat::Svamp => {
            let records: Vec<SvampRecord> =
                serde_json::from_str(&text).map_err(|e| NoiseError::Parse {
                    path: path_str.clone(),
                    line: e.line(),
                    message: e.to_string(),
                })?;
            records
                .iter()
                .map(|rec| {
                    let id = format!("{tag}-{}", json_id(&rec.id));
                    let question = format!("{} {}", rec.body, rec.question);
                    Problem::new(id, &question, rec.answer, Vec::new(), tag, 0)
                })
                .collect()
        }
    }
}

fn parse_lines(
    text: &str,
    path: &str,
    parse: impl Fn(&str, usize) -> Result<Problem, String>,
) -> Result<Vec<Problem>, NoiseError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let problem = parse(line, i + 1).map_err(|message| NoiseError::Parse {
            path: path.to_string(),
            line: i + 1,
            message,
        })?;
        out.push(problem);
    }
    Ok(out)
}

/// Writes problems in the native line-delimited layout.
pub fn save_corpus(path: &Path, problems: &[Problem]) -> Result<(), NoiseError> {
    let mut text = String::new();
    for problem in problems {
        text.push_str(
            &serde_json::to_string(problem).expect("problem record serialization is infallible"),
        );
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| NoiseError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_templates(path: &Path) -> Result<Vec<NoiseTemplate>, NoiseError> {
    let text = fs::read_to_string(path).map_err(|source| NoiseError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let template: NoiseTemplate =
            serde_json::from_str(line).map_err(|e| NoiseError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        template.validate()?;
        out.push(template);
    }
    Ok(out)
}

/// The distractor templates shipped with the crate.
pub fn builtin_templates() -> Vec<NoiseTemplate> {
    include_str!("../assets/noise_templates.jsonl")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let t: NoiseTemplate = serde_json::from_str(l).expect("embedded template parses");
            t.validate().expect("embedded template is valid");
            t
        })
        .collect()
}
