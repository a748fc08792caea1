//! Exemplar banks and prompt assembly for the three interaction stages.
//!
//! Banks live in plain-text files: records separated by `=== EXEMPLAR ===`
//! lines, each record carrying a `PROBLEM:` and a `RESPONSE:` field. The
//! shipped banks under `assets/banks/` hold the canonical few-shot
//! demonstrations for each stage (7 review, 4 rephrase, 8 resolve, plus a
//! one-turn baseline bank reusing the resolve problems); the `k` knob in the
//! run configuration truncates a bank when fewer exemplars are wanted.
//!
//! Whitespace in bank files is canonical: `\n` newlines and no trailing
//! spaces. Loading strips trailing whitespace per line, so files survive
//! editors that re-wrap or pad lines.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Instruction prepended by the instructed one-turn baseline.
pub const DEFAULT_INSTRUCTED_TRIGGER: &str =
    "Feel free to ignore irrelevant information given in the questions.";

/// Opens the hint clause rendered into a resolve query.
pub const HINT_CLAUSE_PREFIX: &str = "With the Equation Hints:";

/// Closes the hint clause. Also the anchor after which a resolve response
/// carries its own reasoning, used to skip echoed hints during diagnosis.
pub const HINT_CLAUSE_SUFFIX: &str = "we will answer the question.";

/// Leads the sentence list handed to the rephrase stage.
pub const REPHRASE_QUERY_MARKER: &str = "Translate following sentences into equation:";

/// Expected lead-in of a review response.
pub const REVIEW_RESPONSE_PREFIX: &str = "We need to notice:";

/// The three protocol stages, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Review,
    Rephrase,
    Resolve,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Review => "review",
            Stage::Rephrase => "rephrase",
            Stage::Resolve => "resolve",
        })
    }
}

/// Which bank a set of exemplars belongs to. `Baseline` backs the one-turn
/// comparison methods and is not a pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankKind {
    Review,
    Rephrase,
    Resolve,
    Baseline,
}

impl From<Stage> for BankKind {
    fn from(stage: Stage) -> Self {
        match stage {
            Stage::Review => BankKind::Review,
            Stage::Rephrase => BankKind::Rephrase,
            Stage::Resolve => BankKind::Resolve,
        }
    }
}

/// One few-shot demonstration: the text before the answer marker and the
/// demonstrated response.
///
/// For rephrase exemplars `problem` spans two lines: the word problem, then
/// the `Q: Translate following sentences into equation: …` query listing that
/// exemplar's own sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub problem: String,
    pub response: String,
}

impl Exemplar {
    /// The word problem alone, with any embedded rephrase query stripped.
    pub fn problem_core(&self) -> &str {
        match self.problem.find("\nQ: ") {
            Some(idx) => &self.problem[..idx],
            None => &self.problem,
        }
    }
}

/// An ordered set of exemplars for one stage.
#[derive(Debug, Clone)]
pub struct ExemplarBank {
    pub kind: BankKind,
    /// Where the bank came from, e.g. `builtin:review` or a file path.
    pub source_tag: String,
    pub exemplars: Vec<Exemplar>,
}

const RECORD_SEP: &str = "=== EXEMPLAR ===";
const PROBLEM_MARK: &str = "PROBLEM:";
const RESPONSE_MARK: &str = "RESPONSE:";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("exemplar bank format error at line {line}: {reason}")]
    BankFormat { line: usize, reason: String },
    #[error("empty {kind:?} exemplar bank")]
    EmptyBank { kind: BankKind },
    #[error("{stage} prompt requires carried items from the previous stage")]
    MissingCarriedInput { stage: Stage },
    #[error("{stage} prompt takes no carried items")]
    UnexpectedCarriedInput { stage: Stage },
    #[error("instructed baseline needs a trigger sentence")]
    MissingTrigger,
    #[error("no enumerated items found in response")]
    NoEnumerationFound,
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ExemplarBank {
    /// Parses bank text in the `=== EXEMPLAR ===` / `PROBLEM:` / `RESPONSE:`
    /// format. Trailing whitespace is stripped per line; blank lines at field
    /// edges are dropped, interior blank lines kept.
    pub fn parse(kind: BankKind, source_tag: &str, text: &str) -> Result<Self, PromptError> {
        enum State {
            Outside,
            AwaitProblem,
            InProblem,
            InResponse,
        }
        let mut state = State::Outside;
        let mut problem: Vec<String> = Vec::new();
        let mut response: Vec<String> = Vec::new();
        let mut exemplars = Vec::new();
        let mut record_line = 0usize;

        fn joined(lines: &[String]) -> String {
            let mut out = lines.join("\n");
            while out.starts_with('\n') {
                out.remove(0);
            }
            while out.ends_with('\n') {
                out.pop();
            }
            out
        }

        let flush = |problem: &mut Vec<String>,
                         response: &mut Vec<String>,
                         exemplars: &mut Vec<Exemplar>,
                         record_line: usize|
         -> Result<(), PromptError> {
            let p = joined(problem);
            let r = joined(response);
            if p.is_empty() || r.is_empty() {
                return Err(PromptError::BankFormat {
                    line: record_line,
                    reason: "record is missing problem or response text".into(),
                });
            }
            exemplars.push(Exemplar { problem: p, response: r });
            problem.clear();
            response.clear();
            Ok(())
        };

        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            let lineno = i + 1;
            if line == RECORD_SEP {
                if matches!(state, State::InResponse) {
                    flush(&mut problem, &mut response, &mut exemplars, record_line)?;
                } else if !matches!(state, State::Outside) {
                    return Err(PromptError::BankFormat {
                        line: lineno,
                        reason: "record separator before RESPONSE: section".into(),
                    });
                }
                state = State::AwaitProblem;
                record_line = lineno;
                continue;
            }
            match state {
                State::Outside => {
                    if !line.is_empty() {
                        return Err(PromptError::BankFormat {
                            line: lineno,
                            reason: format!("unexpected text before first {RECORD_SEP}"),
                        });
                    }
                }
                State::AwaitProblem => {
                    if line == PROBLEM_MARK {
                        state = State::InProblem;
                    } else if !line.is_empty() {
                        return Err(PromptError::BankFormat {
                            line: lineno,
                            reason: format!("expected {PROBLEM_MARK}"),
                        });
                    }
                }
                State::InProblem => {
                    if line == RESPONSE_MARK {
                        state = State::InResponse;
                    } else {
                        problem.push(line.to_string());
                    }
                }
                State::InResponse => {
                    response.push(line.to_string());
                }
            }
        }
        match state {
            State::InResponse => {
                flush(&mut problem, &mut response, &mut exemplars, record_line)?;
            }
            State::Outside if !exemplars.is_empty() => {}
            _ => {
                return Err(PromptError::BankFormat {
                    line: text.lines().count(),
                    reason: "bank ends before a complete record".into(),
                });
            }
        }
        Ok(ExemplarBank {
            kind,
            source_tag: source_tag.to_string(),
            exemplars,
        })
    }

    pub fn load(path: &Path, kind: BankKind) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(kind, &path.display().to_string(), &text)
    }

    /// A copy holding at most the first `k` exemplars.
    pub fn truncated(&self, k: usize) -> ExemplarBank {
        ExemplarBank {
            kind: self.kind,
            source_tag: self.source_tag.clone(),
            exemplars: self.exemplars.iter().take(k).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }
}

/// The banks shipped with the crate, embedded at compile time.
pub mod builtin {
    use super::{BankKind, ExemplarBank};

    fn parse(kind: BankKind, tag: &str, text: &str) -> ExemplarBank {
        ExemplarBank::parse(kind, tag, text).expect("embedded bank is well-formed")
    }

    pub fn review_bank() -> ExemplarBank {
        parse(
            BankKind::Review,
            "builtin:review",
            include_str!("../assets/banks/review.txt"),
        )
    }

    pub fn rephrase_bank() -> ExemplarBank {
        parse(
            BankKind::Rephrase,
            "builtin:rephrase",
            include_str!("../assets/banks/rephrase.txt"),
        )
    }

    pub fn resolve_bank() -> ExemplarBank {
        parse(
            BankKind::Resolve,
            "builtin:resolve",
            include_str!("../assets/banks/resolve.txt"),
        )
    }

    pub fn baseline_bank() -> ExemplarBank {
        parse(
            BankKind::Baseline,
            "builtin:baseline",
            include_str!("../assets/banks/baseline.txt"),
        )
    }
}

/// Templates for one stage's prompt.
///
/// `exemplar_template` binds `{problem}` and `{response}`; `query_template`
/// binds `{problem}` plus `{key_sentences}` (rephrase) or `{hints}`
/// (resolve). Exemplar blocks are joined by `block_separator` and the query
/// block comes last.
#[derive(Debug, Clone)]
pub struct StagePromptSpec {
    pub stage: Stage,
    pub exemplar_template: String,
    pub query_template: String,
    pub block_separator: String,
}

impl StagePromptSpec {
    pub fn default_for(stage: Stage) -> Self {
        let (exemplar_template, query_template) = match stage {
            Stage::Review => (
                "Q: {problem}\nA: {response}".to_string(),
                "Q: {problem}\nA:".to_string(),
            ),
            Stage::Rephrase => (
                "{problem}\nA: {response}".to_string(),
                format!("{{problem}}\nQ: {REPHRASE_QUERY_MARKER} {{key_sentences}}\nA:"),
            ),
            Stage::Resolve => (
                "Q: {problem}\nA: {response}".to_string(),
                format!("Q: {{problem}}\nA: {HINT_CLAUSE_PREFIX} {{hints}}, {HINT_CLAUSE_SUFFIX}"),
            ),
        };
        StagePromptSpec {
            stage,
            exemplar_template,
            query_template,
            block_separator: "\n\n".to_string(),
        }
    }

    /// Resolve query with the hint clause omitted, for runs where neither
    /// review nor rephrase output is available.
    pub fn resolve_without_hints() -> Self {
        StagePromptSpec {
            stage: Stage::Resolve,
            exemplar_template: "Q: {problem}\nA: {response}".to_string(),
            query_template: "Q: {problem}\nA:".to_string(),
            block_separator: "\n\n".to_string(),
        }
    }
}

/// `1.'…' 2.'…'` — how key sentences are listed in a rephrase query.
pub fn format_key_sentence_items(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}.'{}'", i + 1, s))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `'…', '…'` — how carried variables are listed inside the hint clause.
pub fn format_hint_items(items: &[String]) -> String {
    items
        .iter()
        .map(|s| format!("'{s}'"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// `1."…", 2."…"` — the enumeration shape stage responses use.
pub fn format_enumerated(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}.\"{}\"", i + 1, s))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Assembles a stage prompt: every bank exemplar rendered through
/// `exemplar_template`, then the query block for `problem`.
///
/// `carried` holds the previous stage's parsed items. It is required exactly
/// when the query template references them: rephrase and (hinted) resolve
/// queries need it, review queries reject it.
pub fn render_stage_prompt(
    spec: &StagePromptSpec,
    bank: &ExemplarBank,
    problem: &str,
    carried: Option<&[String]>,
) -> Result<String, PromptError> {
    if bank.exemplars.is_empty() {
        return Err(PromptError::EmptyBank { kind: bank.kind });
    }
    let needs_key = spec.query_template.contains("{key_sentences}");
    let needs_hints = spec.query_template.contains("{hints}");
    let mut query = spec.query_template.replace("{problem}", problem);
    match carried {
        Some(items) if needs_key => {
            query = query.replace("{key_sentences}", &format_key_sentence_items(items));
        }
        Some(items) if needs_hints => {
            query = query.replace("{hints}", &format_hint_items(items));
        }
        Some(_) => return Err(PromptError::UnexpectedCarriedInput { stage: spec.stage }),
        None if needs_key || needs_hints => {
            return Err(PromptError::MissingCarriedInput { stage: spec.stage });
        }
        None => {}
    }
    let mut out = String::new();
    for ex in &bank.exemplars {
        out.push_str(
            &spec
                .exemplar_template
                .replace("{problem}", &ex.problem)
                .replace("{response}", &ex.response),
        );
        out.push_str(&spec.block_separator);
    }
    out.push_str(&query);
    Ok(out)
}

/// One-turn baselines sharing the resolve problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Plain few-shot chain of thought.
    ManualCot,
    /// Few-shot chain of thought opened by a trigger instruction telling the
    /// model to ignore irrelevant information.
    InstructedCot,
}

pub fn render_baseline_prompt(
    kind: BaselineKind,
    bank: &ExemplarBank,
    trigger: Option<&str>,
    problem: &str,
) -> Result<String, PromptError> {
    if bank.exemplars.is_empty() {
        return Err(PromptError::EmptyBank { kind: bank.kind });
    }
    let mut out = String::new();
    if kind == BaselineKind::InstructedCot {
        let trigger = trigger
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .ok_or(PromptError::MissingTrigger)?;
        out.push_str(trigger);
        out.push_str("\n\n");
    }
    for ex in &bank.exemplars {
        out.push_str(&format!("Q: {}\nA: {}\n\n", ex.problem, ex.response));
    }
    out.push_str(&format!("Q: {problem}\nA:"));
    Ok(out)
}

/// Parses an enumerated stage response into its items.
///
/// Items are introduced by `<n>.` markers sought in ascending order from 1,
/// so decimals inside item text don't start new items. A quoted item ends at
/// the first quote followed by a separator (comma, semicolon, period,
/// newline-then-quote, the next marker, or end of text); apostrophes inside
/// single-quoted items therefore don't close them. An unquoted item runs to
/// the next marker. Prose before `1.` and a lone period after the final
/// quoted item are discarded.
pub fn parse_enumerated_response(text: &str) -> Result<Vec<String>, PromptError> {
    let (_, first_end) = find_marker(text, 0, 1).ok_or(PromptError::NoEnumerationFound)?;
    let mut items = Vec::new();
    let mut marker_end = first_end;
    let mut index = 1usize;
    loop {
        let rest = &text[marker_end..];
        let content_start = marker_end + (rest.len() - rest.trim_start().len());
        let next_index = index + 1;
        let (item, cursor) = match text[content_start..].chars().next() {
            Some(q @ ('"' | '\'')) => match find_quote_close(text, content_start, q, next_index) {
                Some(close) => (
                    text[content_start + q.len_utf8()..close].to_string(),
                    close + q.len_utf8(),
                ),
                None => unquoted_item(text, content_start, next_index),
            },
            Some(_) => unquoted_item(text, content_start, next_index),
            None => (String::new(), text.len()),
        };
        if !item.is_empty() {
            items.push(item);
        }
        match find_marker(text, cursor, next_index) {
            Some((_, end)) => {
                marker_end = end;
                index = next_index;
            }
            None => break,
        }
    }
    if items.is_empty() {
        return Err(PromptError::NoEnumerationFound);
    }
    Ok(items)
}

/// Finds `<k>.` at or after `from`, not embedded in a word or a decimal.
/// Returns (start, end) byte offsets around the marker.
fn find_marker(text: &str, from: usize, k: usize) -> Option<(usize, usize)> {
    let needle = format!("{k}.");
    let mut search = from;
    while let Some(rel) = text[search..].find(&needle) {
        let start = search + rel;
        let end = start + needle.len();
        let prev_ok = text[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_ascii_alphanumeric() && c != '.');
        let next_ok = text[end..].chars().next().is_none_or(|c| !c.is_ascii_digit());
        if prev_ok && next_ok {
            return Some((start, end));
        }
        search = start + needle.len();
    }
    None
}

fn marker_starts(s: &str, k: usize) -> bool {
    let needle = format!("{k}.");
    s.starts_with(&needle)
        && s[needle.len()..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_ascii_digit())
}

fn find_quote_close(text: &str, open: usize, quote: char, next_index: usize) -> Option<usize> {
    let mut search = open + quote.len_utf8();
    while let Some(rel) = text[search..].find(quote) {
        let pos = search + rel;
        let after = text[pos + quote.len_utf8()..].trim_start();
        let closes = after.is_empty()
            || after.starts_with([',', ';', '.', '"', '\''])
            || marker_starts(after, next_index);
        if closes {
            return Some(pos);
        }
        search = pos + quote.len_utf8();
    }
    None
}

fn unquoted_item(text: &str, start: usize, next_index: usize) -> (String, usize) {
    let end = find_marker(text, start, next_index)
        .map(|(s, _)| s)
        .unwrap_or(text.len());
    let item = text[start..end]
        .trim()
        .trim_end_matches([',', ';'])
        .trim_end()
        .to_string();
    (item, end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_bank(kind: BankKind) -> ExemplarBank {
        ExemplarBank {
            kind,
            source_tag: "test".into(),
            exemplars: vec![
                Exemplar {
                    problem: "Ann has 2 pears. She buys 3 more. How many pears does Ann have?".into(),
                    response: "The answer is 5.".into(),
                },
                Exemplar {
                    problem: "Bob read 4 pages. How many pages did Bob read?".into(),
                    response: "The answer is 4.".into(),
                },
            ],
        }
    }

    #[test]
    fn builtin_banks_have_expected_sizes() {
        assert_eq!(builtin::review_bank().len(), 7);
        assert_eq!(builtin::rephrase_bank().len(), 4);
        assert_eq!(builtin::resolve_bank().len(), 8);
        assert_eq!(builtin::baseline_bank().len(), 8);
    }

    #[test]
    fn rephrase_problems_all_appear_in_resolve_bank() {
        let first_sentence = |text: &str| {
            let core = text.split("\nQ: ").next().unwrap_or(text);
            core.split_inclusive(['.', '?']).next().unwrap_or(core).trim().to_string()
        };
        let resolve_keys: Vec<String> = builtin::resolve_bank()
            .exemplars
            .iter()
            .map(|e| first_sentence(&e.problem))
            .collect();
        for ex in &builtin::rephrase_bank().exemplars {
            let key = first_sentence(ex.problem_core());
            assert!(
                resolve_keys.contains(&key),
                "rephrase exemplar problem not in resolve bank: {key}"
            );
        }
    }

    #[test]
    fn bank_roundtrips_through_parse() {
        let text = "=== EXEMPLAR ===\nPROBLEM:\nfirst line\nsecond line\nRESPONSE:\nanswer text\n\
                    === EXEMPLAR ===\nPROBLEM:\np2\nRESPONSE:\nr2a\nr2b\n";
        let bank = ExemplarBank::parse(BankKind::Review, "t", text).unwrap();
        assert_eq!(bank.len(), 2);
        assert_eq!(bank.exemplars[0].problem, "first line\nsecond line");
        assert_eq!(bank.exemplars[1].response, "r2a\nr2b");
    }

    #[test]
    fn bank_parse_rejects_incomplete_records() {
        let missing_response = "=== EXEMPLAR ===\nPROBLEM:\nonly a problem\n";
        assert!(matches!(
            ExemplarBank::parse(BankKind::Review, "t", missing_response),
            Err(PromptError::BankFormat { .. })
        ));
        let empty_problem = "=== EXEMPLAR ===\nPROBLEM:\nRESPONSE:\nr\n";
        assert!(matches!(
            ExemplarBank::parse(BankKind::Review, "t", empty_problem),
            Err(PromptError::BankFormat { .. })
        ));
    }

    #[test]
    fn truncation_caps_exemplars() {
        let bank = builtin::resolve_bank();
        assert_eq!(bank.truncated(3).len(), 3);
        assert_eq!(bank.truncated(99).len(), 8);
    }

    #[test]
    fn review_prompt_places_query_last() {
        let spec = StagePromptSpec::default_for(Stage::Review);
        let bank = sample_bank(BankKind::Review);
        let prompt =
            render_stage_prompt(&spec, &bank, "Cam has 9 figs. How many figs?", None).unwrap();
        assert!(prompt.ends_with("Q: Cam has 9 figs. How many figs?\nA:"));
        assert_eq!(prompt.matches("Cam has 9 figs").count(), 1);
    }

    #[test]
    fn rephrase_prompt_numbers_carried_sentences() {
        let spec = StagePromptSpec::default_for(Stage::Rephrase);
        let bank = sample_bank(BankKind::Rephrase);
        let carried = vec!["He lost 8 marbles".to_string(), "He found 10 new ones".to_string()];
        let prompt = render_stage_prompt(&spec, &bank, "problem text?", Some(&carried)).unwrap();
        assert!(prompt.contains(
            "Q: Translate following sentences into equation: 1.'He lost 8 marbles' 2.'He found 10 new ones'\nA:"
        ));
    }

    #[test]
    fn resolve_prompt_embeds_hint_clause() {
        let spec = StagePromptSpec::default_for(Stage::Resolve);
        let bank = sample_bank(BankKind::Resolve);
        let carried = vec!["x = 8.".to_string(), "y = 10.".to_string()];
        let prompt = render_stage_prompt(&spec, &bank, "problem?", Some(&carried)).unwrap();
        assert!(prompt.ends_with(
            "Q: problem?\nA: With the Equation Hints: 'x = 8.', 'y = 10.', we will answer the question."
        ));
    }

    #[test]
    fn carried_input_is_validated_per_stage() {
        let bank = sample_bank(BankKind::Review);
        let items = vec!["a".to_string()];
        let review = StagePromptSpec::default_for(Stage::Review);
        assert!(matches!(
            render_stage_prompt(&review, &bank, "p?", Some(&items)),
            Err(PromptError::UnexpectedCarriedInput { stage: Stage::Review })
        ));
        let rephrase = StagePromptSpec::default_for(Stage::Rephrase);
        assert!(matches!(
            render_stage_prompt(&rephrase, &bank, "p?", None),
            Err(PromptError::MissingCarriedInput { stage: Stage::Rephrase })
        ));
        let empty = ExemplarBank { kind: BankKind::Review, source_tag: "t".into(), exemplars: vec![] };
        assert!(matches!(
            render_stage_prompt(&review, &empty, "p?", None),
            Err(PromptError::EmptyBank { kind: BankKind::Review })
        ));
    }

    #[test]
    fn instructed_baseline_starts_with_trigger() {
        let bank = sample_bank(BankKind::Baseline);
        let prompt = render_baseline_prompt(
            BaselineKind::InstructedCot,
            &bank,
            Some(DEFAULT_INSTRUCTED_TRIGGER),
            "p?",
        )
        .unwrap();
        assert!(prompt.starts_with(DEFAULT_INSTRUCTED_TRIGGER));
        assert!(prompt.ends_with("Q: p?\nA:"));
        assert!(matches!(
            render_baseline_prompt(BaselineKind::InstructedCot, &bank, None, "p?"),
            Err(PromptError::MissingTrigger)
        ));
        assert!(render_baseline_prompt(BaselineKind::ManualCot, &bank, None, "p?").is_ok());
    }

    #[test]
    fn parses_double_quoted_enumeration() {
        let text = r#"We need to notice: 1."He lost 8 marbles.", 2."He found 10 new ones.", 3."The rest is irrelevant to this question."."#;
        let items = parse_enumerated_response(text).unwrap();
        assert_eq!(
            items,
            vec![
                "He lost 8 marbles.",
                "He found 10 new ones.",
                "The rest is irrelevant to this question."
            ]
        );
    }

    #[test]
    fn parses_items_without_trailing_periods_inside_quotes() {
        let text = r#"We need to notice: 1."He lost 8 marbles", 2."He found 10 new ones"."#;
        assert_eq!(
            parse_enumerated_response(text).unwrap(),
            vec!["He lost 8 marbles", "He found 10 new ones"]
        );
    }

    #[test]
    fn apostrophes_do_not_close_single_quoted_items() {
        let text = "ignored prose 1.'Gwen's birthday she received 8 dollars from her mom.' 2.'Her dad gave her 5 more dollars.'";
        assert_eq!(
            parse_enumerated_response(text).unwrap(),
            vec![
                "Gwen's birthday she received 8 dollars from her mom.",
                "Her dad gave her 5 more dollars."
            ]
        );
    }

    #[test]
    fn parses_multiline_items_with_unmarked_continuations() {
        let text = "1.\"Total hours in a day = 24.\"\n\"Hours spent working = 8.\"\n2. \"The age of Jackie's sister is irrelevant to this question.\"";
        assert_eq!(
            parse_enumerated_response(text).unwrap(),
            vec![
                "Total hours in a day = 24.",
                "The age of Jackie's sister is irrelevant to this question."
            ]
        );
    }

    #[test]
    fn parses_unquoted_items() {
        let text = "plan: 1. count the apples, 2. subtract the eaten ones";
        assert_eq!(
            parse_enumerated_response(text).unwrap(),
            vec!["count the apples", "subtract the eaten ones"]
        );
    }

    #[test]
    fn decimals_do_not_open_items() {
        let text = "1.\"Price = 1.5 dollars.\", 2.\"Count = 2.\"";
        assert_eq!(
            parse_enumerated_response(text).unwrap(),
            vec!["Price = 1.5 dollars.", "Count = 2."]
        );
    }

    #[test]
    fn missing_enumeration_is_an_error() {
        assert!(matches!(
            parse_enumerated_response("no items here at all"),
            Err(PromptError::NoEnumerationFound)
        ));
        assert!(matches!(
            parse_enumerated_response(""),
            Err(PromptError::NoEnumerationFound)
        ));
    }

    proptest! {
        #[test]
        fn enumeration_roundtrips(items in proptest::collection::vec("[^\"]{1,40}", 1..8)) {
            let items: Vec<String> = items
                .into_iter()
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            prop_assume!(!items.is_empty());
            let formatted = format_enumerated(&items);
            let parsed = parse_enumerated_response(&formatted).unwrap();
            prop_assert_eq!(parsed, items);
        }

        #[test]
        fn rendered_prompt_contains_query_exactly_once(
            problem in "[a-z ]{10,60}\\?",
        ) {
            let spec = StagePromptSpec::default_for(Stage::Review);
            let bank = sample_bank(BankKind::Review);
            let prompt = render_stage_prompt(&spec, &bank, &problem, None).unwrap();
            prop_assert_eq!(prompt.matches(&problem).count(), 1);
            let query_pos = prompt.rfind(&problem).unwrap();
            for ex in &bank.exemplars {
                prop_assert!(prompt.find(&ex.problem).unwrap() < query_pos);
            }
        }
    }
}
