//! Three-stage prompting (review, rephrase, resolve) for math word problems
//! that carry irrelevant context, plus the benchmark tooling around it:
//! noisy-dataset construction, an OpenAI-compatible client with caching and
//! deterministic replay, self-consistency voting, and run scoring/diagnosis.
//!
//! The protocol asks a model to first *review* a problem and quote the
//! sentences that matter, then *rephrase* those sentences into equations over
//! named variables, and finally *resolve* the question with the equations
//! attached as hints. Each stage is a separate completion request assembled
//! from a few-shot exemplar bank, and each stage's output is parsed and
//! carried into the next prompt.

pub mod client;
pub mod eval;
pub mod noise;
pub mod pipeline;
pub mod prompts;
pub mod seed;
