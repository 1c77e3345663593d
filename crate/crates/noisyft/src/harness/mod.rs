//! Experiment harness: datasets, prompt templates, run configuration,
//! training/generation orchestration, and pairwise output comparison.

pub mod compare;
pub mod config;
pub mod dataset;
pub mod judge;
pub mod prompt;
pub mod run;

pub use compare::{pairwise_compare, win_score, ComparisonResult};
pub use config::RunConfig;
pub use dataset::{load_dataset, InstructionExample};
pub use judge::{DeterministicHeuristicJudge, ExternalHttpJudge, Judge, Verdict};
pub use prompt::{build_prompt, MetaPrompt, TemplateId};
pub use run::{run_generate, run_train, GenerationRecord, RunSummary};
