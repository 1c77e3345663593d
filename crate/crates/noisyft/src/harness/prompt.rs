//! Prompt templates and optional verbosity meta-prompts.
//!
//! The template strings are documented stand-ins for the common
//! instruction-tuning formats; they are not copied from any upstream
//! repository and must not be assumed identical to them. The completion is
//! concatenated directly after the returned prompt during training.

use serde::{Deserialize, Serialize};

use super::dataset::InstructionExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    #[default]
    Alpaca,
    Vicuna,
}

/// Extra sentence appended to the instruction to ask for longer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetaPrompt {
    #[default]
    None,
    Long,
    Comprehensive,
    LongComprehensive,
}

impl MetaPrompt {
    pub fn sentence(&self) -> Option<&'static str> {
        match self {
            MetaPrompt::None => None,
            MetaPrompt::Long => Some("Generate a long response."),
            MetaPrompt::Comprehensive => Some("Generate a comprehensive response."),
            MetaPrompt::LongComprehensive => {
                Some("Generate a long and comprehensive response.")
            }
        }
    }
}

/// Deterministic prompt assembly: system preamble, instruction, optional
/// input, optional meta-prompt sentence, then the response marker.
pub fn build_prompt(example: &InstructionExample, template: TemplateId, meta: MetaPrompt) -> String {
    match template {
        TemplateId::Alpaca => {
            let mut p = String::from(match example.input {
                Some(_) => {
                    "Below is an instruction that describes a task, paired with an input \
                     that provides further context. Write a response that appropriately \
                     completes the request.\n\n### Instruction:\n"
                }
                None => {
                    "Below is an instruction that describes a task. Write a response \
                     that appropriately completes the request.\n\n### Instruction:\n"
                }
            });
            p.push_str(&example.instruction);
            if let Some(input) = &example.input {
                p.push_str("\n\n### Input:\n");
                p.push_str(input);
            }
            if let Some(sentence) = meta.sentence() {
                p.push_str("\n\n");
                p.push_str(sentence);
            }
            p.push_str("\n\n### Response:\n");
            p
        }
        TemplateId::Vicuna => {
            let mut p = String::from(
                "A chat between a curious user and an artificial intelligence assistant. \
                 The assistant gives helpful, detailed, and polite answers to the user's \
                 questions. USER: ",
            );
            p.push_str(&example.instruction);
            if let Some(input) = &example.input {
                p.push('\n');
                p.push_str(input);
            }
            if let Some(sentence) = meta.sentence() {
                p.push(' ');
                p.push_str(sentence);
            }
            p.push_str(" ASSISTANT:");
            p
        }
    }
}
