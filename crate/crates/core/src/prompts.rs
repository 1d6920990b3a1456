//! Prompt templates. Each template is a text file with `{}` placeholders that
//! are filled positionally.

use std::collections::BTreeMap;

use crate::canonical::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PromptId {
    ExtractionSpeaker1,
    ExtractionSpeaker2,
    Update,
    Generation,
    Judge,
}

impl PromptId {
    pub const ALL: [PromptId; 5] = [
        PromptId::ExtractionSpeaker1,
        PromptId::ExtractionSpeaker2,
        PromptId::Update,
        PromptId::Generation,
        PromptId::Judge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptId::ExtractionSpeaker1 => "extraction_speaker_1",
            PromptId::ExtractionSpeaker2 => "extraction_speaker_2",
            PromptId::Update => "update",
            PromptId::Generation => "generation",
            PromptId::Judge => "judge",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            PromptId::ExtractionSpeaker1 => include_str!("../prompts/extraction_speaker_1.txt"),
            PromptId::ExtractionSpeaker2 => include_str!("../prompts/extraction_speaker_2.txt"),
            PromptId::Update => include_str!("../prompts/update.txt"),
            PromptId::Generation => include_str!("../prompts/generation.txt"),
            PromptId::Judge => include_str!("../prompts/judge.txt"),
        }
    }

    pub fn placeholder_count(self) -> usize {
        self.template().matches("{}").count()
    }
}

/// Substitutes `args` into the template's placeholders in order.
///
/// # Panics
/// If the argument count differs from the template's placeholder count.
pub fn render(id: PromptId, args: &[&str]) -> String {
    let pieces: Vec<&str> = id.template().split("{}").collect();
    assert_eq!(pieces.len() - 1, args.len(), "wrong argument count for {}", id.name());
    let mut out = String::with_capacity(id.template().len() + args.iter().map(|a| a.len()).sum::<usize>());
    out.push_str(pieces[0]);
    for (arg, piece) in args.iter().zip(&pieces[1..]) {
        out.push_str(arg);
        out.push_str(piece);
    }
    out
}

/// Collapses line breaks so user text cannot forge the line structure of a prompt.
pub fn flatten(text: &str) -> String {
    text.split(['\n', '\r']).filter(|s| !s.is_empty()).collect::<Vec<_>>().join(" ")
}

/// SHA-256 of every template, keyed by name.
pub fn template_hashes() -> BTreeMap<String, String> {
    PromptId::ALL
        .iter()
        .map(|id| (id.name().to_owned(), sha256_hex(id.template().as_bytes())))
        .collect()
}

/// Appended to an extraction prompt when the first answer was not valid JSON.
pub const JSON_REPAIR_SUFFIX: &str = "\nYour previous answer was not valid JSON. Answer again with only the JSON object whose top-level key is \"extracted_memories\", or NO_TRAIT.\n";
