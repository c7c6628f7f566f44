//! Built-in instruction catalog: four entailment prompts, four contradiction
//! prompts, and the similarity-scoring prompt.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Entailment,
    Contradiction,
    Scoring,
}

impl PromptKind {
    /// The kind whose instructions act as the noisy stream during
    /// contrastive generation.
    pub fn opposite(self) -> PromptKind {
        match self {
            PromptKind::Entailment => PromptKind::Contradiction,
            PromptKind::Contradiction => PromptKind::Entailment,
            PromptKind::Scoring => PromptKind::Scoring,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPrompt {
    pub id: String,
    pub kind: PromptKind,
    pub template: String,
}

impl InstructionPrompt {
    fn new(id: &str, kind: PromptKind, template: &str) -> Self {
        Self {
            id: id.to_string(),
            kind,
            template: template.to_string(),
        }
    }
}

const ENTAILMENT_TEMPLATES: [&str; 4] = [
    "Please paraphrase the input sentence or phrase, providing an alternative expression with the same meaning.",
    "Rewrite the following sentence or phrase using different words and sentence structure while preserving its original meaning.",
    "Create a sentence or phrase that is also true, assuming the provided input sentence or phrase is true.",
    "Please provide a concise paraphrase of the input sentence or phrase, maintaining the core meaning while altering the words and sentence structure. Feel free to omit some of the non-essential details like adjectives or adverbs.",
];

const CONTRADICTION_TEMPLATES: [&str; 4] = [
    "Revise the provided sentence by swapping, changing, or contradicting some details in order to express a different meaning, while maintaining the general context and structure.",
    "Generate a slightly modified version of the provided sentence to express an opposing or alternate meaning by changing one or two specific elements, while maintaining the overall context and sentence structure.",
    "Transform the input sentence by adjusting, altering, or contradicting its original meaning to create a logical and sensible output sentence with a different meaning from the input sentence.",
    "Generate a sentence that conveys a altering, contrasting or opposite idea to the given input sentence, while ensuring the new sentence is logical, realistic, and grounded in common sense.",
];

/// Scoring template; `{x}` and `{x_y}` are replaced by the sentence pair.
const SCORING_TEMPLATE: &str = "Scoring the semantic similarity of the following sentences between 0.0 and 5.0, 5.0 means they have the same meaning, 0.0 means they are completely different: (a) \"{x}\", (b) \"{x_y}\":";

/// The full built-in catalog.
#[derive(Debug, Clone)]
pub struct PromptCatalog {
    entailment: Vec<InstructionPrompt>,
    contradiction: Vec<InstructionPrompt>,
    scoring: InstructionPrompt,
}

impl Default for PromptCatalog {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptCatalog {
    pub fn builtin() -> Self {
        let entailment = ENTAILMENT_TEMPLATES
            .iter()
            .enumerate()
            .map(|(i, t)| {
                InstructionPrompt::new(&format!("ent-{}", i + 1), PromptKind::Entailment, t)
            })
            .collect();
        let contradiction = CONTRADICTION_TEMPLATES
            .iter()
            .enumerate()
            .map(|(i, t)| {
                InstructionPrompt::new(&format!("con-{}", i + 1), PromptKind::Contradiction, t)
            })
            .collect();
        Self {
            entailment,
            contradiction,
            scoring: InstructionPrompt::new("score", PromptKind::Scoring, SCORING_TEMPLATE),
        }
    }

    pub fn of_kind(&self, kind: PromptKind) -> &[InstructionPrompt] {
        match kind {
            PromptKind::Entailment => &self.entailment,
            PromptKind::Contradiction => &self.contradiction,
            PromptKind::Scoring => std::slice::from_ref(&self.scoring),
        }
    }

    pub fn scoring(&self) -> &InstructionPrompt {
        &self.scoring
    }

    pub fn by_id(&self, id: &str) -> Option<&InstructionPrompt> {
        self.entailment
            .iter()
            .chain(&self.contradiction)
            .chain(std::iter::once(&self.scoring))
            .find(|p| p.id == id)
    }
}

/// Fill the scoring template for a sentence pair.
pub fn render_scoring_prompt(template: &str, x: &str, y: &str) -> String {
    template.replace("{x}", x).replace("{x_y}", y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_has_expected_counts() {
        let cat = PromptCatalog::builtin();
        assert_eq!(cat.of_kind(PromptKind::Entailment).len(), 4);
        assert_eq!(cat.of_kind(PromptKind::Contradiction).len(), 4);
        assert_eq!(cat.of_kind(PromptKind::Scoring).len(), 1);
        for p in cat.of_kind(PromptKind::Entailment) {
            assert_eq!(p.kind, PromptKind::Entailment);
        }
    }

    #[test]
    fn scoring_template_has_both_placeholders() {
        let cat = PromptCatalog::builtin();
        assert!(cat.scoring().template.contains("{x}"));
        assert!(cat.scoring().template.contains("{x_y}"));
        let rendered = render_scoring_prompt(&cat.scoring().template, "He left.", "He stayed.");
        assert!(rendered.contains("(a) \"He left.\", (b) \"He stayed.\":"));
        assert!(!rendered.contains("{x"));
    }

    #[test]
    fn ids_are_unique_and_resolvable() {
        let cat = PromptCatalog::builtin();
        for id in ["ent-1", "ent-4", "con-1", "con-4", "score"] {
            assert!(cat.by_id(id).is_some(), "missing {id}");
        }
        assert!(cat.by_id("ent-5").is_none());
    }
}
