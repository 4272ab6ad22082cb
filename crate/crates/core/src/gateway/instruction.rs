use crate::dataset::{Dimension, LengthClass};

use super::GatewayError;

pub const TEMPLATE_VERSION: &str = "v1";

fn rubric(dim: Dimension) -> &'static str {
    match dim {
        Dimension::Fluency => "the caption reads naturally and coherently, with correct grammar and no spelling mistakes",
        Dimension::Relevance => {
            "the caption focuses on the main objects and scene elements of the image and leaves out unrelated details"
        }
        Dimension::Conciseness => "the caption is clear and succinct, without redundant wording",
        Dimension::Completeness => {
            "the caption thoroughly covers all visible objects, their attributes and the relationships between them"
        }
    }
}

/// Versioned prompt templates keyed by (dimension, caption length).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTemplates {
    version: String,
}

impl Default for InstructionTemplates {
    fn default() -> Self {
        Self {
            version: TEMPLATE_VERSION.to_string(),
        }
    }
}

impl InstructionTemplates {
    /// Templates tagged with a custom version string; the tag is part of every
    /// rendered prompt and every feature cache key.
    pub fn with_version(version: impl Into<String>) -> Self {
        Self { version: version.into() }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn render(&self, dim: Dimension, length: LengthClass) -> Result<String, GatewayError> {
        if !length.allows(dim) {
            return Err(GatewayError::Validation(format!("{dim} is not rated for {length} captions")));
        }
        Ok(format!(
            "[caption-eval {ver}] The first image is the original. The second image was generated from the {length} caption below. \
             Rate the {dim} of the caption on a continuous scale from 1 (bad) to 5 (excellent). \
             High {dim} means {rubric}.",
            ver = self.version,
            rubric = rubric(dim),
        ))
    }
}

impl InstructionTemplates {
    /// Dimension-free prompt used when one shared feature serves every dimension.
    pub fn render_shared(&self, length: LengthClass) -> String {
        let dims: Vec<&str> = length.dimensions().iter().map(|d| d.as_str()).collect();
        format!(
            "[caption-eval {ver}] The first image is the original. The second image was generated from the {length} caption below. \
             Judge the caption's {dims}.",
            ver = self.version,
            dims = dims.join(", "),
        )
    }
}

pub fn render_instruction(dim: Dimension, length: LengthClass) -> Result<String, GatewayError> {
    InstructionTemplates::default().render(dim, length)
}
