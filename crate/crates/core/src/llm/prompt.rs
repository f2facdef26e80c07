//! Versioned prompt templates for the four LLM jobs.
//!
//! Templates use `{{name}}` placeholders. Every placeholder must be supplied;
//! a missing one is a validation error rather than an empty substitution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::JobKind;
use crate::error::{Error, Result, Violation};
use crate::model::Relation;
use crate::text::FieldHasher;

pub const BUILTIN_PROMPT_VERSION: &str = "prompts-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub version: String,
    pub templates: BTreeMap<JobKind, Template>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        let t = |system: &str, user: &str| Template {
            system: system.to_string(),
            user: user.to_string(),
        };
        let templates = BTreeMap::from([
            (
                JobKind::Keywords,
                t(
                    include_str!("../../templates/keywords.system.txt"),
                    include_str!("../../templates/keywords.user.txt"),
                ),
            ),
            (
                JobKind::ClaimExtract,
                t(
                    include_str!("../../templates/claim_extract.system.txt"),
                    include_str!("../../templates/claim_extract.user.txt"),
                ),
            ),
            (
                JobKind::TopicLabel,
                t(
                    include_str!("../../templates/topic_label.system.txt"),
                    include_str!("../../templates/topic_label.user.txt"),
                ),
            ),
            (
                JobKind::RelationGen,
                t(
                    include_str!("../../templates/relation_gen.system.txt"),
                    include_str!("../../templates/relation_gen.user.txt"),
                ),
            ),
        ]);
        PromptSet {
            version: BUILTIN_PROMPT_VERSION.to_string(),
            templates,
        }
    }

    /// Digest of the version string and every template body.
    pub fn digest(&self) -> String {
        let mut h = FieldHasher::new("prompts");
        h.push(&self.version);
        for (kind, t) in &self.templates {
            h.push(kind.tag()).push(&t.system).push(&t.user);
        }
        h.finish()
    }

    /// Renders `(system, user)` text for one job.
    pub fn render(&self, kind: JobKind, inputs: &PromptInputs) -> Result<(String, String)> {
        let template = self
            .templates
            .get(&kind)
            .ok_or_else(|| Error::invalid("prompts", format!("no template for {}", kind.tag())))?;
        let mut missing = Vec::new();
        for field in kind.required_inputs() {
            if !inputs.0.contains_key(*field) {
                missing.push(Violation::new(*field, "missing input field"));
            }
        }
        if !missing.is_empty() {
            return Err(Error::Validation(missing));
        }
        let system = substitute(&template.system, inputs)?;
        let user = substitute(&template.user, inputs)?;
        Ok((system, user))
    }
}

fn substitute(template: &str, inputs: &PromptInputs) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| Error::invalid("template", "unterminated placeholder"))?;
        let name = after[..end].trim();
        let value = inputs
            .0
            .get(name)
            .ok_or_else(|| Error::invalid(name, "missing input field"))?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Named values substituted into a template.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInputs(pub BTreeMap<String, String>);

impl PromptInputs {
    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.0.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn keywords(
        topic: &str,
        description: Option<&str>,
        heavy_n: usize,
        lesser_n: usize,
        exclude: &[String],
    ) -> Self {
        let exclude = if exclude.is_empty() {
            "(none)".to_string()
        } else {
            exclude.join(", ")
        };
        PromptInputs::default()
            .with("topic", topic)
            .with("description", description.unwrap_or("(none)"))
            .with("heavy_n", heavy_n.to_string())
            .with("lesser_n", lesser_n.to_string())
            .with("exclude", exclude)
    }

    pub fn claim_extract(post: &str) -> Self {
        PromptInputs::default().with("post", post)
    }

    pub fn topic_label(post: &str, candidates: &[String], allow_free_form: bool) -> Self {
        let (list, mode) = if candidates.is_empty() {
            (
                "(none)".to_string(),
                "Write zero or more short topic labels of your own for the post.",
            )
        } else if allow_free_form {
            (
                candidates.join("; "),
                "Choose zero or more of the candidate topics. If none fits, you may write a short topic label of your own.",
            )
        } else {
            (
                candidates.join("; "),
                "Choose zero or more of the candidate topics, copied exactly. Do not invent new topics.",
            )
        };
        PromptInputs::default()
            .with("post", post)
            .with("candidates", list)
            .with("mode", mode)
    }

    pub fn relation_gen(claim: &str, want: Relation) -> Self {
        let verb = match want {
            Relation::Support => "support",
            Relation::Undermine => "undermine",
        };
        PromptInputs::default()
            .with("claim", claim)
            .with("relation_verb", verb)
            .with("label", want.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let prompts = PromptSet::builtin();
        let inputs = PromptInputs::claim_extract("The bridge closes Monday.");
        let a = prompts.render(JobKind::ClaimExtract, &inputs).unwrap();
        let b = prompts.render(JobKind::ClaimExtract, &inputs).unwrap();
        assert_eq!(a, b);
        assert!(a.1.contains("The bridge closes Monday."));
        assert!(!a.1.contains("{{"));
    }

    #[test]
    fn relation_prompt_names_claim_and_label() {
        let prompts = PromptSet::builtin();
        let inputs = PromptInputs::relation_gen("X causes Y", Relation::Undermine);
        let (_, user) = prompts.render(JobKind::RelationGen, &inputs).unwrap();
        assert!(user.contains("X causes Y"));
        assert!(user.contains("undermine"));
        assert!(user.contains("\"Support\", \"Undermine\""));
    }

    #[test]
    fn missing_field_is_reported() {
        let prompts = PromptSet::builtin();
        let err = prompts
            .render(JobKind::RelationGen, &PromptInputs::default().with("claim", "x"))
            .unwrap_err();
        let fields: Vec<_> = err.violations().iter().map(|v| v.path.as_str()).collect();
        assert_eq!(fields, vec!["relation_verb", "label"]);
    }

    #[test]
    fn version_bump_changes_digest() {
        let a = PromptSet::builtin();
        let mut b = a.clone();
        b.version = "prompts-v2".into();
        assert_ne!(a.digest(), b.digest());
        let mut c = a.clone();
        c.templates.get_mut(&JobKind::TopicLabel).unwrap().user.push(' ');
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn topic_modes_differ() {
        let cands = vec!["green card backlog".to_string()];
        let strict = PromptInputs::topic_label("p", &cands, false);
        let loose = PromptInputs::topic_label("p", &cands, true);
        let free = PromptInputs::topic_label("p", &[], true);
        assert_ne!(strict.get("mode"), loose.get("mode"));
        assert_eq!(free.get("candidates"), Some("(none)"));
    }
}
