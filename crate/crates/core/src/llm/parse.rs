//! Structured-output parsing: strict JSON, one repair pass, then schema checks.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::JobKind;
use crate::model::Relation;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Keywords { heavy: Vec<String>, lesser: Vec<String> },
    Claims(Vec<String>),
    Topics(Vec<String>),
    Relation { target: String, relation: Relation },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStage {
    /// Not JSON, and nothing that looks like an object to repair.
    Json,
    /// The repaired candidate still failed to parse.
    Repair,
    /// Valid JSON with the wrong shape for the job.
    Schema,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub struct ParseError {
    pub stage: ParseStage,
    pub message: String,
    pub raw: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} parse failure: {}", self.stage, self.message)
    }
}

/// Strips surrounding code fences and trims to the outermost `{ ... }`.
fn repair(raw: &str) -> Option<&str> {
    let mut s = raw.trim();
    if let Some(rest) = s.strip_prefix("```") {
        // drop an info string such as "json"
        s = rest.split_once('\n').map_or("", |(_, body)| body);
        s = s.trim_end();
        s = s.strip_suffix("```").unwrap_or(s);
    }
    let start = s.find('{')?;
    let end = s.rfind('}')?;
    (start < end).then(|| &s[start..=end])
}

pub fn parse_structured(raw: &str, kind: JobKind) -> Result<Payload, ParseError> {
    let fail = |stage, message: String| ParseError {
        stage,
        message,
        raw: raw.to_string(),
    };
    let value = match serde_json::from_str::<Value>(raw) {
        Ok(v) => v,
        Err(strict) => {
            let Some(candidate) = repair(raw) else {
                return Err(fail(ParseStage::Json, strict.to_string()));
            };
            serde_json::from_str::<Value>(candidate)
                .map_err(|e| fail(ParseStage::Repair, e.to_string()))?
        }
    };
    validate_schema(&value, kind).map_err(|m| fail(ParseStage::Schema, m))
}

fn string_list(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Vec<String>, String> {
    match obj.get(key) {
        Some(Value::Array(items)) => items
            .iter()
            .map(|item| {
                item.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| format!("{key}: expected a list of strings"))
            })
            .collect(),
        Some(_) => Err(format!("{key}: expected a list")),
        None => Err(format!("missing key {key:?}")),
    }
}

fn validate_schema(value: &Value, kind: JobKind) -> Result<Payload, String> {
    let obj = value
        .as_object()
        .ok_or_else(|| "expected a json object".to_string())?;
    match kind {
        JobKind::Keywords => Ok(Payload::Keywords {
            heavy: string_list(obj, "heavy")?,
            lesser: string_list(obj, "lesser")?,
        }),
        JobKind::ClaimExtract => Ok(Payload::Claims(string_list(obj, "claims")?)),
        JobKind::TopicLabel => Ok(Payload::Topics(string_list(obj, "topics")?)),
        JobKind::RelationGen => {
            let label = match obj.get("relation") {
                Some(Value::String(s)) => s,
                Some(other) => return Err(format!("unknown label {other}")),
                None => return Err("missing key \"relation\"".to_string()),
            };
            let relation =
                Relation::parse_label(label).ok_or_else(|| format!("unknown label {label:?}"))?;
            let target = match obj.get("target") {
                Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
                Some(Value::String(_)) => return Err("target: empty".to_string()),
                Some(_) => return Err("target: expected a string".to_string()),
                None => return Err("missing key \"target\"".to_string()),
            };
            Ok(Payload::Relation { target, relation })
        }
    }
}
