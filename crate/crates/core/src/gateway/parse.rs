//! Pulling rules out of model responses.

use serde::Serialize;
use serde_json::Value;

use super::GatewayError;
use crate::rule::{parse_rule_value, CompressionRule};

/// The task-start answer: rules to reuse, adapted copies and new rules.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RuleProposal {
    pub selected_rule_ids: Vec<String>,
    pub modified_rules: Vec<CompressionRule>,
    pub new_rules: Vec<CompressionRule>,
}

impl RuleProposal {
    pub fn rule_count(&self) -> usize {
        self.selected_rule_ids.len() + self.modified_rules.len() + self.new_rules.len()
    }
}

/// A proposal plus one message per item that had to be dropped.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ParsedProposal {
    pub proposal: RuleProposal,
    pub diagnostics: Vec<String>,
}

fn parse_error(message: impl Into<String>, raw: &str) -> GatewayError {
    GatewayError::Parse {
        message: message.into(),
        raw: raw.to_owned(),
    }
}

/// The first JSON object anywhere in `text`.
///
/// Tolerates code fences and prose around the object.
pub fn extract_json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    text.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(obj))) => Some(obj),
            _ => None,
        }
    })
}

/// Parses a single-rule response (new or replacement rule).
pub fn parse_single_rule(text: &str) -> Result<CompressionRule, GatewayError> {
    let obj = extract_json_object(text).ok_or_else(|| parse_error("no JSON object in response", text))?;
    parse_rule_value(&Value::Object(obj)).map_err(|e| parse_error(e.to_string(), text))
}

fn parse_rule_array(
    obj: &serde_json::Map<String, Value>,
    field: &str,
    diagnostics: &mut Vec<String>,
) -> Vec<CompressionRule> {
    let Some(value) = obj.get(field) else {
        return Vec::new();
    };
    let Some(items) = value.as_array() else {
        diagnostics.push(format!("{field}: expected an array"));
        return Vec::new();
    };
    items
        .iter()
        .enumerate()
        .filter_map(|(i, item)| match parse_rule_value(item) {
            Ok(rule) => Some(rule),
            Err(e) => {
                diagnostics.push(format!("{field}[{i}] dropped: {e}"));
                None
            }
        })
        .collect()
}

/// Parses a task-start proposal. Invalid rules are dropped one by one;
/// only a missing object is an error.
pub fn parse_proposal(text: &str) -> Result<ParsedProposal, GatewayError> {
    let obj = extract_json_object(text).ok_or_else(|| parse_error("no JSON object in response", text))?;
    if !["selected_rule_ids", "modified_rules", "new_rules"]
        .iter()
        .any(|k| obj.contains_key(*k))
    {
        return Err(parse_error(
            "object has none of selected_rule_ids, modified_rules, new_rules",
            text,
        ));
    }
    let mut diagnostics = Vec::new();
    let selected_rule_ids = match obj.get("selected_rule_ids") {
        None => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(|v| match v.as_str() {
                Some(s) => Some(s.to_owned()),
                None => {
                    diagnostics.push(format!("selected_rule_ids: dropped non-string {v}"));
                    None
                }
            })
            .collect(),
        Some(_) => {
            diagnostics.push("selected_rule_ids: expected an array".into());
            Vec::new()
        }
    };
    let modified_rules = parse_rule_array(&obj, "modified_rules", &mut diagnostics);
    let new_rules = parse_rule_array(&obj, "new_rules", &mut diagnostics);
    Ok(ParsedProposal {
        proposal: RuleProposal {
            selected_rule_ids,
            modified_rules,
            new_rules,
        },
        diagnostics,
    })
}
