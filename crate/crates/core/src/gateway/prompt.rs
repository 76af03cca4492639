//! The four rule-generation prompts and their placeholder bindings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GatewayError;
use crate::rule::{serialize_rule, serialize_rule_list, CompressionRule};

pub const TERMINAL_STATE_CHARS: usize = 500;
pub const OUTPUT_HEAD_CHARS: usize = 2_000;
pub const OUTPUT_TAIL_CHARS: usize = 500;
pub const SNIPPET_CHARS: usize = 2_000;
pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_TOKENS: u32 = 2_048;

/// Extra binding carrying the parse error of a previous attempt.
pub const REPAIR_BINDING: &str = "repair_error";

const PROPOSAL_WITH_CACHE: &str = include_str!("../../templates/proposal_with_cache.txt");
const PROPOSAL_NO_CACHE: &str = include_str!("../../templates/proposal_no_cache.txt");
const SPAWN_NEW: &str = include_str!("../../templates/spawn_new.txt");
const SPAWN_REPLACEMENT: &str = include_str!("../../templates/spawn_replacement.txt");

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ProposalWithCache,
    ProposalNoCache,
    SpawnNew,
    SpawnReplacement,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::ProposalWithCache,
        TemplateId::ProposalNoCache,
        TemplateId::SpawnNew,
        TemplateId::SpawnReplacement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ProposalWithCache => "proposal_with_cache",
            TemplateId::ProposalNoCache => "proposal_no_cache",
            TemplateId::SpawnNew => "spawn_new",
            TemplateId::SpawnReplacement => "spawn_replacement",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            TemplateId::ProposalWithCache => PROPOSAL_WITH_CACHE,
            TemplateId::ProposalNoCache => PROPOSAL_NO_CACHE,
            TemplateId::SpawnNew => SPAWN_NEW,
            TemplateId::SpawnReplacement => SPAWN_REPLACEMENT,
        }
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::ProposalWithCache => &[
                "cached_rules_json",
                "instruction",
                "task_category",
                "terminal_state",
            ],
            TemplateId::ProposalNoCache => &["instruction", "task_category", "terminal_state"],
            TemplateId::SpawnNew => &[
                "output_length",
                "command",
                "raw_output_head",
                "raw_output_tail",
                "task_instruction",
            ],
            TemplateId::SpawnReplacement => {
                &["old_rule_json", "command", "raw_output_snippet", "agent_feedback"]
            }
        }
    }

    /// Whether the response is a proposal document rather than one rule.
    pub fn expects_proposal(self) -> bool {
        matches!(self, TemplateId::ProposalWithCache | TemplateId::ProposalNoCache)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown template `{s}`"))
    }
}

fn head_chars(text: &str, n: usize) -> &str {
    match text.char_indices().nth(n) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

fn tail_chars(text: &str, n: usize) -> &str {
    let count = text.chars().count();
    if count <= n {
        return text;
    }
    let (i, _) = text.char_indices().nth(count - n).expect("in range");
    &text[i..]
}

fn limit_for(name: &str) -> Option<(usize, bool)> {
    match name {
        "terminal_state" => Some((TERMINAL_STATE_CHARS, false)),
        "raw_output_head" => Some((OUTPUT_HEAD_CHARS, false)),
        "raw_output_tail" => Some((OUTPUT_TAIL_CHARS, true)),
        "raw_output_snippet" => Some((SNIPPET_CHARS, false)),
        _ => None,
    }
}

fn clip(name: &str, value: &str) -> String {
    match limit_for(name) {
        Some((n, false)) => head_chars(value, n).to_owned(),
        Some((n, true)) => tail_chars(value, n).to_owned(),
        None => value.to_owned(),
    }
}

/// One prompt to send: a template plus the values for its placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub template_id: TemplateId,
    pub bindings: BTreeMap<String, String>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl PromptRequest {
    /// A request with default decoding settings. Bound values are clipped to
    /// the template's size limits.
    pub fn new<K: Into<String>, V: AsRef<str>>(
        template_id: TemplateId,
        bindings: impl IntoIterator<Item = (K, V)>,
    ) -> Self {
        let bindings = bindings
            .into_iter()
            .map(|(k, v)| {
                let k = k.into();
                let v = clip(&k, v.as_ref());
                (k, v)
            })
            .collect();
        Self {
            template_id,
            bindings,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    /// The task-start proposal prompt; cold-start when `cached` is empty.
    pub fn proposal(
        instruction: &str,
        category: &str,
        terminal_state: &str,
        cached: &[CompressionRule],
    ) -> Self {
        if cached.is_empty() {
            Self::new(
                TemplateId::ProposalNoCache,
                [
                    ("instruction", instruction),
                    ("task_category", category),
                    ("terminal_state", terminal_state),
                ],
            )
        } else {
            Self::new(
                TemplateId::ProposalWithCache,
                [
                    ("cached_rules_json", serialize_rule_list(cached).as_str()),
                    ("instruction", instruction),
                    ("task_category", category),
                    ("terminal_state", terminal_state),
                ],
            )
        }
    }

    /// The prompt for an uncovered output.
    pub fn spawn_new(command: &str, output: &str, task_instruction: &str) -> Self {
        let length = output.chars().count().to_string();
        Self::new(
            TemplateId::SpawnNew,
            [
                ("output_length", length.as_str()),
                ("command", command),
                ("raw_output_head", head_chars(output, OUTPUT_HEAD_CHARS)),
                ("raw_output_tail", tail_chars(output, OUTPUT_TAIL_CHARS)),
                ("task_instruction", task_instruction),
            ],
        )
    }

    /// The prompt for a more conservative version of a complained rule.
    pub fn spawn_replacement(
        old_rule: &CompressionRule,
        command: &str,
        raw_output: &str,
        agent_feedback: &str,
    ) -> Self {
        Self::new(
            TemplateId::SpawnReplacement,
            [
                ("old_rule_json", serialize_rule(old_rule).as_str()),
                ("command", command),
                ("raw_output_snippet", raw_output),
                ("agent_feedback", agent_feedback),
            ],
        )
    }

    pub fn with_decoding(mut self, temperature: f64, max_tokens: u32) -> Self {
        self.temperature = temperature;
        self.max_tokens = max_tokens;
        self
    }

    /// The same request, asking again after an unusable answer.
    pub fn repair(&self, error: &str) -> Self {
        let mut out = self.clone();
        out.bindings.insert(REPAIR_BINDING.to_owned(), error.to_owned());
        out
    }

    /// Hex SHA-256 of the bindings as a JSON object with sorted keys.
    pub fn bindings_hash(&self) -> String {
        let canonical = serde_json::to_string(&self.bindings).expect("string map serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()).as_slice())
    }
}

/// Fills a template's placeholders in one pass.
///
/// Only the template's own placeholder names are replaced; other braces in
/// the template (JSON examples) and in bound values are left alone.
pub fn render_prompt(request: &PromptRequest) -> Result<String, GatewayError> {
    let id = request.template_id;
    let names = id.placeholders();
    if let Some(missing) = names.iter().find(|n| !request.bindings.contains_key(**n)) {
        return Err(GatewayError::MissingBinding {
            template_id: id,
            placeholder: (*missing).to_owned(),
        });
    }
    if id == TemplateId::ProposalWithCache {
        let cached = request.bindings["cached_rules_json"].trim();
        let empty = cached.is_empty()
            || serde_json::from_str::<Vec<serde_json::Value>>(cached).is_ok_and(|v| v.is_empty());
        if empty {
            return Err(GatewayError::EmptyCache);
        }
    }
    let mut text = PLACEHOLDER
        .replace_all(id.template(), |caps: &Captures| {
            let name = &caps[1];
            if names.contains(&name) {
                clip(name, &request.bindings[name])
            } else {
                caps[0].to_owned()
            }
        })
        .into_owned();
    if let Some(error) = request.bindings.get(REPAIR_BINDING) {
        if !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str("\nYour previous response could not be used: ");
        text.push_str(error);
        text.push_str("\nOutput ONLY the JSON object, no other text.\n");
    }
    Ok(text)
}
