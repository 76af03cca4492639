//! The structured compression-rule schema.
//!
//! A rule is data, not code: a trigger matched against the executed command,
//! line-level keep/strip patterns, retention bounds for the head and tail of
//! the output, and the bookkeeping (confidence, usage counters) that drives
//! ranking in the global pool. The executor turns a rule into filtering
//! behavior; this module only defines, validates and (de)serializes it.
//!
//! Documents use the field names and order of the bundled seed file:
//!
//! ```text
//! rule_id, trigger_regex, description, keep_patterns, strip_patterns,
//! keep_first_n, keep_last_n, max_lines, summary_header, priority,
//! confidence, times_applied, times_complained
//! ```
//!
//! followed by an optional `category` and any unknown fields, which are kept
//! verbatim so that documents written by newer tools survive a round-trip.

use std::collections::BTreeMap;
use std::fmt;

use regex_syntax::ast::{self, Ast, Visitor};
use serde_json::{Map, Number, Value};
use thiserror::Error;

/// The six rules a fresh pool starts with.
pub const SEED_RULES_JSON: &str = include_str!("../seeds/seed_rules.json");

pub const DEFAULT_KEEP_FIRST_N: usize = 5;
pub const DEFAULT_KEEP_LAST_N: usize = 10;
pub const DEFAULT_PRIORITY: i64 = 42;
pub const DEFAULT_CONFIDENCE: f64 = 1.0;

/// Compiled-program size cap for rule patterns. LLM-authored patterns are
/// untrusted input.
pub(crate) const REGEX_SIZE_LIMIT: usize = 1 << 20;

const CANONICAL_FIELDS: [&str; 14] = [
    "rule_id",
    "trigger_regex",
    "description",
    "keep_patterns",
    "strip_patterns",
    "keep_first_n",
    "keep_last_n",
    "max_lines",
    "summary_header",
    "priority",
    "confidence",
    "times_applied",
    "times_complained",
    "category",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionRule {
    pub rule_id: String,
    /// Matched against the command line, never against the output.
    pub trigger_regex: String,
    pub description: String,
    /// Lines matching any of these are always preserved.
    pub keep_patterns: Vec<String>,
    /// Lines matching any of these (and no keep pattern) may be removed.
    pub strip_patterns: Vec<String>,
    pub keep_first_n: usize,
    pub keep_last_n: usize,
    /// Cap on retained body lines; `None` is uncapped.
    pub max_lines: Option<usize>,
    pub summary_header: String,
    /// Lower value wins.
    pub priority: i64,
    /// Global confidence while the rule sits in a pool.
    pub confidence: f64,
    pub times_applied: u64,
    pub times_complained: u64,
    pub category: Option<String>,
    /// Unknown document fields, carried through serialization untouched.
    pub extra: BTreeMap<String, Value>,
}

impl CompressionRule {
    /// A rule with the documented defaults and no patterns.
    pub fn new(rule_id: impl Into<String>, trigger_regex: impl Into<String>) -> Self {
        Self {
            rule_id: rule_id.into(),
            trigger_regex: trigger_regex.into(),
            description: String::new(),
            keep_patterns: Vec::new(),
            strip_patterns: Vec::new(),
            keep_first_n: DEFAULT_KEEP_FIRST_N,
            keep_last_n: DEFAULT_KEEP_LAST_N,
            max_lines: None,
            summary_header: String::new(),
            priority: DEFAULT_PRIORITY,
            confidence: DEFAULT_CONFIDENCE,
            times_applied: 0,
            times_complained: 0,
            category: None,
            extra: BTreeMap::new(),
        }
    }

    /// Ranking score `confidence * (times_applied + 1)`.
    pub fn ranking_score(&self) -> f64 {
        self.confidence * (self.times_applied as f64 + 1.0)
    }

    pub fn is_seed(&self) -> bool {
        seed_rule_ids().any(|id| id == self.rule_id)
    }

    pub fn validate(&self) -> RuleValidationReport {
        validate_rule(self)
    }

    /// Builds a rule from an already-parsed JSON value without validating it.
    pub fn from_value(value: &Value) -> Result<Self, RuleError> {
        let obj = value.as_object().ok_or(RuleError::NotAnObject)?;
        let mut rule =
            CompressionRule::new(required_str(obj, "rule_id")?, required_str(obj, "trigger_regex")?);
        if let Some(v) = present(obj, "description") {
            rule.description = as_string(v, "description")?;
        }
        if let Some(v) = present(obj, "keep_patterns") {
            rule.keep_patterns = as_string_list(v, "keep_patterns")?;
        }
        if let Some(v) = present(obj, "strip_patterns") {
            rule.strip_patterns = as_string_list(v, "strip_patterns")?;
        }
        if let Some(v) = present(obj, "keep_first_n") {
            rule.keep_first_n = as_count(v, "keep_first_n")? as usize;
        }
        if let Some(v) = present(obj, "keep_last_n") {
            rule.keep_last_n = as_count(v, "keep_last_n")? as usize;
        }
        if let Some(v) = present(obj, "max_lines") {
            rule.max_lines = Some(as_count(v, "max_lines")? as usize);
        }
        if let Some(v) = present(obj, "summary_header") {
            rule.summary_header = as_string(v, "summary_header")?;
        }
        if let Some(v) = present(obj, "priority") {
            rule.priority = v.as_i64().ok_or_else(|| malformed("priority", "an integer"))?;
        }
        if let Some(v) = present(obj, "confidence") {
            rule.confidence = v.as_f64().ok_or_else(|| malformed("confidence", "a number"))?;
        }
        if let Some(v) = present(obj, "times_applied") {
            rule.times_applied = as_count(v, "times_applied")?;
        }
        if let Some(v) = present(obj, "times_complained") {
            rule.times_complained = as_count(v, "times_complained")?;
        }
        if let Some(v) = present(obj, "category") {
            rule.category = Some(as_string(v, "category")?);
        }
        for (key, v) in obj {
            if !CANONICAL_FIELDS.contains(&key.as_str()) {
                rule.extra.insert(key.clone(), v.clone());
            }
        }
        Ok(rule)
    }

    /// The canonical document for this rule.
    pub fn to_value(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("rule_id".into(), Value::from(self.rule_id.clone()));
        obj.insert("trigger_regex".into(), Value::from(self.trigger_regex.clone()));
        obj.insert("description".into(), Value::from(self.description.clone()));
        obj.insert("keep_patterns".into(), Value::from(self.keep_patterns.clone()));
        obj.insert("strip_patterns".into(), Value::from(self.strip_patterns.clone()));
        obj.insert("keep_first_n".into(), Value::from(self.keep_first_n as u64));
        obj.insert("keep_last_n".into(), Value::from(self.keep_last_n as u64));
        obj.insert(
            "max_lines".into(),
            self.max_lines.map_or(Value::Null, |n| Value::from(n as u64)),
        );
        obj.insert("summary_header".into(), Value::from(self.summary_header.clone()));
        obj.insert("priority".into(), Value::from(self.priority));
        obj.insert(
            "confidence".into(),
            Number::from_f64(self.confidence).map_or(Value::Null, Value::Number),
        );
        obj.insert("times_applied".into(), Value::from(self.times_applied));
        obj.insert("times_complained".into(), Value::from(self.times_complained));
        if let Some(category) = &self.category {
            obj.insert("category".into(), Value::from(category.clone()));
        }
        for (key, v) in &self.extra {
            obj.insert(key.clone(), v.clone());
        }
        Value::Object(obj)
    }
}

impl serde::Serialize for CompressionRule {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(serializer)
    }
}

impl<'de> serde::Deserialize<'de> for CompressionRule {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        CompressionRule::from_value(&value).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rule document is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("rule document must be a JSON object")]
    NotAnObject,
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("field `{field}` must be {expected}")]
    Malformed {
        field: &'static str,
        expected: &'static str,
    },
    #[error("rule `{}` failed validation: {}", .0.rule_id, .0)]
    Invalid(RuleValidationReport),
}

fn malformed(field: &'static str, expected: &'static str) -> RuleError {
    RuleError::Malformed { field, expected }
}

fn present<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key).filter(|v| !v.is_null())
}

fn required_str(obj: &Map<String, Value>, field: &'static str) -> Result<String, RuleError> {
    match present(obj, field) {
        Some(v) => as_string(v, field),
        None => Err(RuleError::MissingField(field)),
    }
}

fn as_string(v: &Value, field: &'static str) -> Result<String, RuleError> {
    v.as_str()
        .map(str::to_owned)
        .ok_or_else(|| malformed(field, "a string"))
}

fn as_string_list(v: &Value, field: &'static str) -> Result<Vec<String>, RuleError> {
    let items = v
        .as_array()
        .ok_or_else(|| malformed(field, "an array of strings"))?;
    items
        .iter()
        .map(|item| {
            item.as_str()
                .map(str::to_owned)
                .ok_or_else(|| malformed(field, "an array of strings"))
        })
        .collect()
}

fn as_count(v: &Value, field: &'static str) -> Result<u64, RuleError> {
    v.as_u64()
        .ok_or_else(|| malformed(field, "a non-negative integer"))
}

/// Parses and validates a single rule document.
pub fn parse_rule(text: &str) -> Result<CompressionRule, RuleError> {
    let value: Value = serde_json::from_str(text)?;
    parse_rule_value(&value)
}

/// Like [`parse_rule`] for a document that is already a JSON value.
pub fn parse_rule_value(value: &Value) -> Result<CompressionRule, RuleError> {
    let rule = CompressionRule::from_value(value)?;
    let report = validate_rule(&rule);
    if report.is_valid() {
        Ok(rule)
    } else {
        Err(RuleError::Invalid(report))
    }
}

/// Canonical, byte-stable pretty-printed document.
pub fn serialize_rule(rule: &CompressionRule) -> String {
    serde_json::to_string_pretty(&rule.to_value()).expect("rule values always serialize")
}

/// Parses an array of rule documents (the seed-file layout).
pub fn parse_rule_list(text: &str) -> Result<Vec<CompressionRule>, RuleError> {
    let value: Value = serde_json::from_str(text)?;
    let items = value.as_array().ok_or(RuleError::NotAnObject)?;
    items.iter().map(parse_rule_value).collect()
}

pub fn serialize_rule_list(rules: &[CompressionRule]) -> String {
    let values: Vec<Value> = rules.iter().map(CompressionRule::to_value).collect();
    serde_json::to_string_pretty(&values).expect("rule values always serialize")
}

/// The bundled seed rules, in file order.
pub fn seed_rules() -> Vec<CompressionRule> {
    parse_rule_list(SEED_RULES_JSON).expect("bundled seed rules are valid")
}

pub fn seed_rule_ids() -> impl Iterator<Item = &'static str> {
    [
        "seed_git_noise",
        "seed_heredoc",
        "seed_pip_install",
        "seed_apt_install",
        "seed_compiler_output",
        "seed_openssl",
    ]
    .into_iter()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    BadRegex,
    UnsupportedConstruct,
    OutOfRange,
    MissingField,
    /// Non-fatal: the header is what tells the agent lines were removed.
    EmptySummaryHeader,
    /// Non-fatal: without strip patterns or a line cap the rule never removes anything.
    NothingToStrip,
}

impl ProblemKind {
    pub fn is_fatal(self) -> bool {
        matches!(
            self,
            ProblemKind::BadRegex
                | ProblemKind::UnsupportedConstruct
                | ProblemKind::OutOfRange
                | ProblemKind::MissingField
        )
    }

    fn as_str(self) -> &'static str {
        match self {
            ProblemKind::BadRegex => "bad-regex",
            ProblemKind::UnsupportedConstruct => "unsupported-construct",
            ProblemKind::OutOfRange => "out-of-range",
            ProblemKind::MissingField => "missing-field",
            ProblemKind::EmptySummaryHeader => "empty-summary-header",
            ProblemKind::NothingToStrip => "nothing-to-strip",
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationEntry {
    /// Field path, e.g. `strip_patterns[0]`.
    pub field: String,
    pub kind: ProblemKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleValidationReport {
    pub rule_id: String,
    pub entries: Vec<ValidationEntry>,
    pub verdict: Verdict,
}

impl RuleValidationReport {
    pub fn is_valid(&self) -> bool {
        self.verdict == Verdict::Valid
    }

    pub fn fatal_entries(&self) -> impl Iterator<Item = &ValidationEntry> {
        self.entries.iter().filter(|e| e.kind.is_fatal())
    }
}

impl fmt::Display for RuleValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return f.write_str("no problems");
        }
        for (i, entry) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{} ({}): {}", entry.field, entry.kind, entry.message)?;
        }
        Ok(())
    }
}

/// Checks every invariant of `rule`. Never fails; problems are reported.
pub fn validate_rule(rule: &CompressionRule) -> RuleValidationReport {
    let mut entries = Vec::new();
    let mut push = |field: String, kind: ProblemKind, message: String| {
        entries.push(ValidationEntry { field, kind, message });
    };

    if rule.rule_id.trim().is_empty() {
        push(
            "rule_id".into(),
            ProblemKind::MissingField,
            "rule_id is empty".into(),
        );
    }
    if rule.trigger_regex.is_empty() {
        push(
            "trigger_regex".into(),
            ProblemKind::MissingField,
            "trigger_regex is empty and would match every command".into(),
        );
    } else if let Err((kind, message)) = check_pattern(&rule.trigger_regex) {
        push("trigger_regex".into(), kind, message);
    }
    for (name, patterns) in [
        ("keep_patterns", &rule.keep_patterns),
        ("strip_patterns", &rule.strip_patterns),
    ] {
        for (i, pattern) in patterns.iter().enumerate() {
            if let Err((kind, message)) = check_pattern(pattern) {
                push(format!("{name}[{i}]"), kind, message);
            }
        }
    }
    if !(rule.confidence.is_finite() && (0.0..=1.0).contains(&rule.confidence)) {
        push(
            "confidence".into(),
            ProblemKind::OutOfRange,
            format!("confidence {} is outside [0, 1]", rule.confidence),
        );
    }
    if rule.summary_header.is_empty() {
        push(
            "summary_header".into(),
            ProblemKind::EmptySummaryHeader,
            "removed lines will be announced without a header".into(),
        );
    }
    if rule.strip_patterns.is_empty() && rule.max_lines.is_none() {
        push(
            "strip_patterns".into(),
            ProblemKind::NothingToStrip,
            "no strip patterns and no max_lines; the rule never removes a line".into(),
        );
    }

    let verdict = if entries.iter().any(|e| e.kind.is_fatal()) {
        Verdict::Invalid
    } else {
        Verdict::Valid
    };
    RuleValidationReport {
        rule_id: rule.rule_id.clone(),
        entries,
        verdict,
    }
}

/// Checks one pattern against the portable dialect and compiles it.
fn check_pattern(pattern: &str) -> Result<(), (ProblemKind, String)> {
    let parsed = ast::parse::Parser::new().parse(pattern).map_err(|err| {
        let kind = match err.kind() {
            ast::ErrorKind::UnsupportedLookAround | ast::ErrorKind::UnsupportedBackreference => {
                ProblemKind::UnsupportedConstruct
            }
            _ => ProblemKind::BadRegex,
        };
        (kind, format!("`{pattern}`: {}", err.kind()))
    })?;
    if let Err(construct) = ast::visit(&parsed, DialectCheck) {
        return Err((
            ProblemKind::UnsupportedConstruct,
            format!("`{pattern}`: {construct} is outside the portable dialect"),
        ));
    }
    regex::RegexBuilder::new(pattern)
        .size_limit(REGEX_SIZE_LIMIT)
        .build()
        .map(|_| ())
        .map_err(|err| (ProblemKind::BadRegex, format!("`{pattern}`: {err}")))
}

/// Rejects constructs other engines commonly lack.
struct DialectCheck;

impl Visitor for DialectCheck {
    type Output = ();
    type Err = &'static str;

    fn finish(self) -> Result<(), Self::Err> {
        Ok(())
    }

    fn visit_pre(&mut self, node: &Ast) -> Result<(), Self::Err> {
        match node {
            Ast::ClassUnicode(_) => Err("a Unicode property class"),
            Ast::Group(group) if matches!(group.kind, ast::GroupKind::CaptureName { .. }) => {
                Err("a named capture group")
            }
            _ => Ok(()),
        }
    }

    fn visit_class_set_item_pre(&mut self, item: &ast::ClassSetItem) -> Result<(), Self::Err> {
        match item {
            ast::ClassSetItem::Unicode(_) => Err("a Unicode property class"),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PIP_DOC: &str = r#"{
      "rule_id": "seed_pip_install",
      "trigger_regex": "\\bpip3?\\s+install\\b",
      "description": "Compresses pip install output: removes Collecting/Downloading/Requirement-already-satisfied lines while preserving errors and the final 'Successfully installed' summary.",
      "keep_patterns": ["\\bERROR:", "\\berror:", "Successfully installed", "Could not", "Traceback", "WARNING:"],
      "strip_patterns": ["^\\s*Collecting \\S+", "^\\s*Downloading \\S+", "^\\s*Requirement already satisfied", "^\\s*Using cached", "^\\s*Installing collected packages"],
      "keep_first_n": 3,
      "keep_last_n": 5,
      "max_lines": null,
      "summary_header": "[pip install output compressed]",
      "priority": 50,
      "confidence": 0.8,
      "times_applied": 10,
      "times_complained": 0
    }"#;

    #[test]
    fn parses_pip_seed_document() {
        let rule = parse_rule(PIP_DOC).unwrap();
        assert_eq!(rule.trigger_regex, r"\bpip3?\s+install\b");
        assert_eq!(rule.keep_first_n, 3);
        assert_eq!(rule.keep_last_n, 5);
        assert_eq!(rule.priority, 50);
        assert_eq!(rule.confidence, 0.8);
        assert_eq!(rule.times_applied, 10);
        assert_eq!(rule.max_lines, None);
        assert_eq!(rule.category, None);
    }

    #[test]
    fn minimal_document_gets_defaults() {
        let rule = parse_rule(
            r#"{"rule_id":"x","trigger_regex":"a","description":"d","keep_patterns":[],
                "strip_patterns":[],"keep_first_n":0,"keep_last_n":0,"summary_header":"[x]","priority":42}"#,
        )
        .unwrap();
        assert_eq!(rule.confidence, 1.0);
        assert_eq!(rule.times_applied, 0);
        assert_eq!(rule.times_complained, 0);
        assert_eq!(rule.max_lines, None);
        assert_eq!(rule.keep_first_n, 0);
    }

    #[test]
    fn absent_bounds_use_prompt_defaults() {
        let rule = parse_rule(r#"{"rule_id":"x","trigger_regex":"a","strip_patterns":["b"]}"#).unwrap();
        assert_eq!(rule.keep_first_n, 5);
        assert_eq!(rule.keep_last_n, 10);
        assert_eq!(rule.priority, DEFAULT_PRIORITY);
    }

    #[test]
    fn unbalanced_trigger_is_a_validation_error() {
        let err = parse_rule(r#"{"rule_id":"x","trigger_regex":"([","summary_header":"h"}"#).unwrap_err();
        let RuleError::Invalid(report) = err else {
            panic!("expected a validation error, got {err}");
        };
        let entry = report.fatal_entries().next().unwrap();
        assert_eq!(entry.field, "trigger_regex");
        assert_eq!(entry.kind, ProblemKind::BadRegex);
        assert!(entry.message.contains("(["), "{}", entry.message);
        assert!(entry.message.contains("unclosed"), "{}", entry.message);
    }

    #[test]
    fn malformed_field_is_named() {
        let err = parse_rule(r#"{"rule_id":"x","trigger_regex":"a","keep_first_n":-1}"#).unwrap_err();
        assert!(
            matches!(
                err,
                RuleError::Malformed {
                    field: "keep_first_n",
                    ..
                }
            ),
            "{err}"
        );
        let err = parse_rule(r#"{"trigger_regex":"a"}"#).unwrap_err();
        assert!(matches!(err, RuleError::MissingField("rule_id")));
        let err = parse_rule(r#"{"rule_id":"x","trigger_regex":"a","keep_patterns":"nope"}"#).unwrap_err();
        assert!(err.to_string().contains("keep_patterns"));
    }

    #[test]
    fn seeds_are_valid_with_no_entries() {
        let seeds = seed_rules();
        assert_eq!(seeds.len(), 6);
        for rule in &seeds {
            let report = validate_rule(rule);
            assert!(report.is_valid());
            assert!(report.entries.is_empty(), "{}: {report}", rule.rule_id);
            assert!(rule.is_seed());
        }
    }

    #[test]
    fn confidence_out_of_range_is_fatal() {
        let mut rule = seed_rules().remove(0);
        rule.confidence = 1.5;
        let report = validate_rule(&rule);
        assert_eq!(report.verdict, Verdict::Invalid);
        assert_eq!(report.entries.len(), 1);
        assert_eq!(report.entries[0].field, "confidence");
        assert_eq!(report.entries[0].kind, ProblemKind::OutOfRange);
    }

    #[test]
    fn lookbehind_and_backrefs_are_unsupported() {
        let mut rule = CompressionRule::new("x", "a");
        rule.summary_header = "[x]".into();
        rule.strip_patterns = vec![r"(?<=x)y".into(), r"(a)\1".into(), r"\p{Greek}".into()];
        let report = validate_rule(&rule);
        assert_eq!(report.verdict, Verdict::Invalid);
        let fields: Vec<_> = report
            .entries
            .iter()
            .map(|e| (e.field.as_str(), e.kind))
            .collect();
        assert_eq!(
            fields,
            vec![
                ("strip_patterns[0]", ProblemKind::UnsupportedConstruct),
                ("strip_patterns[1]", ProblemKind::UnsupportedConstruct),
                ("strip_patterns[2]", ProblemKind::UnsupportedConstruct),
            ]
        );
    }

    #[test]
    fn openssl_serializes_its_strip_pattern() {
        let openssl = seed_rules()
            .into_iter()
            .find(|r| r.rule_id == "seed_openssl")
            .unwrap();
        let text = serialize_rule(&openssl);
        assert!(
            text.contains(
                r#""strip_patterns": [
    "[.+]{20,}"
  ]"#
            ),
            "{text}"
        );
        let compact = serde_json::to_string(&openssl.to_value()).unwrap();
        assert!(compact.contains(r#""strip_patterns":["[.+]{20,}"]"#));
    }

    #[test]
    fn seeds_round_trip_and_match_bundled_file() {
        for rule in seed_rules() {
            assert_eq!(parse_rule(&serialize_rule(&rule)).unwrap(), rule);
        }
        let normalize = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
        assert_eq!(
            normalize(&serialize_rule_list(&seed_rules())),
            normalize(SEED_RULES_JSON)
        );
    }

    #[test]
    fn serializations_differ_only_in_rule_id() {
        let a = seed_rules().remove(2);
        let mut b = a.clone();
        b.rule_id = "other".into();
        let (sa, sb) = (serialize_rule(&a), serialize_rule(&b));
        let diff: Vec<_> = sa.lines().zip(sb.lines()).filter(|(x, y)| x != y).collect();
        assert_eq!(sa.lines().count(), sb.lines().count());
        assert_eq!(diff.len(), 1);
        assert!(diff[0].0.contains("\"rule_id\""));
    }

    #[test]
    fn unknown_fields_survive_round_trip_after_canonical_fields() {
        let rule = parse_rule(
            r#"{"zeta":{"n":1},"rule_id":"x","trigger_regex":"a","summary_header":"[x]","category":"build","strip_patterns":["b"]}"#,
        )
        .unwrap();
        assert_eq!(rule.extra.len(), 1);
        let text = serialize_rule(&rule);
        assert!(text.find("\"category\"").unwrap() < text.find("\"zeta\"").unwrap());
        assert!(text.find("\"times_complained\"").unwrap() < text.find("\"category\"").unwrap());
        assert_eq!(parse_rule(&text).unwrap(), rule);
    }

    #[test]
    fn ranking_score_matches_formula() {
        let seed = seed_rules().remove(0);
        assert!((seed.ranking_score() - 8.8).abs() < 1e-12);
        let mut fresh = CompressionRule::new("n", "a");
        assert_eq!(fresh.ranking_score(), 1.0);
        fresh.times_applied = 126;
        assert_eq!(fresh.ranking_score(), 127.0);
    }
}
