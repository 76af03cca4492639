//! The compression operator.
//!
//! Critical outputs (anything carrying an explicit failure signal) pass through
//! byte-for-byte. Everything else is baseline-filtered, matched against the
//! active rules by command, and conservatively line-filtered by exactly one
//! rule: head and tail lines are always kept, keep patterns beat strip
//! patterns, and lines matching neither are kept.

use std::cmp::Ordering;
use std::sync::{Arc, LazyLock};

use regex::{Regex, RegexBuilder, RegexSet, RegexSetBuilder};
use serde::{Deserialize, Serialize};

use crate::rule::{validate_rule, CompressionRule, RuleError, REGEX_SIZE_LIMIT};

/// Normal output with no matching rule is flagged uncovered above either bound.
pub const UNCOVERED_MIN_CHARS: usize = 1_500;
pub const UNCOVERED_MIN_LINES: usize = 40;

static CRITICAL_SIGNALS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?m)Traceback \(most recent call last\)|SyntaxError| error:|^error:|fatal:|FATAL|Segmentation fault|panicked at|undefined reference|AssertionError|^E: |npm ERR!",
    )
    .unwrap()
});

// CSI, OSC (BEL or ST terminated), two-byte escapes, then any stray ESC.
static ANSI_ESCAPES: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"\x1b\[[0-?]*[ -/]*[@-~]|\x1b\][^\x07\x1b]*(?:\x07|\x1b\\)|\x1b[PX^_][^\x1b]*\x1b\\|\x1b[ -/]*[0-~]|\x1b",
    )
    .unwrap()
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputClass {
    Critical,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    Covered,
    Uncovered,
    Bypassed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionResult {
    pub compressed_text: String,
    pub lines_removed: usize,
    pub chars_before: usize,
    pub chars_after: usize,
    pub ratio: f64,
    pub applied_rule_id: Option<String>,
}

impl CompressionResult {
    /// A result that leaves `text` as is.
    pub fn unchanged(text: String) -> Self {
        let chars = text.chars().count();
        Self {
            compressed_text: text,
            lines_removed: 0,
            chars_before: chars,
            chars_after: chars,
            ratio: 1.0,
            applied_rule_id: None,
        }
    }

    pub fn chars_saved(&self) -> usize {
        self.chars_before.saturating_sub(self.chars_after)
    }
}

fn ratio(after: usize, before: usize) -> f64 {
    if before == 0 {
        1.0
    } else {
        after as f64 / before as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub step_index: u64,
    pub command: String,
    pub raw_output: String,
    pub output_class: OutputClass,
    pub result: CompressionResult,
    pub coverage: Coverage,
}

impl ObservationRecord {
    /// True when a rule actually removed lines from this step's output.
    pub fn was_compressed(&self) -> bool {
        self.coverage == Coverage::Covered && self.result.lines_removed > 0
    }
}

/// A rule with its patterns compiled.
#[derive(Debug, Clone)]
pub struct CompiledRule {
    rule: Arc<CompressionRule>,
    trigger: Regex,
    keep: RegexSet,
    strip: RegexSet,
}

impl CompiledRule {
    /// Validates and compiles `rule`.
    pub fn new(rule: CompressionRule) -> Result<Self, RuleError> {
        let report = validate_rule(&rule);
        if !report.is_valid() {
            return Err(RuleError::Invalid(report));
        }
        // Validation already compiled every pattern once.
        let trigger = RegexBuilder::new(&rule.trigger_regex)
            .size_limit(REGEX_SIZE_LIMIT)
            .build()
            .expect("validated trigger compiles");
        let set = |patterns: &[String]| {
            RegexSetBuilder::new(patterns)
                .size_limit(REGEX_SIZE_LIMIT * 4)
                .build()
                .expect("validated patterns compile")
        };
        let keep = set(&rule.keep_patterns);
        let strip = set(&rule.strip_patterns);
        Ok(Self {
            rule: Arc::new(rule),
            trigger,
            keep,
            strip,
        })
    }

    pub fn rule(&self) -> &CompressionRule {
        &self.rule
    }

    pub fn id(&self) -> &str {
        &self.rule.rule_id
    }

    pub fn triggers_on(&self, command: &str) -> bool {
        self.trigger.is_match(command)
    }

    pub fn is_keep_line(&self, line: &str) -> bool {
        self.keep.is_match(line)
    }

    pub fn is_strip_line(&self, line: &str) -> bool {
        self.strip.is_match(line)
    }
}

/// Critical iff some line carries a failure signal. Runs on the raw text;
/// escape sequences are ignored for matching only.
pub fn classify_output(_command: &str, raw: &str) -> OutputClass {
    let visible = ANSI_ESCAPES.replace_all(raw, "");
    if CRITICAL_SIGNALS.is_match(&visible) {
        OutputClass::Critical
    } else {
        OutputClass::Normal
    }
}

/// Strips ANSI escapes, collapses carriage-return overwrites to their final
/// state, and drops leading Ubuntu login banners. Idempotent.
pub fn baseline_filter(raw: &str) -> String {
    let stripped = ANSI_ESCAPES.replace_all(raw, "");
    let collapsed = if stripped.contains('\r') {
        collapse_carriage_returns(&stripped)
    } else {
        stripped.into_owned()
    };
    strip_login_banners(collapsed)
}

fn collapse_carriage_returns(text: &str) -> String {
    text.split('\n')
        .map(|line| {
            let line = line.trim_end_matches('\r');
            match line.rfind('\r') {
                Some(pos) => &line[pos + 1..],
                None => line,
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

const BANNER_START: &str = "Welcome to Ubuntu";

fn strip_login_banners(mut text: String) -> String {
    while let Some(end) = login_banner_end(&text) {
        text.drain(..end);
    }
    text
}

/// Byte offset just past a leading banner block, if the text starts with one.
///
/// The block ends after a `Last login:` line when one appears among the first
/// 40 lines; otherwise at the first blank line following the last ` * ` bullet
/// of the banner. Blank lines trailing the block go with it.
fn login_banner_end(text: &str) -> Option<usize> {
    let first = text.lines().find(|l| !l.trim().is_empty())?;
    if !first.trim_start().starts_with(BANNER_START) {
        return None;
    }
    let mut offsets = Vec::new();
    let mut pos = 0;
    for line in text.split_inclusive('\n').take(40) {
        pos += line.len();
        offsets.push((line.trim_end_matches(['\n', '\r']), pos));
    }
    let end_line = offsets
        .iter()
        .position(|(l, _)| l.starts_with("Last login:"))
        .or_else(|| {
            let welcome = offsets.iter().position(|(l, _)| l.contains(BANNER_START))?;
            let last_bullet = offsets
                .iter()
                .rposition(|(l, _)| l.starts_with(" * "))
                .filter(|&i| i > welcome)
                .unwrap_or(welcome);
            offsets
                .iter()
                .skip(last_bullet + 1)
                .position(|(l, _)| l.trim().is_empty())
                .map(|i| i + last_bullet + 1)
        })?;
    let mut end = offsets[end_line].1;
    for (line, off) in &offsets[end_line + 1..] {
        if !line.trim().is_empty() {
            break;
        }
        end = *off;
    }
    Some(end)
}

/// Orders rules by priority, then ranking score (higher first), then id.
pub fn rule_precedence(a: &CompressionRule, b: &CompressionRule) -> Ordering {
    a.priority
        .cmp(&b.priority)
        .then_with(|| b.ranking_score().total_cmp(&a.ranking_score()))
        .then_with(|| a.rule_id.cmp(&b.rule_id))
}

/// The single rule to apply to `command`'s output, if any trigger matches.
pub fn select_rule<'a>(command: &str, active_rules: &'a [CompiledRule]) -> Option<&'a CompiledRule> {
    active_rules
        .iter()
        .filter(|r| r.triggers_on(command))
        .min_by(|a, b| rule_precedence(a.rule(), b.rule()))
}

/// Applies one rule to baseline-filtered, Normal-class output.
pub fn apply_rule(rule: &CompiledRule, text: &str) -> CompressionResult {
    let spec = rule.rule();
    let chars_before = text.chars().count();
    let (body_text, trailing_newline) = match text.strip_suffix('\n') {
        Some(rest) => (rest, true),
        None => (text, false),
    };
    let lines: Vec<&str> = if body_text.is_empty() {
        Vec::new()
    } else {
        body_text.split('\n').collect()
    };
    let n = lines.len();
    if spec.keep_first_n + spec.keep_last_n >= n {
        let mut result = CompressionResult::unchanged(text.to_owned());
        result.applied_rule_id = Some(spec.rule_id.clone());
        return result;
    }

    let head = &lines[..spec.keep_first_n];
    let tail = &lines[n - spec.keep_last_n..];
    let body = &lines[spec.keep_first_n..n - spec.keep_last_n];

    let mut retained: Vec<(&str, bool)> = body
        .iter()
        .filter_map(|&line| {
            let keep = rule.is_keep_line(line);
            (keep || !rule.is_strip_line(line)).then_some((line, keep))
        })
        .collect();
    if let Some(cap) = spec.max_lines {
        if retained.len() > cap {
            // The cap never evicts a keep-matching line.
            let keep_count = retained.iter().filter(|(_, keep)| *keep).count();
            let mut other_budget = cap.saturating_sub(keep_count);
            retained.retain(|&(_, keep)| {
                if keep {
                    true
                } else if other_budget > 0 {
                    other_budget -= 1;
                    true
                } else {
                    false
                }
            });
        }
    }
    let lines_removed = body.len() - retained.len();

    let mut out: Vec<String> = Vec::with_capacity(n + 2);
    out.extend(head.iter().map(|l| (*l).to_owned()));
    if lines_removed > 0 {
        out.push(spec.summary_header.clone());
        out.push(format!("  [{lines_removed} lines removed]"));
    }
    out.extend(retained.iter().map(|(l, _)| (*l).to_owned()));
    out.extend(tail.iter().map(|l| (*l).to_owned()));
    let mut compressed_text = out.join("\n");
    if trailing_newline {
        compressed_text.push('\n');
    }
    let chars_after = compressed_text.chars().count();
    CompressionResult {
        compressed_text,
        lines_removed,
        chars_before,
        chars_after,
        ratio: ratio(chars_after, chars_before),
        applied_rule_id: Some(spec.rule_id.clone()),
    }
}

fn exceeds_uncovered_threshold(raw: &str) -> bool {
    raw.chars().count() > UNCOVERED_MIN_CHARS || raw.lines().count() > UNCOVERED_MIN_LINES
}

/// The full operator for one step.
///
/// `chars_before` is measured on the text the rule sees (the baseline-filtered
/// output, or the raw output when bypassed), so per-step savings are
/// attributable to rules alone.
pub fn compress(
    step_index: u64,
    command: &str,
    raw: &str,
    active_rules: &[CompiledRule],
) -> ObservationRecord {
    let output_class = classify_output(command, raw);
    let (result, coverage) = match output_class {
        OutputClass::Critical => (CompressionResult::unchanged(raw.to_owned()), Coverage::Bypassed),
        OutputClass::Normal => {
            let filtered = baseline_filter(raw);
            match select_rule(command, active_rules) {
                Some(rule) => (apply_rule(rule, &filtered), Coverage::Covered),
                None if exceeds_uncovered_threshold(raw) => {
                    (CompressionResult::unchanged(filtered), Coverage::Uncovered)
                }
                None => (CompressionResult::unchanged(filtered), Coverage::Covered),
            }
        }
    };
    ObservationRecord {
        step_index,
        command: command.to_owned(),
        raw_output: raw.to_owned(),
        output_class,
        result,
        coverage,
    }
}

/// Compiles the bundled seed rules.
pub fn compiled_seed_rules() -> Vec<CompiledRule> {
    crate::rule::seed_rules()
        .into_iter()
        .map(|r| CompiledRule::new(r).expect("seed rules compile"))
        .collect()
}
