//! Implicit over-compression complaints.
//!
//! The host agent never says "your rule was too aggressive" directly. It
//! re-runs the command, widens it, or asks for the full output. [`detect`]
//! maps those follow-ups onto the earlier step they point at.

use serde::{Deserialize, Serialize};

use crate::executor::ObservationRecord;

pub const DEFAULT_WINDOW: usize = 3;

pub const DEFAULT_PHRASES: [&str; 6] = [
    "full output",
    "truncated",
    "missing",
    "show the complete",
    "entire log",
    "re-run to see",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FollowupKind {
    NextCommand,
    AgentMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowupEvent {
    pub kind: FollowupKind,
    pub text: String,
    /// Defaults to the most recent step in the history.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refers_to_step: Option<u64>,
}

impl FollowupEvent {
    pub fn next_command(text: impl Into<String>) -> Self {
        Self {
            kind: FollowupKind::NextCommand,
            text: text.into(),
            refers_to_step: None,
        }
    }

    pub fn agent_message(text: impl Into<String>) -> Self {
        Self {
            kind: FollowupKind::AgentMessage,
            text: text.into(),
            refers_to_step: None,
        }
    }

    pub fn referring_to(mut self, step_index: u64) -> Self {
        self.refers_to_step = Some(step_index);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplaintReason {
    RepeatedCommand,
    WidenedCommand,
    Phrase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complaint {
    pub step_index: u64,
    pub reason: ComplaintReason,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplaintConfig {
    /// How many of the most recent steps a follow-up may point back to.
    pub window: usize,
    /// Case-insensitive substrings that mark an agent message as a complaint.
    pub phrases: Vec<String>,
}

impl Default for ComplaintConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            phrases: DEFAULT_PHRASES.iter().map(|p| p.to_string()).collect(),
        }
    }
}

fn normalize(command: &str) -> String {
    command.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn strip_trailing_pager(command: &str) -> &str {
    if let Some((left, right)) = command.rsplit_once('|') {
        let tool = right.split_whitespace().next();
        if matches!(tool, Some("head" | "tail")) {
            return left.trim_end();
        }
    }
    command
}

fn without_flags(command: &str, flags: &[&str]) -> String {
    command
        .split_whitespace()
        .filter(|w| !flags.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// True when `next` is `prior` with its output made wider: a trailing
/// `| head`/`| tail` or a `-q`/`--quiet` flag dropped, or `-v`/`--verbose`
/// added.
pub fn is_widening(prior: &str, next: &str) -> bool {
    let prior = normalize(prior);
    let next = normalize(next);
    if prior == next {
        return false;
    }
    let narrowed = without_flags(strip_trailing_pager(&prior), &["-q", "--quiet"]);
    let widened = without_flags(&next, &["-v", "--verbose"]);
    narrowed == widened
}

/// Decides whether `event` is a complaint about a step in `history`.
///
/// Only steps among the last `config.window` records whose output actually
/// lost lines can be complained about; the most recent such step wins.
pub fn detect(
    history: &[ObservationRecord],
    event: &FollowupEvent,
    config: &ComplaintConfig,
) -> Option<Complaint> {
    let window_start = history.len().saturating_sub(config.window);
    let recent = &history[window_start..];
    match event.kind {
        FollowupKind::NextCommand => {
            let next = normalize(&event.text);
            recent.iter().rev().filter(|r| r.was_compressed()).find_map(|r| {
                let reason = if normalize(&r.command) == next {
                    ComplaintReason::RepeatedCommand
                } else if is_widening(&r.command, &event.text) {
                    ComplaintReason::WidenedCommand
                } else {
                    return None;
                };
                Some(Complaint {
                    step_index: r.step_index,
                    reason,
                })
            })
        }
        FollowupKind::AgentMessage => {
            let text = event.text.to_lowercase();
            if !config.phrases.iter().any(|p| text.contains(&p.to_lowercase())) {
                return None;
            }
            let target = match event.refers_to_step {
                Some(step) => recent.iter().find(|r| r.step_index == step),
                None => recent.last(),
            }?;
            target.was_compressed().then_some(Complaint {
                step_index: target.step_index,
                reason: ComplaintReason::Phrase,
            })
        }
    }
}
