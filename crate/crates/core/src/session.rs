//! One task's working rule set and its lifecycle.
//!
//! A session starts from the pool's best candidates as refined by the model,
//! compresses every observation with its non-frozen rules, asks for a new rule
//! when a long output has none, and replaces rules the agent complains about.
//! [`TaskSession::finalize`] turns what happened into pool write-back
//! outcomes.

use serde::Serialize;

use crate::complaint::{detect, ComplaintConfig, FollowupEvent, FollowupKind};
use crate::executor::{compress, CompiledRule, Coverage, ObservationRecord};
use crate::gateway::{LlmGateway, PromptRequest};
use crate::pool::{GlobalRulePool, RuleOutcome, DEFAULT_TOP_K};
use crate::rule::CompressionRule;

pub const DEFAULT_MAX_RULES: usize = 12;
pub const CONFIDENCE_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleOrigin {
    Selected,
    Modified,
    NewPlan,
    NewMidtask,
    Replacement,
}

#[derive(Debug, Clone)]
pub struct ActiveRule {
    pub compiled: CompiledRule,
    pub origin: RuleOrigin,
    pub frozen: bool,
    pub task_confidence: f64,
    pub delta_applications: u64,
}

impl ActiveRule {
    pub fn rule(&self) -> &CompressionRule {
        self.compiled.rule()
    }

    pub fn id(&self) -> &str {
        self.compiled.id()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    /// Candidates pulled from the pool at task start.
    pub k: usize,
    /// Upper bound on the session's rule set; further spawns are skipped.
    pub max_rules: usize,
    pub complaint: ComplaintConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_TOP_K,
            max_rules: DEFAULT_MAX_RULES,
            complaint: ComplaintConfig::default(),
        }
    }
}

/// One row of the per-step transcript.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranscriptRow {
    pub step_index: u64,
    pub command: String,
    pub coverage: Coverage,
    pub applied_rule_id: Option<String>,
    pub chars_before: usize,
    pub chars_after: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct TaskSession {
    pub task_id: String,
    pub instruction: String,
    pub category: String,
    config: SessionConfig,
    active: Vec<ActiveRule>,
    history: Vec<ObservationRecord>,
    diagnostics: Vec<String>,
    degraded: bool,
}

impl TaskSession {
    /// Builds the task's rule set.
    ///
    /// With candidates in the pool the model picks, adapts and adds rules;
    /// with none it proposes from scratch. If the model is unreachable the
    /// session falls back to the best candidates as they are.
    pub fn init(
        task_id: &str,
        instruction: &str,
        category: &str,
        terminal_state: &str,
        pool: &GlobalRulePool,
        config: SessionConfig,
        gateway: &LlmGateway,
    ) -> Self {
        assert!(config.k >= 1, "k must be at least 1");
        let mut session = Self {
            task_id: task_id.to_owned(),
            instruction: instruction.to_owned(),
            category: category.to_owned(),
            config,
            active: Vec::new(),
            history: Vec::new(),
            diagnostics: Vec::new(),
            degraded: false,
        };
        let candidates: Vec<CompressionRule> = pool
            .top_k(session.config.k, Some(category))
            .into_iter()
            .cloned()
            .collect();
        let request = PromptRequest::proposal(instruction, category, terminal_state, &candidates);
        match gateway.propose(&request) {
            Ok(parsed) => {
                session.diagnostics.extend(parsed.diagnostics);
                let proposal = parsed.proposal;
                for id in &proposal.selected_rule_ids {
                    match candidates.iter().find(|c| &c.rule_id == id) {
                        Some(rule) => {
                            session.add(rule.clone(), RuleOrigin::Selected, rule.confidence);
                        }
                        None => session.note(format!("selected rule `{id}` is not among the candidates")),
                    }
                }
                for rule in proposal.modified_rules {
                    let rule = session.distinct_modified(rule, &candidates);
                    session.add_new(rule, RuleOrigin::Modified);
                }
                for rule in proposal.new_rules {
                    session.add_new(rule, RuleOrigin::NewPlan);
                }
            }
            Err(e) => {
                session.degraded = true;
                session.note(format!("rule proposal failed ({e}); using pool candidates as is"));
                for rule in candidates.iter().take(session.config.max_rules) {
                    session.add(rule.clone(), RuleOrigin::Selected, rule.confidence);
                }
            }
        }
        session
    }

    fn note(&mut self, message: String) {
        log::warn!("{}: {message}", self.task_id);
        self.diagnostics.push(message);
    }

    fn has_rule(&self, id: &str) -> bool {
        self.active.iter().any(|a| a.id() == id)
    }

    fn has_room(&self) -> bool {
        self.active.len() < self.config.max_rules
    }

    /// Modified copies must not shadow their source's id.
    fn distinct_modified(
        &self,
        mut rule: CompressionRule,
        candidates: &[CompressionRule],
    ) -> CompressionRule {
        if candidates.iter().any(|c| c.rule_id == rule.rule_id) || self.has_rule(&rule.rule_id) {
            rule.rule_id = format!("{}_mod", rule.rule_id);
        }
        rule
    }

    fn add_new(&mut self, mut rule: CompressionRule, origin: RuleOrigin) -> bool {
        if rule.category.is_none() {
            rule.category = Some(self.category.clone());
        }
        rule.times_applied = 0;
        rule.times_complained = 0;
        self.add(rule, origin, 1.0)
    }

    fn add(&mut self, rule: CompressionRule, origin: RuleOrigin, task_confidence: f64) -> bool {
        if self.has_rule(&rule.rule_id) {
            self.note(format!("rule `{}` is already active; dropped", rule.rule_id));
            return false;
        }
        if !self.has_room() {
            self.note(format!(
                "rule limit {} reached; `{}` dropped",
                self.config.max_rules, rule.rule_id
            ));
            return false;
        }
        let id = rule.rule_id.clone();
        match CompiledRule::new(rule) {
            Ok(compiled) => {
                self.active.push(ActiveRule {
                    compiled,
                    origin,
                    frozen: false,
                    task_confidence: task_confidence.clamp(0.0, 1.0),
                    delta_applications: 0,
                });
                true
            }
            Err(e) => {
                self.note(format!("rule `{id}` dropped: {e}"));
                false
            }
        }
    }

    fn usable_rules(&self) -> Vec<CompiledRule> {
        self.active
            .iter()
            .filter(|a| !a.frozen)
            .map(|a| a.compiled.clone())
            .collect()
    }

    fn credit(&mut self, record: &ObservationRecord) {
        if record.coverage != Coverage::Covered || record.result.lines_removed == 0 {
            return;
        }
        let Some(id) = &record.result.applied_rule_id else {
            return;
        };
        if let Some(active) = self.active.iter_mut().find(|a| a.id() == id) {
            active.delta_applications += 1;
            active.task_confidence = (active.task_confidence + CONFIDENCE_STEP).min(1.0);
        }
    }

    /// Compresses one observation.
    ///
    /// An uncovered output triggers a request for a new rule, which is then
    /// applied to this same output when its trigger matches the command.
    pub fn step(
        &mut self,
        step_index: u64,
        command: &str,
        raw_output: &str,
        gateway: &LlmGateway,
    ) -> ObservationRecord {
        if let Some(last) = self.history.last() {
            assert!(step_index > last.step_index, "step indices must increase");
        }
        let mut record = compress(step_index, command, raw_output, &self.usable_rules());
        if record.coverage == Coverage::Uncovered {
            if !self.has_room() {
                self.note(format!("step {step_index}: uncovered output, rule limit reached"));
            } else {
                let request = PromptRequest::spawn_new(command, raw_output, &self.instruction);
                match gateway.spawn_rule(&request) {
                    Ok(rule) => {
                        let triggers = CompiledRule::new(rule.clone()).is_ok_and(|c| c.triggers_on(command));
                        if self.add_new(rule, RuleOrigin::NewMidtask) && triggers {
                            record = compress(step_index, command, raw_output, &self.usable_rules());
                        }
                    }
                    Err(e) => self.note(format!("step {step_index}: new rule request failed: {e}")),
                }
            }
        }
        self.credit(&record);
        self.history.push(record.clone());
        record
    }

    /// Feeds back what the agent did after seeing a step's output.
    ///
    /// On a complaint, the rule that compressed the referenced step is frozen
    /// and a more conservative replacement is requested. Returns the ids of
    /// newly frozen rules.
    pub fn report_feedback(&mut self, followup: &FollowupEvent, gateway: &LlmGateway) -> Vec<String> {
        let Some(complaint) = detect(&self.history, followup, &self.config.complaint) else {
            return Vec::new();
        };
        let record = self
            .history
            .iter()
            .find(|r| r.step_index == complaint.step_index)
            .expect("complaints reference recorded steps")
            .clone();
        let Some(rule_id) = record.result.applied_rule_id.clone() else {
            return Vec::new();
        };
        let Some(active) = self.active.iter_mut().find(|a| a.id() == rule_id && !a.frozen) else {
            return Vec::new();
        };
        active.frozen = true;
        active.task_confidence = 0.0;
        let old_rule = active.rule().clone();
        log::info!(
            "{}: rule `{rule_id}` frozen after step {}",
            self.task_id,
            record.step_index
        );

        let feedback = match followup.kind {
            FollowupKind::AgentMessage => followup.text.clone(),
            FollowupKind::NextCommand => format!(
                "The agent ran `{}` right after seeing the compressed output.",
                followup.text.trim()
            ),
        };
        if !self.has_room() {
            self.note(format!("rule limit reached; no replacement for `{rule_id}`"));
        } else {
            let request =
                PromptRequest::spawn_replacement(&old_rule, &record.command, &record.raw_output, &feedback);
            match gateway.spawn_rule(&request) {
                Ok(mut replacement) => {
                    replacement.rule_id = format!("{rule_id}_v2");
                    if replacement.category.is_none() {
                        replacement.category = old_rule.category.clone();
                    }
                    self.add_new(replacement, RuleOrigin::Replacement);
                }
                Err(e) => self.note(format!("replacement for `{rule_id}` failed: {e}")),
            }
        }
        vec![rule_id]
    }

    /// One outcome per rule the task held.
    pub fn finalize(self) -> Vec<RuleOutcome> {
        self.outcomes()
    }

    pub fn outcomes(&self) -> Vec<RuleOutcome> {
        self.active
            .iter()
            .map(|a| {
                let outcome = if a.frozen {
                    RuleOutcome::complaint(a.id(), a.delta_applications)
                } else {
                    RuleOutcome::success(a.id(), a.delta_applications, a.task_confidence)
                };
                if a.origin == RuleOrigin::Selected {
                    outcome
                } else {
                    outcome.with_body(a.rule().clone())
                }
            })
            .collect()
    }

    pub fn active_rules(&self) -> &[ActiveRule] {
        &self.active
    }

    pub fn active_rule(&self, id: &str) -> Option<&ActiveRule> {
        self.active.iter().find(|a| a.id() == id)
    }

    pub fn history(&self) -> &[ObservationRecord] {
        &self.history
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    /// True when the initial proposal could not be obtained.
    pub fn is_degraded(&self) -> bool {
        self.degraded
    }

    pub fn transcript(&self) -> Vec<TranscriptRow> {
        self.history
            .iter()
            .map(|r| TranscriptRow {
                step_index: r.step_index,
                command: r.command.clone(),
                coverage: r.coverage,
                applied_rule_id: r.result.applied_rule_id.clone(),
                chars_before: r.result.chars_before,
                chars_after: r.result.chars_after,
                ratio: r.result.ratio,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::OutputClass;
    use crate::gateway::{ScriptedMock, TemplateId, TranscriptEntry};

    const MAKE_RULE: &str = r#"{"rule_id": "make_build", "trigger_regex": "^make\\b",
        "strip_patterns": ["^(CC|LD|AR) "], "keep_first_n": 1, "keep_last_n": 1,
        "summary_header": "[make: compile lines removed]"}"#;
    const OBJDUMP_RULE: &str = r#"{"rule_id": "objdump_disassembly_rule", "trigger_regex": "^objdump\\s+-d",
        "keep_patterns": ["<main>:", "<secret"], "strip_patterns": ["^\\s+[0-9a-f]+:\\s"],
        "keep_first_n": 3, "keep_last_n": 3, "summary_header": "[objdump: instructions removed]"}"#;
    const GIT_V2: &str = r#"{"rule_id": "whatever", "trigger_regex": "^git\\s+clone",
        "keep_patterns": ["Cloning into", "Receiving"], "strip_patterns": ["^remote: Counting"],
        "summary_header": "[git: counting removed]"}"#;

    fn gateway() -> LlmGateway {
        let proposal = format!(
            r#"{{"selected_rule_ids": ["seed_compiler_output", "seed_git_noise", "nope"],
                 "modified_rules": [], "new_rules": [{MAKE_RULE}]}}"#
        );
        LlmGateway::mock(ScriptedMock::new(vec![
            TranscriptEntry::any(TemplateId::ProposalWithCache, proposal),
            TranscriptEntry::any(TemplateId::SpawnNew, OBJDUMP_RULE).when_contains("Command: objdump"),
            TranscriptEntry::any(TemplateId::SpawnReplacement, GIT_V2),
        ]))
    }

    fn session(gw: &LlmGateway) -> TaskSession {
        TaskSession::init(
            "t1",
            "compile the project",
            "build",
            "$ ",
            &GlobalRulePool::seeded(),
            SessionConfig::default(),
            gw,
        )
    }

    fn git_clone_output() -> String {
        let mut out = String::from("Cloning into 'repo'...\n");
        for i in 0..30 {
            out.push_str(&format!("remote: Counting objects: {}% ({i}/30)\n", i * 3));
        }
        out.push_str("Resolving deltas: 100% (5/5), done.\n");
        out
    }

    #[test]
    fn init_from_scripted_proposal() {
        let gw = gateway();
        let s = session(&gw);
        let ids: Vec<&str> = s.active_rules().iter().map(|a| a.id()).collect();
        assert_eq!(ids, vec!["seed_compiler_output", "seed_git_noise", "make_build"]);
        assert_eq!(
            s.active_rule("make_build").unwrap().rule().category.as_deref(),
            Some("build")
        );
        assert_eq!(s.active_rule("make_build").unwrap().task_confidence, 1.0);
        assert_eq!(s.diagnostics().len(), 1);
        assert!(!s.is_degraded());
    }

    #[test]
    fn degraded_init_uses_candidates() {
        let s = session(&LlmGateway::offline());
        assert!(s.is_degraded());
        assert_eq!(s.active_rules().len(), 6);
        let empty = TaskSession::init(
            "t",
            "i",
            "c",
            "",
            &GlobalRulePool::default(),
            SessionConfig::default(),
            &LlmGateway::offline(),
        );
        assert!(empty.active_rules().is_empty());
    }

    #[test]
    fn invalid_modified_rule_is_dropped() {
        let proposal = format!(
            r#"{{"selected_rule_ids": ["seed_git_noise"],
                 "modified_rules": [{{"rule_id": "seed_apt_install", "trigger_regex": "apt(("}}, {MAKE_RULE}],
                 "new_rules": []}}"#
        );
        let gw = LlmGateway::mock(ScriptedMock::new(vec![TranscriptEntry::any(
            TemplateId::ProposalWithCache,
            proposal,
        )]));
        let s = session(&gw);
        let ids: Vec<&str> = s.active_rules().iter().map(|a| a.id()).collect();
        assert_eq!(ids, vec!["seed_git_noise", "make_build"]);
    }

    #[test]
    fn modified_copy_gets_suffix() {
        let proposal = r#"{"selected_rule_ids": [], "new_rules": [],
            "modified_rules": [{"rule_id": "seed_apt_install", "trigger_regex": "apt", "strip_patterns": ["^Get:"]}]}"#;
        let gw = LlmGateway::mock(ScriptedMock::new(vec![TranscriptEntry::any(
            TemplateId::ProposalWithCache,
            proposal,
        )]));
        let s = session(&gw);
        assert_eq!(s.active_rules()[0].id(), "seed_apt_install_mod");
        assert_eq!(s.active_rules()[0].origin, RuleOrigin::Modified);
    }

    #[test]
    fn counters_follow_removals() {
        let gw = gateway();
        let mut s = session(&gw);
        let out = git_clone_output();
        s.step(0, "git clone https://x/repo", &out, &gw);
        s.step(1, "pwd", "/root\n", &gw);
        s.step(2, "git clone https://x/other", &out, &gw);
        let git = s.active_rule("seed_git_noise").unwrap();
        assert_eq!(git.delta_applications, 2);
        assert!((git.task_confidence - 0.9).abs() < 1e-12);
        let outcomes = s.finalize();
        let git = outcomes.iter().find(|o| o.rule_id == "seed_git_noise").unwrap();
        assert_eq!(git.delta_applications, 2);
        assert!(!git.complained);
        assert!(git.rule_body.is_none());
        let make = outcomes.iter().find(|o| o.rule_id == "make_build").unwrap();
        assert_eq!(make.delta_applications, 0);
        assert!(make.rule_body.is_some());
    }

    #[test]
    fn critical_step_changes_nothing() {
        let gw = gateway();
        let mut s = session(&gw);
        let rec = s.step(0, "make", "gcc -c a.c\na.c:1: error: nope\n", &gw);
        assert_eq!(rec.output_class, OutputClass::Critical);
        assert!(s.active_rules().iter().all(|a| a.delta_applications == 0));
        let frozen = s.report_feedback(&FollowupEvent::next_command("make"), &gw);
        assert!(frozen.is_empty());
    }

    #[test]
    fn uncovered_output_spawns_and_applies() {
        let gw = gateway();
        let mut s = session(&gw);
        let mut dump =
            String::from("a.out:     file format elf64-x86-64\n\nDisassembly of section .text:\n\n");
        for i in 0..200 {
            dump.push_str(&format!(
                "  {:x}:\t48 89 e5             \tmov    %rsp,%rbp\n",
                0x1000 + i * 4
            ));
        }
        dump.push_str("0000000000001139 <main>:\n  1139:\tc3\tret\n");
        let rec = s.step(0, "objdump -d vulnerable", &dump, &gw);
        assert_eq!(rec.coverage, Coverage::Covered);
        assert_eq!(
            rec.result.applied_rule_id.as_deref(),
            Some("objdump_disassembly_rule")
        );
        assert!(rec.result.ratio < 0.1);
        assert!(rec.result.compressed_text.contains("<main>:"));
        let spawned = s.active_rule("objdump_disassembly_rule").unwrap();
        assert_eq!(spawned.origin, RuleOrigin::NewMidtask);
        assert_eq!(spawned.delta_applications, 1);

        let rec = s.step(1, "strings vulnerable", &"word\n".repeat(400), &gw);
        assert_eq!(rec.coverage, Coverage::Uncovered);
        assert!(s
            .diagnostics()
            .last()
            .unwrap()
            .contains("new rule request failed"));
    }

    #[test]
    fn complaint_freezes_and_replaces() {
        let gw = gateway();
        let mut s = session(&gw);
        let out = git_clone_output();
        let first = s.step(5, "git clone https://x/repo", &out, &gw);
        assert_eq!(first.result.lines_removed, 24);
        let frozen = s.report_feedback(&FollowupEvent::next_command("git clone https://x/repo"), &gw);
        assert_eq!(frozen, vec!["seed_git_noise"]);
        let v2 = s.active_rule("seed_git_noise_v2").unwrap();
        assert_eq!(v2.origin, RuleOrigin::Replacement);
        assert_eq!(v2.task_confidence, 1.0);

        let again = s.step(6, "git clone https://x/repo", &out, &gw);
        assert_eq!(again.result.applied_rule_id.as_deref(), Some("seed_git_noise_v2"));
        assert!(again.result.compressed_text.contains("Cloning into"));

        let outcomes = s.finalize();
        let old = outcomes.iter().find(|o| o.rule_id == "seed_git_noise").unwrap();
        assert!(old.complained);
        assert_eq!(old.task_confidence, 0.0);
        let v2 = outcomes
            .iter()
            .find(|o| o.rule_id == "seed_git_noise_v2")
            .unwrap();
        assert!(!v2.complained);
        assert_eq!(v2.delta_applications, 1);
        assert!(v2.rule_body.is_some());
    }

    #[test]
    fn phrase_complaint_targets_only_the_compressing_rule() {
        let gw = gateway();
        let mut s = session(&gw);
        s.step(0, "git clone https://x/repo", &git_clone_output(), &gw);
        let frozen = s.report_feedback(
            &FollowupEvent::agent_message("show me the full output please"),
            &gw,
        );
        assert_eq!(frozen, vec!["seed_git_noise"]);
        let still = s.report_feedback(&FollowupEvent::agent_message("still truncated"), &gw);
        assert!(still.is_empty());
    }

    #[test]
    fn rule_cap_suppresses_spawns() {
        let gw = gateway();
        let config = SessionConfig {
            max_rules: 3,
            ..SessionConfig::default()
        };
        let mut s = TaskSession::init("t", "i", "build", "", &GlobalRulePool::seeded(), config, &gw);
        assert_eq!(s.active_rules().len(), 3);
        let rec = s.step(0, "objdump -d x", &"  1000:\tc3\tret\n".repeat(300), &gw);
        assert_eq!(rec.coverage, Coverage::Uncovered);
        assert_eq!(s.active_rules().len(), 3);
    }
}
