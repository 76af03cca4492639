//! The global rule pool: ranking, retrieval, write-back and the retention
//! convergence metric.
//!
//! Every stored rule carries its global confidence in `confidence` and its
//! cumulative successful applications in `times_applied`. Ranking is
//! `confidence * (times_applied + 1)`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::rule::{seed_rules, validate_rule, CompressionRule};

pub const DEFAULT_TAU: f64 = 0.3;
pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_CAPACITY: usize = 500;
pub const DEFAULT_TOP_K: usize = 30;
pub const DEFAULT_RETENTION_K: usize = 30;

pub fn ranking_score(rule: &CompressionRule) -> f64 {
    rule.ranking_score()
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PoolEntry {
    pub(crate) rule: CompressionRule,
    /// Generation of the last write-back that touched this rule.
    pub(crate) last_write_back: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalRulePool {
    pub(crate) entries: BTreeMap<String, PoolEntry>,
    pub(crate) generation: u64,
    pub(crate) capacity: usize,
}

impl Default for GlobalRulePool {
    fn default() -> Self {
        Self::empty(DEFAULT_CAPACITY)
    }
}

impl GlobalRulePool {
    pub fn empty(capacity: usize) -> Self {
        Self {
            entries: BTreeMap::new(),
            generation: 0,
            capacity,
        }
    }

    /// A fresh pool holding the six seed rules, generation 0.
    pub fn seeded() -> Self {
        let mut pool = Self::default();
        for rule in seed_rules() {
            pool.insert(rule);
        }
        pool
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity;
        self
    }

    /// Inserts or replaces a rule directly, outside the write-back protocol.
    pub fn insert(&mut self, rule: CompressionRule) {
        let last_write_back = self.entries.get(&rule.rule_id).map_or(0, |e| e.last_write_back);
        self.entries.insert(
            rule.rule_id.clone(),
            PoolEntry {
                rule,
                last_write_back,
            },
        );
    }

    pub fn remove(&mut self, rule_id: &str) -> Option<CompressionRule> {
        self.entries.remove(rule_id).map(|e| e.rule)
    }

    pub fn get(&self, rule_id: &str) -> Option<&CompressionRule> {
        self.entries.get(rule_id).map(|e| &e.rule)
    }

    pub fn contains(&self, rule_id: &str) -> bool {
        self.entries.contains_key(rule_id)
    }

    /// Rules in id order.
    pub fn rules(&self) -> impl Iterator<Item = &CompressionRule> {
        self.entries.values().map(|e| &e.rule)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn last_write_back(&self, rule_id: &str) -> Option<u64> {
        self.entries.get(rule_id).map(|e| e.last_write_back)
    }

    /// Sum of `times_applied` over the pool.
    pub fn total_applications(&self) -> u64 {
        self.rules().map(|r| r.times_applied).sum()
    }

    /// The `k` best rules by ranking score.
    ///
    /// Ties go to the more recently written-back rule, then to the smaller id.
    /// With a category, rules tagged with it come first and the rest fill up
    /// to `k`.
    pub fn top_k(&self, k: usize, category: Option<&str>) -> Vec<&CompressionRule> {
        let mut ranked: Vec<&PoolEntry> = self.entries.values().collect();
        ranked.sort_by(|a, b| {
            let in_category = |e: &PoolEntry| category.is_some() && e.rule.category.as_deref() == category;
            in_category(b)
                .cmp(&in_category(a))
                .then_with(|| b.rule.ranking_score().total_cmp(&a.rule.ranking_score()))
                .then_with(|| b.last_write_back.cmp(&a.last_write_back))
                .then_with(|| a.rule.rule_id.cmp(&b.rule.rule_id))
        });
        ranked.into_iter().take(k).map(|e| &e.rule).collect()
    }

    /// Ids of [`top_k`](Self::top_k) without a category filter.
    pub fn top_k_ids(&self, k: usize) -> Vec<String> {
        self.top_k(k, None)
            .into_iter()
            .map(|r| r.rule_id.clone())
            .collect()
    }

    /// Applies one finished task's outcomes.
    ///
    /// Complained rules are deleted. Outcomes with at least one successful
    /// application and task confidence at or above `tau` are merged: existing
    /// rules accumulate usage and move their confidence toward the task value
    /// by `alpha`; unknown rules are inserted from their body. Everything else
    /// is left alone. The generation advances by one.
    pub fn write_back(&mut self, outcomes: &[RuleOutcome], params: &WriteBackParams) -> WriteBackSummary {
        let generation = self.generation + 1;
        let mut summary = WriteBackSummary {
            generation,
            ..WriteBackSummary::default()
        };
        let complained: BTreeSet<&str> = outcomes
            .iter()
            .filter(|o| o.complained)
            .map(|o| o.rule_id.as_str())
            .collect();

        for outcome in outcomes.iter().filter(|o| !o.complained) {
            if complained.contains(outcome.rule_id.as_str()) {
                continue;
            }
            if outcome.delta_applications < 1 || outcome.task_confidence < params.tau {
                summary.skipped.push(outcome.rule_id.clone());
                continue;
            }
            let task_confidence = outcome.task_confidence.clamp(0.0, 1.0);
            if let Some(entry) = self.entries.get_mut(&outcome.rule_id) {
                let rule = &mut entry.rule;
                rule.times_applied += outcome.delta_applications;
                rule.confidence =
                    ((1.0 - params.alpha) * rule.confidence + params.alpha * task_confidence).clamp(0.0, 1.0);
                entry.last_write_back = generation;
                summary.updated.push(outcome.rule_id.clone());
                continue;
            }
            let Some(body) = &outcome.rule_body else {
                summary.rejected.push(WriteBackRejection {
                    rule_id: outcome.rule_id.clone(),
                    reason: "rule is not in the pool and the outcome carries no body".into(),
                });
                continue;
            };
            let report = validate_rule(body);
            if !report.is_valid() || body.rule_id != outcome.rule_id {
                summary.rejected.push(WriteBackRejection {
                    rule_id: outcome.rule_id.clone(),
                    reason: if report.is_valid() {
                        format!("body carries rule_id `{}`", body.rule_id)
                    } else {
                        report.to_string()
                    },
                });
                continue;
            }
            let mut rule = body.clone();
            rule.confidence = task_confidence;
            rule.times_applied = outcome.delta_applications;
            rule.times_complained = 0;
            self.entries.insert(
                rule.rule_id.clone(),
                PoolEntry {
                    rule,
                    last_write_back: generation,
                },
            );
            summary.inserted.push(outcome.rule_id.clone());
        }

        for id in complained {
            if self.entries.remove(id).is_some() {
                summary.deleted.push(id.to_owned());
            }
        }
        summary.evicted = self.evict_over_capacity();
        self.generation = generation;
        summary
    }

    fn evict_over_capacity(&mut self) -> Vec<String> {
        let mut evicted = Vec::new();
        while self.entries.len() > self.capacity {
            let victim = self
                .entries
                .values()
                .filter(|e| !e.rule.is_seed())
                .min_by(|a, b| {
                    a.rule
                        .ranking_score()
                        .total_cmp(&b.rule.ranking_score())
                        .then_with(|| a.last_write_back.cmp(&b.last_write_back))
                        .then_with(|| b.rule.rule_id.cmp(&a.rule.rule_id))
                })
                .map(|e| e.rule.rule_id.clone());
            match victim {
                Some(id) => {
                    self.entries.remove(&id);
                    evicted.push(id);
                }
                None => break,
            }
        }
        evicted
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WriteBackParams {
    /// Minimum task confidence for a rule to be written back.
    pub tau: f64,
    /// Weight of the task confidence in the global confidence update.
    pub alpha: f64,
}

impl Default for WriteBackParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// What one task did with one rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleOutcome {
    pub rule_id: String,
    pub delta_applications: u64,
    pub task_confidence: f64,
    pub complained: bool,
    /// Present for rules created during the task.
    #[serde(skip)]
    pub rule_body: Option<CompressionRule>,
}

impl RuleOutcome {
    pub fn success(rule_id: impl Into<String>, delta_applications: u64, task_confidence: f64) -> Self {
        Self {
            rule_id: rule_id.into(),
            delta_applications,
            task_confidence,
            complained: false,
            rule_body: None,
        }
    }

    /// A complained rule; its task confidence is zero.
    pub fn complaint(rule_id: impl Into<String>, delta_applications: u64) -> Self {
        Self {
            rule_id: rule_id.into(),
            delta_applications,
            task_confidence: 0.0,
            complained: true,
            rule_body: None,
        }
    }

    pub fn with_body(mut self, body: CompressionRule) -> Self {
        self.rule_body = Some(body);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WriteBackRejection {
    pub rule_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct WriteBackSummary {
    pub generation: u64,
    pub inserted: Vec<String>,
    pub updated: Vec<String>,
    pub deleted: Vec<String>,
    pub skipped: Vec<String>,
    pub evicted: Vec<String>,
    pub rejected: Vec<WriteBackRejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub run_index: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub retained_count: usize,
    pub retention_percent: f64,
    /// Either pool held fewer than K rules; the denominator is still K.
    pub undersized: bool,
}

/// Share of the previous top-K that is still in the current top-K, in percent.
pub fn retention(prev: &GlobalRulePool, curr: &GlobalRulePool, k: usize) -> RetentionReport {
    assert!(k >= 1, "retention needs K >= 1");
    let before: BTreeSet<String> = prev.top_k_ids(k).into_iter().collect();
    let retained_count = curr.top_k_ids(k).iter().filter(|id| before.contains(*id)).count();
    RetentionReport {
        run_index: 0,
        k,
        retained_count,
        retention_percent: 100.0 * retained_count as f64 / k as f64,
        undersized: prev.len() < k || curr.len() < k,
    }
}

/// A pool shared between concurrently running sessions.
///
/// Reads take a snapshot or a shared lock; a write-back holds the exclusive
/// lock for its whole read-modify-write.
#[derive(Debug, Clone, Default)]
pub struct SharedPool {
    inner: Arc<RwLock<GlobalRulePool>>,
}

impl SharedPool {
    pub fn new(pool: GlobalRulePool) -> Self {
        Self {
            inner: Arc::new(RwLock::new(pool)),
        }
    }

    pub fn snapshot(&self) -> GlobalRulePool {
        self.inner.read().expect("pool lock poisoned").clone()
    }

    pub fn top_k(&self, k: usize, category: Option<&str>) -> Vec<CompressionRule> {
        let pool = self.inner.read().expect("pool lock poisoned");
        pool.top_k(k, category).into_iter().cloned().collect()
    }

    pub fn write_back(&self, outcomes: &[RuleOutcome], params: &WriteBackParams) -> WriteBackSummary {
        let mut pool = self.inner.write().expect("pool lock poisoned");
        pool.write_back(outcomes, params)
    }

    pub fn into_inner(self) -> GlobalRulePool {
        match Arc::try_unwrap(self.inner) {
            Ok(lock) => lock.into_inner().expect("pool lock poisoned"),
            Err(shared) => shared.read().expect("pool lock poisoned").clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(id: &str, confidence: f64, applied: u64) -> CompressionRule {
        let mut r = CompressionRule::new(id, "x");
        r.strip_patterns = vec!["y".into()];
        r.summary_header = format!("[{id}]");
        r.confidence = confidence;
        r.times_applied = applied;
        r
    }

    #[test]
    fn scores() {
        assert_eq!(ranking_score(&rule("a", 1.0, 126)), 127.0);
        assert_eq!(ranking_score(&rule("a", 1.0, 0)), 1.0);
        assert_eq!(ranking_score(&rule("a", 0.8, 10)), 0.8 * 11.0);
    }

    #[test]
    fn seeded_top_k_ties_break_on_id() {
        let pool = GlobalRulePool::seeded();
        let ids = pool.top_k_ids(30);
        assert_eq!(
            ids,
            vec![
                "seed_apt_install",
                "seed_compiler_output",
                "seed_git_noise",
                "seed_heredoc",
                "seed_openssl",
                "seed_pip_install"
            ]
        );
    }

    #[test]
    fn top_one_is_best() {
        let mut pool = GlobalRulePool::seeded();
        pool.insert(rule("seven_zip_extraction", 1.0, 126));
        assert_eq!(pool.top_k_ids(1), vec!["seven_zip_extraction"]);
        assert!(GlobalRulePool::default().top_k(5, None).is_empty());
    }

    #[test]
    fn category_rules_rank_first() {
        let mut pool = GlobalRulePool::seeded();
        let mut tagged = rule("make_build", 0.5, 0);
        tagged.category = Some("build".into());
        pool.insert(tagged);
        let top = pool.top_k(2, Some("build"));
        assert_eq!(top[0].rule_id, "make_build");
        assert_eq!(top[1].rule_id, "seed_apt_install");
    }

    #[test]
    fn recency_breaks_score_ties() {
        let mut pool = GlobalRulePool::default();
        pool.insert(rule("a", 1.0, 1));
        pool.insert(rule("b", 0.5, 0));
        pool.write_back(
            &[RuleOutcome::success("b", 1, 1.0)],
            &WriteBackParams { tau: 0.3, alpha: 1.0 },
        );
        // b is now 1.0 * 2 = 2.0, equal to a, but more recent.
        assert_eq!(pool.top_k_ids(2), vec!["b", "a"]);
    }

    #[test]
    fn write_back_updates_existing_rule() {
        let mut pool = GlobalRulePool::seeded();
        let summary = pool.write_back(
            &[RuleOutcome::success("seed_git_noise", 3, 0.9)],
            &WriteBackParams { tau: 0.3, alpha: 0.3 },
        );
        let git = pool.get("seed_git_noise").unwrap();
        assert_eq!(git.times_applied, 13);
        assert!((git.confidence - 0.83).abs() < 1e-12);
        assert_eq!(summary.updated, vec!["seed_git_noise"]);
        assert_eq!(pool.generation(), 1);
    }

    #[test]
    fn complaint_deletes_and_zero_delta_is_skipped() {
        let mut pool = GlobalRulePool::seeded();
        let before = pool.get("seed_pip_install").cloned();
        let summary = pool.write_back(
            &[
                RuleOutcome::complaint("seed_heredoc", 2),
                RuleOutcome::success("seed_pip_install", 0, 1.0),
                RuleOutcome::success("seed_openssl", 4, 0.1),
            ],
            &WriteBackParams::default(),
        );
        assert!(!pool.contains("seed_heredoc"));
        assert_eq!(pool.get("seed_pip_install").cloned(), before);
        assert_eq!(pool.get("seed_openssl").unwrap().times_applied, 10);
        assert_eq!(summary.deleted, vec!["seed_heredoc"]);
        assert_eq!(summary.skipped, vec!["seed_pip_install", "seed_openssl"]);
    }

    #[test]
    fn new_rules_need_a_body() {
        let mut pool = GlobalRulePool::seeded();
        let summary = pool.write_back(
            &[
                RuleOutcome::success("ghost", 2, 1.0),
                RuleOutcome::success("make_build", 2, 0.95).with_body(rule("make_build", 1.0, 0)),
            ],
            &WriteBackParams::default(),
        );
        assert_eq!(summary.rejected.len(), 1);
        assert_eq!(summary.rejected[0].rule_id, "ghost");
        let inserted = pool.get("make_build").unwrap();
        assert_eq!(inserted.times_applied, 2);
        assert_eq!(inserted.confidence, 0.95);
        assert_eq!(pool.last_write_back("make_build"), Some(1));
    }

    #[test]
    fn eviction_spares_seeds() {
        let mut pool = GlobalRulePool::seeded().with_capacity(7);
        let params = WriteBackParams::default();
        pool.write_back(
            &[RuleOutcome::success("big", 50, 1.0).with_body(rule("big", 1.0, 0))],
            &params,
        );
        assert_eq!(pool.len(), 7);
        let summary = pool.write_back(
            &[RuleOutcome::success("small", 1, 1.0).with_body(rule("small", 1.0, 0))],
            &params,
        );
        assert_eq!(summary.evicted, vec!["small"]);
        assert_eq!(pool.len(), 7);
        assert!(pool.contains("big"));

        let mut all_seeds = GlobalRulePool::seeded().with_capacity(2);
        all_seeds.write_back(&[], &params);
        assert_eq!(all_seeds.len(), 6);
    }

    #[test]
    fn retention_overlaps() {
        let mut a = GlobalRulePool::default();
        let mut b = GlobalRulePool::default();
        for i in 0..30 {
            a.insert(rule(&format!("a{i:02}"), 1.0, 100 - i));
            b.insert(rule(&format!("b{i:02}"), 1.0, 100 - i));
        }
        assert_eq!(retention(&a, &a, 30).retention_percent, 100.0);
        assert_eq!(retention(&a, &b, 30).retention_percent, 0.0);
        let seeds = GlobalRulePool::seeded();
        let small = retention(&seeds, &seeds, 30);
        assert_eq!(small.retained_count, 6);
        assert_eq!(small.retention_percent, 20.0);
        assert!(small.undersized);
    }
}
