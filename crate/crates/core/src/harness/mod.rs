//! Trajectory replay, batched multi-turn evolution and statistics.
//!
//! Replay stands in for the host agent: recorded commands and outputs are fed
//! through a session, and the agent's next command or message becomes the
//! follow-up that may count as a complaint.

mod trajectory;

use std::fmt::Write as _;

use serde::Serialize;

pub use trajectory::{load_trajectory_dir, Trajectory, TrajectoryError, TrajectoryStep};

use crate::complaint::FollowupEvent;
use crate::executor::Coverage;
use crate::gateway::LlmGateway;
use crate::pool::{
    retention, GlobalRulePool, RetentionReport, RuleOutcome, WriteBackParams, WriteBackSummary,
};
use crate::session::{SessionConfig, TaskSession, TranscriptRow};
use crate::store::{PoolError, PoolStore};

pub const DEFAULT_RETENTION_THRESHOLD: f64 = 90.0;
pub const DEFAULT_TURNS: usize = 5;
pub const DEFAULT_BATCH_SIZE: usize = 4;
pub const ROLLING_WINDOW: usize = 3;

/// Compression statistics for one task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskReport {
    pub task_id: String,
    pub episodes: usize,
    /// Steps where a rule removed at least one line.
    pub entries: usize,
    pub chars_before: usize,
    pub chars_after: usize,
    pub chars_saved: usize,
    /// Total characters after over total before, across entries.
    pub overall_ratio: f64,
    /// Smallest per-entry ratio.
    pub best_ratio: f64,
    pub rules_spawned: usize,
    pub rules_frozen: usize,
}

impl TaskReport {
    fn from_rows(task_id: &str, rows: &[TranscriptRow], lines_removed: &[usize]) -> Self {
        let entries: Vec<&TranscriptRow> = rows
            .iter()
            .zip(lines_removed)
            .filter(|(r, n)| r.coverage == Coverage::Covered && **n > 0)
            .map(|(r, _)| r)
            .collect();
        let chars_before: usize = entries.iter().map(|r| r.chars_before).sum();
        let chars_after: usize = entries.iter().map(|r| r.chars_after).sum();
        let overall_ratio = if chars_before == 0 {
            1.0
        } else {
            chars_after as f64 / chars_before as f64
        };
        let best_ratio = entries.iter().map(|r| r.ratio).fold(1.0, f64::min);
        Self {
            task_id: task_id.to_owned(),
            episodes: rows.len(),
            entries: entries.len(),
            chars_before,
            chars_after,
            chars_saved: chars_before.saturating_sub(chars_after),
            overall_ratio,
            best_ratio,
            rules_spawned: 0,
            rules_frozen: 0,
        }
    }

    /// Rough token count of the saved characters (four characters a token).
    pub fn tokens_saved_estimate(&self) -> usize {
        self.chars_saved / 4
    }

    /// Percentage of entry characters removed.
    pub fn saved_percent(&self) -> f64 {
        100.0 * (1.0 - self.overall_ratio)
    }
}

/// Per-task rows plus their totals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionReport {
    pub tasks: Vec<TaskReport>,
    pub totals: TaskReport,
}

impl CompressionReport {
    pub fn new(tasks: Vec<TaskReport>) -> Self {
        let chars_before: usize = tasks.iter().map(|t| t.chars_before).sum();
        let chars_after: usize = tasks.iter().map(|t| t.chars_after).sum();
        let totals = TaskReport {
            task_id: "total".into(),
            episodes: tasks.iter().map(|t| t.episodes).sum(),
            entries: tasks.iter().map(|t| t.entries).sum(),
            chars_before,
            chars_after,
            chars_saved: tasks.iter().map(|t| t.chars_saved).sum(),
            overall_ratio: if chars_before == 0 {
                1.0
            } else {
                chars_after as f64 / chars_before as f64
            },
            best_ratio: tasks.iter().map(|t| t.best_ratio).fold(1.0, f64::min),
            rules_spawned: tasks.iter().map(|t| t.rules_spawned).sum(),
            rules_frozen: tasks.iter().map(|t| t.rules_frozen).sum(),
        };
        Self { tasks, totals }
    }

    /// A fixed-width table in the shape of the usual case-study summary.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>8} {:>7} {:>11} {:>13} {:>10}",
            "Task", "Episodes", "Entries", "Chars saved", "Overall ratio", "Best ratio"
        );
        for t in self.tasks.iter().chain(std::iter::once(&self.totals)) {
            let _ = writeln!(
                out,
                "{:<24} {:>8} {:>7} {:>11} {:>13.3} {:>10.3}",
                t.task_id, t.episodes, t.entries, t.chars_saved, t.overall_ratio, t.best_ratio
            );
        }
        out
    }
}

/// Everything one replayed task produced.
#[derive(Debug, Clone)]
pub struct TaskReplay {
    pub report: TaskReport,
    pub outcomes: Vec<RuleOutcome>,
    pub transcript: Vec<TranscriptRow>,
    pub frozen: Vec<String>,
    pub diagnostics: Vec<String>,
}

/// Replays one trajectory against a read-only pool.
pub fn replay_task(
    trajectory: &Trajectory,
    pool: &GlobalRulePool,
    config: &SessionConfig,
    gateway: &LlmGateway,
) -> TaskReplay {
    let mut session = TaskSession::init(
        &trajectory.task_id,
        &trajectory.instruction,
        &trajectory.category,
        &trajectory.terminal_state,
        pool,
        config.clone(),
        gateway,
    );
    let initial_rules = session.active_rules().len();
    let mut frozen = Vec::new();
    for (i, step) in trajectory.steps.iter().enumerate() {
        session.step(step.step_index, &step.command, &step.raw_output, gateway);
        if let Some(message) = &step.agent_message {
            let event = FollowupEvent::agent_message(message.clone()).referring_to(step.step_index);
            frozen.extend(session.report_feedback(&event, gateway));
        }
        if let Some(next) = trajectory.steps.get(i + 1) {
            let event = FollowupEvent::next_command(next.command.clone());
            frozen.extend(session.report_feedback(&event, gateway));
        }
    }
    let transcript = session.transcript();
    let removed: Vec<usize> = session.history().iter().map(|r| r.result.lines_removed).collect();
    let mut report = TaskReport::from_rows(&trajectory.task_id, &transcript, &removed);
    report.rules_spawned = session.active_rules().len() - initial_rules;
    report.rules_frozen = frozen.len();
    TaskReplay {
        report,
        diagnostics: session.diagnostics().to_vec(),
        outcomes: session.finalize(),
        transcript,
        frozen,
    }
}

/// Sample standard deviation over each full sliding window.
pub fn rolling_std(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 2, "window must be at least 2");
    series
        .windows(window)
        .map(|w| {
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionConfig {
    /// Concurrent sessions per wave.
    pub batch_size: usize,
    /// Maximum number of passes over the task set.
    pub turns: usize,
    /// Stop once retention reaches this percentage.
    pub retention_threshold: f64,
    /// Size of the top set compared by retention.
    pub retention_k: usize,
    pub session: SessionConfig,
    pub write_back: WriteBackParams,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            turns: DEFAULT_TURNS,
            retention_threshold: DEFAULT_RETENTION_THRESHOLD,
            retention_k: crate::pool::DEFAULT_RETENTION_K,
            session: SessionConfig::default(),
            write_back: WriteBackParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskFailure {
    pub task_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnReport {
    pub turn: usize,
    pub retention: RetentionReport,
    pub generation: u64,
    pub pool_size: usize,
    pub total_applications: u64,
    /// Mean per-task percentage of entry characters removed.
    pub score: f64,
    /// Sample standard deviation of `score` over the last three turns.
    pub rolling_std: Option<f64>,
    pub compression: CompressionReport,
    pub failures: Vec<TaskFailure>,
    pub write_backs: Vec<WriteBackSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvolutionReport {
    pub turns: Vec<TurnReport>,
    pub converged: bool,
}

impl EvolutionReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>4} {:>10} {:>10} {:>9} {:>13} {:>8} {:>11}",
            "Turn", "Retention", "Generation", "Pool size", "Applications", "Score", "Rolling std"
        );
        for t in &self.turns {
            let std = t.rolling_std.map_or("-".to_owned(), |s| format!("{s:.3}"));
            let _ = writeln!(
                out,
                "{:>4} {:>9.1}% {:>10} {:>9} {:>13} {:>8.2} {:>11}",
                t.turn,
                t.retention.retention_percent,
                t.generation,
                t.pool_size,
                t.total_applications,
                t.score,
                std
            );
        }
        out
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "task panicked".into())
}

/// Runs turns over the task set until retention converges.
///
/// Each turn processes the tasks in waves of `batch_size` concurrent
/// sessions. All sessions in a wave start from the same pool state; their
/// outcomes are written back in task order under the pool file lock before
/// the next wave starts.
pub fn run_evolution(
    tasks: &[Trajectory],
    store: &PoolStore,
    config: &EvolutionConfig,
    gateway: &LlmGateway,
) -> Result<EvolutionReport, PoolError> {
    assert!(config.batch_size >= 1, "batch size must be at least 1");
    assert!(config.retention_k >= 1, "K must be at least 1");
    let mut turns: Vec<TurnReport> = Vec::new();
    let mut scores = Vec::new();
    let mut converged = false;
    for turn in 1..=config.turns {
        let before = store.load()?;
        let mut reports = Vec::new();
        let mut failures = Vec::new();
        let mut write_backs = Vec::new();
        for wave in tasks.chunks(config.batch_size) {
            let snapshot = store.load()?;
            let results: Vec<Result<TaskReplay, String>> = std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|task| {
                        let snapshot = &snapshot;
                        scope.spawn(move || replay_task(task, snapshot, &config.session, gateway))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().map_err(panic_message))
                    .collect()
            });
            let mut finished = Vec::new();
            for (task, result) in wave.iter().zip(results) {
                match result {
                    Ok(replay) => finished.push(replay),
                    Err(error) => {
                        log::error!("task {} failed: {error}", task.task_id);
                        failures.push(TaskFailure {
                            task_id: task.task_id.clone(),
                            error,
                        });
                    }
                }
            }
            let summaries = store.update(|pool| {
                finished
                    .iter()
                    .map(|r| pool.write_back(&r.outcomes, &config.write_back))
                    .collect::<Vec<_>>()
            })?;
            write_backs.extend(summaries);
            reports.extend(finished.into_iter().map(|r| r.report));
        }
        let after = store.load()?;
        let mut retention = retention(&before, &after, config.retention_k);
        retention.run_index = turn;
        let score = if reports.is_empty() {
            0.0
        } else {
            reports.iter().map(TaskReport::saved_percent).sum::<f64>() / reports.len() as f64
        };
        scores.push(score);
        let rolling = rolling_std(&scores, ROLLING_WINDOW).last().copied();
        let done = retention.retention_percent >= config.retention_threshold;
        log::info!(
            "turn {turn}: retention {:.1}%, pool {} rules, generation {}",
            retention.retention_percent,
            after.len(),
            after.generation()
        );
        turns.push(TurnReport {
            turn,
            retention,
            generation: after.generation(),
            pool_size: after.len(),
            total_applications: after.total_applications(),
            score,
            rolling_std: rolling,
            compression: CompressionReport::new(reports),
            failures,
            write_backs,
        });
        if done {
            converged = true;
            break;
        }
    }
    Ok(EvolutionReport { turns, converged })
}
