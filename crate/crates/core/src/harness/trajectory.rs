//! Recorded agent trajectories.
//!
//! A trajectory file is JSON Lines: a header object
//! `{task_id, instruction, category, terminal_state?}` followed by one object
//! per step `{step_index, command, raw_output, agent_message?}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step_index: u64,
    pub command: String,
    pub raw_output: String,
    /// What the agent said after seeing this step's output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    task_id: String,
    instruction: String,
    category: String,
    #[serde(default)]
    terminal_state: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub task_id: String,
    pub instruction: String,
    pub category: String,
    pub terminal_state: String,
    pub steps: Vec<TrajectoryStep>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryError {
    #[error("{source_name}: line {line}: {message}")]
    Malformed {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{source_name}: empty trajectory")]
    Empty { source_name: String },
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

impl Trajectory {
    pub fn new(task_id: &str, instruction: &str, category: &str) -> Self {
        Self {
            task_id: task_id.to_owned(),
            instruction: instruction.to_owned(),
            category: category.to_owned(),
            terminal_state: String::new(),
            steps: Vec::new(),
        }
    }

    /// Appends a step numbered after the last one.
    pub fn push(&mut self, command: &str, raw_output: &str) -> &mut TrajectoryStep {
        let step_index = self.steps.last().map_or(0, |s| s.step_index + 1);
        self.steps.push(TrajectoryStep {
            step_index,
            command: command.to_owned(),
            raw_output: raw_output.to_owned(),
            agent_message: None,
        });
        self.steps.last_mut().expect("just pushed")
    }

    /// Parses JSON Lines text. `source_name` is only used in errors.
    pub fn parse(text: &str, source_name: &str) -> Result<Self, TrajectoryError> {
        let malformed = |line: usize, message: String| TrajectoryError::Malformed {
            source_name: source_name.to_owned(),
            line,
            message,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());
        let Some((n, first)) = lines.next() else {
            return Err(TrajectoryError::Empty {
                source_name: source_name.to_owned(),
            });
        };
        let header: Header = serde_json::from_str(first).map_err(|e| malformed(n, format!("header: {e}")))?;
        let mut steps: Vec<TrajectoryStep> = Vec::new();
        for (n, line) in lines {
            let step: TrajectoryStep = serde_json::from_str(line).map_err(|e| malformed(n, e.to_string()))?;
            if let Some(prev) = steps.last() {
                if step.step_index <= prev.step_index {
                    return Err(malformed(
                        n,
                        format!(
                            "step_index {} does not follow {}",
                            step.step_index, prev.step_index
                        ),
                    ));
                }
            }
            steps.push(step);
        }
        Ok(Self {
            task_id: header.task_id,
            instruction: header.instruction,
            category: header.category,
            terminal_state: header.terminal_state,
            steps,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrajectoryError> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| TrajectoryError::Io(name.clone(), e))?;
        Self::parse(&text, &name)
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            task_id: self.task_id.clone(),
            instruction: self.instruction.clone(),
            category: self.category.clone(),
            terminal_state: self.terminal_state.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step).expect("step serializes"));
            out.push('\n');
        }
        out
    }
}

/// Loads every `*.jsonl` file in a directory, sorted by file name.
pub fn load_trajectory_dir(dir: &Path) -> Result<Vec<Trajectory>, TrajectoryError> {
    let name = dir.display().to_string();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| TrajectoryError::Io(name.clone(), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Trajectory::load(p)).collect()
}
