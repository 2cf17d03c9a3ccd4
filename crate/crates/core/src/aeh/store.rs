use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::engine::{RunObserver, RunSnapshot};
use super::{Outcome, TimelineEvent, WorkflowRun};
use crate::interface::ComplexityLabel;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    Failure,
}

/// `result.json`, the per-run summary the analytics read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub status: RunStatus,
    pub total_attempts: u32,
    pub model_switches: u32,
    pub complexity_label: ComplexityLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workflow_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

impl ResultDocument {
    pub fn from_run(run: &WorkflowRun) -> Self {
        ResultDocument {
            status: match run.outcome {
                Some(Outcome::Success) => RunStatus::Success,
                _ => RunStatus::Failure,
            },
            total_attempts: run.total_attempts,
            model_switches: run.model_index as u32,
            // an entry failure before scoring counts as standard
            complexity_label: run.complexity.as_ref().map_or(ComplexityLabel::Standard, |c| c.label),
            workflow_id: Some(run.workflow_id.clone()),
            failure_reason: run.failure_reason.clone(),
        }
    }
}

/// Directory of run logs: `<root>/<workflow_id>/{timeline.jsonl, result.json, pw.in, work/}`.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, workflow_id: &str) -> PathBuf {
        self.root.join(workflow_id)
    }

    /// Scratch directory for the runner, kept apart from the persisted
    /// `pw.in` so a failed run leaves none.
    pub fn work_dir(&self, workflow_id: &str) -> PathBuf {
        self.run_dir(workflow_id).join("work")
    }

    pub fn append_event(&self, workflow_id: &str, event: &TimelineEvent) -> Result<(), StoreError> {
        let dir = self.run_dir(workflow_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join("timeline.jsonl");
        let mut line = serde_json::to_string(event).map_err(|source| StoreError::Json {
            path: path.clone(),
            source,
        })?;
        line.push('\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(io_err(&path))
    }

    /// Writes `result.json`, and `pw.in` for successful runs.
    pub fn write_result(&self, run: &WorkflowRun) -> Result<ResultDocument, StoreError> {
        let dir = self.run_dir(&run.workflow_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let doc = ResultDocument::from_run(run);
        let path = dir.join("result.json");
        let text = serde_json::to_string_pretty(&doc).map_err(|source| StoreError::Json {
            path: path.clone(),
            source,
        })?;
        fs::write(&path, text).map_err(io_err(&path))?;
        if doc.status == RunStatus::Success {
            let path = dir.join("pw.in");
            fs::write(&path, &run.current_protocol).map_err(io_err(&path))?;
        }
        Ok(doc)
    }

    pub fn load_result(&self, workflow_id: &str) -> Result<ResultDocument, StoreError> {
        let path = self.run_dir(workflow_id).join("result.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|source| StoreError::Json { path, source })
    }

    pub fn load_input(&self, workflow_id: &str) -> Option<String> {
        fs::read_to_string(self.run_dir(workflow_id).join("pw.in")).ok()
    }

    pub fn load_timeline(&self, workflow_id: &str) -> Result<Vec<TimelineEvent>, StoreError> {
        let path = self.run_dir(workflow_id).join("timeline.jsonl");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|source| StoreError::Json {
                    path: path.clone(),
                    source,
                })
            })
            .collect()
    }

    /// Every `result.json` one level below the root, with the number of
    /// unreadable ones.
    pub fn load_all_results(&self) -> Result<(Vec<ResultDocument>, usize), StoreError> {
        let mut docs = Vec::new();
        let mut skipped = 0;
        let mut dirs: Vec<PathBuf> = fs::read_dir(&self.root)
            .map_err(io_err(&self.root))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("result.json").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let parsed = fs::read_to_string(dir.join("result.json"))
                .ok()
                .and_then(|t| serde_json::from_str(&t).ok());
            match parsed {
                Some(d) => docs.push(d),
                None => skipped += 1,
            }
        }
        Ok((docs, skipped))
    }
}

impl RunObserver for RunStore {
    fn on_event(&self, snapshot: &RunSnapshot, event: &TimelineEvent) {
        if let Err(e) = self.append_event(&snapshot.workflow_id, event) {
            log::warn!("timeline not persisted: {e}");
        }
    }

    fn on_finish(&self, run: &WorkflowRun) {
        if let Err(e) = self.write_result(run) {
            log::warn!("result not persisted: {e}");
        }
    }
}
