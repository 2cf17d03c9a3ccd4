//! In-memory table of runs, fed by engine observers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use genius_core::aeh::{
    run_workflow, ResultDocument, RunObserver, RunOptions, RunSnapshot, RunStore, TimelineEvent, WorkflowRun,
    WorkflowState,
};
use serde::Serialize;
use tokio::sync::{broadcast, watch};

use crate::backend::{Engine, SetupError};
use crate::payload::WorkflowPayload;

#[derive(Debug, Clone, Serialize)]
pub struct StatusView {
    pub workflow_id: String,
    pub state: WorkflowState,
    pub total_attempts: u32,
    pub model_index: usize,
    pub attempts_for_current_model: u32,
    pub done: bool,
}

/// One event on the all-runs feed.
#[derive(Debug, Clone)]
pub struct FeedItem {
    pub workflow_id: String,
    pub index: usize,
    pub event: TimelineEvent,
}

#[derive(Debug)]
struct EntryState {
    snapshot: RunSnapshot,
    timeline: Vec<TimelineEvent>,
    result: Option<ResultDocument>,
    input: Option<String>,
}

#[derive(Debug)]
pub struct RunEntry {
    pub workflow_id: String,
    pub cancel: Arc<AtomicBool>,
    state: Mutex<EntryState>,
    /// Timeline length, bumped after every append.
    changed: watch::Sender<usize>,
    feed: broadcast::Sender<FeedItem>,
}

impl RunEntry {
    fn new(workflow_id: String, cancel: Arc<AtomicBool>, feed: broadcast::Sender<FeedItem>) -> Self {
        RunEntry {
            state: Mutex::new(EntryState {
                snapshot: RunSnapshot {
                    workflow_id: workflow_id.clone(),
                    state: WorkflowState::Entry,
                    model_index: 0,
                    attempts_for_current_model: 0,
                    total_attempts: 0,
                },
                timeline: Vec::new(),
                result: None,
                input: None,
            }),
            workflow_id,
            cancel,
            changed: watch::Sender::new(0),
            feed,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, EntryState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn status(&self) -> StatusView {
        let s = self.lock();
        StatusView {
            workflow_id: self.workflow_id.clone(),
            state: s.snapshot.state,
            total_attempts: s.snapshot.total_attempts,
            model_index: s.snapshot.model_index,
            attempts_for_current_model: s.snapshot.attempts_for_current_model,
            done: s.result.is_some(),
        }
    }

    pub fn timeline(&self) -> Vec<TimelineEvent> {
        self.lock().timeline.clone()
    }

    pub fn event_at(&self, index: usize) -> Option<TimelineEvent> {
        self.lock().timeline.get(index).cloned()
    }

    pub fn result(&self) -> Option<(ResultDocument, Option<String>)> {
        let s = self.lock();
        s.result.clone().map(|r| (r, s.input.clone()))
    }

    pub fn is_done(&self) -> bool {
        self.lock().result.is_some()
    }

    pub fn subscribe(&self) -> watch::Receiver<usize> {
        self.changed.subscribe()
    }

    /// Used when the engine itself errors before finishing the run.
    fn force_failure(&self, reason: &str) {
        let mut s = self.lock();
        s.snapshot.state = WorkflowState::Failure;
        s.result = Some(ResultDocument {
            status: genius_core::aeh::RunStatus::Failure,
            total_attempts: s.snapshot.total_attempts,
            model_switches: s.snapshot.model_index as u32,
            complexity_label: genius_core::interface::ComplexityLabel::Standard,
            workflow_id: Some(self.workflow_id.clone()),
            failure_reason: Some(reason.to_string()),
        });
        drop(s);
        self.changed.send_modify(|_| {});
    }
}

impl RunObserver for RunEntry {
    fn on_event(&self, snapshot: &RunSnapshot, event: &TimelineEvent) {
        let index = {
            let mut s = self.lock();
            s.snapshot = snapshot.clone();
            s.timeline.push(event.clone());
            s.timeline.len() - 1
        };
        self.changed.send_replace(index + 1);
        // nobody listening is fine
        let _ = self.feed.send(FeedItem {
            workflow_id: self.workflow_id.clone(),
            index,
            event: event.clone(),
        });
    }

    fn on_finish(&self, run: &WorkflowRun) {
        {
            let mut s = self.lock();
            let doc = ResultDocument::from_run(run);
            s.input = (doc.status == genius_core::aeh::RunStatus::Success).then(|| run.current_protocol.clone());
            s.result = Some(doc);
        }
        self.changed.send_modify(|_| {});
    }
}

#[derive(Debug)]
pub struct Registry {
    pub engine: Engine,
    pub store: RunStore,
    runs: RwLock<HashMap<String, Arc<RunEntry>>>,
    feed: broadcast::Sender<FeedItem>,
}

impl Registry {
    pub fn new(engine: Engine, store: RunStore) -> Self {
        Registry {
            engine,
            store,
            runs: RwLock::new(HashMap::new()),
            feed: broadcast::Sender::new(4096),
        }
    }

    pub fn get(&self, workflow_id: &str) -> Option<Arc<RunEntry>> {
        self.runs.read().unwrap_or_else(|p| p.into_inner()).get(workflow_id).cloned()
    }

    pub fn subscribe_all(&self) -> broadcast::Receiver<FeedItem> {
        self.feed.subscribe()
    }

    /// Starts a run on the blocking pool and returns its entry.
    pub fn submit(&self, payload: &WorkflowPayload) -> Result<Arc<RunEntry>, SetupError> {
        let backends = self.engine.backends_for(payload)?;
        let mut options = RunOptions::new(payload.roles());
        let entry = Arc::new(RunEntry::new(options.workflow_id.clone(), options.cancel.clone(), self.feed.clone()));
        options.workdir = Some(self.store.work_dir(&options.workflow_id));
        options.observers = vec![Arc::new(self.store.clone()), entry.clone()];
        self.runs
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(entry.workflow_id.clone(), entry.clone());
        let prompt = payload.calculation_prompt.clone();
        let hierarchy = payload.hierarchy();
        let handle = entry.clone();
        tokio::task::spawn_blocking(move || {
            if let Err(e) = run_workflow(&prompt, &hierarchy, &backends, options) {
                log::error!("run {} stopped: {e}", handle.workflow_id);
                handle.force_failure(&e.to_string());
            }
        });
        Ok(entry)
    }

    /// Sets the abort flag. `None` for an unknown id, otherwise whether the
    /// run was still live.
    pub fn abort(&self, workflow_id: &str) -> Option<bool> {
        let entry = self.get(workflow_id)?;
        let live = !entry.is_done();
        if live {
            entry.cancel.store(true, Ordering::SeqCst);
        }
        Some(live)
    }
}
