//! Workflow state machine with automated error handling.
//!
//! [`step`] is the pure transition function; [`run_workflow`] drives it
//! against real backends and records a timeline.

mod engine;
mod store;

pub use engine::{correction_context, new_workflow_id, run_workflow, Backends, RoleModels, RunObserver, RunOptions, RunSnapshot};
pub use store::{ResultDocument, RunStatus, RunStore, StoreError};

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interface::{ComplexityScore, ParsedRequest, ProtocolTemplate};
use crate::llm::{ModelHierarchy, ModelRef};
use crate::materials::Structure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorkflowState {
    Entry,
    InitializeWorkflow,
    MaterialsDb,
    DocumentCollection,
    ConditionExtraction,
    RetrieveCandidateParameters,
    EvaluateParameters,
    PrepareInputTemplate,
    QeInputGeneration,
    QeRun,
    FailureDetected,
    CheckRetries,
    AttemptCorrection,
    SwitchModel,
    Finished,
    Failure,
}

impl WorkflowState {
    pub const ALL: [WorkflowState; 16] = [
        WorkflowState::Entry,
        WorkflowState::InitializeWorkflow,
        WorkflowState::MaterialsDb,
        WorkflowState::DocumentCollection,
        WorkflowState::ConditionExtraction,
        WorkflowState::RetrieveCandidateParameters,
        WorkflowState::EvaluateParameters,
        WorkflowState::PrepareInputTemplate,
        WorkflowState::QeInputGeneration,
        WorkflowState::QeRun,
        WorkflowState::FailureDetected,
        WorkflowState::CheckRetries,
        WorkflowState::AttemptCorrection,
        WorkflowState::SwitchModel,
        WorkflowState::Finished,
        WorkflowState::Failure,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, WorkflowState::Finished | WorkflowState::Failure)
    }
}

impl fmt::Display for WorkflowState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(&format!("{self:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EventStatus {
    Pending,
    Success,
    Retry,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub timestamp: DateTime<Utc>,
    pub state: WorkflowState,
    pub status: EventStatus,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_ref: Option<ModelRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

/// What happened in the current state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trigger {
    /// The state's work finished; decision states use it to move on.
    Completed,
    RunSucceeded,
    RunFailed,
    /// Unrecoverable error or abort; valid from any live state.
    Fatal(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protocol violation: {trigger:?} is not valid in state {state}")]
pub struct ProtocolViolation {
    pub state: WorkflowState,
    pub trigger: Trigger,
}

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("model hierarchy is empty")]
    EmptyHierarchy,
    #[error(transparent)]
    Protocol(#[from] ProtocolViolation),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowRun {
    pub workflow_id: String,
    pub prompt: String,
    pub hierarchy: ModelHierarchy,
    pub request: Option<ParsedRequest>,
    pub structure: Option<Structure>,
    /// Cached recommendation; a model switch restarts from here.
    pub template: Option<ProtocolTemplate>,
    pub complexity: Option<ComplexityScore>,
    pub current_protocol: String,
    pub last_crash: Option<String>,
    pub state: WorkflowState,
    pub model_index: usize,
    pub attempts_for_current_model: u32,
    pub total_attempts: u32,
    pub timeline: Vec<TimelineEvent>,
    pub outcome: Option<Outcome>,
    pub failure_reason: Option<String>,
}

impl WorkflowRun {
    pub fn new(workflow_id: impl Into<String>, prompt: impl Into<String>, hierarchy: ModelHierarchy) -> Self {
        WorkflowRun {
            workflow_id: workflow_id.into(),
            prompt: prompt.into(),
            hierarchy,
            request: None,
            structure: None,
            template: None,
            complexity: None,
            current_protocol: String::new(),
            last_crash: None,
            state: WorkflowState::Entry,
            model_index: 0,
            attempts_for_current_model: 0,
            total_attempts: 0,
            timeline: Vec::new(),
            outcome: None,
            failure_reason: None,
        }
    }

    pub fn current_model(&self) -> &ModelRef {
        &self.hierarchy.models[self.model_index]
    }

    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal()
    }
}

fn linear_next(state: WorkflowState) -> Option<WorkflowState> {
    use WorkflowState::*;
    Some(match state {
        Entry => InitializeWorkflow,
        InitializeWorkflow => MaterialsDb,
        MaterialsDb => DocumentCollection,
        DocumentCollection => ConditionExtraction,
        ConditionExtraction => RetrieveCandidateParameters,
        RetrieveCandidateParameters => EvaluateParameters,
        EvaluateParameters => PrepareInputTemplate,
        PrepareInputTemplate => QeInputGeneration,
        QeInputGeneration => QeRun,
        FailureDetected => CheckRetries,
        AttemptCorrection => QeRun,
        _ => return None,
    })
}

/// One transition. Counters move when a run fails (entering
/// `FailureDetected`) and when a model is switched (entering `SwitchModel`),
/// so `total_attempts = model_index * budget + attempts_for_current_model`
/// holds whenever `CheckRetries` is entered.
pub fn step(mut run: WorkflowRun, trigger: Trigger) -> Result<WorkflowRun, ProtocolViolation> {
    use WorkflowState::*;
    let violation = |state, trigger| Err(ProtocolViolation { state, trigger });
    if run.state.is_terminal() {
        return violation(run.state, trigger);
    }
    match (&trigger, run.state) {
        (Trigger::Fatal(reason), _) => {
            run.failure_reason = Some(reason.clone());
            run.state = Failure;
        }
        (Trigger::RunSucceeded, QeRun) => run.state = Finished,
        (Trigger::RunFailed, QeRun) => {
            run.attempts_for_current_model += 1;
            run.total_attempts += 1;
            run.state = FailureDetected;
        }
        (Trigger::Completed, CheckRetries) => {
            if run.attempts_for_current_model < run.hierarchy.retries_per_model {
                run.state = AttemptCorrection;
            } else if run.model_index + 1 < run.hierarchy.len() {
                run.model_index += 1;
                run.attempts_for_current_model = 0;
                run.state = SwitchModel;
            } else {
                run.failure_reason = Some(format!(
                    "retry budget exhausted after {} attempts across {} models",
                    run.total_attempts,
                    run.hierarchy.len()
                ));
                run.state = Failure;
            }
        }
        (Trigger::Completed, SwitchModel) => {
            run.current_protocol.clear();
            run.last_crash = None;
            run.state = PrepareInputTemplate;
        }
        (Trigger::Completed, s) => match linear_next(s) {
            Some(next) => run.state = next,
            None => return violation(s, trigger),
        },
        (_, s) => return violation(s, trigger),
    }
    run.outcome = match run.state {
        Finished => Some(Outcome::Success),
        Failure => Some(Outcome::Failure),
        _ => None,
    };
    Ok(run)
}
