use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use chrono::Utc;
use rand::Rng;

use super::{step, EventStatus, WorkflowError, TimelineEvent, Trigger, WorkflowRun, WorkflowState};
use crate::interface::{evaluate_parameters, extract_conditions, parse_intent, score_complexity, InterfaceError};
use crate::kg::KnowledgeGraph;
use crate::llm::{bindings, extract_code_block, Bindings, Gateway, ModelHierarchy, ModelRef, ModelRole, TemplateId};
use crate::materials::{resolve_structure, StructureBackend};
use crate::protocol::render_input;
use crate::retrieval::{assemble_candidates, keyword_search, CandidateSet};
use crate::runner::{parse_crash, ErrorDescriptor, Runner};

/// Tries the interface parse gets before the run fails.
pub const ENTRY_ATTEMPTS: u32 = 3;

pub struct Backends {
    pub graph: Arc<KnowledgeGraph>,
    pub gateway: Gateway,
    pub materials: Arc<dyn StructureBackend>,
    pub runner: Arc<dyn Runner>,
}

/// Models for the non-generating tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleModels {
    pub interface: ModelRef,
    pub scorer: ModelRef,
    pub error_keyworder: ModelRef,
}

impl RoleModels {
    pub fn uniform(provider_id: &str, model_id: &str) -> Self {
        RoleModels {
            interface: ModelRef::new(provider_id, model_id, ModelRole::Interface),
            scorer: ModelRef::new(provider_id, model_id, ModelRole::Scorer),
            error_keyworder: ModelRef::new(provider_id, model_id, ModelRole::ErrorKeyworder),
        }
    }

    pub fn scripted() -> Self {
        RoleModels::uniform("scripted", "interface")
    }
}

/// Counters visible while a run is in flight.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct RunSnapshot {
    pub workflow_id: String,
    pub state: WorkflowState,
    pub model_index: usize,
    pub attempts_for_current_model: u32,
    pub total_attempts: u32,
}

impl RunSnapshot {
    fn of(run: &WorkflowRun) -> Self {
        RunSnapshot {
            workflow_id: run.workflow_id.clone(),
            state: run.state,
            model_index: run.model_index,
            attempts_for_current_model: run.attempts_for_current_model,
            total_attempts: run.total_attempts,
        }
    }
}

pub trait RunObserver: Send + Sync {
    fn on_event(&self, snapshot: &RunSnapshot, event: &TimelineEvent);
    fn on_finish(&self, _run: &WorkflowRun) {}
}

pub struct RunOptions {
    pub workflow_id: String,
    pub roles: RoleModels,
    /// Where the runner works; `None` keeps everything in memory.
    pub workdir: Option<PathBuf>,
    /// Checked between states.
    pub cancel: Arc<AtomicBool>,
    pub observers: Vec<Arc<dyn RunObserver>>,
}

impl RunOptions {
    pub fn new(roles: RoleModels) -> Self {
        RunOptions {
            workflow_id: new_workflow_id(),
            roles,
            workdir: None,
            cancel: Arc::new(AtomicBool::new(false)),
            observers: Vec::new(),
        }
    }
}

/// 128 random bits as lowercase hex.
pub fn new_workflow_id() -> String {
    format!("{:032x}", rand::thread_rng().gen::<u128>())
}

/// Bindings for the error_correct template: the error, documentation for
/// the nodes the error keywords retrieve, the latest protocol and the
/// user's prompt. Nothing from earlier attempts is included.
pub fn correction_context(run: &WorkflowRun, descriptor: &ErrorDescriptor, graph: &KnowledgeGraph) -> Bindings {
    let error = match &descriptor.routine {
        Some(r) => format!("Error in routine {r}: {}", descriptor.message),
        None => descriptor.message.clone(),
    };
    let docs = keyword_search(graph, &descriptor.keywords)
        .iter()
        .filter_map(|hit| graph.get_node(&hit.node_name))
        .map(|n| format!("{}: {}", n.name, n.description))
        .collect::<Vec<_>>()
        .join("\n");
    bindings([
        ("error", error),
        ("docs", docs),
        ("protocol", run.current_protocol.clone()),
        ("prompt", run.prompt.clone()),
    ])
}

struct Driver<'a> {
    backends: &'a Backends,
    options: &'a RunOptions,
    candidates: Option<CandidateSet>,
    draft: String,
}

impl Driver<'_> {
    fn record(&self, run: &mut WorkflowRun, status: EventStatus, detail: impl Into<String>, model: Option<&ModelRef>) {
        let mut timestamp = Utc::now();
        if let Some(last) = run.timeline.last() {
            timestamp = timestamp.max(last.timestamp);
        }
        let event = TimelineEvent {
            timestamp,
            state: run.state,
            status,
            detail: detail.into(),
            model_ref: model.cloned(),
        };
        let snapshot = RunSnapshot::of(run);
        for o in &self.options.observers {
            o.on_event(&snapshot, &event);
        }
        run.timeline.push(event);
    }

    /// Runs a work state: PENDING, then SUCCESS with the returned detail or
    /// ERROR with the failure.
    fn work(
        &mut self,
        run: &mut WorkflowRun,
        pending: &str,
        model: Option<&ModelRef>,
        f: impl FnOnce(&mut Self, &mut WorkflowRun) -> Result<String, String>,
    ) -> Trigger {
        self.record(run, EventStatus::Pending, pending, model);
        match f(self, run) {
            Ok(detail) => {
                self.record(run, EventStatus::Success, detail, model);
                Trigger::Completed
            }
            Err(reason) => {
                self.record(run, EventStatus::Error, reason.clone(), model);
                Trigger::Fatal(format!("{}: {reason}", run.state))
            }
        }
    }

    fn act(&mut self, run: &mut WorkflowRun) -> Trigger {
        use WorkflowState::*;
        let graph = self.backends.graph.clone();
        let gateway = self.backends.gateway.clone();
        let roles = self.options.roles.clone();
        match run.state {
            Entry => self.work(run, "request received", None, |_, run| Ok(format!("workflow {}", run.workflow_id))),
            InitializeWorkflow => self.initialize(run),
            MaterialsDb => self.work(run, "fetching structure", None, |d, run| {
                let request = run.request.as_ref().expect("set by InitializeWorkflow");
                let s = resolve_structure(request, d.backends.materials.as_ref()).map_err(|e| e.to_string())?;
                let detail = format!("{} from {} ({} atoms)", s.formula, s.source, s.nat());
                run.structure = Some(s);
                Ok(detail)
            }),
            DocumentCollection => self.work(run, "collecting documentation", None, |_, run| {
                let request = run.request.as_ref().expect("set by InitializeWorkflow");
                let hits = keyword_search(&graph, &request.keywords);
                Ok(format!("{} documents for {} keywords", hits.len(), request.keywords.len()))
            }),
            ConditionExtraction => self.work(run, "extracting conditions", Some(&roles.interface), |_, run| {
                let request = run.request.as_mut().expect("set by InitializeWorkflow");
                extract_conditions(request, &gateway, &roles.interface, &graph).map_err(|e| e.to_string())?;
                Ok(format!("conditions: {}", request.condition_names().join("; ")))
            }),
            RetrieveCandidateParameters => self.work(run, "retrieving candidates", None, |d, run| {
                let request = run.request.as_ref().expect("set by InitializeWorkflow");
                let names: Vec<&str> = request.condition_names();
                let keywords: Vec<&str> = request.keywords.iter().map(String::as_str).collect();
                let c = assemble_candidates(&graph, &keywords, &names).map_err(|e| e.to_string())?;
                let detail = format!("{} candidate parameters", c.final_nodes.len());
                d.candidates = Some(c);
                Ok(detail)
            }),
            EvaluateParameters => self.work(run, "evaluating parameters", Some(&roles.interface), |d, run| {
                let request = run.request.as_ref().expect("set by InitializeWorkflow");
                let candidates = d.candidates.as_ref().expect("set by RetrieveCandidateParameters");
                let t = evaluate_parameters(candidates, request, &graph, &gateway, &roles.interface)
                    .map_err(|e| e.to_string())?;
                let detail = format!("{} parameters set", t.parameters.len());
                run.template = Some(t);
                Ok(detail)
            }),
            PrepareInputTemplate => {
                let model = run.current_model().clone();
                self.work(run, "rendering recommendation", Some(&model), |d, run| {
                    let t = run.template.as_ref().expect("set by EvaluateParameters");
                    let s = run.structure.as_ref().expect("set by MaterialsDb");
                    d.draft = render_input(t, s).map_err(|e| e.to_string())?;
                    Ok(format!("draft of {} lines", d.draft.lines().count()))
                })
            }
            QeInputGeneration => {
                let model = run.current_model().clone();
                self.work(run, "generating input", Some(&model), |d, run| {
                    let reply = gateway
                        .prompt(
                            &model,
                            TemplateId::ProtocolGenerate,
                            &bindings([("prompt", run.prompt.as_str()), ("draft", d.draft.as_str())]),
                        )
                        .map_err(|e| e.to_string())?;
                    run.current_protocol = clean_protocol(&reply);
                    Ok(format!("{} lines", run.current_protocol.lines().count()))
                })
            }
            QeRun => {
                let model = run.current_model().clone();
                self.record(run, EventStatus::Pending, "running pw.x", Some(&model));
                let workdir = self.options.workdir.as_deref();
                match self.backends.runner.execute(&run.current_protocol, workdir) {
                    Ok(out) if out.is_success() => {
                        self.record(run, EventStatus::Success, format!("completed in {:.2}s", out.duration), Some(&model));
                        Trigger::RunSucceeded
                    }
                    Ok(out) => {
                        let crash = out
                            .crash_text
                            .unwrap_or_else(|| format!("exit code {} without CRASH file\n{}", out.exit_code, out.stdout_tail));
                        let first = crash.lines().find(|l| l.contains("from ") || l.contains("Error")).unwrap_or("crash");
                        self.record(run, EventStatus::Error, format!("exit code {}: {}", out.exit_code, first.trim()), Some(&model));
                        run.last_crash = Some(crash);
                        Trigger::RunFailed
                    }
                    Err(e) => {
                        self.record(run, EventStatus::Error, e.to_string(), Some(&model));
                        Trigger::Fatal(format!("QeRun: {e}"))
                    }
                }
            }
            FailureDetected => {
                let model = run.current_model().clone();
                let detail = format!("attempt {} failed", run.total_attempts);
                self.record(run, EventStatus::Error, detail, Some(&model));
                Trigger::Completed
            }
            CheckRetries => {
                let model = run.current_model().clone();
                let detail = format!(
                    "{}/{} attempts used on {}",
                    run.attempts_for_current_model, run.hierarchy.retries_per_model, model
                );
                self.record(run, EventStatus::Pending, detail, Some(&model));
                Trigger::Completed
            }
            AttemptCorrection => self.correct(run),
            SwitchModel => {
                let model = run.current_model().clone();
                self.record(run, EventStatus::Pending, format!("switching to {model}"), Some(&model));
                Trigger::Completed
            }
            Finished | Failure => unreachable!("terminal states are not acted on"),
        }
    }

    fn initialize(&mut self, run: &mut WorkflowRun) -> Trigger {
        let roles = self.options.roles.clone();
        let gateway = &self.backends.gateway;
        self.record(run, EventStatus::Pending, "parsing request", Some(&roles.interface));
        let complexity = score_complexity(&run.prompt, gateway, &roles.scorer);
        run.complexity = Some(complexity);
        let mut last = String::new();
        for attempt in 1..=ENTRY_ATTEMPTS {
            match parse_intent(&run.prompt, gateway, &roles.interface) {
                Ok(request) => {
                    let detail = format!(
                        "{} ({}), {}; complexity {}",
                        request.material_formula,
                        request.dimensionality,
                        request.calculation_kind,
                        run.complexity.as_ref().map_or("standard", |c| c.label.as_str())
                    );
                    run.request = Some(request);
                    self.record(run, EventStatus::Success, detail, Some(&roles.interface));
                    return Trigger::Completed;
                }
                Err(e) => {
                    last = e.to_string();
                    let retry = attempt < ENTRY_ATTEMPTS && !matches!(e, InterfaceError::EmptyPrompt);
                    self.record(run, EventStatus::Error, format!("parse {attempt}/{ENTRY_ATTEMPTS}: {e}"), Some(&roles.interface));
                    if !retry {
                        break;
                    }
                }
            }
        }
        Trigger::Fatal(format!("InitializeWorkflow: {last}"))
    }

    fn correct(&mut self, run: &mut WorkflowRun) -> Trigger {
        let graph = &self.backends.graph;
        let gateway = &self.backends.gateway;
        let model = run.current_model().clone();
        let crash = run.last_crash.clone().unwrap_or_default();
        let descriptor = parse_crash(&crash, Some((gateway, &self.options.roles.error_keyworder)), graph);
        let context = correction_context(run, &descriptor, graph);
        let detail = format!(
            "correction {}/{} with {model}; keywords: {}",
            run.attempts_for_current_model,
            run.hierarchy.retries_per_model,
            descriptor.keywords.join(", ")
        );
        self.record(run, EventStatus::Retry, detail, Some(&model));
        match gateway.prompt(&model, TemplateId::ErrorCorrect, &context) {
            Ok(reply) => {
                run.current_protocol = clean_protocol(&reply);
                Trigger::Completed
            }
            Err(e) => {
                self.record(run, EventStatus::Error, e.to_string(), Some(&model));
                Trigger::Fatal(format!("AttemptCorrection: {e}"))
            }
        }
    }
}

fn clean_protocol(reply: &str) -> String {
    let mut text = extract_code_block(reply).trim().to_string();
    text.push('\n');
    text
}

/// Drives a run from `Entry` to `Finished` or `Failure`. Only a broken
/// transition table is an `Err`; every workflow failure is an `Ok` run in
/// `Failure`.
pub fn run_workflow(
    prompt: &str,
    hierarchy: &ModelHierarchy,
    backends: &Backends,
    options: RunOptions,
) -> Result<WorkflowRun, WorkflowError> {
    if hierarchy.is_empty() {
        return Err(WorkflowError::EmptyHierarchy);
    }
    let mut run = WorkflowRun::new(options.workflow_id.clone(), prompt, hierarchy.clone());
    let mut driver = Driver {
        backends,
        options: &options,
        candidates: None,
        draft: String::new(),
    };
    while !run.is_terminal() {
        let trigger = if options.cancel.load(Ordering::SeqCst) {
            Trigger::Fatal("aborted by user".into())
        } else {
            driver.act(&mut run)
        };
        run = step(run, trigger)?;
    }
    let status = if run.state == WorkflowState::Finished {
        EventStatus::Success
    } else {
        EventStatus::Error
    };
    let detail = match &run.failure_reason {
        Some(r) if status == EventStatus::Error => r.clone(),
        _ => format!("{} attempts, {} model switches", run.total_attempts, run.model_index),
    };
    let model = run.current_model().clone();
    driver.record(&mut run, status, detail, Some(&model));
    for o in &options.observers {
        o.on_finish(&run);
    }
    Ok(run)
}
