//! Which LLM provider, structure source and runner a run gets.

use std::sync::Arc;
use std::time::Duration;

use genius_core::aeh::Backends;
use genius_core::kg::KnowledgeGraph;
use genius_core::llm::http::{api_key, api_key_var, HttpProvider};
use genius_core::llm::scripted::ScriptedProvider;
use genius_core::llm::{ChatProvider, Gateway};
use genius_core::materials::{FixtureStore, OptimadeBackend, StructureBackend};
use genius_core::runner::{fail_first, ExternalConfig, ExternalRunner, FaultStep, Runner, SimulatedRunner};
use genius_core::scenario::find_scenario;
use thiserror::Error;

use crate::payload::{FieldError, WorkflowPayload, SCRIPTED_PROVIDER};

pub const DEFAULT_LLM_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, PartialEq)]
pub enum BackendMode {
    /// Offline: structure fixtures and a simulated runner.
    Simulated,
    /// Materials Cloud over OPTIMADE and a real `pw.x`.
    Live { runner: ExternalConfig },
}

#[derive(Debug, Error)]
pub enum SetupError {
    #[error("no API key for provider `{provider}` (set {var})")]
    MissingKey { provider: String, var: String },
    #[error("invalid payload")]
    Invalid(Vec<FieldError>),
    #[error("backend setup: {0}")]
    Backend(String),
}

#[derive(Clone)]
pub struct Engine {
    pub graph: Arc<KnowledgeGraph>,
    pub mode: BackendMode,
    pub llm_base_url: String,
    /// Delay before the first transport retry.
    pub backoff: Duration,
    /// Replaces the mode's runner for every run, e.g. a test double.
    pub runner: Option<Arc<dyn Runner>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("mode", &self.mode)
            .field("llm_base_url", &self.llm_base_url)
            .field("runner_override", &self.runner.is_some())
            .finish()
    }
}

impl Engine {
    pub fn simulated(graph: Arc<KnowledgeGraph>) -> Self {
        Engine {
            graph,
            mode: BackendMode::Simulated,
            llm_base_url: DEFAULT_LLM_BASE_URL.to_string(),
            backoff: Duration::ZERO,
            runner: None,
        }
    }

    fn fault_script(&self, payload: &WorkflowPayload) -> Result<Vec<FaultStep>, SetupError> {
        let cfg = &payload.project_config;
        if let Some(name) = &cfg.scenario {
            return find_scenario(name).map(|s| s.fault_script()).ok_or_else(|| {
                SetupError::Invalid(vec![FieldError {
                    field: "project_config.scenario".into(),
                    message: format!("no scenario named `{name}`"),
                }])
            });
        }
        Ok(fail_first(cfg.fail_first.unwrap_or(0)))
    }

    /// Everything a run for `payload` needs. Fails without touching the
    /// network when a live provider has no key.
    pub fn backends_for(&self, payload: &WorkflowPayload) -> Result<Backends, SetupError> {
        let provider: Arc<dyn ChatProvider> = if payload.target_api == SCRIPTED_PROVIDER {
            Arc::new(ScriptedProvider::default_catalog())
        } else {
            if api_key(&payload.target_api).is_none() {
                return Err(SetupError::MissingKey {
                    provider: payload.target_api.clone(),
                    var: api_key_var(&payload.target_api),
                });
            }
            Arc::new(
                HttpProvider::new(&self.llm_base_url, Duration::from_secs(120))
                    .map_err(|e| SetupError::Backend(e.to_string()))?,
            )
        };
        let (materials, runner): (Arc<dyn StructureBackend>, Arc<dyn Runner>) = match &self.mode {
            BackendMode::Simulated => (
                Arc::new(FixtureStore::shipped()),
                Arc::new(SimulatedRunner::new(self.fault_script(payload)?, self.graph.clone())),
            ),
            BackendMode::Live { runner } => {
                if payload.project_config.fail_first.is_some() || payload.project_config.scenario.is_some() {
                    return Err(SetupError::Invalid(vec![FieldError {
                        field: "project_config".into(),
                        message: "fault scripts need the simulated backend".into(),
                    }]));
                }
                let optimade = OptimadeBackend::materials_cloud().map_err(|e| SetupError::Backend(e.to_string()))?;
                (Arc::new(optimade), Arc::new(ExternalRunner { config: runner.clone() }))
            }
        };
        Ok(Backends {
            graph: self.graph.clone(),
            gateway: Gateway::new(provider).with_backoff(self.backoff),
            materials,
            runner: self.runner.clone().unwrap_or(runner),
        })
    }
}
