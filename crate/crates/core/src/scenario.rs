//! Scripted end-to-end scenarios: a prompt, how many times the simulated
//! runner fails, and the expected terminal counters.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aeh::{Backends, RunStatus};
use crate::kg::KnowledgeGraph;
use crate::llm::scripted::ScriptedProvider;
use crate::llm::Gateway;
use crate::materials::FixtureStore;
use crate::runner::{qe_crash_text, FaultOutcome, FaultStep, SimulatedRunner};

pub const SHIPPED_SCENARIOS: &str = include_str!("../data/scenarios.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashSpec {
    pub routine: String,
    pub code: i32,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub status: RunStatus,
    pub total_attempts: u32,
    pub model_switches: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub prompt: String,
    pub fail_first: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crash: Option<CrashSpec>,
    pub expect: Expectation,
}

impl Scenario {
    pub fn fault_script(&self) -> Vec<FaultStep> {
        let crash_text = self
            .crash
            .as_ref()
            .map(|c| qe_crash_text(&c.routine, c.code, &c.message))
            .unwrap_or_default();
        (1..=self.fail_first)
            .map(|on_call| FaultStep {
                on_call,
                outcome: FaultOutcome::Fail,
                crash_text: crash_text.clone(),
            })
            .collect()
    }
}

pub fn shipped_scenarios() -> Vec<Scenario> {
    serde_json::from_str(SHIPPED_SCENARIOS).expect("shipped scenarios parse")
}

pub fn find_scenario(name: &str) -> Option<Scenario> {
    shipped_scenarios().into_iter().find(|s| s.name == name)
}

/// Offline backends: the shipped catalog, shipped fixtures and a simulated
/// runner with the given fault script. Gateway backoff is zero.
pub fn scripted_backends(graph: Arc<KnowledgeGraph>, script: Vec<FaultStep>) -> Backends {
    Backends {
        gateway: Gateway::new(Arc::new(ScriptedProvider::default_catalog())).with_backoff(std::time::Duration::ZERO),
        materials: Arc::new(FixtureStore::shipped()),
        runner: Arc::new(SimulatedRunner::new(script, graph.clone())),
        graph,
    }
}
