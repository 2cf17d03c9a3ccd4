use std::sync::Arc;

use genius_core::aeh::{run_workflow, EventStatus, RoleModels, RunOptions, RunStatus, WorkflowState};
use genius_core::kg::KnowledgeGraph;
use genius_core::llm::ModelHierarchy;
use genius_core::protocol::{parse_input, validate_static};
use genius_core::scenario::{scripted_backends, shipped_scenarios};

#[test]
fn every_scenario_meets_its_expectation() {
    let graph = Arc::new(KnowledgeGraph::shipped());
    let hierarchy = ModelHierarchy::scripted_default();
    for sc in shipped_scenarios() {
        let backends = scripted_backends(graph.clone(), sc.fault_script());
        let run = run_workflow(&sc.prompt, &hierarchy, &backends, RunOptions::new(RoleModels::scripted())).unwrap();
        let status = if run.state == WorkflowState::Finished { RunStatus::Success } else { RunStatus::Failure };
        assert_eq!(status, sc.expect.status, "{}", sc.name);
        assert_eq!(run.total_attempts, sc.expect.total_attempts, "{}", sc.name);
        assert_eq!(run.model_index as u32, sc.expect.model_switches, "{}", sc.name);
        let retries = run.timeline.iter().filter(|e| e.status == EventStatus::Retry).count();
        // a switch consumes a failure without a correction, as does the
        // failure that exhausts the budget
        let exhausted = u32::from(status == RunStatus::Failure && run.total_attempts > 0);
        let corrections = run.total_attempts - run.model_index as u32 - exhausted;
        assert_eq!(retries as u32, corrections, "{}", sc.name);
        if status == RunStatus::Success {
            let doc = parse_input(&run.current_protocol).unwrap();
            assert!(validate_static(&doc, &graph).is_valid(), "{}", sc.name);
        }
    }
}

