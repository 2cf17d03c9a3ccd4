//! `POST /workflow/` body and its validation.

use std::collections::BTreeMap;

use genius_core::llm::{ModelHierarchy, ModelRef, ModelRole, RETRIES_PER_MODEL};
use genius_core::aeh::RoleModels;
use serde::Serialize;
use serde_json::{Map, Value};

pub const SCRIPTED_PROVIDER: &str = "scripted";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

fn err(field: &str, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Knobs read from `project_config`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProjectConfig {
    pub retries_per_model: Option<u32>,
    /// Simulated backend only: the runner fails this many times first.
    pub fail_first: Option<u32>,
    /// Simulated backend only: take the fault script of a shipped scenario.
    pub scenario: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowPayload {
    pub calculation_prompt: String,
    pub gen_model_hierarchy: Vec<String>,
    pub model_config: BTreeMap<String, String>,
    pub interface_agent_kwargs: Map<String, Value>,
    pub target_api: String,
    pub project_config: ProjectConfig,
}

const ROLES: [&str; 3] = ["interface", "scorer", "error_keyworder"];

fn string_list(v: &Value) -> Option<Vec<String>> {
    v.as_array()?.iter().map(|x| x.as_str().map(str::to_string)).collect()
}

fn small_count(obj: &Map<String, Value>, key: &str, min: u64, errors: &mut Vec<FieldError>) -> Option<u32> {
    let v = obj.get(key)?;
    match v.as_u64().filter(|n| *n >= min && *n <= 1000) {
        Some(n) => Some(n as u32),
        None => {
            errors.push(err(&format!("project_config.{key}"), format!("expected an integer in {min}..=1000")));
            None
        }
    }
}

impl WorkflowPayload {
    /// Parses and validates, collecting every field problem.
    pub fn from_json(body: &[u8]) -> Result<Self, Vec<FieldError>> {
        let value: Value = serde_json::from_slice(body).map_err(|e| vec![err("body", format!("invalid JSON: {e}"))])?;
        let Value::Object(obj) = value else {
            return Err(vec![err("body", "expected a JSON object")]);
        };
        let mut errors = Vec::new();

        let prompt = match obj.get("calculation_prompt") {
            None => {
                errors.push(err("calculation_prompt", "required"));
                String::new()
            }
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            Some(Value::String(_)) => {
                errors.push(err("calculation_prompt", "must not be empty"));
                String::new()
            }
            Some(_) => {
                errors.push(err("calculation_prompt", "expected a string"));
                String::new()
            }
        };

        let hierarchy = match obj.get("gen_model_hierarchy").map(string_list) {
            None => {
                errors.push(err("gen_model_hierarchy", "required"));
                vec![]
            }
            Some(None) => {
                errors.push(err("gen_model_hierarchy", "expected a list of model ids"));
                vec![]
            }
            Some(Some(list)) => {
                if list.is_empty() {
                    errors.push(err("gen_model_hierarchy", "must name at least one model"));
                } else if list.iter().any(|m| m.trim().is_empty()) {
                    errors.push(err("gen_model_hierarchy", "model ids must not be empty"));
                }
                list
            }
        };

        let mut model_config = BTreeMap::new();
        match obj.get("model_config") {
            None | Some(Value::Null) => {}
            Some(Value::Object(m)) => {
                for (role, model) in m {
                    match (ROLES.contains(&role.as_str()), model.as_str()) {
                        (false, _) => errors.push(err(
                            &format!("model_config.{role}"),
                            format!("unknown role, expected one of {}", ROLES.join(", ")),
                        )),
                        (true, Some(id)) if !id.trim().is_empty() => {
                            model_config.insert(role.clone(), id.to_string());
                        }
                        (true, _) => errors.push(err(&format!("model_config.{role}"), "expected a model id")),
                    }
                }
            }
            Some(_) => errors.push(err("model_config", "expected an object")),
        }

        let interface_agent_kwargs = match obj.get("interface_agent_kwargs") {
            None | Some(Value::Null) => Map::new(),
            Some(Value::Object(m)) => m.clone(),
            Some(_) => {
                errors.push(err("interface_agent_kwargs", "expected an object"));
                Map::new()
            }
        };

        let target_api = match obj.get("target_api") {
            None | Some(Value::Null) => SCRIPTED_PROVIDER.to_string(),
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            Some(_) => {
                errors.push(err("target_api", "expected a provider id"));
                String::new()
            }
        };

        let mut project_config = ProjectConfig::default();
        match obj.get("project_config") {
            None | Some(Value::Null) => {}
            Some(Value::Object(m)) => {
                project_config.retries_per_model = small_count(m, "retries_per_model", 1, &mut errors);
                project_config.fail_first = small_count(m, "fail_first", 0, &mut errors);
                match m.get("scenario") {
                    None => {}
                    Some(Value::String(s)) => project_config.scenario = Some(s.clone()),
                    Some(_) => errors.push(err("project_config.scenario", "expected a scenario name")),
                }
            }
            Some(_) => errors.push(err("project_config", "expected an object")),
        }

        if errors.is_empty() {
            Ok(WorkflowPayload {
                calculation_prompt: prompt,
                gen_model_hierarchy: hierarchy,
                model_config,
                interface_agent_kwargs,
                target_api,
                project_config,
            })
        } else {
            Err(errors)
        }
    }

    /// Models in order; with more than one, the last is the referee.
    pub fn hierarchy(&self) -> ModelHierarchy {
        let n = self.gen_model_hierarchy.len();
        let models = self
            .gen_model_hierarchy
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let role = if n > 1 && i == n - 1 { ModelRole::Referee } else { ModelRole::Worker };
                ModelRef::new(&self.target_api, id, role)
            })
            .collect();
        let mut h = ModelHierarchy::new(models);
        h.retries_per_model = self.project_config.retries_per_model.unwrap_or(RETRIES_PER_MODEL);
        h
    }

    /// Role models from `model_config`; unset roles use the first model of
    /// the hierarchy, or the scripted interface model.
    pub fn roles(&self) -> RoleModels {
        let fallback = if self.target_api == SCRIPTED_PROVIDER {
            "interface".to_string()
        } else {
            self.gen_model_hierarchy[0].clone()
        };
        let pick = |role: &str, as_role: ModelRole| {
            let id = self.model_config.get(role).cloned().unwrap_or_else(|| fallback.clone());
            ModelRef::new(&self.target_api, id, as_role)
        };
        RoleModels {
            interface: pick("interface", ModelRole::Interface),
            scorer: pick("scorer", ModelRole::Scorer),
            error_keyworder: pick("error_keyworder", ModelRole::ErrorKeyworder),
        }
    }
}
