//! Deterministic provider that answers from a response catalog.
//!
//! Catalog keys are tried in this order:
//!
//! 1. `template_id:<hash>` where `<hash>` is [`bindings_hash`] of the request
//! 2. `template_id/<selector>`, first entry in file order whose selector
//!    matches. A selector is one or more `&`-joined terms, each either
//!    `binding~substring` (contains) or `binding=value` (equals).
//! 3. `template_id`
//! 4. `*`
//!
//! Responses may reference request bindings as `{{name}}`; those are
//! substituted before the response is returned.

use std::sync::{Mutex, OnceLock};

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Bindings, ChatProvider, ModelRef, PromptRequest, ProviderError, TemplateId};
use crate::retrieval::fnv1a64;

pub const DEFAULT_CATALOG: &str = include_str!("../../data/scripted_catalog.json");

/// Stable 16-hex digest of a binding map.
pub fn bindings_hash(b: &Bindings) -> String {
    let mut buf = String::new();
    for (k, v) in b {
        buf.push_str(k);
        buf.push('\u{1f}');
        buf.push_str(v);
        buf.push('\u{1e}');
    }
    format!("{:016x}", fnv1a64(buf.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCall {
    pub model: ModelRef,
    pub template_id: TemplateId,
    pub bindings: Bindings,
    pub matched_key: String,
}

#[derive(Debug, Default)]
pub struct ScriptedProvider {
    catalog: IndexMap<String, String>,
    calls: Mutex<Vec<ScriptedCall>>,
}

impl ScriptedProvider {
    pub fn new(catalog: IndexMap<String, String>) -> Self {
        ScriptedProvider {
            catalog,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        Ok(ScriptedProvider::new(serde_json::from_str(json)?))
    }

    /// The shipped catalog.
    pub fn default_catalog() -> Self {
        ScriptedProvider::from_json(DEFAULT_CATALOG).expect("shipped catalog parses")
    }

    /// Layers `overrides` on top of this catalog. Overriding entries are
    /// consulted before the existing ones.
    pub fn with_overrides(self, overrides: IndexMap<String, String>) -> Self {
        let mut catalog = overrides;
        for (k, v) in self.catalog {
            catalog.entry(k).or_insert(v);
        }
        ScriptedProvider::new(catalog)
    }

    pub fn calls(&self) -> Vec<ScriptedCall> {
        self.calls.lock().expect("call log").clone()
    }

    fn lookup(&self, template: TemplateId, b: &Bindings) -> Option<(&str, &str)> {
        let t = template.as_str();
        let exact = format!("{t}:{}", bindings_hash(b));
        if let Some((k, v)) = self.catalog.get_key_value(&exact) {
            return Some((k, v));
        }
        let prefix = format!("{t}/");
        for (k, v) in &self.catalog {
            let Some(selector) = k.strip_prefix(&prefix) else {
                continue;
            };
            if selector.split('&').all(|term| term_matches(term, b)) {
                return Some((k, v));
            }
        }
        [t, "*"]
            .into_iter()
            .find_map(|key| self.catalog.get_key_value(key))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

fn term_matches(term: &str, b: &Bindings) -> bool {
    let at = term.find(['~', '=']);
    let Some(at) = at else {
        return false;
    };
    let (name, rest) = term.split_at(at);
    let Some(val) = b.get(name) else {
        return false;
    };
    match rest.as_bytes()[0] {
        b'~' => val.contains(&rest[1..]),
        _ => val == &rest[1..],
    }
}

fn substitute(text: &str, b: &Bindings) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\{\{([a-z_]+)\}\}").expect("valid regex"));
    re.replace_all(text, |c: &regex::Captures<'_>| {
        b.get(&c[1]).cloned().unwrap_or_else(|| c[0].to_string())
    })
    .into_owned()
}

impl ChatProvider for ScriptedProvider {
    fn chat(&self, model: &ModelRef, request: &PromptRequest) -> Result<String, ProviderError> {
        let (key, response) = self
            .lookup(request.template_id, &request.bindings)
            .ok_or_else(|| ProviderError::NoScriptedResponse(request.template_id.to_string()))?;
        let out = substitute(response, &request.bindings);
        self.calls.lock().expect("call log").push(ScriptedCall {
            model: model.clone(),
            template_id: request.template_id,
            bindings: request.bindings.clone(),
            matched_key: key.to_string(),
        });
        Ok(out)
    }
}
