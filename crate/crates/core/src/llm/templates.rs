//! Shipped prompt templates.
//!
//! Extraction templates pin an explicit schema and few-shot examples and
//! expect a single JSON object back. Generation templates lay out the
//! current context first and ask the model to reason forward from it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    InterfaceParse,
    ConditionExtract,
    ParameterEvaluate,
    ProtocolGenerate,
    ErrorKeywords,
    ErrorCorrect,
    ComplexityScore,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::InterfaceParse,
        TemplateId::ConditionExtract,
        TemplateId::ParameterEvaluate,
        TemplateId::ProtocolGenerate,
        TemplateId::ErrorKeywords,
        TemplateId::ErrorCorrect,
        TemplateId::ComplexityScore,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::InterfaceParse => "interface_parse",
            TemplateId::ConditionExtract => "condition_extract",
            TemplateId::ParameterEvaluate => "parameter_evaluate",
            TemplateId::ProtocolGenerate => "protocol_generate",
            TemplateId::ErrorKeywords => "error_keywords",
            TemplateId::ErrorCorrect => "error_correct",
            TemplateId::ComplexityScore => "complexity_score",
        }
    }

    pub fn strategy(self) -> PromptStrategy {
        match self {
            TemplateId::ProtocolGenerate | TemplateId::ErrorCorrect => PromptStrategy::ContextualScaffolding,
            _ => PromptStrategy::StructuredExtraction,
        }
    }

    /// Sampling temperature used when the caller does not override it.
    pub fn default_temperature(self) -> f64 {
        match self.strategy() {
            PromptStrategy::StructuredExtraction => 0.0,
            PromptStrategy::ContextualScaffolding => 0.7,
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| TemplateError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStrategy {
    ContextualScaffolding,
    StructuredExtraction,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template `{template}` has unbound placeholder `{placeholder}`")]
    Unbound { template: String, placeholder: String },
    #[error("template `{template}` has no placeholder named `{binding}`")]
    UnexpectedBinding { template: String, binding: String },
}

pub type Bindings = BTreeMap<String, String>;

/// Builds a binding map from `(name, value)` pairs.
pub fn bindings<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Bindings {
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template_id: TemplateId,
    pub bindings: Bindings,
    pub system: String,
    pub user: String,
}

struct Template {
    system: &'static str,
    user: &'static str,
}

fn template(id: TemplateId) -> Template {
    match id {
        TemplateId::InterfaceParse => Template {
            system: INTERFACE_PARSE_SYSTEM,
            user: "Calculation request:\n{{prompt}}\n\nReturn the JSON object now.",
        },
        TemplateId::ConditionExtract => Template {
            system: CONDITION_EXTRACT_SYSTEM,
            user: "Known condition keys by category:\n{{categories}}\n\nCalculation request:\n{{prompt}}\n\nReturn the JSON object now.",
        },
        TemplateId::ParameterEvaluate => Template {
            system: PARAMETER_EVALUATE_SYSTEM,
            user: "Calculation request:\n{{prompt}}\n\nActive conditions: {{conditions}}\n\nParameter: {{node_name}}\nData type: {{data_type}}\nDefault: {{default_value}}\nAllowed values: {{allowed_values}}\nDocumentation: {{description}}\n\nReturn the JSON object now.",
        },
        TemplateId::ProtocolGenerate => Template {
            system: PROTOCOL_GENERATE_SYSTEM,
            user: "## Calculation request\n{{prompt}}\n\n## Draft input from the recommendation system\n```\n{{draft}}\n```\n\nFirst explain what the draft already establishes, then produce the final pw.x input in one fenced code block.",
        },
        TemplateId::ErrorKeywords => Template {
            system: ERROR_KEYWORDS_SYSTEM,
            user: "CRASH message:\n{{error}}\n\nReturn the JSON object now.",
        },
        TemplateId::ErrorCorrect => Template {
            system: ERROR_CORRECT_SYSTEM,
            user: "## Error message\n{{error}}\n\n## Relevant documentation\n{{docs}}\n\n## Latest protocol\n```\n{{protocol}}\n```\n\n## Original calculation request\n{{prompt}}\n\nExplain the cause of the error in the context above, then give the corrected pw.x input in one fenced code block.",
        },
        TemplateId::ComplexityScore => Template {
            system: COMPLEXITY_SCORE_SYSTEM,
            user: "Calculation request:\n{{prompt}}\n\nReturn the JSON object now.",
        },
    }
}

const INTERFACE_PARSE_SYSTEM: &str = r#"You extract structured information from density-functional-theory calculation requests for Quantum ESPRESSO pw.x.
Respond with exactly one JSON object with these keys:
  "keywords": list of text, technical terms useful for searching the pw.x documentation
  "material_formula": text, the chemical formula of the material (e.g. "Si", "PdS2")
  "dimensionality": text, "two_d" for monolayers and 2D materials, otherwise "three_d"
  "calculation_kind": text, one of scf, nscf, bands, relax, md, vc-relax, vc-md
Example request: "Compute the band structure of bulk silicon with PBE."
Example answer: {"keywords": ["band structure", "PBE"], "material_formula": "Si", "dimensionality": "three_d", "calculation_kind": "bands"}
Example request: "Relax the atomic positions of monolayer MoS2 with spin polarization."
Example answer: {"keywords": ["relax", "spin polarization", "monolayer"], "material_formula": "MoS2", "dimensionality": "two_d", "calculation_kind": "relax"}"#;

const CONDITION_EXTRACT_SYSTEM: &str = r#"You identify which Quantum ESPRESSO calculation conditions apply to a request.
Conditions belong to nine categories: calculation type, functional and method, cell and material properties, pseudopotential, magnetism and spin, isolated systems, k-point settings, electric field, occupation types.
Include conditions that are stated explicitly and conditions that are implied (an elemental metal, a metal surface or bulk metal implies "Metallic systems").
Use only keys from the provided list.
Respond with exactly one JSON object: {"conditions": list of text}
Example request: "SCF of bulk Cu with PBE"
Example answer: {"conditions": ["Self-consistent field calculation", "Metallic systems", "Bulk crystal"]}"#;

const PARAMETER_EVALUATE_SYSTEM: &str = r#"You decide the value of one Quantum ESPRESSO pw.x input parameter for a calculation request.
If the parameter is not relevant to the request, its value is null and it will be left out of the input.
Respond with exactly one JSON object:
  "value": the value in the parameter's data type, or null
  "rationale": text, one sentence
Example for ecutwfc (REAL): {"value": 45.0, "rationale": "Typical cutoff for PAW pseudopotentials."}
Example for lelfield (LOGICAL) in a plain relaxation: {"value": null, "rationale": "No electric field requested."}"#;

const PROTOCOL_GENERATE_SYSTEM: &str = r#"You are an expert in Quantum ESPRESSO. You write complete, valid pw.x input files.
Keep every namelist and card of the draft unless the request requires a change, keep atomic structure data unchanged, and use only documented pw.x parameters."#;

const ERROR_KEYWORDS_SYSTEM: &str = r#"You read Quantum ESPRESSO CRASH messages and name the input parameters and concepts involved.
Respond with exactly one JSON object: {"keywords": list of text}
Example message: "from cell_base_init : error # 2 / ibrav=0: must read cell parameters"
Example answer: {"keywords": ["ibrav", "CELL_PARAMETERS", "cell_base_init"]}"#;

const ERROR_CORRECT_SYSTEM: &str = r#"You are an expert in Quantum ESPRESSO fixing a pw.x input that failed.
You are given the error message, documentation of related parameters, the latest input and the original request.
Reason about the error from that context, then return the whole corrected input file."#;

const COMPLEXITY_SCORE_SYSTEM: &str = r#"You score the complexity of a DFT calculation request. For each of the ten features say whether it is present.
Features:
  named_material: a specific material or formula is named
  named_functional: an exchange-correlation functional is named
  kpoint_spec: a k-point mesh or sampling is specified
  spin_magnetism: spin polarization or magnetism is requested
  dimensionality: the dimensionality (2D, bulk, slab, molecule) is stated
  convergence_criteria: convergence thresholds or cutoffs are given
  cell_detail: space group, lattice or cell details are given
  multiple_tasks: more than one calculation task is requested
  units_given: numerical values carry physical units
  method_constraints: method constraints are given (smearing, DFT+U, dispersion, pseudopotential family)
Respond with exactly one JSON object with the ten feature names as keys and true/false values."#;

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([a-z_]+)\}\}").expect("valid regex"))
}

/// Placeholder names used by a template.
pub fn placeholders(id: TemplateId) -> BTreeSet<String> {
    let t = template(id);
    placeholder_re()
        .captures_iter(t.system)
        .chain(placeholder_re().captures_iter(t.user))
        .map(|c| c[1].to_string())
        .collect()
}

fn substitute(id: TemplateId, text: &str, bindings: &Bindings) -> Result<String, TemplateError> {
    let mut missing = None;
    let out = placeholder_re().replace_all(text, |caps: &regex::Captures<'_>| {
        match bindings.get(&caps[1]) {
            Some(v) => v.clone(),
            None => {
                missing.get_or_insert_with(|| caps[1].to_string());
                String::new()
            }
        }
    });
    match missing {
        Some(placeholder) => Err(TemplateError::Unbound {
            template: id.to_string(),
            placeholder,
        }),
        None => Ok(out.into_owned()),
    }
}

pub fn render(id: TemplateId, bindings: &Bindings) -> Result<RenderedPrompt, TemplateError> {
    let names = placeholders(id);
    if let Some(extra) = bindings.keys().find(|k| !names.contains(*k)) {
        return Err(TemplateError::UnexpectedBinding {
            template: id.to_string(),
            binding: extra.clone(),
        });
    }
    let t = template(id);
    Ok(RenderedPrompt {
        template_id: id,
        bindings: bindings.clone(),
        system: substitute(id, t.system, bindings)?,
        user: substitute(id, t.user, bindings)?,
    })
}

/// Renders a template addressed by its string id.
pub fn render_prompt(template_id: &str, bindings: &Bindings) -> Result<RenderedPrompt, TemplateError> {
    render(template_id.parse()?, bindings)
}
