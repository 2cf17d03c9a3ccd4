//! Interface agent: turns the free-text request into a [`ParsedRequest`],
//! evaluates candidate KG parameters into a [`ProtocolTemplate`], and
//! scores prompt complexity.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::kg::{ConditionKey, DataType, KgError, KgNode, KnowledgeGraph};
use crate::llm::{
    bindings, extract_structured, ExpectedKey, ExtractionError, ExtractionSchema, FieldType, Gateway, GatewayError,
    ModelRef, TemplateId,
};
use crate::materials::{is_metal, parse_formula, Dimensionality};
use crate::protocol::{KPoints, Value};
use crate::retrieval::CandidateSet;

pub const CALCULATION_KINDS: [&str; 7] = ["scf", "nscf", "bands", "relax", "md", "vc-relax", "vc-md"];

/// Nodes whose values come from the structure rather than the model.
const STRUCTURE_NODES: [&str; 13] = [
    "ibrav",
    "nat",
    "ntyp",
    "celldm",
    "A",
    "B",
    "C",
    "cosAB",
    "cosAC",
    "cosBC",
    "ATOMIC_SPECIES",
    "ATOMIC_POSITIONS",
    "CELL_PARAMETERS",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedRequest {
    pub raw_prompt: String,
    pub keywords: Vec<String>,
    pub condition_keys: Vec<ConditionKey>,
    pub material_formula: String,
    pub dimensionality: Dimensionality,
    pub calculation_kind: String,
    /// Condition names the model offered that the graph does not know.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub discarded_conditions: Vec<String>,
}

impl ParsedRequest {
    pub fn condition_names(&self) -> Vec<&str> {
        self.condition_keys.iter().map(|c| c.key.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedParameter {
    /// KG node name, with an index suffix for array entries such as
    /// `starting_magnetization(1)`.
    pub node_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub namelist: Option<String>,
    pub data_type: DataType,
    pub value: Option<Value>,
    pub rationale: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTemplate {
    pub parameters: Vec<EvaluatedParameter>,
    pub kpoints: Option<KPoints>,
    pub structure_ref: String,
    pub pseudopotential_hints: BTreeMap<String, String>,
    pub conditions: Vec<String>,
}

impl ProtocolTemplate {
    pub fn get(&self, node_name: &str) -> Option<&EvaluatedParameter> {
        self.parameters.iter().find(|p| p.node_name == node_name)
    }

    pub fn value_of(&self, node_name: &str) -> Option<&Value> {
        self.get(node_name).and_then(|p| p.value.as_ref())
    }
}

#[derive(Debug, Error)]
pub enum InterfaceError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("field `{field}`: {message}")]
    InvalidField { field: &'static str, message: String },
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("required parameter `{0}` has no value and no default")]
    MissingRequired(String),
    #[error("`{node}` could not be evaluated: {source}")]
    Evaluation { node: String, source: ExtractionError },
}

fn schema(name: &str, keys: &[(&str, FieldType)]) -> ExtractionSchema {
    ExtractionSchema::new(
        name,
        keys.iter().map(|(k, t)| ExpectedKey::new(*k, t.clone())).collect(),
    )
}

pub fn parse_dimensionality(text: &str) -> Option<Dimensionality> {
    match text.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
        "two_d" | "2d" | "2_d" | "monolayer" => Some(Dimensionality::TwoD),
        "three_d" | "3d" | "3_d" | "bulk" => Some(Dimensionality::ThreeD),
        _ => None,
    }
}

fn categories_text(graph: &KnowledgeGraph) -> String {
    let mut by_category: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for c in graph.condition_keys() {
        by_category.entry(c.category.as_str()).or_default().push(&c.key);
    }
    by_category
        .into_iter()
        .map(|(cat, keys)| format!("{cat}: {}", keys.join("; ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Extracts keywords, material and calculation kind. Conditions are left
/// empty for [`extract_conditions`].
pub fn parse_intent(prompt: &str, gateway: &Gateway, model: &ModelRef) -> Result<ParsedRequest, InterfaceError> {
    if prompt.trim().is_empty() {
        return Err(InterfaceError::EmptyPrompt);
    }
    let parsed = gateway.extract(
        model,
        TemplateId::InterfaceParse,
        &bindings([("prompt", prompt)]),
        &schema(
            "interface_parse",
            &[
                ("keywords", FieldType::TextList),
                ("material_formula", FieldType::Character),
                ("dimensionality", FieldType::Character),
                ("calculation_kind", FieldType::Character),
            ],
        ),
    )?;
    let formula = parsed.str("material_formula").unwrap_or_default().trim().to_string();
    parse_formula(&formula).map_err(|e| InterfaceError::InvalidField {
        field: "material_formula",
        message: e.to_string(),
    })?;
    let dim_text = parsed.str("dimensionality").unwrap_or_default();
    let dimensionality = parse_dimensionality(dim_text).ok_or_else(|| InterfaceError::InvalidField {
        field: "dimensionality",
        message: format!("`{dim_text}` is neither two_d nor three_d"),
    })?;
    let kind = parsed.str("calculation_kind").unwrap_or_default().trim().to_ascii_lowercase();
    if !CALCULATION_KINDS.contains(&kind.as_str()) {
        return Err(InterfaceError::InvalidField {
            field: "calculation_kind",
            message: format!("`{kind}` is not one of {}", CALCULATION_KINDS.join(", ")),
        });
    }
    Ok(ParsedRequest {
        raw_prompt: prompt.to_string(),
        keywords: parsed.text_list("keywords"),
        condition_keys: Vec::new(),
        material_formula: formula,
        dimensionality,
        calculation_kind: kind,
        discarded_conditions: Vec::new(),
    })
}

fn add_condition(graph: &KnowledgeGraph, name: &str, keys: &mut Vec<ConditionKey>) -> bool {
    let found = graph
        .condition(name)
        .or_else(|| graph.condition_keys().iter().find(|c| c.key.eq_ignore_ascii_case(name)));
    match found {
        Some(c) => {
            if !keys.contains(c) {
                keys.push(c.clone());
            }
            true
        }
        None => false,
    }
}

/// Fills the request's condition keys, explicit and implied. Conditions the
/// graph does not know are set aside; a single-element metal adds
/// "Metallic systems" and a 2D request adds "Two-dimensional materials"
/// when the graph has those keys.
pub fn extract_conditions(
    request: &mut ParsedRequest,
    gateway: &Gateway,
    model: &ModelRef,
    graph: &KnowledgeGraph,
) -> Result<(), InterfaceError> {
    let conditions = gateway.extract(
        model,
        TemplateId::ConditionExtract,
        &bindings([
            ("prompt", request.raw_prompt.clone()),
            ("categories", categories_text(graph)),
        ]),
        &schema("condition_extract", &[("conditions", FieldType::TextList)]),
    )?;
    let mut keys = Vec::new();
    let mut discarded = Vec::new();
    for name in conditions.text_list("conditions") {
        if !add_condition(graph, &name, &mut keys) {
            discarded.push(name);
        }
    }
    let elements = parse_formula(&request.material_formula).unwrap_or_default();
    if elements.len() == 1 && is_metal(&elements[0].0) {
        add_condition(graph, "Metallic systems", &mut keys);
    }
    if request.dimensionality == Dimensionality::TwoD {
        add_condition(graph, "Two-dimensional materials", &mut keys);
    }
    request.condition_keys = keys;
    request.discarded_conditions = discarded;
    Ok(())
}

/// [`parse_intent`] followed by [`extract_conditions`].
pub fn parse_prompt(
    prompt: &str,
    gateway: &Gateway,
    model: &ModelRef,
    graph: &KnowledgeGraph,
) -> Result<ParsedRequest, InterfaceError> {
    let mut request = parse_intent(prompt, gateway, model)?;
    extract_conditions(&mut request, gateway, model, graph)?;
    Ok(request)
}

/// Whether the evaluator is asked about this node at all.
pub fn is_evaluated(node: &KgNode) -> bool {
    !STRUCTURE_NODES.contains(&node.name.as_str()) && (!node.is_card() || node.name == "K_POINTS")
}

enum Evaluated {
    Excluded,
    Scalar(Value),
    Indexed(Vec<(String, Value)>),
    KPoints(KPoints),
}

fn convert(node: &KgNode, v: &Json) -> Option<Evaluated> {
    if v.is_null() {
        return Some(Evaluated::Excluded);
    }
    if node.name == "K_POINTS" {
        let text = match v {
            Json::String(s) => s.clone(),
            Json::Array(items) => items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "),
            _ => return None,
        };
        return KPoints::parse(&text).map(Evaluated::KPoints);
    }
    if let Json::Object(entries) = v {
        let mut out = Vec::new();
        for (idx, item) in entries {
            let idx: u32 = idx.trim().parse().ok().filter(|i| *i > 0)?;
            out.push((format!("{}({idx})", node.name), Value::from_json(item, node.data_type)?));
        }
        return (!out.is_empty()).then_some(Evaluated::Indexed(out));
    }
    Value::from_json(v, node.data_type).map(Evaluated::Scalar)
}

fn evaluate_node(
    node: &KgNode,
    request: &ParsedRequest,
    gateway: &Gateway,
    model: &ModelRef,
) -> Result<(Evaluated, String), InterfaceError> {
    let b = bindings([
        ("prompt", request.raw_prompt.clone()),
        ("conditions", request.condition_names().join("; ")),
        ("node_name", node.name.clone()),
        ("data_type", node.data_type.to_string()),
        ("default_value", node.default_value.clone().unwrap_or_else(|| "none".into())),
        (
            "allowed_values",
            node.allowed_values
                .as_ref()
                .map(|a| a.join(", "))
                .unwrap_or_else(|| "any".into()),
        ),
        ("description", node.description.clone()),
    ]);
    let sch = schema("parameter_evaluate", &[("value", FieldType::Any)]);
    let mut last_err = None;
    // one re-ask on a malformed or mistyped answer
    for _ in 0..2 {
        let reply = gateway.prompt(model, TemplateId::ParameterEvaluate, &b)?;
        match extract_structured(&reply, &sch) {
            Ok(x) => {
                let v = x.get("value").cloned().unwrap_or(Json::Null);
                let rationale = x.str("rationale").unwrap_or_default().to_string();
                match convert(node, &v) {
                    Some(e) => return Ok((e, rationale)),
                    None => {
                        last_err = Some(ExtractionError::TypeMismatch {
                            key: "value".into(),
                            expected: node.data_type.to_string(),
                            found: v.to_string(),
                        })
                    }
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(InterfaceError::Evaluation {
        node: node.name.clone(),
        source: last_err.expect("loop ran"),
    })
}

fn default_for(node: &KgNode) -> Option<Evaluated> {
    let text = node.default_value.as_deref()?;
    if node.name == "K_POINTS" {
        return KPoints::parse(text).map(Evaluated::KPoints);
    }
    Value::from_typed_text(text, node.data_type).map(Evaluated::Scalar)
}

/// Asks the evaluator for each candidate's value. Excluded optional nodes
/// are dropped; required nodes fall back to their KG default. Output is
/// ordered by node name.
pub fn evaluate_parameters(
    candidates: &CandidateSet,
    request: &ParsedRequest,
    graph: &KnowledgeGraph,
    gateway: &Gateway,
    model: &ModelRef,
) -> Result<ProtocolTemplate, InterfaceError> {
    let mut parameters = Vec::new();
    let mut kpoints = None;
    for name in &candidates.final_nodes {
        let node = graph.get_node(name).ok_or_else(|| KgError::NodeNotFound(name.clone()))?;
        if !is_evaluated(node) {
            continue;
        }
        let (mut evaluated, mut rationale) = evaluate_node(node, request, gateway, model)?;
        if matches!(evaluated, Evaluated::Excluded) && node.required {
            evaluated = default_for(node).ok_or_else(|| InterfaceError::MissingRequired(node.name.clone()))?;
            rationale = "KG default for a required parameter".into();
        }
        let param = |node_name: String, value: Value| EvaluatedParameter {
            node_name,
            namelist: node.namelist.clone(),
            data_type: node.data_type,
            value: Some(value),
            rationale: rationale.clone(),
        };
        match evaluated {
            Evaluated::Excluded => {}
            Evaluated::Scalar(v) => parameters.push(param(node.name.clone(), v)),
            Evaluated::Indexed(items) => parameters.extend(items.into_iter().map(|(n, v)| param(n, v))),
            Evaluated::KPoints(k) => kpoints = Some(k),
        }
    }
    parameters.sort_by(|a, b| a.node_name.cmp(&b.node_name));
    parameters.dedup_by(|a, b| a.node_name == b.node_name);
    Ok(ProtocolTemplate {
        parameters,
        kpoints,
        structure_ref: format!("{}_{}", request.material_formula, request.dimensionality),
        pseudopotential_hints: BTreeMap::new(),
        conditions: request.condition_names().into_iter().map(str::to_string).collect(),
    })
}

/// Complexity rubric features, in scoring order.
pub const RUBRIC: [&str; 10] = [
    "named_material",
    "named_functional",
    "kpoint_spec",
    "spin_magnetism",
    "dimensionality",
    "convergence_criteria",
    "cell_detail",
    "multiple_tasks",
    "units_given",
    "method_constraints",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexityLabel {
    Basic,
    Standard,
    Complex,
}

impl ComplexityLabel {
    pub const ALL: [ComplexityLabel; 3] = [ComplexityLabel::Basic, ComplexityLabel::Standard, ComplexityLabel::Complex];

    pub fn from_score(score: u8) -> Self {
        match score {
            0..=4 => ComplexityLabel::Basic,
            5..=8 => ComplexityLabel::Standard,
            _ => ComplexityLabel::Complex,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ComplexityLabel::Basic => "basic",
            ComplexityLabel::Standard => "standard",
            ComplexityLabel::Complex => "complex",
        }
    }
}

impl fmt::Display for ComplexityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityScore {
    pub features_present: Vec<bool>,
    pub score: u8,
    pub label: ComplexityLabel,
    /// Set when the scorer failed; the label is then "standard" whatever
    /// the rule-based features add up to.
    #[serde(default)]
    pub fallback: bool,
}

impl ComplexityScore {
    pub fn from_features(features: [bool; 10]) -> Self {
        let score = features.iter().filter(|f| **f).count() as u8;
        ComplexityScore {
            features_present: features.to_vec(),
            score,
            label: ComplexityLabel::from_score(score),
            fallback: false,
        }
    }
}

fn contains_any(haystack: &str, needles: &[&str]) -> bool {
    needles.iter().any(|n| haystack.contains(n))
}

/// Keyword detector for the ten rubric features, used when the scorer
/// model is unavailable.
pub fn rule_based_features(prompt: &str) -> [bool; 10] {
    let p = prompt.to_lowercase();
    let words: Vec<&str> = prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let named_material = words.iter().any(|w| {
        w.chars().next().is_some_and(|c| c.is_ascii_uppercase())
            && parse_formula(w).is_ok()
            && (w.len() > 2 || w.chars().any(|c| c.is_ascii_digit()) || is_metal(w) || *w == "Si")
    });
    [
        named_material,
        contains_any(&p, &["pbe", "lda", "b3lyp", "hse", "pbe0", "gga", "functional", "scan", "vdw"]),
        contains_any(&p, &["k-point", "kpoint", "k point", "monkhorst", "mesh", "gamma point"]),
        contains_any(&p, &["spin", "magnet", "ferro", "antiferro"]),
        contains_any(&p, &["2d", "monolayer", "bulk", "slab", "surface", "molecule", "layer"]),
        contains_any(&p, &["converge", "threshold", "cutoff", "ecutwfc", "conv_thr", "tolerance"]),
        contains_any(&p, &["space group", "lattice", "p21", "fm-3m", "fd-3m", "cell parameter", "angle"]),
        contains_any(&p, &[" then ", " followed by ", " and then ", "after that"]),
        contains_any(&p, &[" ry", " ev", " å", " angstrom", " kbar", " gpa", " k ", "kelvin"]),
        contains_any(&p, &["smearing", "dft+u", "hubbard", "dispersion", "grimme", "paw", "ultrasoft", "norm-conserving"]),
    ]
}

/// Scores the prompt with the scorer model. On any scorer failure the
/// rule-based features are reported with the fallback label.
pub fn score_complexity(prompt: &str, gateway: &Gateway, model: &ModelRef) -> ComplexityScore {
    let keys: Vec<(&str, FieldType)> = RUBRIC.iter().map(|k| (*k, FieldType::Logical)).collect();
    let result = gateway.extract(
        model,
        TemplateId::ComplexityScore,
        &bindings([("prompt", prompt)]),
        &schema("complexity_score", &keys),
    );
    match result {
        Ok(x) => {
            let features = RUBRIC.map(|k| x.get(k).and_then(Json::as_bool).unwrap_or(false));
            ComplexityScore::from_features(features)
        }
        Err(_) => {
            let mut s = ComplexityScore::from_features(rule_based_features(prompt));
            s.label = ComplexityLabel::Standard;
            s.fallback = true;
            s
        }
    }
}
