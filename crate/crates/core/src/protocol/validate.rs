use serde::{Deserialize, Serialize};

use super::{base_name, moves_ions, varies_cell, ProtocolDocument, Value};
use crate::kg::{KgNode, KnowledgeGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FindingCode {
    UnknownParameter,
    WrongSection,
    TypeMismatch,
    AllowedValues,
    MissingRequired,
    MissingCard,
    MissingNamelist,
    UnexpectedNamelist,
}

impl FindingCode {
    pub fn as_str(self) -> &'static str {
        match self {
            FindingCode::UnknownParameter => "unknown-parameter",
            FindingCode::WrongSection => "wrong-section",
            FindingCode::TypeMismatch => "type-mismatch",
            FindingCode::AllowedValues => "allowed-values",
            FindingCode::MissingRequired => "missing-required",
            FindingCode::MissingCard => "missing-card",
            FindingCode::MissingNamelist => "missing-namelist",
            FindingCode::UnexpectedNamelist => "unexpected-namelist",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: FindingCode,
    /// `SECTION/parameter`, `card NAME`, or `&SECTION`.
    pub location: String,
    pub node_name: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }
}

fn lookup<'g>(graph: &'g KnowledgeGraph, name: &str) -> Option<&'g KgNode> {
    graph
        .get_node(name)
        .or_else(|| graph.nodes().iter().find(|n| n.name.eq_ignore_ascii_case(name)))
}

fn literal_text(v: &Value) -> String {
    match v {
        Value::Character(s) => s.clone(),
        other => other.to_literal(),
    }
}

/// Checks a document against the graph. Findings come in document order:
/// namelists, then cards, then anything missing.
pub fn validate_static(doc: &ProtocolDocument, graph: &KnowledgeGraph) -> ValidationReport {
    let mut findings = Vec::new();
    let mut error = |code, location: String, node: Option<&str>, message: String| {
        findings.push(Finding {
            severity: Severity::Error,
            code,
            location,
            node_name: node.map(str::to_string),
            message,
        })
    };
    let calculation = doc.calculation().to_string();

    for (section, params) in &doc.namelists {
        let wanted = match section.as_str() {
            "IONS" => moves_ions(&calculation),
            "CELL" => varies_cell(&calculation),
            _ => true,
        };
        if !wanted {
            error(
                FindingCode::UnexpectedNamelist,
                format!("&{section}"),
                None,
                format!("&{section} is not read for calculation '{calculation}'"),
            );
        }
        for (name, value) in params {
            let location = format!("{section}/{name}");
            let base = base_name(name);
            let Some(node) = lookup(graph, base).filter(|n| !n.is_card()) else {
                error(
                    FindingCode::UnknownParameter,
                    location,
                    Some(base),
                    format!("`{base}` is not a pw.x parameter"),
                );
                continue;
            };
            if node.namelist.as_deref() != Some(section.as_str()) {
                error(
                    FindingCode::WrongSection,
                    location.clone(),
                    Some(&node.name),
                    format!(
                        "`{}` belongs to &{}",
                        node.name,
                        node.namelist.as_deref().unwrap_or("?")
                    ),
                );
            }
            if !value.fits(node.data_type) {
                error(
                    FindingCode::TypeMismatch,
                    location,
                    Some(&node.name),
                    format!("`{}` expects {}, got {}", node.name, node.data_type, value.data_type()),
                );
                continue;
            }
            if let Some(allowed) = node.allowed_values.as_ref().filter(|a| !a.is_empty()) {
                let text = literal_text(value);
                if !allowed.iter().any(|a| a.eq_ignore_ascii_case(&text)) {
                    error(
                        FindingCode::AllowedValues,
                        location,
                        Some(&node.name),
                        format!("`{}` = {text} is not one of {}", node.name, allowed.join(", ")),
                    );
                }
            }
        }
    }

    for required in ["CONTROL", "SYSTEM", "ELECTRONS"]
        .into_iter()
        .chain(moves_ions(&calculation).then_some("IONS"))
        .chain(varies_cell(&calculation).then_some("CELL"))
    {
        if !doc.namelists.contains_key(required) {
            error(
                FindingCode::MissingNamelist,
                format!("&{required}"),
                None,
                format!("&{required} is required for calculation '{calculation}'"),
            );
        }
    }
    for node in graph.required_nodes() {
        if node.is_card() {
            if doc.card(&node.name).is_none() {
                error(
                    FindingCode::MissingCard,
                    format!("card {}", node.name),
                    Some(&node.name),
                    format!("card {} is required", node.name),
                );
            }
        } else if doc.parameter(&node.name).is_none() {
            error(
                FindingCode::MissingRequired,
                format!("{}/{}", node.namelist.as_deref().unwrap_or("?"), node.name),
                Some(&node.name),
                format!("`{}` is required", node.name),
            );
        }
    }
    ValidationReport { findings }
}
