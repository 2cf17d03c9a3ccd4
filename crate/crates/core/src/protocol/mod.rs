//! `pw.x` input documents: typed model, renderer, parser and static checks.

mod parse;
mod render;
mod validate;

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::DataType;
use crate::llm::extract::{parse_logical_literal, parse_real_literal};

pub use parse::parse_input;
pub use render::{build_document, render_document, render_input};
pub use validate::{validate_static, Finding, FindingCode, Severity, ValidationReport};

/// Namelists in the order `pw.x` reads them.
pub const SECTION_ORDER: [&str; 7] = ["CONTROL", "SYSTEM", "ELECTRONS", "IONS", "CELL", "FCP", "RISM"];

pub const CARD_NAMES: [&str; 11] = [
    "ATOMIC_SPECIES",
    "ATOMIC_POSITIONS",
    "K_POINTS",
    "ADDITIONAL_K_POINTS",
    "CELL_PARAMETERS",
    "CONSTRAINTS",
    "OCCUPATIONS",
    "ATOMIC_VELOCITIES",
    "ATOMIC_FORCES",
    "SOLVENTS",
    "HUBBARD",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "UPPERCASE")]
pub enum Value {
    Character(String),
    Real(f64),
    Integer(i64),
    Logical(bool),
}

impl Value {
    pub fn data_type(&self) -> DataType {
        match self {
            Value::Character(_) => DataType::Character,
            Value::Real(_) => DataType::Real,
            Value::Integer(_) => DataType::Integer,
            Value::Logical(_) => DataType::Logical,
        }
    }

    /// Whether the value is acceptable where `expected` is declared. Integer
    /// literals are valid reals in Fortran list-directed input.
    pub fn fits(&self, expected: DataType) -> bool {
        self.data_type() == expected || (expected == DataType::Real && matches!(self, Value::Integer(_)))
    }

    /// Reads `text` as a literal of the given type. Character text is taken
    /// verbatim.
    pub fn from_typed_text(text: &str, ty: DataType) -> Option<Value> {
        match ty {
            DataType::Character | DataType::Composite => Some(Value::Character(text.to_string())),
            DataType::Real => parse_real_literal(text).map(Value::Real),
            DataType::Integer => text.trim().parse().ok().map(Value::Integer),
            DataType::Logical => parse_logical_literal(text).map(Value::Logical),
        }
    }

    /// Converts a JSON scalar to the given type.
    pub fn from_json(v: &serde_json::Value, ty: DataType) -> Option<Value> {
        match (v, ty) {
            (serde_json::Value::String(s), _) => Value::from_typed_text(s, ty),
            (serde_json::Value::Bool(b), DataType::Logical) => Some(Value::Logical(*b)),
            (serde_json::Value::Number(n), DataType::Integer) => n
                .as_i64()
                .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
                .map(Value::Integer),
            (serde_json::Value::Number(n), DataType::Real) => n.as_f64().map(Value::Real),
            _ => None,
        }
    }

    /// Namelist literal: quoted text, `.true.`/`.false.`, decimal integer,
    /// or a real in plain decimal form that always carries a point.
    pub fn to_literal(&self) -> String {
        match self {
            Value::Character(s) => format!("'{}'", s.replace('\'', "''")),
            Value::Logical(true) => ".true.".into(),
            Value::Logical(false) => ".false.".into(),
            Value::Integer(i) => i.to_string(),
            Value::Real(r) => format_real(*r),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_literal())
    }
}

/// Shortest round-trip decimal without exponent, e.g. `30.0`, `0.02`.
pub fn format_real(r: f64) -> String {
    let s = format!("{r}");
    if s.contains('.') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Card {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option: Option<String>,
    /// Whitespace-separated tokens of each row.
    pub rows: Vec<Vec<String>>,
}

impl Card {
    pub fn new(name: impl Into<String>, option: Option<&str>, rows: Vec<Vec<String>>) -> Self {
        Card {
            name: name.into(),
            option: option.map(str::to_string),
            rows,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolDocument {
    pub namelists: IndexMap<String, IndexMap<String, Value>>,
    pub cards: Vec<Card>,
}

impl ProtocolDocument {
    pub fn card(&self, name: &str) -> Option<&Card> {
        self.cards.iter().find(|c| c.name == name)
    }

    /// Looks a parameter up in any namelist, ignoring case.
    pub fn parameter(&self, name: &str) -> Option<&Value> {
        self.namelists
            .values()
            .flat_map(|params| params.iter())
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v)
    }

    pub fn calculation(&self) -> &str {
        match self.parameter("calculation") {
            Some(Value::Character(c)) => c,
            _ => "scf",
        }
    }

    /// Mesh of an automatic K_POINTS card.
    pub fn kpoint_mesh(&self) -> Option<[u32; 3]> {
        let card = self.card("K_POINTS")?;
        if !card.option.as_deref()?.eq_ignore_ascii_case("automatic") {
            return None;
        }
        let row = card.rows.first()?;
        let mut mesh = [0; 3];
        for (m, t) in mesh.iter_mut().zip(row) {
            *m = t.parse().ok()?;
        }
        Some(mesh)
    }
}

/// Whether the calculation moves ions and therefore reads &IONS.
pub fn moves_ions(calculation: &str) -> bool {
    matches!(calculation, "relax" | "md" | "vc-relax" | "vc-md")
}

/// Whether the calculation varies the cell and therefore reads &CELL.
pub fn varies_cell(calculation: &str) -> bool {
    matches!(calculation, "vc-relax" | "vc-md")
}

/// Strips an index suffix: `starting_magnetization(1)` → `starting_magnetization`.
pub fn base_name(parameter: &str) -> &str {
    parameter.split('(').next().unwrap_or(parameter).trim()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum KPoints {
    Automatic { mesh: [u32; 3], shift: [u32; 3] },
    Gamma,
}

impl KPoints {
    /// Accepts `7 7 2`, `7 7 2 0 0 0`, `automatic 7 7 2 0 0 0`, `7x7x2` or
    /// `gamma`.
    pub fn parse(text: &str) -> Option<KPoints> {
        let t = text.trim().to_ascii_lowercase();
        if t == "gamma" {
            return Some(KPoints::Gamma);
        }
        let body = t.strip_prefix("automatic").unwrap_or(&t);
        let nums: Vec<u32> = body
            .split(|c: char| c.is_whitespace() || c == 'x' || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().ok())
            .collect::<Option<_>>()?;
        match nums.as_slice() {
            [a, b, c] if *a > 0 && *b > 0 && *c > 0 => Some(KPoints::Automatic {
                mesh: [*a, *b, *c],
                shift: [0; 3],
            }),
            [a, b, c, s1, s2, s3] if *a > 0 && *b > 0 && *c > 0 && [s1, s2, s3].iter().all(|s| **s <= 1) => {
                Some(KPoints::Automatic {
                    mesh: [*a, *b, *c],
                    shift: [*s1, *s2, *s3],
                })
            }
            _ => None,
        }
    }

    pub fn to_card(self) -> Card {
        match self {
            KPoints::Gamma => Card::new("K_POINTS", Some("gamma"), vec![]),
            KPoints::Automatic { mesh, shift } => Card::new(
                "K_POINTS",
                Some("automatic"),
                vec![mesh.iter().chain(&shift).map(u32::to_string).collect()],
            ),
        }
    }
}

impl fmt::Display for KPoints {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KPoints::Gamma => f.write_str("gamma"),
            KPoints::Automatic { mesh, shift } => write!(
                f,
                "automatic {} {} {} {} {} {}",
                mesh[0], mesh[1], mesh[2], shift[0], shift[1], shift[2]
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}: namelist &{section} is not terminated by '/'")]
    UnterminatedNamelist { line: usize, section: String },
    #[error("line {line}: unknown namelist &{name}")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: malformed assignment `{text}`")]
    MalformedAssignment { line: usize, text: String },
    #[error("line {line}: card {card} row has {found} columns, expected {expected}")]
    CardColumns {
        line: usize,
        card: String,
        expected: String,
        found: usize,
    },
    #[error("line {line}: unexpected text `{text}`")]
    UnexpectedLine { line: usize, text: String },
}

impl ParseError {
    pub fn line(&self) -> usize {
        match self {
            ParseError::UnterminatedNamelist { line, .. }
            | ParseError::UnknownSection { line, .. }
            | ParseError::MalformedAssignment { line, .. }
            | ParseError::CardColumns { line, .. }
            | ParseError::UnexpectedLine { line, .. } => *line,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("template has no k-point specification")]
    MissingKPoints,
    #[error("parameter `{0}` has no namelist")]
    NoNamelist(String),
    #[error("parameter `{name}` has a non-finite value")]
    NonFinite { name: String },
    #[error("species {0} has no pseudopotential")]
    MissingPseudopotential(String),
    #[error("unknown element {0}")]
    UnknownElement(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn real_formatting() {
        assert_eq!(format_real(30.0), "30.0");
        assert_eq!(format_real(0.02), "0.02");
        assert_eq!(format_real(-1.5), "-1.5");
        assert_eq!(format_real(1e-10), "0.0000000001");
        assert_eq!(format_real(0.1 + 0.2), "0.30000000000000004");
    }

    #[test]
    fn literals() {
        assert_eq!(Value::Logical(true).to_literal(), ".true.");
        assert_eq!(Value::Character("it's".into()).to_literal(), "'it''s'");
        assert_eq!(Value::Integer(-3).to_literal(), "-3");
    }

    #[test]
    fn kpoints_forms() {
        let k = KPoints::Automatic {
            mesh: [7, 7, 2],
            shift: [0; 3],
        };
        assert_eq!(KPoints::parse("7 7 2"), Some(k));
        assert_eq!(KPoints::parse("automatic 7 7 2 0 0 0"), Some(k));
        assert_eq!(KPoints::parse("7x7x2"), Some(k));
        assert_eq!(KPoints::parse("Gamma"), Some(KPoints::Gamma));
        assert_eq!(KPoints::parse("7 7"), None);
        assert_eq!(KPoints::parse("0 7 2"), None);
        assert_eq!(KPoints::parse(&k.to_string()), Some(k));
    }

    #[test]
    fn typed_text() {
        assert_eq!(Value::from_typed_text("0.D0", DataType::Real), Some(Value::Real(0.0)));
        assert_eq!(Value::from_typed_text("two", DataType::Integer), None);
        assert!(Value::Integer(30).fits(DataType::Real));
        assert!(!Value::Real(30.0).fits(DataType::Integer));
    }

    #[test]
    fn base_names() {
        assert_eq!(base_name("starting_magnetization(1)"), "starting_magnetization");
        assert_eq!(base_name("ecutwfc"), "ecutwfc");
    }
}
