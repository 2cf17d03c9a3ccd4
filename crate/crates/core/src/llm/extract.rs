//! Pulls a JSON object out of free-form model output and checks it against
//! an expected key/type schema.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use thiserror::Error;

use crate::kg::DataType;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    Character,
    Real,
    Integer,
    Logical,
    TextList,
    Any,
    Optional(Box<FieldType>),
}

impl FieldType {
    pub fn optional(self) -> FieldType {
        FieldType::Optional(Box::new(self))
    }

    fn describe(&self) -> String {
        match self {
            FieldType::Character => "CHARACTER".into(),
            FieldType::Real => "REAL".into(),
            FieldType::Integer => "INTEGER".into(),
            FieldType::Logical => "LOGICAL".into(),
            FieldType::TextList => "list of text".into(),
            FieldType::Any => "any".into(),
            FieldType::Optional(inner) => format!("{} or null", inner.describe()),
        }
    }
}

impl From<DataType> for FieldType {
    fn from(t: DataType) -> Self {
        match t {
            DataType::Character => FieldType::Character,
            DataType::Real => FieldType::Real,
            DataType::Integer => FieldType::Integer,
            DataType::Logical => FieldType::Logical,
            DataType::Composite => FieldType::Character,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedKey {
    pub key: String,
    pub field_type: FieldType,
}

impl ExpectedKey {
    pub fn new(key: impl Into<String>, field_type: FieldType) -> Self {
        ExpectedKey {
            key: key.into(),
            field_type,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionSchema {
    pub name: String,
    pub keys: Vec<ExpectedKey>,
}

impl ExtractionSchema {
    pub fn new(name: impl Into<String>, keys: Vec<ExpectedKey>) -> Self {
        ExtractionSchema {
            name: name.into(),
            keys,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredExtraction {
    pub schema_name: String,
    pub expected_keys: Vec<ExpectedKey>,
    pub raw_text: String,
    pub value: Map<String, Value>,
}

impl StructuredExtraction {
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.value.get(key)
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.value.get(key).and_then(Value::as_str)
    }

    pub fn text_list(&self, key: &str) -> Vec<String> {
        self.value
            .get(key)
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractionError {
    #[error("schema has no expected keys")]
    EmptySchema,
    #[error("no JSON object found in model output")]
    NoJsonBlock,
    #[error("could not parse JSON object: {0}")]
    Parse(String),
    #[error("missing expected key `{0}`")]
    MissingKey(String),
    #[error("key `{key}` expected {expected}, found {found}")]
    TypeMismatch {
        key: String,
        expected: String,
        found: String,
    },
}

/// Returns the first balanced `{...}` block, honoring JSON string escapes.
pub fn find_json_block(text: &str) -> Result<&str, ExtractionError> {
    let start = text.find('{').ok_or(ExtractionError::NoJsonBlock)?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Ok(&text[start..start + offset + 1]);
                }
            }
            _ => {}
        }
    }
    Err(ExtractionError::Parse("unbalanced braces".into()))
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Parses a Fortran-style or plain real literal (`1.5d-3`, `2`, `.5`).
pub fn parse_real_literal(s: &str) -> Option<f64> {
    let t = s.trim().replace(['d', 'D'], "e");
    if t.is_empty() {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn parse_logical_literal(s: &str) -> Option<bool> {
    match s.trim().trim_matches('.').to_ascii_lowercase().as_str() {
        "true" | "t" => Some(true),
        "false" | "f" => Some(false),
        _ => None,
    }
}

/// Coerces `value` to `ty`, converting textual booleans and numbers when
/// the declared type demands it.
pub fn coerce(key: &str, value: Value, ty: &FieldType) -> Result<Value, ExtractionError> {
    let mismatch = |v: &Value| ExtractionError::TypeMismatch {
        key: key.to_string(),
        expected: ty.describe(),
        found: kind_of(v).to_string(),
    };
    match ty {
        FieldType::Any => Ok(value),
        FieldType::Optional(inner) => match value {
            Value::Null => Ok(Value::Null),
            v => coerce(key, v, inner),
        },
        FieldType::Character => match value {
            Value::String(_) => Ok(value),
            v => Err(mismatch(&v)),
        },
        FieldType::Logical => match &value {
            Value::Bool(_) => Ok(value),
            Value::String(s) => parse_logical_literal(s)
                .map(Value::Bool)
                .ok_or_else(|| mismatch(&value)),
            _ => Err(mismatch(&value)),
        },
        FieldType::Integer => match &value {
            Value::Number(n) if n.is_i64() || n.is_u64() => Ok(value),
            Value::Number(n) => match n.as_f64() {
                Some(f) if f.fract() == 0.0 && f.abs() < 9.0e15 => Ok(Value::from(f as i64)),
                _ => Err(mismatch(&value)),
            },
            Value::String(s) => s
                .trim()
                .parse::<i64>()
                .map(Value::from)
                .map_err(|_| mismatch(&value)),
            _ => Err(mismatch(&value)),
        },
        FieldType::Real => match &value {
            Value::Number(n) => Ok(Value::Number(
                Number::from_f64(n.as_f64().unwrap_or(0.0)).ok_or_else(|| mismatch(&value))?,
            )),
            Value::String(s) => parse_real_literal(s)
                .and_then(Number::from_f64)
                .map(Value::Number)
                .ok_or_else(|| mismatch(&value)),
            _ => Err(mismatch(&value)),
        },
        FieldType::TextList => match value {
            Value::Array(items) => {
                if let Some(bad) = items.iter().find(|v| !v.is_string()) {
                    return Err(mismatch(bad));
                }
                Ok(Value::Array(items))
            }
            v => Err(mismatch(&v)),
        },
    }
}

pub fn extract_structured(
    raw_text: &str,
    schema: &ExtractionSchema,
) -> Result<StructuredExtraction, ExtractionError> {
    if schema.keys.is_empty() {
        return Err(ExtractionError::EmptySchema);
    }
    let block = find_json_block(raw_text)?;
    let parsed: Value = serde_json::from_str(block).map_err(|e| ExtractionError::Parse(e.to_string()))?;
    let Value::Object(mut obj) = parsed else {
        return Err(ExtractionError::Parse("top level is not an object".into()));
    };
    let mut value = Map::new();
    for expected in &schema.keys {
        let v = obj
            .remove(&expected.key)
            .ok_or_else(|| ExtractionError::MissingKey(expected.key.clone()))?;
        value.insert(expected.key.clone(), coerce(&expected.key, v, &expected.field_type)?);
    }
    // keys outside the schema are carried along untouched
    for (k, v) in obj {
        value.insert(k, v);
    }
    Ok(StructuredExtraction {
        schema_name: schema.name.clone(),
        expected_keys: schema.keys.clone(),
        raw_text: raw_text.to_string(),
        value,
    })
}

/// Returns the body of the first fenced code block, or the whole text when
/// there is none.
pub fn extract_code_block(text: &str) -> String {
    if let Some(start) = text.find("```") {
        let after = &text[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        let end = body.find("```").unwrap_or(body.len());
        return body[..end].to_string();
    }
    text.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn schema(keys: &[(&str, FieldType)]) -> ExtractionSchema {
        ExtractionSchema::new(
            "t",
            keys.iter().map(|(k, t)| ExpectedKey::new(*k, t.clone())).collect(),
        )
    }

    #[test]
    fn fenced_json_extracted() {
        let s = schema(&[("calculation", FieldType::Character)]);
        let e = extract_structured("Here you go: ```json {\"calculation\":\"scf\"}```", &s).unwrap();
        assert_eq!(e.value["calculation"], "scf");
    }

    #[test]
    fn prose_without_braces() {
        let s = schema(&[("a", FieldType::Any)]);
        assert_eq!(
            extract_structured("no json at all", &s).unwrap_err(),
            ExtractionError::NoJsonBlock
        );
    }

    #[test]
    fn distinct_error_kinds() {
        let s = schema(&[("nspin", FieldType::Integer)]);
        assert!(matches!(
            extract_structured("{\"nspin\": ", &s),
            Err(ExtractionError::Parse(_))
        ));
        assert!(matches!(
            extract_structured("{\"nspinx\": 1}", &s),
            Err(ExtractionError::MissingKey(k)) if k == "nspin"
        ));
        assert!(matches!(
            extract_structured("{\"nspin\": \"two\"}", &s),
            Err(ExtractionError::TypeMismatch { .. })
        ));
        assert_eq!(
            extract_structured("{}", &ExtractionSchema::new("e", vec![])).unwrap_err(),
            ExtractionError::EmptySchema
        );
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_matching() {
        let s = schema(&[("a", FieldType::Character)]);
        let e = extract_structured(r#"x {"a": "}{ \" }"} trailing }"#, &s).unwrap();
        assert_eq!(e.value["a"], "}{ \" }");
    }

    /// Brute-force coercion table: each QE type against a string form and
    /// a native JSON form of a valid and an invalid value.
    #[test]
    fn coercion_table() {
        let cases: Vec<(FieldType, Value, Option<Value>)> = vec![
            (FieldType::Integer, json!("2"), Some(json!(2))),
            (FieldType::Integer, json!(2), Some(json!(2))),
            (FieldType::Integer, json!("2.5"), None),
            (FieldType::Integer, json!(true), None),
            (FieldType::Real, json!("0.5"), Some(json!(0.5))),
            (FieldType::Real, json!("1.0d-3"), Some(json!(0.001))),
            (FieldType::Real, json!(30), Some(json!(30.0))),
            (FieldType::Real, json!("abc"), None),
            (FieldType::Logical, json!("true"), Some(json!(true))),
            (FieldType::Logical, json!(".false."), Some(json!(false))),
            (FieldType::Logical, json!(false), Some(json!(false))),
            (FieldType::Logical, json!(1), None),
            (FieldType::Character, json!("scf"), Some(json!("scf"))),
            (FieldType::Character, json!(3), None),
            (FieldType::Character, json!(true), None),
            (FieldType::Character.optional(), Value::Null, Some(Value::Null)),
        ];
        for (ty, input, expected) in cases {
            let got = coerce("k", input.clone(), &ty);
            match expected {
                Some(v) => assert_eq!(got.unwrap(), v, "{ty:?} {input}"),
                None => assert!(got.is_err(), "{ty:?} {input} should fail"),
            }
        }
    }

    #[test]
    fn code_block_body() {
        assert_eq!(extract_code_block("a\n```fortran\n&CONTROL\n/\n```\nb"), "&CONTROL\n/\n");
        assert_eq!(extract_code_block("plain"), "plain");
    }
}
