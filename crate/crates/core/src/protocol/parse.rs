use std::sync::OnceLock;

use indexmap::IndexMap;
use regex::Regex;

use super::{Card, ParseError, ProtocolDocument, Value, CARD_NAMES, SECTION_ORDER};
use crate::llm::extract::{parse_logical_literal, parse_real_literal};

enum State {
    Top,
    Namelist { section: String, last_line: usize },
    Card(usize),
}

fn key_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z_][A-Za-z0-9_]*(\([0-9, ]+\))?$").expect("valid regex"))
}

fn int_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-]?[0-9]+$").expect("valid regex"))
}

fn real_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-]?([0-9]+\.?[0-9]*|\.[0-9]+)([eEdD][+-]?[0-9]+)?$").expect("valid regex"))
}

/// Drops a `!` comment, ignoring `!` inside quotes.
fn strip_comment(line: &str) -> &str {
    let mut quote = None;
    for (i, c) in line.char_indices() {
        match (quote, c) {
            (None, '\'' | '"') => quote = Some(c),
            (Some(q), _) if c == q => quote = None,
            (None, '!') => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Splits on commas outside quotes and parentheses. A `/` outside quotes
/// ends the namelist; the returned flag reports whether one was seen.
fn split_assignments(text: &str) -> (Vec<&str>, bool) {
    let mut parts = Vec::new();
    let mut quote = None;
    let mut depth = 0;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match (quote, c) {
            (None, '\'' | '"') => quote = Some(c),
            (Some(q), _) if c == q => quote = None,
            (None, '(') => depth += 1,
            (None, ')') => depth -= 1,
            (None, ',') if depth == 0 => {
                parts.push(&text[start..i]);
                start = i + 1;
            }
            (None, '/') => {
                parts.push(&text[start..i]);
                return (parts, true);
            }
            _ => {}
        }
    }
    parts.push(&text[start..]);
    (parts, false)
}

fn parse_quoted(s: &str) -> Option<String> {
    let q = s.chars().next()?;
    if s.len() < 2 || !s.ends_with(q) {
        return None;
    }
    let inner = &s[1..s.len() - 1];
    let doubled: String = [q, q].iter().collect();
    // a lone quote inside is malformed; doubled quotes are escapes
    if inner.replace(&doubled, "").contains(q) {
        return None;
    }
    Some(inner.replace(&doubled, &q.to_string()))
}

/// Reads one namelist value literal.
pub(super) fn parse_literal(text: &str) -> Option<Value> {
    let s = text.trim();
    if s.starts_with('\'') || s.starts_with('"') {
        return parse_quoted(s).map(Value::Character);
    }
    if int_re().is_match(s) {
        return s.parse().ok().map(Value::Integer);
    }
    if real_re().is_match(s) {
        return parse_real_literal(s).map(Value::Real);
    }
    let lower = s.to_ascii_lowercase();
    if matches!(lower.as_str(), ".true." | ".false." | ".t." | ".f." | "t" | "f" | "true" | "false") {
        return parse_logical_literal(s).map(Value::Logical);
    }
    None
}

fn card_header(line: &str) -> Option<(String, Option<String>)> {
    let trimmed = line.trim();
    let name_end = trimmed
        .find(|c: char| c.is_whitespace() || c == '{' || c == '(')
        .unwrap_or(trimmed.len());
    let name = trimmed[..name_end].to_ascii_uppercase();
    if !CARD_NAMES.contains(&name.as_str()) {
        return None;
    }
    let option = trimmed[name_end..]
        .trim()
        .trim_matches(|c| matches!(c, '{' | '}' | '(' | ')'))
        .trim()
        .to_ascii_lowercase();
    Some((name, (!option.is_empty()).then_some(option)))
}

fn check_row(card: &Card, row_index: usize, columns: usize, line: usize) -> Result<(), ParseError> {
    let option = card.option.as_deref().unwrap_or("");
    let expected: &[usize] = match card.name.as_str() {
        "ATOMIC_SPECIES" => &[3],
        "ATOMIC_POSITIONS" => &[4, 7],
        "CELL_PARAMETERS" => &[3],
        "K_POINTS" => match option {
            "automatic" => &[6],
            "gamma" => &[],
            _ if row_index == 0 => &[1],
            _ => &[4],
        },
        _ => return Ok(()),
    };
    if expected.contains(&columns) {
        return Ok(());
    }
    Err(ParseError::CardColumns {
        line,
        card: card.name.clone(),
        expected: if expected.is_empty() {
            "no rows".into()
        } else {
            expected.iter().map(usize::to_string).collect::<Vec<_>>().join(" or ")
        },
        found: columns,
    })
}

/// Parses a `pw.x` input. Section names are case-insensitive and stored
/// upper-case; parameter names keep their spelling; card options are
/// stored lower-case.
pub fn parse_input(text: &str) -> Result<ProtocolDocument, ParseError> {
    let mut doc = ProtocolDocument::default();
    let mut state = State::Top;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw);
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }

        if let State::Namelist { section, last_line } = &mut state {
            // `occupations = ...` is an assignment, not the OCCUPATIONS card
            let card = card_header(trimmed).is_some() && !trimmed.contains('=');
            if trimmed.starts_with('&') || card {
                return Err(ParseError::UnterminatedNamelist {
                    line: *last_line,
                    section: section.clone(),
                });
            }
            *last_line = line_no;
            let section = section.clone();
            let (parts, closed) = split_assignments(trimmed);
            let params = doc.namelists.entry(section).or_default();
            for part in parts {
                assign(params, part, line_no)?;
            }
            if closed {
                state = State::Top;
            }
            continue;
        }

        if let Some(rest) = trimmed.strip_prefix('&') {
            let name_end = rest.find(char::is_whitespace).unwrap_or(rest.len());
            let name = rest[..name_end].to_ascii_uppercase();
            if !SECTION_ORDER.contains(&name.as_str()) {
                return Err(ParseError::UnknownSection {
                    line: line_no,
                    name: rest[..name_end].to_string(),
                });
            }
            let params = doc.namelists.entry(name.clone()).or_default();
            let (parts, closed) = split_assignments(&rest[name_end..]);
            for part in parts {
                assign(params, part, line_no)?;
            }
            state = if closed {
                State::Top
            } else {
                State::Namelist {
                    section: name,
                    last_line: line_no,
                }
            };
            continue;
        }

        if let Some((name, option)) = card_header(trimmed) {
            doc.cards.push(Card {
                name,
                option,
                rows: Vec::new(),
            });
            state = State::Card(doc.cards.len() - 1);
            continue;
        }

        match state {
            State::Card(i) => {
                let row: Vec<String> = trimmed.split_whitespace().map(str::to_string).collect();
                let card = &doc.cards[i];
                check_row(card, card.rows.len(), row.len(), line_no)?;
                doc.cards[i].rows.push(row);
            }
            _ => {
                return Err(ParseError::UnexpectedLine {
                    line: line_no,
                    text: trimmed.to_string(),
                })
            }
        }
    }

    if let State::Namelist { section, last_line } = state {
        return Err(ParseError::UnterminatedNamelist {
            line: last_line,
            section,
        });
    }
    Ok(doc)
}

fn assign(params: &mut IndexMap<String, Value>, part: &str, line: usize) -> Result<(), ParseError> {
    let part = part.trim();
    if part.is_empty() {
        return Ok(());
    }
    let malformed = || ParseError::MalformedAssignment {
        line,
        text: part.to_string(),
    };
    let (key, value) = part.split_once('=').ok_or_else(malformed)?;
    let key: String = key.split_whitespace().collect();
    if !key_re().is_match(&key) {
        return Err(malformed());
    }
    let value = parse_literal(value).ok_or_else(malformed)?;
    params.insert(key, value);
    Ok(())
}
