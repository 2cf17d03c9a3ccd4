use indexmap::IndexMap;

use super::{moves_ions, varies_cell, Card, ProtocolDocument, RenderError, Value, SECTION_ORDER};
use crate::interface::ProtocolTemplate;
use crate::materials::{atomic_mass, Structure};

/// Parameters fixed by the structure; template values for these are ignored.
const STRUCTURE_PARAMETERS: [&str; 10] = ["ibrav", "nat", "ntyp", "celldm", "a", "b", "c", "cosab", "cosac", "cosbc"];

fn structure_derived(name: &str) -> bool {
    let base = super::base_name(name).to_ascii_lowercase();
    STRUCTURE_PARAMETERS.contains(&base.as_str())
}

fn coord(x: f64) -> String {
    format!("{x:.10}")
}

/// Assembles the document `render_input` writes. Sections that the
/// calculation does not read are left out together with their parameters.
pub fn build_document(template: &ProtocolTemplate, structure: &Structure) -> Result<ProtocolDocument, RenderError> {
    let calculation = match template.value_of("calculation") {
        Some(Value::Character(c)) => c.clone(),
        _ => "scf".to_string(),
    };
    let mut grouped: IndexMap<String, Vec<(String, Value)>> = IndexMap::new();
    for p in &template.parameters {
        let Some(value) = &p.value else { continue };
        if structure_derived(&p.node_name) {
            continue;
        }
        if matches!(value, Value::Real(r) if !r.is_finite()) {
            return Err(RenderError::NonFinite {
                name: p.node_name.clone(),
            });
        }
        let section = p
            .namelist
            .as_deref()
            .ok_or_else(|| RenderError::NoNamelist(p.node_name.clone()))?
            .to_ascii_uppercase();
        grouped.entry(section).or_default().push((p.node_name.clone(), value.clone()));
    }

    let mut namelists = IndexMap::new();
    for section in SECTION_ORDER {
        let present = match section {
            "CONTROL" | "SYSTEM" | "ELECTRONS" => true,
            "IONS" => moves_ions(&calculation),
            "CELL" => varies_cell(&calculation),
            _ => grouped.contains_key(section),
        };
        if !present {
            continue;
        }
        let mut params = IndexMap::new();
        if section == "SYSTEM" {
            params.insert("ibrav".to_string(), Value::Integer(0));
            params.insert("nat".to_string(), Value::Integer(structure.nat() as i64));
            params.insert("ntyp".to_string(), Value::Integer(structure.unique_species().len() as i64));
        }
        let mut rest = grouped.shift_remove(section).unwrap_or_default();
        rest.sort_by(|a, b| a.0.cmp(&b.0));
        params.extend(rest);
        namelists.insert(section.to_string(), params);
    }

    let mut species_rows = Vec::new();
    for el in structure.unique_species() {
        let mass = atomic_mass(el).ok_or_else(|| RenderError::UnknownElement(el.to_string()))?;
        let pseudo = structure
            .pseudopotentials
            .get(el)
            .ok_or_else(|| RenderError::MissingPseudopotential(el.to_string()))?;
        species_rows.push(vec![el.to_string(), super::format_real(mass), pseudo.clone()]);
    }
    let position_rows = structure
        .species
        .iter()
        .zip(&structure.positions)
        .map(|(s, p)| std::iter::once(s.clone()).chain(p.iter().map(|x| coord(*x))).collect())
        .collect();
    let cell_rows = structure
        .cell
        .iter()
        .map(|v| v.iter().map(|x| coord(*x)).collect())
        .collect();
    let kpoints = template.kpoints.ok_or(RenderError::MissingKPoints)?;

    Ok(ProtocolDocument {
        namelists,
        cards: vec![
            Card::new("ATOMIC_SPECIES", None, species_rows),
            Card::new("ATOMIC_POSITIONS", Some("crystal"), position_rows),
            kpoints.to_card(),
            Card::new("CELL_PARAMETERS", Some("angstrom"), cell_rows),
        ],
    })
}

/// Writes a document in `pw.x` input syntax.
pub fn render_document(doc: &ProtocolDocument) -> String {
    let mut out = String::new();
    for (section, params) in &doc.namelists {
        out.push('&');
        out.push_str(section);
        out.push('\n');
        for (name, value) in params {
            out.push_str(&format!("  {name} = {}\n", value.to_literal()));
        }
        out.push_str("/\n");
    }
    for card in &doc.cards {
        out.push_str(&card.name);
        if let Some(opt) = &card.option {
            out.push(' ');
            out.push_str(opt);
        }
        out.push('\n');
        for row in &card.rows {
            out.push_str("  ");
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn render_input(template: &ProtocolTemplate, structure: &Structure) -> Result<String, RenderError> {
    Ok(render_document(&build_document(template, structure)?))
}
