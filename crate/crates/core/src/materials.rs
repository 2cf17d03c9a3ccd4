//! Structure lookup and standardization.
//!
//! Two-dimensional requests are routed to the MC2D collection, everything
//! else to MC3D. The default backend is a fixture store shipped with the
//! crate; [`OptimadeBackend`] talks to a live OPTIMADE endpoint instead.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interface::ParsedRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimensionality {
    TwoD,
    ThreeD,
}

impl Dimensionality {
    pub fn as_str(self) -> &'static str {
        match self {
            Dimensionality::TwoD => "two_d",
            Dimensionality::ThreeD => "three_d",
        }
    }

    pub fn route(self) -> StructureSource {
        match self {
            Dimensionality::TwoD => StructureSource::Mc2d,
            Dimensionality::ThreeD => StructureSource::Mc3d,
        }
    }
}

impl fmt::Display for Dimensionality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StructureSource {
    #[serde(rename = "MC2D")]
    Mc2d,
    #[serde(rename = "MC3D")]
    Mc3d,
    #[serde(rename = "fixture")]
    Fixture,
}

impl fmt::Display for StructureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructureSource::Mc2d => "MC2D",
            StructureSource::Mc3d => "MC3D",
            StructureSource::Fixture => "fixture",
        })
    }
}

/// Lattice vectors as rows, in angstrom.
pub type Cell = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub formula: String,
    pub source: StructureSource,
    pub species: Vec<String>,
    /// Fractional coordinates, one triple per entry in `species`.
    pub positions: Vec<[f64; 3]>,
    pub cell: Cell,
    pub pseudopotentials: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl Structure {
    pub fn nat(&self) -> usize {
        self.species.len()
    }

    /// Distinct species in first-appearance order.
    pub fn unique_species(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.species {
            if !out.contains(&s.as_str()) {
                out.push(s);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaterialsError {
    #[error("cannot parse formula `{formula}`: {reason}")]
    Formula { formula: String, reason: String },
    #[error("no {dimensionality} structure for `{formula}`")]
    NotFound { formula: String, dimensionality: Dimensionality },
    #[error("cell is singular (determinant {0:e})")]
    SingularCell(f64),
    #[error("structure `{formula}` is inconsistent: {reason}")]
    Inconsistent { formula: String, reason: String },
    #[error("fixture `{path}`: {reason}")]
    Fixture { path: String, reason: String },
    #[error("materials backend: {0}")]
    Backend(String),
}

#[rustfmt::skip]
const ELEMENTS: &[(&str, f64)] = &[
    ("H", 1.008), ("He", 4.0026), ("Li", 6.94), ("Be", 9.0122), ("B", 10.81), ("C", 12.011),
    ("N", 14.007), ("O", 15.999), ("F", 18.998), ("Ne", 20.180), ("Na", 22.990), ("Mg", 24.305),
    ("Al", 26.982), ("Si", 28.085), ("P", 30.974), ("S", 32.06), ("Cl", 35.45), ("Ar", 39.948),
    ("K", 39.098), ("Ca", 40.078), ("Sc", 44.956), ("Ti", 47.867), ("V", 50.942), ("Cr", 51.996),
    ("Mn", 54.938), ("Fe", 55.845), ("Co", 58.933), ("Ni", 58.693), ("Cu", 63.546), ("Zn", 65.38),
    ("Ga", 69.723), ("Ge", 72.630), ("As", 74.922), ("Se", 78.971), ("Br", 79.904), ("Kr", 83.798),
    ("Rb", 85.468), ("Sr", 87.62), ("Y", 88.906), ("Zr", 91.224), ("Nb", 92.906), ("Mo", 95.95),
    ("Tc", 98.0), ("Ru", 101.07), ("Rh", 102.91), ("Pd", 106.42), ("Ag", 107.87), ("Cd", 112.41),
    ("In", 114.82), ("Sn", 118.71), ("Sb", 121.76), ("Te", 127.60), ("I", 126.90), ("Xe", 131.29),
    ("Cs", 132.91), ("Ba", 137.33), ("La", 138.91), ("Ce", 140.12), ("Pr", 140.91), ("Nd", 144.24),
    ("Pm", 145.0), ("Sm", 150.36), ("Eu", 151.96), ("Gd", 157.25), ("Tb", 158.93), ("Dy", 162.50),
    ("Ho", 164.93), ("Er", 167.26), ("Tm", 168.93), ("Yb", 173.05), ("Lu", 174.97), ("Hf", 178.49),
    ("Ta", 180.95), ("W", 183.84), ("Re", 186.21), ("Os", 190.23), ("Ir", 192.22), ("Pt", 195.08),
    ("Au", 196.97), ("Hg", 200.59), ("Tl", 204.38), ("Pb", 207.2), ("Bi", 208.98), ("Po", 209.0),
    ("At", 210.0), ("Rn", 222.0),
];

/// Standard atomic mass in atomic mass units.
pub fn atomic_mass(symbol: &str) -> Option<f64> {
    ELEMENTS.iter().find(|(s, _)| *s == symbol).map(|(_, m)| *m)
}

const NON_METALS: [&str; 24] = [
    "H", "He", "B", "C", "N", "O", "F", "Ne", "Si", "P", "S", "Cl", "Ar", "Ge", "As", "Se", "Br", "Kr", "Sb", "Te",
    "I", "Xe", "At", "Rn",
];

/// Metals in the element table; metalloids count as non-metals.
pub fn is_metal(symbol: &str) -> bool {
    atomic_mass(symbol).is_some() && !NON_METALS.contains(&symbol)
}

pub fn default_pseudopotential(symbol: &str) -> String {
    format!("{symbol}.pbe-n-kjpaw_psl.1.0.0.UPF")
}

/// Splits a formula such as `BaTiO3` into element counts in order of first
/// appearance. Repeated elements are merged.
pub fn parse_formula(formula: &str) -> Result<Vec<(String, u32)>, MaterialsError> {
    let err = |reason: String| MaterialsError::Formula {
        formula: formula.to_string(),
        reason,
    };
    let chars: Vec<char> = formula.trim().chars().collect();
    if chars.is_empty() {
        return Err(err("empty formula".into()));
    }
    let mut out: Vec<(String, u32)> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_ascii_uppercase() {
            return Err(err(format!("unexpected `{}` at position {i}", chars[i])));
        }
        let mut symbol = chars[i].to_string();
        i += 1;
        if i < chars.len() && chars[i].is_ascii_lowercase() {
            symbol.push(chars[i]);
            i += 1;
        }
        if atomic_mass(&symbol).is_none() {
            return Err(err(format!("unknown element `{symbol}`")));
        }
        let start = i;
        while i < chars.len() && chars[i].is_ascii_digit() {
            i += 1;
        }
        let count = if start == i {
            1
        } else {
            let digits: String = chars[start..i].iter().collect();
            digits
                .parse::<u32>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| err(format!("bad count `{digits}`")))?
        };
        match out.iter_mut().find(|(s, _)| *s == symbol) {
            Some(entry) => entry.1 += count,
            None => out.push((symbol, count)),
        }
    }
    Ok(out)
}

pub fn determinant(c: &Cell) -> f64 {
    c[0][0] * (c[1][1] * c[2][2] - c[1][2] * c[2][1]) - c[0][1] * (c[1][0] * c[2][2] - c[1][2] * c[2][0])
        + c[0][2] * (c[1][0] * c[2][1] - c[1][1] * c[2][0])
}

fn wrap(x: f64) -> f64 {
    let w = x - x.floor();
    // x slightly below an integer can round up to exactly 1.0
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Wraps positions into [0,1) and orders atoms by the first appearance of
/// their element in the formula. Idempotent.
pub fn standardize(structure: &Structure) -> Result<Structure, MaterialsError> {
    let det = determinant(&structure.cell);
    if !det.is_finite() || det.abs() < 1e-10 {
        return Err(MaterialsError::SingularCell(det));
    }
    let inconsistent = |reason: String| MaterialsError::Inconsistent {
        formula: structure.formula.clone(),
        reason,
    };
    if structure.species.len() != structure.positions.len() {
        return Err(inconsistent(format!(
            "{} species for {} positions",
            structure.species.len(),
            structure.positions.len()
        )));
    }
    let formula = parse_formula(&structure.formula)?;
    let rank = |el: &str| formula.iter().position(|(s, _)| s == el);
    let mut per_element = vec![0u32; formula.len()];
    for s in &structure.species {
        let r = rank(s).ok_or_else(|| inconsistent(format!("species {s} not in formula")))?;
        per_element[r] += 1;
    }
    let multiple = per_element[0] / formula[0].1;
    if multiple == 0 || per_element.iter().zip(&formula).any(|(n, (_, c))| *n != multiple * c) {
        return Err(inconsistent("atom counts are not a multiple of the formula".into()));
    }

    let mut atoms: Vec<(usize, &String, [f64; 3])> = structure
        .species
        .iter()
        .zip(&structure.positions)
        .map(|(s, p)| (rank(s).unwrap_or(usize::MAX), s, p.map(wrap)))
        .collect();
    atoms.sort_by_key(|(r, _, _)| *r);

    let mut pseudopotentials = structure.pseudopotentials.clone();
    for (el, _) in &formula {
        pseudopotentials
            .entry(el.clone())
            .or_insert_with(|| default_pseudopotential(el));
    }
    Ok(Structure {
        formula: structure.formula.clone(),
        source: structure.source,
        species: atoms.iter().map(|(_, s, _)| (*s).clone()).collect(),
        positions: atoms.iter().map(|(_, _, p)| *p).collect(),
        cell: structure.cell,
        pseudopotentials,
        metadata: structure.metadata.clone(),
    })
}

/// Source of raw structures.
pub trait StructureBackend: Send + Sync {
    fn fetch(&self, formula: &str, dimensionality: Dimensionality) -> Result<Structure, MaterialsError>;
}

#[derive(Debug, Deserialize)]
struct FixtureDoc {
    formula: String,
    dimensionality: Dimensionality,
    species: Vec<String>,
    positions: Vec<[f64; 3]>,
    cell: Cell,
    #[serde(default)]
    pseudopotentials: BTreeMap<String, String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

macro_rules! shipped {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../data/structures/", $name)))),*]
    };
}

const SHIPPED_FIXTURES: &[(&str, &str)] = shipped!(
    "ag_three_d.json",
    "al_three_d.json",
    "au_three_d.json",
    "batio3_three_d.json",
    "bn_two_d.json",
    "c_three_d.json",
    "c_two_d.json",
    "cu_three_d.json",
    "fe_three_d.json",
    "gaas_three_d.json",
    "mgo_three_d.json",
    "mos2_two_d.json",
    "nacl_three_d.json",
    "ni_three_d.json",
    "pds2_two_d.json",
    "pt_three_d.json",
    "si_three_d.json",
    "tio2_three_d.json",
    "w_three_d.json",
    "wse2_two_d.json",
    "zno_three_d.json",
);

pub fn fixture_file_name(formula: &str, dimensionality: Dimensionality) -> String {
    format!("{}_{}.json", formula.to_lowercase(), dimensionality)
}

/// Fixture-backed store: either the set compiled into the crate or a
/// directory read on each lookup.
#[derive(Debug, Clone)]
pub enum FixtureStore {
    Shipped,
    Directory(PathBuf),
}

impl FixtureStore {
    pub fn shipped() -> Self {
        FixtureStore::Shipped
    }

    pub fn directory(path: impl Into<PathBuf>) -> Self {
        FixtureStore::Directory(path.into())
    }

    fn raw(&self, file: &str) -> Result<Option<String>, MaterialsError> {
        match self {
            FixtureStore::Shipped => Ok(SHIPPED_FIXTURES
                .iter()
                .find(|(n, _)| *n == file)
                .map(|(_, text)| text.to_string())),
            FixtureStore::Directory(dir) => {
                let path = dir.join(file);
                match std::fs::read_to_string(&path) {
                    Ok(t) => Ok(Some(t)),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                    Err(e) => Err(MaterialsError::Fixture {
                        path: path.display().to_string(),
                        reason: e.to_string(),
                    }),
                }
            }
        }
    }
}

impl StructureBackend for FixtureStore {
    fn fetch(&self, formula: &str, dimensionality: Dimensionality) -> Result<Structure, MaterialsError> {
        let file = fixture_file_name(formula, dimensionality);
        let text = self.raw(&file)?.ok_or_else(|| MaterialsError::NotFound {
            formula: formula.to_string(),
            dimensionality,
        })?;
        let doc: FixtureDoc = serde_json::from_str(&text).map_err(|e| MaterialsError::Fixture {
            path: file.clone(),
            reason: e.to_string(),
        })?;
        if doc.dimensionality != dimensionality || doc.formula.to_lowercase() != formula.to_lowercase() {
            return Err(MaterialsError::Fixture {
                path: file,
                reason: "formula or dimensionality does not match the file name".into(),
            });
        }
        Ok(Structure {
            formula: doc.formula,
            source: dimensionality.route(),
            species: doc.species,
            positions: doc.positions,
            cell: doc.cell,
            pseudopotentials: doc.pseudopotentials,
            metadata: doc.metadata,
        })
    }
}

/// Fetches the request's material from the collection matching its
/// dimensionality and standardizes it.
pub fn resolve_structure(request: &ParsedRequest, backend: &dyn StructureBackend) -> Result<Structure, MaterialsError> {
    parse_formula(&request.material_formula)?;
    let raw = backend.fetch(&request.material_formula, request.dimensionality)?;
    let expected = request.dimensionality.route();
    if raw.source != expected {
        return Err(MaterialsError::Backend(format!(
            "backend answered from {:?} for a {} request",
            raw.source, request.dimensionality
        )));
    }
    standardize(&raw)
}

/// Live OPTIMADE client for the Materials Cloud MC2D and MC3D databases.
#[derive(Debug)]
pub struct OptimadeBackend {
    mc2d_url: String,
    mc3d_url: String,
    client: reqwest::blocking::Client,
}

impl OptimadeBackend {
    pub const MC2D_URL: &'static str = "https://optimade.materialscloud.org/main/mc2d-pbe-v1/v1";
    pub const MC3D_URL: &'static str = "https://optimade.materialscloud.org/main/mc3d-pbe-v1/v1";

    pub fn new(mc2d_url: impl Into<String>, mc3d_url: impl Into<String>) -> Result<Self, MaterialsError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(30))
            .build()
            .map_err(|e| MaterialsError::Backend(e.to_string()))?;
        Ok(OptimadeBackend {
            mc2d_url: mc2d_url.into(),
            mc3d_url: mc3d_url.into(),
            client,
        })
    }

    pub fn materials_cloud() -> Result<Self, MaterialsError> {
        OptimadeBackend::new(Self::MC2D_URL, Self::MC3D_URL)
    }
}

/// Builds a [`Structure`] from the first entry of an OPTIMADE `structures`
/// response.
pub fn structure_from_optimade(
    body: &serde_json::Value,
    formula: &str,
    source: StructureSource,
) -> Result<Structure, MaterialsError> {
    let bad = |what: &str| MaterialsError::Backend(format!("OPTIMADE response lacks {what}"));
    let attrs = body
        .pointer("/data/0/attributes")
        .ok_or_else(|| bad("data[0].attributes"))?;
    let cell: Cell = serde_json::from_value(attrs["lattice_vectors"].clone()).map_err(|_| bad("lattice_vectors"))?;
    let cart: Vec<[f64; 3]> =
        serde_json::from_value(attrs["cartesian_site_positions"].clone()).map_err(|_| bad("cartesian_site_positions"))?;
    let species: Vec<String> =
        serde_json::from_value(attrs["species_at_sites"].clone()).map_err(|_| bad("species_at_sites"))?;
    let inv = invert(&cell).ok_or(MaterialsError::SingularCell(determinant(&cell)))?;
    // fractional row vector = cartesian row vector times the inverse cell
    let positions = cart
        .iter()
        .map(|r| std::array::from_fn(|j| (0..3).map(|k| r[k] * inv[k][j]).sum()))
        .collect();
    let mut metadata = BTreeMap::new();
    if let Some(id) = body.pointer("/data/0/id").and_then(|v| v.as_str()) {
        metadata.insert("optimade_id".to_string(), id.to_string());
    }
    Ok(Structure {
        formula: formula.to_string(),
        source,
        species,
        positions,
        cell,
        pseudopotentials: BTreeMap::new(),
        metadata,
    })
}

fn invert(c: &Cell) -> Option<Cell> {
    let det = determinant(c);
    if det.abs() < 1e-12 {
        return None;
    }
    let m = |r: usize, col: usize| c[r % 3][col % 3];
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            // cofactor of (j, i), cyclic form
            *v = (m(j + 1, i + 1) * m(j + 2, i + 2) - m(j + 1, i + 2) * m(j + 2, i + 1)) / det;
        }
    }
    Some(inv)
}

impl StructureBackend for OptimadeBackend {
    fn fetch(&self, formula: &str, dimensionality: Dimensionality) -> Result<Structure, MaterialsError> {
        let base = match dimensionality {
            Dimensionality::TwoD => &self.mc2d_url,
            Dimensionality::ThreeD => &self.mc3d_url,
        };
        let filter = format!("chemical_formula_reduced=\"{formula}\"");
        let body: serde_json::Value = self
            .client
            .get(format!("{base}/structures"))
            .query(&[("filter", filter.as_str()), ("page_limit", "1")])
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| MaterialsError::Backend(e.to_string()))?;
        if body.pointer("/data/0").is_none() {
            return Err(MaterialsError::NotFound {
                formula: formula.to_string(),
                dimensionality,
            });
        }
        structure_from_optimade(&body, formula, dimensionality.route())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn si() -> Structure {
        FixtureStore::shipped().fetch("Si", Dimensionality::ThreeD).unwrap()
    }

    #[test]
    fn formula_parsing() {
        assert_eq!(
            parse_formula("PdS2").unwrap(),
            vec![("Pd".to_string(), 1), ("S".to_string(), 2)]
        );
        assert_eq!(parse_formula("BaTiO3").unwrap().len(), 3);
        assert!(matches!(parse_formula("Xx9"), Err(MaterialsError::Formula { .. })));
        assert!(parse_formula("").is_err());
        assert!(parse_formula("si").is_err());
        assert!(parse_formula("S0").is_err());
    }

    #[test]
    fn si_fixture_is_diamond() {
        let s = si();
        assert_eq!(s.source, StructureSource::Mc3d);
        assert_eq!(s.nat(), 2);
        // fcc primitive volume a^3 / 4
        assert!((determinant(&s.cell).abs() - 5.43f64.powi(3) / 4.0).abs() < 1e-9);
    }

    #[test]
    fn wrapping_and_ordering() {
        let mut s = si();
        s.formula = "GaAs".into();
        s.species = vec!["As".into(), "Ga".into()];
        s.positions = vec![[1.25, -0.5, 0.0], [0.0, 0.0, 0.0]];
        let out = standardize(&s).unwrap();
        assert_eq!(out.species, ["Ga", "As"]);
        assert_eq!(out.positions[1], [0.25, 0.5, 0.0]);
        assert_eq!(standardize(&out).unwrap(), out);
    }

    #[test]
    fn tiny_negative_wraps_below_one() {
        let w = wrap(-1e-17);
        assert!((0.0..1.0).contains(&w));
    }

    #[test]
    fn singular_cell_rejected() {
        let mut s = si();
        s.cell = [[0.0; 3]; 3];
        assert!(matches!(standardize(&s), Err(MaterialsError::SingularCell(_))));
    }

    #[test]
    fn counts_must_match_formula() {
        let mut s = FixtureStore::shipped().fetch("PdS2", Dimensionality::TwoD).unwrap();
        s.species[2] = "Pd".into();
        assert!(matches!(standardize(&s), Err(MaterialsError::Inconsistent { .. })));
    }

    #[test]
    fn every_shipped_fixture_standardizes() {
        for (name, _) in SHIPPED_FIXTURES {
            let (stem, dim) = name.trim_end_matches(".json").split_once('_').unwrap();
            let dim = if dim == "two_d" { Dimensionality::TwoD } else { Dimensionality::ThreeD };
            let raw = FixtureStore::shipped().fetch(stem, dim).unwrap();
            let s = standardize(&raw).unwrap();
            for el in s.unique_species() {
                assert!(atomic_mass(el).is_some());
                assert!(s.pseudopotentials.contains_key(el));
            }
        }
    }

    #[test]
    fn optimade_conversion() {
        let body = serde_json::json!({"data": [{"id": "x1", "attributes": {
            "lattice_vectors": [[2.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 5.0]],
            "cartesian_site_positions": [[1.0, 1.0, 1.0]],
            "species_at_sites": ["Cu"]
        }}]});
        let s = structure_from_optimade(&body, "Cu", StructureSource::Mc3d).unwrap();
        let p = s.positions[0];
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12 && (p[2] - 0.2).abs() < 1e-12);
        assert_eq!(s.metadata["optimade_id"], "x1");
    }

    #[test]
    fn inverse_of_fcc_cell() {
        let c = si().cell;
        let inv = invert(&c).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| c[i][k] * inv[k][j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
