//! The `pw.x` knowledge graph: parameter and card nodes, undirected
//! connection edges, and condition keys used as access paths.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The shipped, curated knowledge graph document.
pub const SHIPPED_KG: &str = include_str!("../data/pw_knowledge_graph.json");

#[derive(Debug, Error)]
pub enum KgError {
    #[error("malformed knowledge graph document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("schema violation in node `{node}` field `{field}`: {message}")]
    Schema {
        node: String,
        field: &'static str,
        message: String,
    },
    #[error("node `{node}` lists connection `{target}` which does not exist")]
    DanglingConnection { node: String, target: String },
    #[error("node `{0}` not found")]
    NodeNotFound(String),
    #[error("unknown condition key `{key}`; categories: {categories}; known keys: {known}")]
    UnknownCondition {
        key: String,
        categories: String,
        known: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    NamelistParameter,
    Card,
}

/// QE input data types. Cards carry `Composite`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DataType {
    Character,
    Real,
    Integer,
    Logical,
    Composite,
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DataType::Character => "CHARACTER",
            DataType::Real => "REAL",
            DataType::Integer => "INTEGER",
            DataType::Logical => "LOGICAL",
            DataType::Composite => "COMPOSITE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionCategory {
    CalculationType,
    FunctionalAndMethod,
    CellAndMaterialProperties,
    Pseudopotential,
    MagnetismAndSpin,
    IsolatedSystems,
    KpointSettings,
    ElectricField,
    OccupationTypes,
}

impl ConditionCategory {
    pub const ALL: [ConditionCategory; 9] = [
        ConditionCategory::CalculationType,
        ConditionCategory::FunctionalAndMethod,
        ConditionCategory::CellAndMaterialProperties,
        ConditionCategory::Pseudopotential,
        ConditionCategory::MagnetismAndSpin,
        ConditionCategory::IsolatedSystems,
        ConditionCategory::KpointSettings,
        ConditionCategory::ElectricField,
        ConditionCategory::OccupationTypes,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionCategory::CalculationType => "calculation_type",
            ConditionCategory::FunctionalAndMethod => "functional_and_method",
            ConditionCategory::CellAndMaterialProperties => "cell_and_material_properties",
            ConditionCategory::Pseudopotential => "pseudopotential",
            ConditionCategory::MagnetismAndSpin => "magnetism_and_spin",
            ConditionCategory::IsolatedSystems => "isolated_systems",
            ConditionCategory::KpointSettings => "kpoint_settings",
            ConditionCategory::ElectricField => "electric_field",
            ConditionCategory::OccupationTypes => "occupation_types",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionKey {
    pub key: String,
    pub category: ConditionCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgNode {
    pub name: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub namelist: Option<String>,
    pub description: String,
    pub data_type: DataType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_values: Option<Vec<String>>,
    #[serde(default)]
    pub connections: Vec<String>,
    #[serde(default)]
    pub conditions: Vec<String>,
    #[serde(default)]
    pub required: bool,
    /// Fields this version does not understand, kept for re-serialization.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl KgNode {
    pub fn is_card(&self) -> bool {
        self.kind == NodeKind::Card
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestDoc {
    node_count: usize,
    edge_count: usize,
    #[serde(default)]
    condition_count: usize,
    #[serde(default)]
    version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GraphDoc {
    manifest: ManifestDoc,
    #[serde(default)]
    nodes: Vec<KgNode>,
    #[serde(default)]
    conditions: Vec<ConditionKey>,
}

#[derive(Debug, Deserialize)]
struct RawDoc {
    manifest: ManifestDoc,
    #[serde(default)]
    nodes: Vec<serde_json::Value>,
    #[serde(default)]
    conditions: Vec<ConditionKey>,
}

/// A disagreement between the declared manifest and the live structures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestWarning {
    pub field: &'static str,
    pub declared: usize,
    pub actual: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GraphStats {
    pub node_count: usize,
    pub edge_count: usize,
    pub condition_count: usize,
    pub warnings: Vec<ManifestWarning>,
}

/// Loaded, indexed, immutable knowledge graph.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    version: String,
    declared: ManifestDoc,
    nodes: Vec<KgNode>,
    by_name: HashMap<String, usize>,
    adjacency: Vec<BTreeSet<usize>>,
    conditions: Vec<ConditionKey>,
    condition_index: BTreeMap<String, BTreeSet<String>>,
    edge_count: usize,
}

impl KnowledgeGraph {
    pub fn load(document: &str) -> Result<Self, KgError> {
        let raw: RawDoc = serde_json::from_str(document)?;
        let mut nodes = Vec::with_capacity(raw.nodes.len());
        for (i, value) in raw.nodes.into_iter().enumerate() {
            let label = value
                .get("name")
                .and_then(|n| n.as_str())
                .map(str::to_string)
                .unwrap_or_else(|| format!("#{i}"));
            if let Some(obj) = value.as_object() {
                if let Some((field, _)) = obj.iter().find(|(_, v)| v.is_null()) {
                    return Err(KgError::Schema {
                        node: label,
                        field: "record",
                        message: format!("field `{field}` is null; absent optionals must be omitted"),
                    });
                }
            }
            let node: KgNode = serde_json::from_value(value).map_err(|e| KgError::Schema {
                node: label,
                field: "record",
                message: e.to_string(),
            })?;
            nodes.push(node);
        }
        Self::from_doc(GraphDoc {
            manifest: raw.manifest,
            nodes,
            conditions: raw.conditions,
        })
    }

    /// The curated graph bundled with the crate.
    pub fn shipped() -> Self {
        Self::load(SHIPPED_KG).expect("shipped knowledge graph is valid")
    }

    fn from_doc(doc: GraphDoc) -> Result<Self, KgError> {
        let mut by_name = HashMap::with_capacity(doc.nodes.len());
        for (i, node) in doc.nodes.iter().enumerate() {
            if node.name.trim().is_empty() {
                return Err(KgError::Schema {
                    node: format!("#{i}"),
                    field: "name",
                    message: "empty name".into(),
                });
            }
            if by_name.insert(node.name.clone(), i).is_some() {
                return Err(KgError::Schema {
                    node: node.name.clone(),
                    field: "name",
                    message: "duplicate node name".into(),
                });
            }
            if node.kind == NodeKind::Card && node.data_type != DataType::Composite {
                return Err(KgError::Schema {
                    node: node.name.clone(),
                    field: "data_type",
                    message: "card nodes must be COMPOSITE".into(),
                });
            }
        }

        let mut known_conditions: BTreeMap<&str, ConditionCategory> = BTreeMap::new();
        for c in &doc.conditions {
            if known_conditions.insert(&c.key, c.category).is_some() {
                return Err(KgError::Schema {
                    node: c.key.clone(),
                    field: "conditions",
                    message: "condition key declared twice".into(),
                });
            }
        }

        let mut adjacency = vec![BTreeSet::new(); doc.nodes.len()];
        let mut edge_count = 0;
        let mut condition_index: BTreeMap<String, BTreeSet<String>> = doc
            .conditions
            .iter()
            .map(|c| (c.key.clone(), BTreeSet::new()))
            .collect();

        for (i, node) in doc.nodes.iter().enumerate() {
            for target in &node.connections {
                let j = *by_name
                    .get(target)
                    .ok_or_else(|| KgError::DanglingConnection {
                        node: node.name.clone(),
                        target: target.clone(),
                    })?;
                if i == j {
                    continue;
                }
                if adjacency[i].insert(j) {
                    adjacency[j].insert(i);
                    edge_count += 1;
                }
            }
            for key in &node.conditions {
                if !known_conditions.contains_key(key.as_str()) {
                    return Err(KgError::Schema {
                        node: node.name.clone(),
                        field: "conditions",
                        message: format!("condition `{key}` is not declared in any category"),
                    });
                }
                condition_index
                    .get_mut(key)
                    .expect("declared")
                    .insert(node.name.clone());
            }
        }

        Ok(KnowledgeGraph {
            version: doc.manifest.version.clone(),
            declared: doc.manifest,
            nodes: doc.nodes,
            by_name,
            adjacency,
            conditions: doc.conditions,
            condition_index,
            edge_count,
        })
    }

    /// Serializes back into the KG document format.
    pub fn to_document(&self) -> String {
        let doc = GraphDoc {
            manifest: ManifestDoc {
                node_count: self.nodes.len(),
                edge_count: self.edge_count,
                condition_count: self.conditions.len(),
                version: self.version.clone(),
            },
            nodes: self.nodes.clone(),
            conditions: self.conditions.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serializes")
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn nodes(&self) -> &[KgNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Exact, case-sensitive lookup.
    pub fn get_node(&self, name: &str) -> Option<&KgNode> {
        self.by_name.get(name).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    /// One-hop neighbors over the undirected closure of `connections`,
    /// ordered by name.
    pub fn neighbors(&self, name: &str) -> Result<Vec<&KgNode>, KgError> {
        let i = *self
            .by_name
            .get(name)
            .ok_or_else(|| KgError::NodeNotFound(name.to_string()))?;
        let mut out: Vec<&KgNode> = self.adjacency[i].iter().map(|&j| &self.nodes[j]).collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(out)
    }

    pub fn condition_keys(&self) -> &[ConditionKey] {
        &self.conditions
    }

    pub fn condition(&self, key: &str) -> Option<&ConditionKey> {
        self.conditions.iter().find(|c| c.key == key)
    }

    /// Nodes tagged with `key`, lexicographic by name.
    pub fn nodes_for_condition(&self, key: &str) -> Result<Vec<&KgNode>, KgError> {
        let names = self
            .condition_index
            .get(key)
            .ok_or_else(|| self.unknown_condition(key))?;
        Ok(names
            .iter()
            .map(|n| self.get_node(n).expect("indexed node exists"))
            .collect())
    }

    fn unknown_condition(&self, key: &str) -> KgError {
        KgError::UnknownCondition {
            key: key.to_string(),
            categories: ConditionCategory::ALL
                .iter()
                .map(|c| c.as_str())
                .collect::<Vec<_>>()
                .join(", "),
            known: self
                .conditions
                .iter()
                .map(|c| c.key.as_str())
                .collect::<Vec<_>>()
                .join(", "),
        }
    }

    pub fn required_nodes(&self) -> impl Iterator<Item = &KgNode> {
        self.nodes.iter().filter(|n| n.required)
    }

    /// Counts from the live structures, with manifest mismatches reported.
    pub fn stats(&self) -> GraphStats {
        let node_count = self.nodes.len();
        let mut pairs = BTreeSet::new();
        for (i, adj) in self.adjacency.iter().enumerate() {
            for &j in adj {
                pairs.insert((i.min(j), i.max(j)));
            }
        }
        let edge_count = pairs.len();
        let condition_count = self.conditions.len();
        let mut warnings = Vec::new();
        for (field, declared, actual) in [
            ("node_count", self.declared.node_count, node_count),
            ("edge_count", self.declared.edge_count, edge_count),
            ("condition_count", self.declared.condition_count, condition_count),
        ] {
            if declared != actual {
                warnings.push(ManifestWarning {
                    field,
                    declared,
                    actual,
                });
            }
        }
        GraphStats {
            node_count,
            edge_count,
            condition_count,
            warnings,
        }
    }
}
