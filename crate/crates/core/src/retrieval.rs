//! Hashing-vectorizer retrieval over the knowledge graph.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::kg::{KgError, KgNode, KnowledgeGraph};

/// Number of hashed feature buckets (2^17).
pub const FEATURE_DIM: u32 = 1 << 17;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Fraction of positively scored nodes kept by [`keyword_search`], as a
/// ratio of integers so the cutoff is exact: ceil(7N / 10).
const KEEP_NUM: usize = 7;
const KEEP_DEN: usize = 10;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercases, splits on every non-alphanumeric character and drops tokens
/// shorter than two characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_string)
        .collect()
}

/// Sparse signed-count vector in the 2^17 hashed feature space.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseVector {
    entries: BTreeMap<u32, i64>,
}

impl SparseVector {
    pub fn dimension(&self) -> u32 {
        FEATURE_DIM
    }

    pub fn entries(&self) -> &BTreeMap<u32, i64> {
        &self.entries
    }

    pub fn get(&self, index: u32) -> i64 {
        self.entries.get(&index).copied().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    fn add(&mut self, index: u32, delta: i64) {
        let slot = self.entries.entry(index).or_insert(0);
        *slot += delta;
        if *slot == 0 {
            self.entries.remove(&index);
        }
    }

    pub fn dot(&self, other: &SparseVector) -> i64 {
        let (small, large) = if self.entries.len() <= other.entries.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .entries
            .iter()
            .map(|(i, v)| v * large.get(*i))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        (self.entries.values().map(|v| (v * v) as f64).sum::<f64>()).sqrt()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (u32, i64)>) -> Self {
        let mut v = SparseVector::default();
        for (i, w) in entries {
            assert!(i < FEATURE_DIM, "index {i} out of range");
            v.add(i, w);
        }
        v
    }
}

/// Bucket index and sign for one token.
pub fn hash_token(token: &str) -> (u32, i64) {
    let h = fnv1a64(token.as_bytes());
    let index = (h % u64::from(FEATURE_DIM)) as u32;
    let sign = if h >> 63 == 0 { 1 } else { -1 };
    (index, sign)
}

pub fn vectorize(text: &str) -> SparseVector {
    let mut v = SparseVector::default();
    for token in tokenize(text) {
        let (index, sign) = hash_token(&token);
        v.add(index, sign);
    }
    v
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &SparseVector, b: &SparseVector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) as f64 / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedNode {
    pub node_name: String,
    pub similarity: f64,
}

/// Number of results kept out of `positives` strictly positive matches.
pub fn keep_count(positives: usize) -> usize {
    (KEEP_NUM * positives).div_ceil(KEEP_DEN)
}

pub fn node_text(node: &KgNode) -> String {
    format!("{} {}", node.name, node.description)
}

/// Precomputed node vectors for repeated searches against one graph.
#[derive(Debug, Clone)]
pub struct NodeIndex<'g> {
    graph: &'g KnowledgeGraph,
    vectors: Vec<SparseVector>,
}

impl<'g> NodeIndex<'g> {
    pub fn new(graph: &'g KnowledgeGraph) -> Self {
        let vectors = graph.nodes().iter().map(|n| vectorize(&node_text(n))).collect();
        NodeIndex { graph, vectors }
    }

    pub fn search<S: AsRef<str>>(&self, keywords: &[S]) -> Vec<RankedNode> {
        let query = vectorize(
            &keywords
                .iter()
                .map(|k| k.as_ref())
                .collect::<Vec<_>>()
                .join(" "),
        );
        if query.is_zero() {
            return Vec::new();
        }
        let mut scored: Vec<RankedNode> = self
            .graph
            .nodes()
            .iter()
            .zip(&self.vectors)
            .filter_map(|(node, v)| {
                let s = cosine(&query, v);
                (s > 0.0).then(|| RankedNode {
                    node_name: node.name.clone(),
                    similarity: s,
                })
            })
            .collect();
        scored.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.node_name.cmp(&b.node_name))
        });
        scored.truncate(keep_count(scored.len()));
        scored
    }
}

/// Ranks nodes by cosine similarity of `name + description` against the
/// joined keywords and keeps the top 70% of the positive matches.
pub fn keyword_search<S: AsRef<str>>(graph: &KnowledgeGraph, keywords: &[S]) -> Vec<RankedNode> {
    NodeIndex::new(graph).search(keywords)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub required: Vec<String>,
    pub keyword_hits: Vec<RankedNode>,
    pub condition_hits: BTreeSet<String>,
    pub expanded: BTreeSet<String>,
    /// Deduplicated concatenation in segment order required, keyword,
    /// condition, expanded.
    pub final_nodes: Vec<String>,
}

/// Gathers the three retrieval parts: required nodes, keyword hits, and
/// condition hits plus their one-hop neighbors.
pub fn assemble_candidates<S: AsRef<str>>(
    graph: &KnowledgeGraph,
    keywords: &[S],
    condition_keys: &[S],
) -> Result<CandidateSet, KgError> {
    let mut condition_hits = BTreeSet::new();
    for key in condition_keys {
        for node in graph.nodes_for_condition(key.as_ref())? {
            condition_hits.insert(node.name.clone());
        }
    }
    let mut expanded = BTreeSet::new();
    for name in &condition_hits {
        for n in graph.neighbors(name)? {
            expanded.insert(n.name.clone());
        }
    }
    let required: Vec<String> = graph.required_nodes().map(|n| n.name.clone()).collect();
    let keyword_hits = keyword_search(graph, keywords);

    let mut seen = HashSet::new();
    let final_nodes = required
        .iter()
        .chain(keyword_hits.iter().map(|r| &r.node_name))
        .chain(condition_hits.iter())
        .chain(expanded.iter())
        .filter(|n| seen.insert(n.as_str()))
        .cloned()
        .collect();

    Ok(CandidateSet {
        required,
        keyword_hits,
        condition_hits,
        expanded,
        final_nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_text_is_zero_vector() {
        assert!(vectorize("").is_zero());
        assert!(vectorize("  -- _ k ").is_zero());
    }

    #[test]
    fn repeated_token_accumulates() {
        let v = vectorize("ecutwfc ecutwfc");
        assert_eq!(v.entries().len(), 1);
        let (idx, sign) = hash_token("ecutwfc");
        assert_eq!(v.get(idx), 2 * sign);
    }

    #[test]
    fn tokenizer_splits_and_drops_short() {
        assert_eq!(tokenize("K-points k_points"), ["points", "points"]);
        assert_eq!(vectorize("K-points k_points").entries().len(), 1);
        assert_eq!(tokenize("Hubbard_U(1)=4.0"), ["hubbard"]);
    }

    #[test]
    fn cosine_closed_forms() {
        let a = SparseVector::from_entries([(1, 1), (2, 1)]);
        let b = SparseVector::from_entries([(1, 1)]);
        assert!((cosine(&a, &b) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
        let c = SparseVector::from_entries([(9, 3)]);
        assert_eq!(cosine(&a, &c), 0.0);
        assert_eq!(cosine(&a, &SparseVector::default()), 0.0);
    }

    #[test]
    fn keep_count_is_ceiling() {
        assert_eq!(keep_count(0), 0);
        assert_eq!(keep_count(1), 1);
        assert_eq!(keep_count(3), 3);
        assert_eq!(keep_count(10), 7);
        assert_eq!(keep_count(11), 8);
    }

    #[test]
    fn shipped_metallic_condition_expands() {
        let g = KnowledgeGraph::shipped();
        let c = assemble_candidates(&g, &[] as &[&str], &["Metallic systems"]).unwrap();
        assert!(c.condition_hits.contains("smearing"));
        for name in &c.condition_hits {
            assert!(c.final_nodes.contains(name));
            for n in g.neighbors(name).unwrap() {
                assert!(c.final_nodes.contains(&n.name));
            }
        }
    }

    #[test]
    fn empty_inputs_yield_required_only() {
        let g = KnowledgeGraph::shipped();
        let c = assemble_candidates(&g, &[] as &[&str], &[]).unwrap();
        let required: Vec<_> = g.required_nodes().map(|n| n.name.clone()).collect();
        assert_eq!(c.final_nodes, required);
    }

    #[test]
    fn unknown_condition_propagates() {
        let g = KnowledgeGraph::shipped();
        assert!(assemble_candidates(&g, &[] as &[&str], &["Not a condition"]).is_err());
    }
}
