use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embed::EmbeddingProvider;
use crate::error::{Error, Result};

/// Default cap on knowledge nodes per timestep.
pub const DEFAULT_MAX_KG_NODES: usize = 30;

/// An undirected concept pair stored in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConceptPair(String, String);

impl ConceptPair {
    /// Returns `None` for self-loops.
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Option<Self> {
        let (a, b) = (a.into(), b.into());
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Some(Self(a, b)),
            std::cmp::Ordering::Greater => Some(Self(b, a)),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn first(&self) -> &str {
        &self.0
    }

    pub fn second(&self) -> &str {
        &self.1
    }
}

/// Parses an ontology edge list: two tab- or whitespace-separated concept
/// ids per line, `#` comments. Self-loops are dropped and duplicates collapse.
pub fn parse_edges(text: &str, origin: &Path) -> Result<BTreeSet<ConceptPair>> {
    let mut edges = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or_default().trim();
        if content.is_empty() {
            continue;
        }
        let cols: Vec<&str> = content.split_whitespace().collect();
        if cols.len() != 2 {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: idx + 1,
                message: format!("expected two concept ids, found {}", cols.len()),
            });
        }
        if let Some(p) = ConceptPair::new(cols[0], cols[1]) {
            edges.insert(p);
        }
    }
    Ok(edges)
}

pub fn load_edges(path: &Path) -> Result<BTreeSet<ConceptPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edges(&text, path)
}

pub fn edges_to_tsv(edges: &BTreeSet<ConceptPair>) -> String {
    let mut out = String::from("# concept_a\tconcept_b\n");
    for e in edges {
        out.push_str(&format!("{}\t{}\n", e.0, e.1));
    }
    out
}

/// Concepts observed anywhere in the data, the ontology edges among them,
/// and one frozen embedding per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalKnowledgeGraph {
    dim: usize,
    nodes: BTreeSet<String>,
    edges: BTreeSet<ConceptPair>,
    embeddings: BTreeMap<String, Vec<f64>>,
    #[serde(skip)]
    adjacency: BTreeMap<String, BTreeSet<String>>,
}

impl GlobalKnowledgeGraph {
    /// Nodes are the union of `concept_sets`; edges are the ontology edges
    /// with both endpoints among those nodes.
    pub fn build<'a, I>(
        concept_sets: I,
        ontology_edges: &BTreeSet<ConceptPair>,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = &'a BTreeSet<String>>,
    {
        let mut nodes = BTreeSet::new();
        for set in concept_sets {
            nodes.extend(set.iter().cloned());
        }
        let edges: BTreeSet<ConceptPair> = ontology_edges
            .iter()
            .filter(|e| nodes.contains(&e.0) && nodes.contains(&e.1))
            .cloned()
            .collect();
        let mut embeddings = BTreeMap::new();
        for n in &nodes {
            let v = provider.embed(n)?;
            if v.len() != provider.dim() {
                return Err(Error::Contract(format!(
                    "provider returned {} values for {n}, expected {}",
                    v.len(),
                    provider.dim()
                )));
            }
            embeddings.insert(n.clone(), v);
        }
        Ok(Self::from_parts(provider.dim(), nodes, edges, embeddings))
    }

    fn from_parts(
        dim: usize,
        nodes: BTreeSet<String>,
        edges: BTreeSet<ConceptPair>,
        embeddings: BTreeMap<String, Vec<f64>>,
    ) -> Self {
        let mut g = Self {
            dim,
            nodes,
            edges,
            embeddings,
            adjacency: BTreeMap::new(),
        };
        g.rebuild_adjacency();
        g
    }

    fn rebuild_adjacency(&mut self) {
        self.adjacency.clear();
        for e in &self.edges {
            self.adjacency.entry(e.0.clone()).or_default().insert(e.1.clone());
            self.adjacency.entry(e.1.clone()).or_default().insert(e.0.clone());
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> &BTreeSet<String> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<ConceptPair> {
        &self.edges
    }

    pub fn embedding(&self, concept_id: &str) -> Option<&[f64]> {
        self.embeddings.get(concept_id).map(Vec::as_slice)
    }

    pub fn contains(&self, concept_id: &str) -> bool {
        self.nodes.contains(concept_id)
    }

    pub fn has_edge(&self, a: &str, b: &str) -> bool {
        self.adjacency.get(a).is_some_and(|n| n.contains(b))
    }

    /// Restriction of the graph to `concepts`, capped at `max_kg_nodes`.
    ///
    /// When more candidates are present than the cap allows, the most
    /// frequently mentioned are kept (ties by ascending concept id); the
    /// kept nodes are listed in that same order.
    pub fn query_subgraph(
        &self,
        concepts: &BTreeSet<String>,
        occurrence_counts: &BTreeMap<String, usize>,
        max_kg_nodes: usize,
    ) -> KGSubgraph {
        let mut candidates: Vec<&String> = concepts.iter().filter(|c| self.contains(c)).collect();
        candidates.sort_by(|a, b| {
            let ca = occurrence_counts.get(*a).copied().unwrap_or(0);
            let cb = occurrence_counts.get(*b).copied().unwrap_or(0);
            cb.cmp(&ca).then_with(|| a.cmp(b))
        });
        candidates.truncate(max_kg_nodes);
        let concept_ids: Vec<String> = candidates.into_iter().cloned().collect();
        let mut edges = Vec::new();
        for i in 0..concept_ids.len() {
            for j in i + 1..concept_ids.len() {
                if self.has_edge(&concept_ids[i], &concept_ids[j]) {
                    edges.push((i, j));
                }
            }
        }
        let mut features = Vec::with_capacity(concept_ids.len() * self.dim);
        for c in &concept_ids {
            features.extend_from_slice(&self.embeddings[c]);
        }
        KGSubgraph {
            dim: self.dim,
            concept_ids,
            edges,
            features,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut g: Self = serde_json::from_str(text)?;
        for n in &g.nodes {
            match g.embeddings.get(n) {
                Some(v) if v.len() == g.dim => {}
                _ => return Err(Error::Input(format!("knowledge graph node {n} lacks a {}-d embedding", g.dim))),
            }
        }
        if let Some(e) = g.edges.iter().find(|e| !g.nodes.contains(&e.0) || !g.nodes.contains(&e.1)) {
            return Err(Error::Input(format!("edge {}-{} references an unknown node", e.0, e.1)));
        }
        g.rebuild_adjacency();
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Per-timestep restriction of the global graph.
#[derive(Debug, Clone, PartialEq)]
pub struct KGSubgraph {
    dim: usize,
    /// Local index → concept id.
    pub concept_ids: Vec<String>,
    /// Local `(i, j)` pairs with `i < j`.
    pub edges: Vec<(usize, usize)>,
    /// Row-major `k × dim` node features.
    pub features: Vec<f64>,
}

impl KGSubgraph {
    pub fn new(dim: usize, concept_ids: Vec<String>, edges: Vec<(usize, usize)>, features: Vec<f64>) -> Result<Self> {
        let k = concept_ids.len();
        if features.len() != k * dim {
            return Err(Error::shape("kg-subgraph", format!("{} feature values for {k} nodes of dimension {dim}", features.len())));
        }
        if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= b || b >= k) {
            return Err(Error::Contract(format!("subgraph edge ({a}, {b}) invalid for {k} nodes")));
        }
        Ok(Self {
            dim,
            concept_ids,
            edges,
            features,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            concept_ids: Vec::new(),
            edges: Vec::new(),
            features: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.concept_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concept_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}
