//! Per-timestep graph topology and its block-diagonal batching.

use std::collections::BTreeSet;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::KGSubgraph;
use crate::numeric::{Csr, Segments, SparseMatrix, Tensor};

/// Undirected edge set over local node indices, each pair stored `(lo, hi)`.
pub type EdgeSet = BTreeSet<(usize, usize)>;

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    #[default]
    Full,
    Grouped,
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "grouped" => Ok(Self::Grouped),
            other => Err(Error::Config(format!("unknown connectivity `{other}` (full | grouped)"))),
        }
    }
}

impl std::fmt::Display for Connectivity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Grouped => "grouped",
        })
    }
}

/// Edges of the vitals-plus-text graph. Vitals are nodes `0..n_vs`, the text
/// node is `n_vs` and connects to every vital.
///
/// `groups[j]` is the group of vital `j`; grouped connectivity links only
/// vitals sharing a group.
pub fn build_vsn_edges(n_vs: usize, connectivity: Connectivity, groups: Option<&[usize]>) -> Result<EdgeSet> {
    let mut edges = EdgeSet::new();
    match connectivity {
        Connectivity::Full => {
            for i in 0..n_vs {
                for j in i + 1..n_vs {
                    edges.insert((i, j));
                }
            }
        }
        Connectivity::Grouped => {
            let groups = groups.ok_or_else(|| {
                Error::Config("grouped connectivity requires a feature group map".into())
            })?;
            if groups.len() != n_vs {
                return Err(Error::Config(format!(
                    "group map covers {} features, expected {n_vs}",
                    groups.len()
                )));
            }
            for i in 0..n_vs {
                for j in i + 1..n_vs {
                    if groups[i] == groups[j] {
                        edges.insert((i, j));
                    }
                }
            }
        }
    }
    for j in 0..n_vs {
        edges.insert((j, n_vs));
    }
    Ok(edges)
}

/// All edges of a step graph with `n_vs + 1` vitals-plus-text nodes followed
/// by `k` knowledge nodes: the given VS-N edges, the knowledge edges shifted
/// past the VS-N block, and every VS-N node joined to every knowledge node.
pub fn step_edges(n_vs: usize, vsn_edges: &EdgeSet, kg_edges: &[(usize, usize)], k: usize) -> EdgeSet {
    let base = n_vs + 1;
    let mut edges = vsn_edges.clone();
    edges.extend(kg_edges.iter().map(|&(a, b)| ordered(base + a, base + b)));
    for u in 0..base {
        for v in 0..k {
            edges.insert((u, base + v));
        }
    }
    edges
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum NodeRole {
    Vital { feature: usize },
    Text,
    Kg { concept_id: String },
}

/// Roles of a step graph's nodes in index order.
pub fn step_roles(n_vs: usize, kg_concepts: &[String]) -> Vec<NodeRole> {
    (0..n_vs)
        .map(|feature| NodeRole::Vital { feature })
        .chain(std::iter::once(NodeRole::Text))
        .chain(kg_concepts.iter().map(|c| NodeRole::Kg { concept_id: c.clone() }))
        .collect()
}

/// One timestep's multi-modal graph.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGraph {
    /// `(n_vs + 1 + k) × d`.
    pub node_features: Tensor,
    pub node_roles: Vec<NodeRole>,
    pub edges: EdgeSet,
}

impl StepGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_roles.len()
    }

    pub fn n_vs(&self) -> usize {
        self.node_roles
            .iter()
            .filter(|r| matches!(r, NodeRole::Vital { .. }))
            .count()
    }
}

/// Stacks the VS-N features (vitals then text, `(n_vs + 1) × d`) above the
/// knowledge features and joins the two blocks.
pub fn assemble_step_graph(vsn_features: &Tensor, vsn_edges: &EdgeSet, kg_sub: &KGSubgraph) -> Result<StepGraph> {
    let base = vsn_features.rows();
    let d = vsn_features.cols();
    if base == 0 {
        return Err(Error::Contract("step graph needs at least the text node".into()));
    }
    let n_vs = base - 1;
    let k = kg_sub.len();
    if k > 0 && kg_sub.dim() != d {
        return Err(Error::Contract(format!(
            "VS-N features have dimension {d}, knowledge features {}",
            kg_sub.dim()
        )));
    }
    if let Some(&(a, b)) = vsn_edges.iter().find(|&&(a, b)| a >= base || b >= base || a == b) {
        return Err(Error::Contract(format!("VS-N edge ({a}, {b}) invalid for {base} nodes")));
    }
    let mut values = vsn_features.values().to_vec();
    values.extend_from_slice(&kg_sub.features);
    Ok(StepGraph {
        node_features: Tensor::matrix(base + k, d, values)?,
        node_roles: step_roles(n_vs, &kg_sub.concept_ids),
        edges: step_edges(n_vs, vsn_edges, &kg_sub.edges, k),
    })
}

/// Several graphs stacked block-diagonally, with the sparse structures the
/// message-passing layers need precomputed.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    node_counts: Vec<usize>,
    offsets: Vec<usize>,
    /// Row `u`: `u` itself first, then its neighbours ascending.
    closed: Arc<Csr>,
    /// `1/√(deg u · deg v)` over the closed neighbourhood.
    gcn: Arc<SparseMatrix>,
    /// `1/|N(u)|` over the open neighbourhood.
    neighbor_mean: Arc<SparseMatrix>,
    segments: Arc<Segments>,
}

impl GraphBatch {
    /// `graphs[i]` is `(node count, edges)` with local indices.
    pub fn new(graphs: &[(usize, &EdgeSet)]) -> Result<Self> {
        let node_counts: Vec<usize> = graphs.iter().map(|g| g.0).collect();
        if node_counts.contains(&0) {
            return Err(Error::Contract("graph with no nodes".into()));
        }
        let total: usize = node_counts.iter().sum();
        let mut offsets = Vec::with_capacity(graphs.len());
        let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); total];
        let mut base = 0;
        for &(n, edges) in graphs {
            offsets.push(base);
            for &(a, b) in edges {
                if a >= n || b >= n || a == b {
                    return Err(Error::Contract(format!("edge ({a}, {b}) invalid for {n} nodes")));
                }
                neighbours[base + a].push(base + b);
                neighbours[base + b].push(base + a);
            }
            base += n;
        }
        for list in &mut neighbours {
            list.sort_unstable();
        }
        let closed_rows: Vec<Vec<usize>> = neighbours
            .iter()
            .enumerate()
            .map(|(u, nb)| std::iter::once(u).chain(nb.iter().copied()).collect())
            .collect();
        let closed = Csr::from_rows(total, &closed_rows)?;
        let deg: Vec<f64> = closed_rows.iter().map(|r| r.len() as f64).collect();
        let gcn_w = closed_rows
            .iter()
            .enumerate()
            .flat_map(|(u, r)| r.iter().map(move |&v| (u, v)))
            .map(|(u, v)| 1.0 / (deg[u] * deg[v]).sqrt())
            .collect();
        let open = Csr::from_rows(total, &neighbours)?;
        let mean_w = neighbours
            .iter()
            .flat_map(|r| std::iter::repeat_n(1.0 / r.len() as f64, r.len()))
            .collect();
        Ok(Self {
            segments: Arc::new(Segments::from_lengths(&node_counts)),
            node_counts,
            offsets,
            gcn: Arc::new(SparseMatrix::new(closed.clone(), gcn_w)?),
            closed: Arc::new(closed),
            neighbor_mean: Arc::new(SparseMatrix::new(open, mean_w)?),
        })
    }

    pub fn single(graph: &StepGraph) -> Result<Self> {
        Self::new(&[(graph.num_nodes(), &graph.edges)])
    }

    pub fn num_graphs(&self) -> usize {
        self.node_counts.len()
    }

    pub fn total_nodes(&self) -> usize {
        self.closed.rows()
    }

    pub fn node_count(&self, graph: usize) -> usize {
        self.node_counts[graph]
    }

    pub fn offset(&self, graph: usize) -> usize {
        self.offsets[graph]
    }

    pub fn closed(&self) -> &Arc<Csr> {
        &self.closed
    }

    pub fn gcn_operator(&self) -> &Arc<SparseMatrix> {
        &self.gcn
    }

    pub fn neighbor_mean(&self) -> &Arc<SparseMatrix> {
        &self.neighbor_mean
    }

    pub fn segments(&self) -> &Arc<Segments> {
        &self.segments
    }
}
