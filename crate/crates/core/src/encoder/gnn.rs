//! Message-passing layers over a [`GraphBatch`] and node aggregation.

use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{GraphBatch, NodeRole, StepGraph};
use crate::error::{Error, Result};
use crate::numeric::{ParameterSet, Reduce, Tape, Tensor, Var, ATTENTION_LEAKY_SLOPE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Gcn,
    Attention,
    #[default]
    SampleAggregate,
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Self::Gcn),
            "attention" | "gat" => Ok(Self::Attention),
            "sample-aggregate" | "sage" | "graphsage" => Ok(Self::SampleAggregate),
            other => Err(Error::Config(format!(
                "unknown layer kind `{other}` (gcn | attention | sample-aggregate)"
            ))),
        }
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gcn => "gcn",
            Self::Attention => "attention",
            Self::SampleAggregate => "sample-aggregate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
    Max,
}

impl Aggregation {
    fn reduce(self) -> Reduce {
        match self {
            Self::Sum => Reduce::Sum,
            Self::Mean => Reduce::Mean,
            Self::Max => Reduce::Max,
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!("unknown aggregation `{other}` (sum | mean | max)"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
            Self::Max => "max",
        })
    }
}

/// Layer kind and depth of a stack of message-passing layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GnnSpec {
    pub kind: LayerKind,
    pub depth: usize,
    pub dim: usize,
}

fn path(layer: usize, name: &str) -> String {
    format!("gnn.{layer}.{name}")
}

/// Adds `gnn.{i}.weight` (`d × d`, or `2d × d` for sample-aggregate) and
/// `gnn.{i}.bias`; attention layers also get `attn_src` and `attn_dst`.
pub fn init_gnn<R: Rng>(params: &mut ParameterSet, spec: GnnSpec, rng: &mut R) -> Result<()> {
    let d = spec.dim;
    for i in 0..spec.depth {
        let rows = if spec.kind == LayerKind::SampleAggregate { 2 * d } else { d };
        params.insert_glorot(&path(i, "weight"), rows, d, rng)?;
        params.insert_zeros(&path(i, "bias"), 1, d)?;
        if spec.kind == LayerKind::Attention {
            params.insert_glorot(&path(i, "attn_src"), d, 1, rng)?;
            params.insert_glorot(&path(i, "attn_dst"), d, 1, rng)?;
        }
    }
    Ok(())
}

/// Output node features and, for attention layers, the per-layer
/// coefficients over [`GraphBatch::closed`] entries (`nnz × 1`).
#[derive(Debug, Clone)]
pub struct GnnOutput {
    pub features: Var,
    pub attention: Vec<Var>,
}

pub fn gnn_forward(
    tape: &mut Tape,
    params: &ParameterSet,
    spec: GnnSpec,
    batch: &GraphBatch,
    features: Var,
) -> Result<GnnOutput> {
    let (rows, cols) = tape.dims(features);
    if rows != batch.total_nodes() {
        return Err(Error::Contract(format!(
            "{rows} feature rows for {} graph nodes",
            batch.total_nodes()
        )));
    }
    if spec.depth > 0 && cols != spec.dim {
        return Err(Error::Contract(format!("features have dimension {cols}, layers {}", spec.dim)));
    }
    let mut h = features;
    let mut attention = Vec::new();
    for i in 0..spec.depth {
        let w = tape.param(params, &path(i, "weight"))?;
        let b = tape.param(params, &path(i, "bias"))?;
        let pre = match spec.kind {
            LayerKind::Gcn => {
                let mixed = tape.spmm(batch.gcn_operator().clone(), h)?;
                tape.matmul(mixed, w)?
            }
            LayerKind::SampleAggregate => {
                let mean = tape.spmm(batch.neighbor_mean().clone(), h)?;
                let both = tape.concat_cols(&[h, mean])?;
                tape.matmul(both, w)?
            }
            LayerKind::Attention => {
                let a_src = tape.param(params, &path(i, "attn_src"))?;
                let a_dst = tape.param(params, &path(i, "attn_dst"))?;
                let wh = tape.matmul(h, w)?;
                let s = tape.matmul(wh, a_src)?;
                let t = tape.matmul(wh, a_dst)?;
                let raw = tape.edge_scores(s, t, batch.closed().clone())?;
                let scores = tape.leaky_relu(raw, ATTENTION_LEAKY_SLOPE)?;
                let alpha = tape.edge_softmax(scores, batch.closed().clone())?;
                attention.push(alpha);
                tape.edge_aggregate(alpha, wh, batch.closed().clone())?
            }
        };
        let biased = tape.add(pre, b)?;
        h = tape.relu(biased)?;
    }
    Ok(GnnOutput { features: h, attention })
}

/// Reduces each graph of the batch to one row: `graphs × d`.
pub fn aggregate_nodes(tape: &mut Tape, batch: &GraphBatch, features: Var, mode: Aggregation) -> Result<Var> {
    tape.reduce_segments(features, batch.segments().clone(), mode.reduce())
}

/// Column-wise reduction of a single `nodes × d` matrix.
pub fn aggregate_matrix(features: &Tensor, mode: Aggregation) -> Result<Vec<f64>> {
    if features.rows() == 0 {
        return Err(Error::Contract("cannot aggregate an empty graph".into()));
    }
    let mut tape = Tape::new();
    let v = tape.constant(features);
    let out = tape.reduce_rows(v, mode.reduce())?;
    Ok(tape.values(out).to_vec())
}

/// Dense attention coefficients of one layer at one timestep. Entry
/// `alpha[u * size + v]` is the weight node `u` gives to node `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub timestep: usize,
    pub size: usize,
    pub alpha: Vec<f64>,
    pub node_roles: Vec<NodeRole>,
}

impl AttentionRecord {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.alpha[u * self.size + v]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.alpha.chunks(self.size).map(|r| r.iter().sum()).collect()
    }

    /// Total attention received by each node.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.size];
        for row in self.alpha.chunks(self.size) {
            out.iter_mut().zip(row).for_each(|(o, a)| *o += a);
        }
        out
    }
}

/// Densifies the attention coefficients of every layer for every graph in
/// the batch. `timesteps[g]` and `roles[g]` describe graph `g`.
pub fn attention_records(
    tape: &Tape,
    batch: &GraphBatch,
    attention: &[Var],
    timesteps: &[usize],
    roles: &[Vec<NodeRole>],
) -> Result<Vec<AttentionRecord>> {
    if timesteps.len() != batch.num_graphs() || roles.len() != batch.num_graphs() {
        return Err(Error::Contract("one timestep and role map per graph required".into()));
    }
    let closed = batch.closed();
    let mut out = Vec::with_capacity(attention.len() * batch.num_graphs());
    for g in 0..batch.num_graphs() {
        let (base, n) = (batch.offset(g), batch.node_count(g));
        if roles[g].len() != n {
            return Err(Error::Contract(format!("graph {g} has {n} nodes, {} roles", roles[g].len())));
        }
        for (layer, &a) in attention.iter().enumerate() {
            let values = tape.values(a);
            let mut alpha = vec![0.0; n * n];
            for u in 0..n {
                for e in closed.row_range(base + u) {
                    let v = closed.indices()[e] - base;
                    alpha[u * n + v] = values[e];
                }
            }
            out.push(AttentionRecord {
                layer,
                timestep: timesteps[g],
                size: n,
                alpha,
                node_roles: roles[g].clone(),
            });
        }
    }
    Ok(out)
}

/// Runs the layers over one step graph on a fresh tape.
pub fn gnn_forward_step(
    params: &ParameterSet,
    spec: GnnSpec,
    graph: &StepGraph,
    timestep: usize,
) -> Result<(Tensor, Vec<AttentionRecord>)> {
    let batch = GraphBatch::single(graph)?;
    let mut tape = Tape::new();
    let x = tape.constant(&graph.node_features);
    let out = gnn_forward(&mut tape, params, spec, &batch, x)?;
    let records = attention_records(
        &tape,
        &batch,
        &out.attention,
        &[timestep],
        std::slice::from_ref(&graph.node_roles),
    )?;
    Ok((tape.tensor(out.features), records))
}

pub fn write_attention_jsonl(path: &Path, records: &[AttentionRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_attention_jsonl(path: &Path) -> Result<Vec<AttentionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AttentionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if rec.alpha.len() != rec.size * rec.size {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("alpha has {} entries for size {}", rec.alpha.len(), rec.size),
            });
        }
        out.push(rec);
    }
    Ok(out)
}
