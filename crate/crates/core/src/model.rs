//! The composed model: feature tokenizer, step graphs with message passing,
//! node aggregation, recurrence and the task head.
//!
//! All step graphs of an episode are stacked into one block-diagonal batch
//! so the message-passing layers run once per episode rather than once per
//! step.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::encoder::{
    aggregate_nodes, attention_records, build_vsn_edges, gnn_forward, init_gnn, init_tokenizer, step_edges,
    step_roles, tokenize_present, Aggregation, AttentionRecord, Connectivity, EdgeSet, GnnSpec, GraphBatch,
    LayerKind, NodeRole, TextEncoder,
};
use crate::error::{Error, Result};
use crate::knowledge::{ConceptMatcher, EmbeddingProvider, GlobalKnowledgeGraph};
use crate::numeric::{ParameterSet, Tape, Tensor, Var};
use crate::sequence::{head_forward, init_head, init_recurrent, predict, recurrent_forward, TaskKind};

/// Which inputs and components a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modalities {
    pub use_ft: bool,
    pub use_gnn: bool,
    pub use_text: bool,
    pub use_kg: bool,
}

impl Modalities {
    pub const FULL: Self = Self::new(true, true, true, true);

    pub const fn new(use_ft: bool, use_gnn: bool, use_text: bool, use_kg: bool) -> Self {
        Self {
            use_ft,
            use_gnn,
            use_text,
            use_kg,
        }
    }

    /// Knowledge nodes need the graph layers, and the graph layers need
    /// tokenized vitals.
    pub fn validate(self) -> Result<()> {
        if self.use_kg && !self.use_gnn {
            return Err(Error::Config("use_kg requires use_gnn".into()));
        }
        if self.use_gnn && !self.use_ft {
            return Err(Error::Config("use_gnn requires use_ft".into()));
        }
        Ok(())
    }
}

/// The seven rungs of the component ablation, in table order.
pub const ABLATION_LADDER: [(&str, Modalities); 7] = [
    ("LSTM (Vital Signs only)", Modalities::new(false, false, false, false)),
    ("LSTM-FT (Vital Signs only)", Modalities::new(true, false, false, false)),
    ("LSTM-FT-GNN (Vital Signs only)", Modalities::new(true, true, false, false)),
    ("LSTM (Vital Signs & Text)", Modalities::new(false, false, true, false)),
    ("LSTM-FT (Vital Signs & Text)", Modalities::new(true, false, true, false)),
    ("LSTM-FT-GNN (Vital Signs & Text)", Modalities::new(true, true, true, false)),
    ("LSTM-FT-GNN (Vital Signs & Text & KG)", Modalities::FULL),
];

/// Architecture of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: TaskKind,
    pub n_vs: usize,
    pub dim: usize,
    pub hidden: usize,
    pub layer_kind: LayerKind,
    pub depth: usize,
    pub aggregation: Aggregation,
    pub max_kg_nodes: usize,
    pub modalities: Modalities,
    pub connectivity: Connectivity,
    pub groups: Option<Vec<usize>>,
    /// Accumulate a stay's concepts across steps instead of using only the
    /// concepts of the current step.
    pub carry_concepts: bool,
}

impl ModelSpec {
    pub fn recurrent_input(&self) -> usize {
        if self.modalities.use_ft {
            self.dim
        } else if self.modalities.use_text {
            self.n_vs + self.dim
        } else {
            self.n_vs
        }
    }

    pub fn gnn(&self) -> GnnSpec {
        GnnSpec {
            kind: self.layer_kind,
            depth: if self.modalities.use_gnn { self.depth } else { 0 },
            dim: self.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.modalities.validate()?;
        if self.n_vs == 0 || self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("n_vs, dim and hidden must be positive".into()));
        }
        build_vsn_edges(self.n_vs, self.connectivity, self.groups.as_deref())?;
        Ok(())
    }

    /// Fresh parameters seeded by `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParameterSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        if self.modalities.use_ft {
            init_tokenizer(&mut params, self.n_vs, self.dim, &mut rng)?;
        }
        init_gnn(&mut params, self.gnn(), &mut rng)?;
        init_recurrent(&mut params, self.recurrent_input(), self.hidden, &mut rng)?;
        init_head(&mut params, self.hidden, self.task.out_dim(), &mut rng)?;
        Ok(params)
    }
}

/// Model-independent per-step inputs of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    pub steps: usize,
    pub n_vs: usize,
    pub vitals: Vec<f64>,
    pub missing: Vec<bool>,
    /// `steps × text_dim` note embeddings (zero rows for steps without notes).
    pub text: Vec<f64>,
    pub text_dim: usize,
    /// Mention counts of each extracted concept at each step.
    pub concepts: Vec<BTreeMap<String, usize>>,
}

impl StepInputs {
    pub fn compute(
        ep: &Episode,
        matcher: &ConceptMatcher,
        threshold: f64,
        encoder: &dyn TextEncoder,
    ) -> Result<Self> {
        let by_step = ep.notes_by_step();
        let d = encoder.dim();
        let mut text = Vec::with_capacity(ep.steps * d);
        let mut concepts = Vec::with_capacity(ep.steps);
        for notes in by_step {
            let texts: Vec<&str> = notes.iter().map(|n| n.text.as_str()).collect();
            text.extend(encoder.encode(&texts));
            concepts.push(matcher.count_concepts(&texts, threshold)?);
        }
        Ok(Self {
            steps: ep.steps,
            n_vs: ep.n_vs,
            vitals: ep.vitals.clone(),
            missing: ep.vitals_missing.clone(),
            text,
            text_dim: d,
            concepts,
        })
    }

    pub fn concept_sets(&self) -> impl Iterator<Item = BTreeSet<String>> + '_ {
        self.concepts.iter().map(|c| c.keys().cloned().collect())
    }

    /// Copy with the vitals replaced (used by masking).
    pub fn with_vitals(&self, vitals: Vec<f64>, missing: Vec<bool>) -> Self {
        Self {
            vitals,
            missing,
            ..self.clone()
        }
    }
}

/// Builds the global graph from the concepts seen in `inputs`.
pub fn build_kg_from_inputs<'a>(
    inputs: impl IntoIterator<Item = &'a StepInputs>,
    edges: &BTreeSet<crate::knowledge::ConceptPair>,
    provider: &dyn EmbeddingProvider,
) -> Result<GlobalKnowledgeGraph> {
    let sets: Vec<BTreeSet<String>> = inputs.into_iter().flat_map(StepInputs::concept_sets).collect();
    GlobalKnowledgeGraph::build(sets.iter(), edges, provider)
}

/// An episode laid out for one model.
#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub id: String,
    pub steps: usize,
    pub targets: Arc<Vec<f64>>,
    vitals: Arc<Vec<f64>>,
    present: Arc<Vec<bool>>,
    /// `steps × recurrent_input` when the tokenizer is off.
    direct: Option<Tensor>,
    text: Option<Tensor>,
    kg_table: Option<Tensor>,
    gather: Arc<Vec<usize>>,
    batch: Option<GraphBatch>,
    pub roles: Vec<Vec<NodeRole>>,
    /// Knowledge concepts present at each step.
    pub step_kg: Vec<Vec<String>>,
}

/// Forward-pass outputs on a tape.
pub struct Forward {
    pub probs: Var,
    pub attention: Vec<Var>,
}

/// Architecture, parameters and the knowledge graph the model reads.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    pub kg: GlobalKnowledgeGraph,
    vsn_edges: EdgeSet,
}

impl Model {
    pub fn new(spec: ModelSpec, params: ParameterSet, kg: GlobalKnowledgeGraph) -> Result<Self> {
        spec.validate()?;
        if spec.modalities.use_kg && kg.dim() != spec.dim && !kg.nodes().is_empty() {
            return Err(Error::Config(format!(
                "knowledge embeddings have dimension {}, model {}",
                kg.dim(),
                spec.dim
            )));
        }
        let vsn_edges = build_vsn_edges(spec.n_vs, spec.connectivity, spec.groups.as_deref())?;
        Ok(Self {
            spec,
            params,
            kg,
            vsn_edges,
        })
    }

    pub fn prepare(&self, ep: &Episode, inputs: &StepInputs) -> Result<PreparedEpisode> {
        prepare_with_targets(self, ep.id(), inputs, ep.targets(self.spec.task)?)
    }

    /// Step embeddings (`T × recurrent_input`) and the attention weights of
    /// each message-passing layer.
    fn step_embeddings(&self, tape: &mut Tape, params: &ParameterSet, prep: &PreparedEpisode) -> Result<(Var, Vec<Var>)> {
        if let Some(direct) = &prep.direct {
            return Ok((tape.constant(direct), Vec::new()));
        }
        let tokens = tokenize_present(tape, params, prep.vitals.clone(), prep.present.clone())?;
        let mut parts = vec![tokens];
        if let Some(text) = &prep.text {
            parts.push(tape.constant(text));
        }
        if let Some(kg) = &prep.kg_table {
            parts.push(tape.constant(kg));
        }
        let source = tape.concat_rows(&parts)?;
        let nodes = tape.gather_rows(source, prep.gather.clone())?;
        let batch = prep.batch.as_ref().expect("graph batch present with tokenizer");
        let out = gnn_forward(tape, params, self.spec.gnn(), batch, nodes)?;
        let steps = aggregate_nodes(tape, batch, out.features, self.spec.aggregation)?;
        Ok((steps, out.attention))
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParameterSet, prep: &PreparedEpisode) -> Result<Forward> {
        let (steps, attention) = self.step_embeddings(tape, params, prep)?;
        debug_assert_eq!(tape.dims(steps).0, prep.steps);
        let hiddens = recurrent_forward(tape, params, steps)?;
        let probs = predict(tape, self.spec.task, params, hiddens)?;
        Ok(Forward { probs, attention })
    }

    /// Head outputs after every step (`T × out_dim`, row-major), as if each
    /// prefix were the whole stay.
    pub fn step_trace(&self, prep: &PreparedEpisode) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (steps, _) = self.step_embeddings(&mut tape, &self.params, prep)?;
        let hiddens = recurrent_forward(&mut tape, &self.params, steps)?;
        let probs = head_forward(&mut tape, &self.params, hiddens)?;
        Ok(tape.values(probs).to_vec())
    }

    /// Probabilities with the model's own parameters.
    pub fn predict(&self, prep: &PreparedEpisode) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, &self.params, prep)?;
        Ok(tape.values(f.probs).to_vec())
    }

    /// Probabilities plus dense attention records for every step and layer.
    pub fn predict_with_attention(&self, prep: &PreparedEpisode) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, &self.params, prep)?;
        let probs = tape.values(f.probs).to_vec();
        let records = match &prep.batch {
            Some(batch) if !f.attention.is_empty() => {
                let steps: Vec<usize> = (0..prep.steps).collect();
                let mut recs = attention_records(&tape, batch, &f.attention, &steps, &prep.roles)?;
                recs.sort_by_key(|r| (r.timestep, r.layer));
                recs
            }
            _ => Vec::new(),
        };
        Ok((probs, records))
    }

    pub fn uses_attention(&self) -> bool {
        self.spec.modalities.use_gnn && self.spec.depth > 0 && self.spec.layer_kind == LayerKind::Attention
    }
}

/// Lays out `inputs` for `model` with the given target vector.
pub fn prepare_with_targets(
    model: &Model,
    id: String,
    inputs: &StepInputs,
    targets: Vec<f64>,
) -> Result<PreparedEpisode> {
    let spec = &model.spec;
    if inputs.n_vs != spec.n_vs {
        return Err(Error::Input(format!(
            "episode {id} has {} vital channels, model expects {}",
            inputs.n_vs, spec.n_vs
        )));
    }
    let t_len = spec.task.steps_used(inputs.steps)?;
    let n = spec.n_vs;
    let d = spec.dim;
    let m = spec.modalities;
    if m.use_text && inputs.text_dim != d {
        return Err(Error::Contract(format!(
            "text embeddings have dimension {}, model {d}",
            inputs.text_dim
        )));
    }
    let vitals: Vec<f64> = inputs.vitals[..t_len * n].to_vec();
    let present: Vec<bool> = inputs.missing[..t_len * n].iter().map(|x| !x).collect();
    let text_rows = if m.use_text {
        inputs.text[..t_len * d].to_vec()
    } else {
        vec![0.0; t_len * d]
    };
    let mut prep = PreparedEpisode {
        id,
        steps: t_len,
        targets: Arc::new(targets),
        vitals: Arc::new(vitals),
        present: Arc::new(present),
        direct: None,
        text: None,
        kg_table: None,
        gather: Arc::new(Vec::new()),
        batch: None,
        roles: Vec::new(),
        step_kg: vec![Vec::new(); t_len],
    };

    if !m.use_ft {
        let width = spec.recurrent_input();
        let mut direct = Vec::with_capacity(t_len * width);
        for t in 0..t_len {
            direct.extend(prep.vitals[t * n..(t + 1) * n].iter().zip(&prep.present[t * n..(t + 1) * n]).map(|(&v, &p)| if p { v } else { 0.0 }));
            if m.use_text {
                direct.extend_from_slice(&text_rows[t * d..(t + 1) * d]);
            }
        }
        prep.direct = Some(Tensor::matrix(t_len, width, direct)?);
        return Ok(prep);
    }

    // Knowledge nodes per step, and the episode-local table of their
    // embeddings.
    let mut table_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut table: Vec<f64> = Vec::new();
    let mut subgraphs = Vec::with_capacity(t_len);
    let mut carried: BTreeMap<String, usize> = BTreeMap::new();
    for t in 0..t_len {
        if !m.use_kg {
            subgraphs.push(None);
            continue;
        }
        let counts = if spec.carry_concepts {
            for (c, k) in &inputs.concepts[t] {
                *carried.entry(c.clone()).or_insert(0) += k;
            }
            carried.clone()
        } else {
            inputs.concepts[t].clone()
        };
        let concepts: BTreeSet<String> = counts.keys().cloned().collect();
        let sub = model.kg.query_subgraph(&concepts, &counts, spec.max_kg_nodes);
        for (i, c) in sub.concept_ids.iter().enumerate() {
            if !table_index.contains_key(c) {
                table_index.insert(c.clone(), table_index.len());
                table.extend_from_slice(sub.feature_row(i));
            }
        }
        prep.step_kg[t] = sub.concept_ids.clone();
        subgraphs.push(Some(sub));
    }

    let text_base = t_len * n;
    let kg_base = text_base + t_len;
    let mut gather = Vec::new();
    let mut edge_sets = Vec::with_capacity(t_len);
    for (t, sub) in subgraphs.iter().enumerate() {
        gather.extend((0..n).map(|j| t * n + j));
        gather.push(text_base + t);
        let (k, kg_edges, ids): (usize, &[(usize, usize)], &[String]) = match sub {
            Some(s) => (s.len(), &s.edges, &s.concept_ids),
            None => (0, &[], &[]),
        };
        gather.extend(ids.iter().map(|c| kg_base + table_index[c]));
        let edges = if m.use_gnn {
            step_edges(n, &model.vsn_edges, kg_edges, k)
        } else {
            EdgeSet::new()
        };
        edge_sets.push((n + 1 + k, edges));
        prep.roles.push(step_roles(n, ids));
    }
    let graphs: Vec<(usize, &EdgeSet)> = edge_sets.iter().map(|(c, e)| (*c, e)).collect();
    prep.batch = Some(GraphBatch::new(&graphs)?);
    prep.gather = Arc::new(gather);
    prep.text = Some(Tensor::matrix(t_len, d, text_rows)?);
    if !table.is_empty() {
        prep.kg_table = Some(Tensor::matrix(table_index.len(), d, table)?);
    }
    Ok(prep)
}
