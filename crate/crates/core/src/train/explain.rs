//! Attention summaries over knowledge nodes and per-step probability traces.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{write_attention_jsonl, AttentionRecord, NodeRole};
use crate::error::{Error, Result};
use crate::model::{Model, PreparedEpisode};

pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept_id: String,
    /// Mean attention mass received per (step, layer) where the node exists.
    pub score: f64,
    pub steps_present: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: usize,
    pub probabilities: Vec<f64>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionSummary {
    pub episode: String,
    /// Every concept that appeared, best first.
    pub ranking: Vec<ConceptScore>,
    pub top_k: usize,
    pub records: Vec<AttentionRecord>,
    pub trace: Vec<TracePoint>,
}

impl AttentionSummary {
    pub fn top(&self) -> &[ConceptScore] {
        &self.ranking[..self.top_k.min(self.ranking.len())]
    }

    pub fn rank_of(&self, concept_id: &str) -> Option<usize> {
        self.ranking.iter().position(|c| c.concept_id == concept_id)
    }

    /// Writes `attention.jsonl`, `concepts.json` and `trace.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_attention_jsonl(&dir.join("attention.jsonl"), &self.records)?;
        #[derive(Serialize)]
        struct Ranked<'a> {
            episode: &'a str,
            top_k: usize,
            top: &'a [ConceptScore],
            all: &'a [ConceptScore],
        }
        let ranked = Ranked {
            episode: &self.episode,
            top_k: self.top_k,
            top: self.top(),
            all: &self.ranking,
        };
        let path = dir.join("concepts.json");
        std::fs::write(&path, serde_json::to_string_pretty(&ranked)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("trace.csv");
        std::fs::write(&path, trace_csv(&self.trace)).map_err(|e| Error::io(&path, e))
    }
}

/// `t,output,probability,label` in long format.
pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("t,output,probability,label\n");
    for p in trace {
        for (j, (prob, label)) in p.probabilities.iter().zip(&p.labels).enumerate() {
            out.push_str(&format!("{},{j},{prob:.9},{label}\n", p.t));
        }
    }
    out
}

/// Per-concept mean column sum of the attention matrices, best first with
/// ties broken by id.
pub fn rank_concepts(records: &[AttentionRecord]) -> Vec<ConceptScore> {
    let mut acc: BTreeMap<&str, (f64, usize, std::collections::BTreeSet<usize>)> = BTreeMap::new();
    for r in records {
        let cols = r.column_sums();
        for (v, role) in r.node_roles.iter().enumerate() {
            if let NodeRole::Kg { concept_id } = role {
                let e = acc.entry(concept_id.as_str()).or_default();
                e.0 += cols[v];
                e.1 += 1;
                e.2.insert(r.timestep);
            }
        }
    }
    let mut out: Vec<ConceptScore> = acc
        .into_iter()
        .map(|(c, (sum, n, steps))| ConceptScore {
            concept_id: c.to_string(),
            score: sum / n as f64,
            steps_present: steps.len(),
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.concept_id.cmp(&b.concept_id)));
    out
}

pub fn attention_report(model: &Model, prep: &PreparedEpisode, top_k: usize) -> Result<AttentionSummary> {
    if !model.uses_attention() {
        return Err(Error::Capability(format!(
            "attention report needs the attention layer kind; this model uses `{}` \
             (depth {}, graph layers {}). Retrain with layer_kind = attention",
            model.spec.layer_kind,
            model.spec.gnn().depth,
            if model.spec.modalities.use_gnn { "on" } else { "off" }
        )));
    }
    let (_, records) = model.predict_with_attention(prep)?;
    let out_dim = model.spec.task.out_dim();
    let values = model.step_trace(prep)?;
    let per_step = prep.targets.len() == prep.steps * out_dim;
    let trace = (0..prep.steps)
        .map(|t| TracePoint {
            t,
            probabilities: values[t * out_dim..(t + 1) * out_dim].to_vec(),
            labels: if per_step {
                prep.targets[t * out_dim..(t + 1) * out_dim].to_vec()
            } else {
                prep.targets.to_vec()
            },
        })
        .collect();
    Ok(AttentionSummary {
        episode: prep.id.clone(),
        ranking: rank_concepts(&records),
        top_k,
        records,
        trace,
    })
}
