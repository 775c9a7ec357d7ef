//! Step encoder: tokenized vitals, the note embedding and the knowledge
//! subgraph of one timestep are joined into a graph, passed through
//! message-passing layers, and reduced to a single step embedding.

mod gnn;
mod graph;
mod text;
mod tokenizer;

pub use gnn::{
    aggregate_matrix, aggregate_nodes, attention_records, gnn_forward, gnn_forward_step, init_gnn,
    read_attention_jsonl, write_attention_jsonl, Aggregation, AttentionRecord, GnnOutput, GnnSpec,
    LayerKind,
};
pub use graph::{
    assemble_step_graph, build_vsn_edges, step_edges, step_roles, Connectivity, EdgeSet, GraphBatch,
    NodeRole, StepGraph,
};
pub use text::{encode_text, HashedBagEncoder, TextEncoder};
pub use tokenizer::{feature_tokenize, init_tokenizer, FT_BIAS, FT_MISSING, FT_WEIGHT};
pub(crate) use tokenizer::tokenize_present;
