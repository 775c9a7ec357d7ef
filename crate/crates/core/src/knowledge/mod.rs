//! Concept vocabulary, note-to-concept matching, the global knowledge graph,
//! per-timestep subgraph queries, and concept embeddings.

mod embed;
mod graph;
mod matcher;
mod vocab;

pub use embed::{embed_node, EmbeddingProvider, EmbeddingTable, HashedGaussian};
pub use graph::{
    edges_to_tsv, load_edges, parse_edges, ConceptPair, GlobalKnowledgeGraph, KGSubgraph,
    DEFAULT_MAX_KG_NODES,
};
pub use matcher::{
    extract_concepts, trigram_jaccard, trigrams, ConceptMatcher, DEFAULT_MATCH_THRESHOLD,
};
pub use vocab::{normalize_text, ConceptEntry, Vocabulary};
