//! A loaded dataset together with its vocabulary, ontology edges and the
//! model-independent per-step inputs of every episode.

use std::collections::BTreeSet;
use std::path::Path;

use super::config::TrainConfig;
use crate::data::{load_dataset_with_seed, Dataset, Episode, Split, SyntheticData};
use crate::encoder::HashedBagEncoder;
use crate::error::{Error, Result};
use crate::knowledge::{load_edges, ConceptMatcher, ConceptPair, GlobalKnowledgeGraph, HashedGaussian, Vocabulary};
use crate::model::{build_kg_from_inputs, Model, PreparedEpisode, StepInputs};

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const EDGES_FILE: &str = "edges.tsv";

#[derive(Debug, Clone)]
pub struct Corpus {
    pub dataset: Dataset,
    pub vocabulary: Vocabulary,
    pub edges: BTreeSet<ConceptPair>,
    /// Aligned with `dataset.episodes`.
    pub inputs: Vec<StepInputs>,
    pub text_dim: usize,
    pub match_threshold: f64,
}

impl Corpus {
    pub fn new(
        dataset: Dataset,
        vocabulary: Vocabulary,
        edges: BTreeSet<ConceptPair>,
        text_dim: usize,
        match_threshold: f64,
    ) -> Result<Self> {
        let matcher = ConceptMatcher::new(&vocabulary)?;
        let encoder = HashedBagEncoder::new(text_dim);
        let inputs = dataset
            .episodes
            .iter()
            .map(|ep| StepInputs::compute(ep, &matcher, match_threshold, &encoder))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dataset,
            vocabulary,
            edges,
            inputs,
            text_dim,
            match_threshold,
        })
    }

    /// Loads episodes, `vocab.tsv` and (if present) `edges.tsv` from `dir`.
    pub fn load(dir: &Path, config: &TrainConfig) -> Result<Self> {
        let vocab_path = dir.join(VOCAB_FILE);
        if !vocab_path.exists() {
            return Err(Error::Input(format!("{} not found", vocab_path.display())));
        }
        let vocabulary = Vocabulary::load_tsv(&vocab_path)?;
        let edges_path = dir.join(EDGES_FILE);
        let edges = if edges_path.exists() {
            load_edges(&edges_path)?
        } else {
            BTreeSet::new()
        };
        let dataset = load_dataset_with_seed(dir, config.task, config.split_seed)?;
        Self::new(dataset, vocabulary, edges, config.dim, config.match_threshold)
    }

    /// In-memory equivalent of writing `data` to a directory and loading it.
    pub fn from_synthetic(data: &SyntheticData, config: &TrainConfig) -> Result<Self> {
        let dataset = Dataset::from_episodes(config.task, data.episodes.clone(), config.split_seed);
        if dataset.episodes.is_empty() {
            return Err(Error::EmptyDataset("synthetic data".into()));
        }
        Self::new(
            dataset,
            data.vocabulary.clone(),
            data.edges.clone(),
            config.dim,
            config.match_threshold,
        )
    }

    pub fn n_vs(&self) -> usize {
        self.dataset.n_vs().unwrap_or(0)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.dataset.indices(split)
    }

    pub fn episode(&self, i: usize) -> &Episode {
        &self.dataset.episodes[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.dataset
            .episodes
            .iter()
            .position(|e| e.id() == id || e.patient_id == id)
    }

    /// Global graph over every concept extracted from the corpus notes.
    pub fn build_kg(&self, embedding_seed: u64) -> Result<GlobalKnowledgeGraph> {
        let provider = HashedGaussian {
            dim: self.text_dim,
            seed: embedding_seed,
        };
        build_kg_from_inputs(&self.inputs, &self.edges, &provider)
    }

    /// Lays out the episodes at `indices` for `model`.
    pub fn prepare(&self, model: &Model, indices: &[usize]) -> Result<Vec<PreparedEpisode>> {
        indices
            .iter()
            .map(|&i| model.prepare(&self.dataset.episodes[i], &self.inputs[i]))
            .collect()
    }

    /// As [`Corpus::prepare`] with replacement inputs (e.g. masked vitals).
    pub fn prepare_with(&self, model: &Model, indices: &[usize], inputs: &[StepInputs]) -> Result<Vec<PreparedEpisode>> {
        indices
            .iter()
            .zip(inputs)
            .map(|(&i, inp)| model.prepare(&self.dataset.episodes[i], inp))
            .collect()
    }
}
