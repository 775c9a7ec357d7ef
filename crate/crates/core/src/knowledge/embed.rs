use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::hash::hash_with_seed;

/// Source of frozen node features for knowledge-graph concepts.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, concept_id: &str) -> Result<Vec<f64>>;
}

/// Unit-norm Gaussian vector seeded by `hash(concept_id, seed)`.
pub fn embed_node(concept_id: &str, d: usize, seed: u64) -> Vec<f64> {
    assert!(d >= 1, "embedding dimension must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(hash_with_seed(concept_id, seed));
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Deterministic stand-in for a pretrained concept encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedGaussian {
    pub dim: usize,
    pub seed: u64,
}

impl EmbeddingProvider for HashedGaussian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, concept_id: &str) -> Result<Vec<f64>> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(embed_node(concept_id, self.dim, self.seed))
    }
}

/// Embeddings loaded from a TSV file of `concept_id` followed by `d` floats.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn parse_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut dim = 0;
        let mut table = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: idx + 1,
                message,
            };
            let mut cols = line.split('\t');
            let id = cols.next().unwrap_or_default().trim().to_string();
            let values = cols
                .map(|c| c.trim().parse::<f64>().map_err(|e| err(format!("bad float `{c}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(err("no embedding values".into()));
            }
            if dim == 0 {
                dim = values.len();
            } else if values.len() != dim {
                return Err(err(format!("expected {dim} values, found {}", values.len())));
            }
            if table.insert(id.clone(), values).is_some() {
                return Err(err(format!("duplicate concept {id}")));
            }
        }
        Ok(Self { dim, table })
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }
}

impl EmbeddingProvider for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, concept_id: &str) -> Result<Vec<f64>> {
        self.table
            .get(concept_id)
            .cloned()
            .ok_or_else(|| Error::Input(format!("no embedding for concept {concept_id}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_norm_and_deterministic() {
        for id in ["C1", "C0030231", "", "x y z"] {
            let v = embed_node(id, 64, 7);
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            assert_eq!(v, embed_node(id, 64, 7));
        }
    }

    #[test]
    fn distinct_concepts_and_seeds_differ() {
        let c1 = embed_node("C1", 64, 7);
        assert_ne!(c1, embed_node("C2", 64, 7));
        assert_ne!(c1, embed_node("C1", 64, 8));
        let pinned = [
            -0.3884865573807568,
            -0.059757809786703385,
            -0.907744149079404,
            -0.14665523760184168,
        ];
        assert_eq!(embed_node("C1", 4, 7), pinned);
        assert_eq!(HashedGaussian { dim: 4, seed: 7 }.embed("C1").unwrap(), pinned);
    }

    #[test]
    fn table_parsing() {
        let t = EmbeddingTable::parse_tsv("# comment\nC1\t1\t0\nC2\t0.5\t0.5\n", Path::new("e.tsv")).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.embed("C2").unwrap(), vec![0.5, 0.5]);
        assert!(t.embed("C3").is_err());
        assert!(EmbeddingTable::parse_tsv("C1\t1\nC2\t1\t2\n", Path::new("e.tsv")).is_err());
    }
}
