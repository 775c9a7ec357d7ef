use crate::hash::hash_with_seed;

/// Maps the notes written during one timestep to a fixed-size vector.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, notes: &[&str]) -> Vec<f64>;
}

/// Signed feature hashing of whitespace tokens.
///
/// Each token adds ±1 to one of `dim` buckets, both chosen by its hash; the
/// sum is scaled by `1/√tokens`. No tokens gives the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBagEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl HashedBagEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim, seed: 0 }
    }
}

impl TextEncoder for HashedBagEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, notes: &[&str]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut count = 0usize;
        for token in notes.iter().flat_map(|n| n.split_whitespace()) {
            let h = hash_with_seed(token, self.seed);
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
            count += 1;
        }
        if count > 0 {
            let scale = 1.0 / (count as f64).sqrt();
            v.iter_mut().for_each(|x| *x *= scale);
        }
        v
    }
}

/// [`HashedBagEncoder`] with seed 0.
pub fn encode_text<S: AsRef<str>>(notes: &[S], d: usize) -> Vec<f64> {
    let refs: Vec<&str> = notes.iter().map(AsRef::as_ref).collect();
    HashedBagEncoder::new(d).encode(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_notes_is_zero_vector() {
        let none: [&str; 0] = [];
        assert_eq!(encode_text(&none, 8), vec![0.0; 8]);
        assert_eq!(encode_text(&["   "], 8), vec![0.0; 8]);
    }

    #[test]
    fn deterministic() {
        assert_eq!(encode_text(&["sepsis noted"], 16), encode_text(&["sepsis noted"], 16));
    }

    #[test]
    fn tokens_add_then_scale() {
        let a = encode_text(&["a"], 4);
        let b = encode_text(&["b"], 4);
        assert_eq!(a.iter().filter(|x| **x != 0.0).count(), 1);
        assert_eq!(a.iter().map(|x| x.abs()).sum::<f64>(), 1.0);
        let ab = encode_text(&["a", "b"], 4);
        for j in 0..4 {
            assert!((ab[j] * 2f64.sqrt() - (a[j] + b[j])).abs() < 1e-15);
        }
        assert_eq!(encode_text(&["a b"], 4), ab);
    }

    #[test]
    fn pinned_two_token_case() {
        let h = 1.0 / 2f64.sqrt();
        assert_eq!(encode_text(&["a b"], 4), vec![-h, h, 0.0, 0.0]);
    }
}
