//! Approximate dictionary matching of note text against the vocabulary.
//!
//! Spans are word n-grams of the normalized note (n up to the longest
//! vocabulary term). A span matches a term when the Jaccard similarity of
//! their padded character-trigram sets reaches the threshold. An inverted
//! trigram index restricts scoring to terms sharing at least one trigram,
//! which does not change the result: a term with no shared trigram scores 0.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::vocab::{normalize_text, Vocabulary};
use crate::error::{Error, Result};

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.8;

/// Sorted, deduplicated character trigrams of ` s ` (one space of padding on
/// each side), each packed into a `u64`.
pub fn trigrams(s: &str) -> Vec<u64> {
    let padded: Vec<char> = std::iter::once(' ')
        .chain(s.chars())
        .chain(std::iter::once(' '))
        .collect();
    let mut grams: Vec<u64> = padded
        .windows(3)
        .map(|w| (u64::from(w[0]) << 42) | (u64::from(w[1]) << 21) | u64::from(w[2]))
        .collect();
    grams.sort_unstable();
    grams.dedup();
    grams
}

fn intersection_size(a: &[u64], b: &[u64]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Jaccard similarity of the trigram sets of two already-normalized strings.
pub fn trigram_jaccard(a: &str, b: &str) -> f64 {
    let (ta, tb) = (trigrams(a), trigrams(b));
    let inter = intersection_size(&ta, &tb);
    let union = ta.len() + tb.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

struct Term {
    concept: usize,
    grams: Vec<u64>,
}

/// Prebuilt index over every term of a vocabulary.
pub struct ConceptMatcher {
    concept_ids: Vec<String>,
    terms: Vec<Term>,
    index: HashMap<u64, Vec<usize>>,
    max_words: usize,
}

impl ConceptMatcher {
    pub fn new(vocab: &Vocabulary) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::Config("concept vocabulary is empty".into()));
        }
        let mut concept_ids = Vec::new();
        let mut terms = Vec::new();
        let mut index: HashMap<u64, Vec<usize>> = HashMap::new();
        let mut max_words = 1;
        for (ci, entry) in vocab.entries().enumerate() {
            concept_ids.push(entry.concept_id.clone());
            let unique: BTreeSet<&str> = entry.terms().collect();
            for term in unique {
                max_words = max_words.max(term.split(' ').count());
                let grams = trigrams(term);
                let ti = terms.len();
                for &g in &grams {
                    index.entry(g).or_default().push(ti);
                }
                terms.push(Term { concept: ci, grams });
            }
        }
        Ok(Self {
            concept_ids,
            terms,
            index,
            max_words,
        })
    }

    pub fn max_words(&self) -> usize {
        self.max_words
    }

    /// Number of candidate spans matching each concept, summed over notes.
    /// A span counts at most once per concept.
    pub fn count_concepts<S: AsRef<str>>(
        &self,
        note_texts: &[S],
        threshold: f64,
    ) -> Result<BTreeMap<String, usize>> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::Config(format!(
                "match threshold must lie in (0, 1], got {threshold}"
            )));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut shared: HashMap<usize, usize> = HashMap::new();
        for text in note_texts {
            let normalized = normalize_text(text.as_ref());
            let words: Vec<&str> = normalized.split(' ').filter(|w| !w.is_empty()).collect();
            for start in 0..words.len() {
                for n in 1..=self.max_words.min(words.len() - start) {
                    let span = words[start..start + n].join(" ");
                    let grams = trigrams(&span);
                    shared.clear();
                    for g in &grams {
                        if let Some(postings) = self.index.get(g) {
                            for &t in postings {
                                *shared.entry(t).or_insert(0) += 1;
                            }
                        }
                    }
                    let mut hit: BTreeSet<usize> = BTreeSet::new();
                    for (&t, &inter) in &shared {
                        let term = &self.terms[t];
                        let union = grams.len() + term.grams.len() - inter;
                        if inter as f64 / union as f64 >= threshold {
                            hit.insert(term.concept);
                        }
                    }
                    for c in hit {
                        *counts.entry(self.concept_ids[c].clone()).or_insert(0) += 1;
                    }
                }
            }
        }
        Ok(counts)
    }

    /// Set of concepts mentioned anywhere in `note_texts`.
    pub fn extract<S: AsRef<str>>(&self, note_texts: &[S], threshold: f64) -> Result<BTreeSet<String>> {
        Ok(self.count_concepts(note_texts, threshold)?.into_keys().collect())
    }
}

/// One-shot form of [`ConceptMatcher::extract`].
pub fn extract_concepts<S: AsRef<str>>(
    note_texts: &[S],
    vocab: &Vocabulary,
    threshold: f64,
) -> Result<BTreeSet<String>> {
    ConceptMatcher::new(vocab)?.extract(note_texts, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::ConceptEntry;

    fn vocab() -> Vocabulary {
        Vocabulary::new(vec![
            ConceptEntry::new("C0030231", "palliative care", &["comfort care"], "Procedure").unwrap(),
            ConceptEntry::new("C0020538", "hypertension", &["high blood pressure"], "Disorder").unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn no_text_no_concepts() {
        let none: [&str; 0] = [];
        assert!(extract_concepts(&none, &vocab(), 0.8).unwrap().is_empty());
    }

    #[test]
    fn exact_match() {
        let got = extract_concepts(&["patient on palliative care today"], &vocab(), 0.8).unwrap();
        assert_eq!(got.into_iter().collect::<Vec<_>>(), ["C0030231"]);
        assert_eq!(trigram_jaccard("palliative care", "palliative care"), 1.0);
    }

    #[test]
    fn synonyms_and_punctuation() {
        let got = extract_concepts(&["Hx: HIGH blood-pressure.", "comfort care"], &vocab(), 0.8).unwrap();
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn empty_vocabulary_is_config_error() {
        let v = Vocabulary::default();
        assert!(matches!(extract_concepts(&["x"], &v, 0.8), Err(Error::Config(_))));
    }

    #[test]
    fn threshold_range_checked() {
        let m = ConceptMatcher::new(&vocab()).unwrap();
        assert!(m.extract(&["x"], 0.0).is_err());
        assert!(m.extract(&["x"], 1.5).is_err());
    }

    #[test]
    fn counts_repeat_mentions() {
        let m = ConceptMatcher::new(&vocab()).unwrap();
        let c = m
            .count_concepts(&["palliative care discussed", "continue palliative care"], 1.0)
            .unwrap();
        assert_eq!(c["C0030231"], 2);
    }
}
