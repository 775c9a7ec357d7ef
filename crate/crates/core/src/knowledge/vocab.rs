use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One ontology concept and the surface forms it may appear under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub concept_id: String,
    pub canonical_term: String,
    pub synonyms: Vec<String>,
    pub semantic_group: String,
}

impl ConceptEntry {
    /// Builds an entry with every term normalized.
    pub fn new(
        concept_id: impl Into<String>,
        canonical_term: &str,
        synonyms: &[&str],
        semantic_group: impl Into<String>,
    ) -> Result<Self> {
        let concept_id = concept_id.into();
        let canonical_term = normalize_text(canonical_term);
        if concept_id.trim().is_empty() {
            return Err(Error::Input("concept id is empty".into()));
        }
        if canonical_term.is_empty() {
            return Err(Error::Input(format!(
                "concept {concept_id} has an empty canonical term"
            )));
        }
        let synonyms = synonyms
            .iter()
            .map(|s| normalize_text(s))
            .filter(|s| !s.is_empty())
            .collect();
        Ok(Self {
            concept_id,
            canonical_term,
            synonyms,
            semantic_group: semantic_group.into(),
        })
    }

    /// Canonical term followed by the synonyms.
    pub fn terms(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.canonical_term.as_str()).chain(self.synonyms.iter().map(String::as_str))
    }
}

/// Lowercases, replaces every non-alphanumeric character with a space, and
/// collapses runs of whitespace.
pub fn normalize_text(text: &str) -> String {
    let mapped: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Concept vocabulary keyed by concept id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    entries: BTreeMap<String, ConceptEntry>,
}

impl Vocabulary {
    pub fn new(entries: Vec<ConceptEntry>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for e in entries {
            if map.contains_key(&e.concept_id) {
                return Err(Error::Input(format!("duplicate concept id {}", e.concept_id)));
            }
            map.insert(e.concept_id.clone(), e);
        }
        Ok(Self { entries: map })
    }

    pub fn get(&self, concept_id: &str) -> Option<&ConceptEntry> {
        self.entries.get(concept_id)
    }

    pub fn contains(&self, concept_id: &str) -> bool {
        self.entries.contains_key(concept_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ConceptEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses the TSV form: header row, then
    /// `concept_id \t canonical_term \t syn1|syn2 \t semantic_group`.
    pub fn parse_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        for (idx, line) in text.lines().enumerate().skip(1) {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(parse_err(lineno, format!("expected 4 columns, found {}", cols.len())));
            }
            let synonyms: Vec<&str> = cols[2].split('|').filter(|s| !s.trim().is_empty()).collect();
            let entry = ConceptEntry::new(cols[0].trim(), cols[1], &synonyms, cols[3].trim())
                .map_err(|e| parse_err(lineno, e.to_string()))?;
            entries.push(entry);
        }
        Self::new(entries).map_err(|e| parse_err(0, e.to_string()))
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("concept_id\tcanonical_term\tsynonyms\tsemantic_group\n");
        for e in self.entries.values() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                e.concept_id,
                e.canonical_term,
                e.synonyms.join("|"),
                e.semantic_group
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("  Palliative-Care, TODAY!! "), "palliative care today");
        assert_eq!(normalize_text("..."), "");
    }

    #[test]
    fn tsv_roundtrip_and_errors() {
        let text = "concept_id\tcanonical_term\tsynonyms\tsemantic_group\n\
                    C0030231\tPalliative Care\tpalliative therapy|Comfort care\tProcedure\n\
                    C0011849\tdiabetes mellitus\t\tDisorder\n";
        let v = Vocabulary::parse_tsv(text, Path::new("v.tsv")).unwrap();
        assert_eq!(v.len(), 2);
        let e = v.get("C0030231").unwrap();
        assert_eq!(e.canonical_term, "palliative care");
        assert_eq!(e.synonyms, ["palliative therapy", "comfort care"]);
        assert!(v.get("C0011849").unwrap().synonyms.is_empty());
        assert_eq!(Vocabulary::parse_tsv(&v.to_tsv(), Path::new("x")).unwrap(), v);

        let bad = "h\nC1\tonly two\n";
        match Vocabulary::parse_tsv(bad, Path::new("bad.tsv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let dup = "h\nC1\ta\t\tg\nC1\tb\t\tg\n";
        assert!(Vocabulary::parse_tsv(dup, Path::new("d.tsv")).is_err());
        let empty_term = "h\nC1\t!!\t\tg\n";
        assert!(Vocabulary::parse_tsv(empty_term, Path::new("e.tsv")).is_err());
    }
}
