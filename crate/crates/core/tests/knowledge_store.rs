use std::collections::{BTreeMap, BTreeSet, HashSet};

use kgicu::knowledge::{
    extract_concepts, ConceptEntry, ConceptMatcher, ConceptPair, GlobalKnowledgeGraph,
    HashedGaussian, Vocabulary,
};
use proptest::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROVIDER: HashedGaussian = HashedGaussian { dim: 8, seed: 3 };

/// String-set trigram Jaccard written independently of the library.
fn oracle_jaccard(a: &str, b: &str) -> f64 {
    let grams = |s: &str| -> HashSet<String> {
        let chars: Vec<char> = format!(" {s} ").chars().collect();
        chars.windows(3).map(|w| w.iter().collect()).collect()
    };
    let (ga, gb) = (grams(a), grams(b));
    let inter = ga.intersection(&gb).count() as f64;
    let union = ga.union(&gb).count() as f64;
    inter / union
}

/// Brute-force matcher: every word n-gram of every note against every term.
fn oracle_extract(notes: &[&str], vocab: &[(&str, Vec<&str>)], threshold: f64) -> BTreeSet<String> {
    let clean = |s: &str| -> String {
        s.to_lowercase()
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { ' ' })
            .collect::<String>()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    };
    let max_n = vocab
        .iter()
        .flat_map(|(_, terms)| terms.iter().map(|t| clean(t).split(' ').count()))
        .max()
        .unwrap_or(1);
    let mut out = BTreeSet::new();
    for note in notes {
        let cleaned = clean(note);
        let words: Vec<&str> = cleaned.split_whitespace().collect();
        for i in 0..words.len() {
            for n in 1..=max_n {
                if i + n > words.len() {
                    break;
                }
                let span = words[i..i + n].join(" ");
                for (id, terms) in vocab {
                    if terms.iter().any(|t| oracle_jaccard(&span, &clean(t)) >= threshold) {
                        out.insert(id.to_string());
                    }
                }
            }
        }
    }
    out
}

fn palliative_vocab() -> Vocabulary {
    Vocabulary::new(vec![
        ConceptEntry::new("C0030231", "palliative care", &[], "Procedure").unwrap(),
        ConceptEntry::new("C0020538", "hypertension", &["high blood pressure"], "Disorder").unwrap(),
    ])
    .unwrap()
}

#[test]
fn misspelled_span_follows_trigram_oracle() {
    let note = "palliativ care noted";
    let score = oracle_jaccard("palliativ care", "palliative care");
    let expected = score >= 0.8;
    let got = extract_concepts(&[note], &palliative_vocab(), 0.8).unwrap();
    assert_eq!(got.contains("C0030231"), expected, "oracle score {score}");
    let brute = oracle_extract(&[note], &[("C0030231", vec!["palliative care"])], 0.8);
    assert_eq!(got.contains("C0030231"), brute.contains("C0030231"));
}

#[test]
fn matcher_agrees_with_brute_force_on_random_notes() {
    let words = [
        "patient", "sepsis", "septic", "shock", "renal", "failure", "acute", "kidney", "injury",
        "heart", "failur", "care", "palliative", "comfort", "noted", "on",
    ];
    let vocab_terms: Vec<(&str, Vec<&str>)> = vec![
        ("C1", vec!["septic shock", "sepsis"]),
        ("C2", vec!["acute kidney injury", "renal failure"]),
        ("C3", vec!["heart failure"]),
        ("C4", vec!["palliative care", "comfort care"]),
    ];
    let vocab = Vocabulary::new(
        vocab_terms
            .iter()
            .map(|(id, t)| ConceptEntry::new(*id, t[0], &t[1..], "G").unwrap())
            .collect(),
    )
    .unwrap();
    let matcher = ConceptMatcher::new(&vocab).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let note: Vec<&str> = (0..rng.random_range(1..12))
            .map(|_| *words.choose(&mut rng).unwrap())
            .collect();
        let note = note.join(" ");
        for threshold in [0.5, 0.7, 0.8, 1.0] {
            let got = matcher.extract(&[note.as_str()], threshold).unwrap();
            assert_eq!(got, oracle_extract(&[&note], &vocab_terms, threshold), "{note} @ {threshold}");
        }
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<BTreeSet<String>>, BTreeSet<ConceptPair>) {
    let ids: Vec<String> = (0..200).map(|i| format!("C{i:04}")).collect();
    let mut edges = BTreeSet::new();
    while edges.len() < 1000 {
        let a = &ids[rng.random_range(0..200)];
        let b = &ids[rng.random_range(0..200)];
        if let Some(p) = ConceptPair::new(a.clone(), b.clone()) {
            edges.insert(p);
        }
    }
    let sets = (0..20)
        .map(|_| {
            (0..rng.random_range(0..15))
                .map(|_| ids[rng.random_range(0..200)].clone())
                .collect()
        })
        .collect();
    (sets, edges)
}

#[test]
fn global_graph_equals_brute_force_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let (sets, edges) = random_instance(&mut rng);
        let g = GlobalKnowledgeGraph::build(sets.iter(), &edges, &PROVIDER).unwrap();
        let mut nodes = BTreeSet::new();
        for s in &sets {
            for c in s {
                nodes.insert(c.clone());
            }
        }
        let mut expected = BTreeSet::new();
        for e in &edges {
            if nodes.contains(e.first()) && nodes.contains(e.second()) {
                expected.insert(e.clone());
            }
        }
        assert_eq!(g.nodes(), &nodes);
        assert_eq!(g.edges(), &expected);
        assert!(g.edges().len() <= edges.len());
        for e in g.edges() {
            assert!(e.first() < e.second());
        }
        for n in g.nodes() {
            assert_eq!(g.embedding(n).unwrap().len(), PROVIDER.dim);
        }
    }
}

#[test]
fn subgraph_matches_sort_and_truncate_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let ids: Vec<String> = (0..60).map(|i| format!("C{i:03}")).collect();
        let mut edges = BTreeSet::new();
        for _ in 0..300 {
            let a = ids[rng.random_range(0..60)].clone();
            let b = ids[rng.random_range(0..60)].clone();
            if let Some(p) = ConceptPair::new(a, b) {
                edges.insert(p);
            }
        }
        let all: BTreeSet<String> = ids.iter().cloned().collect();
        let g = GlobalKnowledgeGraph::build(std::iter::once(&all), &edges, &PROVIDER).unwrap();

        let mut pool = ids.clone();
        pool.shuffle(&mut rng);
        let candidates: BTreeSet<String> = pool[..50].iter().cloned().collect();
        let counts: BTreeMap<String, usize> = candidates
            .iter()
            .map(|c| (c.clone(), rng.random_range(0..5)))
            .collect();
        let sub = g.query_subgraph(&candidates, &counts, 30);

        let mut oracle: Vec<(i64, String)> =
            candidates.iter().map(|c| (-(counts[c] as i64), c.clone())).collect();
        oracle.sort();
        let kept: Vec<String> = oracle.into_iter().take(30).map(|(_, c)| c).collect();
        assert_eq!(sub.concept_ids, kept);

        let mut expected_edges = Vec::new();
        for i in 0..kept.len() {
            for j in 0..kept.len() {
                if i < j && edges.contains(&ConceptPair::new(kept[i].clone(), kept[j].clone()).unwrap()) {
                    expected_edges.push((i, j));
                }
            }
        }
        assert_eq!(sub.edges, expected_edges);
        for (i, c) in kept.iter().enumerate() {
            assert_eq!(sub.feature_row(i), g.embedding(c).unwrap());
        }
        assert_eq!(g.query_subgraph(&candidates, &counts, 30), sub);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lowering_threshold_never_removes(
        words in proptest::collection::vec("[a-e]{2,6}", 1..8),
        hi in 0.3f64..1.0,
        delta in 0.0f64..0.3,
    ) {
        let vocab = Vocabulary::new(vec![
            ConceptEntry::new("A", "abc de", &["bad"], "G").unwrap(),
            ConceptEntry::new("B", "ceda", &[], "G").unwrap(),
            ConceptEntry::new("C", "ab ab ab", &[], "G").unwrap(),
        ]).unwrap();
        let m = ConceptMatcher::new(&vocab).unwrap();
        let note = words.join(" ");
        let strict = m.extract(&[note.as_str()], hi).unwrap();
        let loose = m.extract(&[note.as_str()], (hi - delta).max(0.01)).unwrap();
        prop_assert!(strict.is_subset(&loose));
    }

    #[test]
    fn subgraph_caps_and_restricts(
        n_nodes in 1usize..40,
        raw_edges in proptest::collection::vec((0usize..40, 0usize..40), 0..120),
        chosen in proptest::collection::btree_set(0usize..40, 0..40),
        cap in 0usize..50,
    ) {
        let ids: Vec<String> = (0..n_nodes).map(|i| format!("N{i:02}")).collect();
        let all: BTreeSet<String> = ids.iter().cloned().collect();
        let edges: BTreeSet<ConceptPair> = raw_edges
            .iter()
            .filter(|(a, b)| *a < n_nodes && *b < n_nodes)
            .filter_map(|(a, b)| ConceptPair::new(ids[*a].clone(), ids[*b].clone()))
            .collect();
        let g = GlobalKnowledgeGraph::build(std::iter::once(&all), &edges, &PROVIDER).unwrap();
        let query: BTreeSet<String> = chosen.iter().map(|i| format!("N{i:02}")).collect();
        let sub = g.query_subgraph(&query, &BTreeMap::new(), cap);
        let candidates: Vec<&String> = query.iter().filter(|c| all.contains(*c)).collect();
        prop_assert!(sub.len() <= cap);
        if cap == 0 {
            prop_assert!(sub.is_empty());
        }
        if cap >= candidates.len() {
            prop_assert_eq!(sub.concept_ids.len(), candidates.len());
            let brute: usize = edges
                .iter()
                .filter(|e| query.contains(e.first()) && query.contains(e.second()))
                .count();
            prop_assert_eq!(sub.edges.len(), brute);
        }
    }
}
