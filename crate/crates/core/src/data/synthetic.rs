//! Deterministic synthetic ICU stays with labels planted across modalities.
//!
//! Each task has a [`Rule`] over observable evidence. A stay is made latent
//! positive with probability `positive_rate`; for latent positives the
//! generator plants every leaf cue of the rule (a vital sign shift, or a
//! note mentioning a concept), each cue independently dropped with
//! probability `noise`. Labels are then computed by evaluating the rule on
//! what is observable after note preprocessing, so they agree exactly with
//! the data a model sees. `label_noise` optionally flips labels afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::episode::{Episode, Labels, NoteRecord};
use super::io::write_episodes;
use super::preprocess::preprocess_notes;
use crate::error::{Error, Result};
use crate::knowledge::{edges_to_tsv, ConceptEntry, ConceptMatcher, ConceptPair, Vocabulary, DEFAULT_MATCH_THRESHOLD};
use crate::sequence::{MORTALITY_HOURS, PHENOTYPE_COUNT};

pub const PALLIATIVE_CARE: &str = "C0030231";

/// Observable condition used to plant and to compute labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    /// The concept is extracted from a note bucketed inside the window.
    ConceptMentioned { concept_id: String },
    /// Mean of the observed values of `feature` inside the window exceeds
    /// `threshold`. False when nothing is observed.
    VitalMeanAbove { feature: usize, threshold: f64 },
    All { rules: Vec<Rule> },
    Any { rules: Vec<Rule> },
}

/// Per-step evidence of one preprocessed episode.
pub struct Evidence<'a> {
    pub episode: &'a Episode,
    pub step_concepts: &'a [BTreeSet<String>],
}

impl Rule {
    pub fn evaluate(&self, ev: &Evidence<'_>, window: std::ops::Range<usize>) -> bool {
        match self {
            Rule::ConceptMentioned { concept_id } => {
                window.clone().any(|t| ev.step_concepts[t].contains(concept_id))
            }
            Rule::VitalMeanAbove { feature, threshold } => {
                let (mut sum, mut n) = (0.0, 0usize);
                for t in window {
                    if let Some(v) = ev.episode.vital(t, *feature) {
                        sum += v;
                        n += 1;
                    }
                }
                n > 0 && sum / n as f64 > *threshold
            }
            Rule::All { rules } => rules.iter().all(|r| r.evaluate(ev, window.clone())),
            Rule::Any { rules } => rules.iter().any(|r| r.evaluate(ev, window.clone())),
        }
    }

    pub fn concepts(&self, out: &mut BTreeSet<String>) {
        match self {
            Rule::ConceptMentioned { concept_id } => {
                out.insert(concept_id.clone());
            }
            Rule::VitalMeanAbove { .. } => {}
            Rule::All { rules } | Rule::Any { rules } => rules.iter().for_each(|r| r.concepts(out)),
        }
    }

    fn validate(&self, n_vs: usize) -> Result<()> {
        match self {
            Rule::ConceptMentioned { concept_id } => {
                if library().iter().any(|c| c.id == concept_id) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("rule references unknown concept {concept_id}")))
                }
            }
            Rule::VitalMeanAbove { feature, threshold } => {
                if *feature >= n_vs || !threshold.is_finite() {
                    Err(Error::Config(format!(
                        "vital rule on feature {feature} (of {n_vs}) with threshold {threshold}"
                    )))
                } else {
                    Ok(())
                }
            }
            Rule::All { rules } | Rule::Any { rules } => {
                if rules.is_empty() {
                    return Err(Error::Config("empty rule combination".into()));
                }
                rules.iter().try_for_each(|r| r.validate(n_vs))
            }
        }
    }
}

/// Generator settings; serialized as JSON for `gen-synth --spec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub episodes: usize,
    pub n_vs: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    /// Concepts in the emitted vocabulary (rule concepts always included).
    pub vocab_size: usize,
    pub mortality: Option<Rule>,
    pub decompensation: Option<Rule>,
    /// Trailing window, in steps, for per-step decompensation labels.
    /// `None` evaluates the rule on everything seen so far.
    pub decompensation_window: Option<usize>,
    pub phenotypes: Option<Vec<Rule>>,
    pub positive_rate: f64,
    /// Probability that a planted cue is dropped.
    pub noise: f64,
    /// Dropout of vital cues when it differs from `noise`.
    pub vital_noise: Option<f64>,
    /// Notes mentioning each planted concept cue.
    pub cue_mentions: usize,
    pub label_noise: f64,
    pub vital_shift: f64,
    pub vital_missing_rate: f64,
    /// Probability of a routine note in any given hour.
    pub note_rate: f64,
    /// Probability that a routine note mentions a distractor concept.
    pub distractor_rate: f64,
    /// Fraction of notes carrying only a chart date.
    pub undated_note_rate: f64,
    pub discharge_summary_rate: f64,
    /// Probability that a patient contributes a second stay.
    pub repeat_patient_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::mortality(200, 0)
    }
}

impl SyntheticSpec {
    /// Mortality planted redundantly in a vital sign and in a concept.
    pub fn mortality(episodes: usize, seed: u64) -> Self {
        Self {
            episodes,
            n_vs: 8,
            min_steps: MORTALITY_HOURS,
            max_steps: MORTALITY_HOURS,
            vocab_size: 60,
            mortality: Some(Rule::Any {
                rules: vec![
                    Rule::VitalMeanAbove {
                        feature: 0,
                        threshold: 1.0,
                    },
                    Rule::ConceptMentioned {
                        concept_id: PALLIATIVE_CARE.into(),
                    },
                ],
            }),
            decompensation: None,
            decompensation_window: None,
            phenotypes: None,
            positive_rate: 0.35,
            noise: 0.05,
            vital_noise: None,
            cue_mentions: 1,
            label_noise: 0.0,
            vital_shift: 2.0,
            vital_missing_rate: 0.1,
            note_rate: 0.12,
            distractor_rate: 0.6,
            undated_note_rate: 0.2,
            discharge_summary_rate: 0.3,
            repeat_patient_rate: 0.15,
            seed,
        }
    }

    /// Mortality whose concept cue recurs in several notes, so text and
    /// knowledge carry the label about as well as the vital sign does.
    pub fn redundant_mortality(episodes: usize, seed: u64) -> Self {
        Self {
            cue_mentions: 4,
            ..Self::mortality(episodes, seed)
        }
    }

    /// Decompensation driven by a single concept once it has been mentioned.
    pub fn decompensation(episodes: usize, seed: u64) -> Self {
        Self {
            min_steps: 48,
            max_steps: 72,
            mortality: None,
            decompensation: Some(Rule::ConceptMentioned {
                concept_id: PALLIATIVE_CARE.into(),
            }),
            positive_rate: 0.5,
            ..Self::mortality(episodes, seed)
        }
    }

    /// One concept per phenotype label.
    pub fn phenotyping(episodes: usize, seed: u64) -> Self {
        Self {
            min_steps: 24,
            max_steps: 48,
            mortality: None,
            phenotypes: Some(
                phenotype_concepts()
                    .map(|c| Rule::ConceptMentioned { concept_id: c.id.into() })
                    .collect(),
            ),
            positive_rate: 0.3,
            ..Self::mortality(episodes, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.n_vs == 0 {
            return cfg("n_vs must be positive".into());
        }
        if self.min_steps == 0 || self.min_steps > self.max_steps {
            return cfg(format!("invalid step range {}..={}", self.min_steps, self.max_steps));
        }
        for (name, p) in [
            ("positive_rate", self.positive_rate),
            ("noise", self.noise),
            ("label_noise", self.label_noise),
            ("vital_noise", self.vital_noise.unwrap_or(0.0)),
            ("vital_missing_rate", self.vital_missing_rate),
            ("note_rate", self.note_rate),
            ("distractor_rate", self.distractor_rate),
            ("undated_note_rate", self.undated_note_rate),
            ("discharge_summary_rate", self.discharge_summary_rate),
            ("repeat_patient_rate", self.repeat_patient_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return cfg(format!("{name} = {p} is not a probability"));
            }
        }
        if self.cue_mentions == 0 {
            return cfg("cue_mentions must be at least 1".into());
        }
        if !self.vital_shift.is_finite() {
            return cfg("vital_shift must be finite".into());
        }
        if self.mortality.is_none() && self.decompensation.is_none() && self.phenotypes.is_none() {
            return cfg("no task rule given".into());
        }
        if let Some(p) = &self.phenotypes {
            if p.len() != PHENOTYPE_COUNT {
                return cfg(format!("{} phenotype rules, expected {PHENOTYPE_COUNT}", p.len()));
            }
        }
        self.rules().try_for_each(|r| r.validate(self.n_vs))
    }

    fn rules(&self) -> impl Iterator<Item = &Rule> {
        self.mortality
            .iter()
            .chain(self.decompensation.iter())
            .chain(self.phenotypes.iter().flatten())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LibraryConcept {
    pub id: &'static str,
    pub terms: &'static [&'static str],
    pub group: &'static str,
}

const fn c(id: &'static str, terms: &'static [&'static str], group: &'static str) -> LibraryConcept {
    LibraryConcept { id, terms, group }
}

/// Built-in concepts with synthetic identifiers (except palliative care).
/// The first 25 after palliative care are the phenotype conditions.
static LIBRARY: &[LibraryConcept] = &[
    c(PALLIATIVE_CARE, &["palliative care", "comfort care", "palliative therapy", "end of life care"], "Therapeutic or Preventive Procedure"),
    c("C9000101", &["acute renal failure", "acute kidney injury"], "Disease or Syndrome"),
    c("C9000102", &["acute cerebrovascular disease", "stroke"], "Disease or Syndrome"),
    c("C9000103", &["acute myocardial infarction", "heart attack"], "Disease or Syndrome"),
    c("C9000104", &["cardiac dysrhythmia", "arrhythmia"], "Disease or Syndrome"),
    c("C9000105", &["chronic kidney disease"], "Disease or Syndrome"),
    c("C9000106", &["chronic obstructive pulmonary disease", "copd", "bronchiectasis"], "Disease or Syndrome"),
    c("C9000107", &["complication of surgical procedure", "postoperative complication"], "Pathologic Function"),
    c("C9000108", &["conduction disorder", "heart block"], "Disease or Syndrome"),
    c("C9000109", &["congestive heart failure", "chf"], "Disease or Syndrome"),
    c("C9000110", &["coronary atherosclerosis", "coronary artery disease"], "Disease or Syndrome"),
    c("C9000111", &["diabetes with complications", "diabetic ketoacidosis"], "Disease or Syndrome"),
    c("C9000112", &["diabetes mellitus", "type 2 diabetes"], "Disease or Syndrome"),
    c("C9000113", &["hyperlipidemia", "lipid metabolism disorder"], "Disease or Syndrome"),
    c("C9000114", &["essential hypertension"], "Disease or Syndrome"),
    c("C9000115", &["electrolyte imbalance", "hyponatremia", "hypokalemia"], "Pathologic Function"),
    c("C9000116", &["gastrointestinal hemorrhage", "gi bleed"], "Disease or Syndrome"),
    c("C9000117", &["secondary hypertension", "hypertensive heart disease"], "Disease or Syndrome"),
    c("C9000118", &["liver disease", "cirrhosis"], "Disease or Syndrome"),
    c("C9000119", &["lower respiratory disease", "bronchitis"], "Disease or Syndrome"),
    c("C9000120", &["upper respiratory infection", "sinusitis"], "Disease or Syndrome"),
    c("C9000121", &["pneumothorax", "pleural effusion", "atelectasis"], "Disease or Syndrome"),
    c("C9000122", &["pneumonia"], "Disease or Syndrome"),
    c("C9000123", &["respiratory failure", "respiratory arrest"], "Disease or Syndrome"),
    c("C9000124", &["septicemia", "sepsis"], "Disease or Syndrome"),
    c("C9000125", &["shock", "cardiogenic shock"], "Pathologic Function"),
    c("C9000201", &["hospice care"], "Health Care Activity"),
    c("C9000202", &["comfort measures"], "Health Care Activity"),
    c("C9000203", &["discharge planning"], "Health Care Activity"),
    c("C9000204", &["tracheostomy care"], "Therapeutic or Preventive Procedure"),
    c("C9000205", &["mechanical ventilation", "ventilator support"], "Therapeutic or Preventive Procedure"),
    c("C9000206", &["vasopressor therapy", "norepinephrine drip"], "Therapeutic or Preventive Procedure"),
    c("C9000207", &["blood transfusion"], "Therapeutic or Preventive Procedure"),
    c("C9000208", &["hemodialysis"], "Therapeutic or Preventive Procedure"),
    c("C9000209", &["endotracheal intubation"], "Therapeutic or Preventive Procedure"),
    c("C9000210", &["sedation"], "Therapeutic or Preventive Procedure"),
    c("C9000211", &["anticoagulation", "heparin infusion"], "Therapeutic or Preventive Procedure"),
    c("C9000212", &["physical therapy"], "Therapeutic or Preventive Procedure"),
    c("C9000213", &["nutrition consult", "tube feeding"], "Health Care Activity"),
    c("C9000214", &["wound care"], "Therapeutic or Preventive Procedure"),
    c("C9000215", &["central venous catheter", "central line"], "Medical Device"),
    c("C9000216", &["chest radiograph", "chest x ray"], "Diagnostic Procedure"),
    c("C9000217", &["echocardiogram"], "Diagnostic Procedure"),
    c("C9000218", &["antibiotic therapy", "broad spectrum antibiotics"], "Therapeutic or Preventive Procedure"),
    c("C9000219", &["insulin infusion"], "Therapeutic or Preventive Procedure"),
    c("C9000220", &["fluid resuscitation"], "Therapeutic or Preventive Procedure"),
    c("C9000221", &["delirium"], "Mental or Behavioral Dysfunction"),
    c("C9000222", &["pressure ulcer"], "Disease or Syndrome"),
    c("C9000223", &["urinary tract infection"], "Disease or Syndrome"),
    c("C9000224", &["anemia"], "Disease or Syndrome"),
    c("C9000225", &["thrombocytopenia"], "Disease or Syndrome"),
    c("C9000226", &["pulmonary embolism"], "Disease or Syndrome"),
    c("C9000227", &["deep vein thrombosis"], "Disease or Syndrome"),
    c("C9000228", &["seizure"], "Sign or Symptom"),
    c("C9000229", &["hypotension"], "Sign or Symptom"),
    c("C9000230", &["tachycardia"], "Sign or Symptom"),
    c("C9000231", &["fever"], "Sign or Symptom"),
    c("C9000232", &["lactic acidosis"], "Pathologic Function"),
    c("C9000233", &["family meeting"], "Health Care Activity"),
    c("C9000234", &["code status discussion", "do not resuscitate"], "Health Care Activity"),
    c("C9000235", &["social work consult"], "Health Care Activity"),
];

pub fn library() -> &'static [LibraryConcept] {
    LIBRARY
}

/// The 25 phenotype concepts, in label order.
pub fn phenotype_concepts() -> impl Iterator<Item = &'static LibraryConcept> {
    LIBRARY[1..=PHENOTYPE_COUNT].iter()
}

const FILLER: &[&str] = &[
    "patient", "seen", "and", "examined", "overnight", "stable", "labs", "reviewed", "plan", "continue",
    "monitor", "vitals", "noted", "resting", "pain", "controlled", "tolerating", "diet", "assessment",
    "progress", "nursing", "update", "team", "rounds", "with", "the", "no", "new", "events", "family",
    "at", "bedside", "will", "follow", "up", "morning", "afternoon", "evening", "awake", "alert", "oriented",
    "denies", "complaints", "medications", "adjusted", "per", "orders", "output", "adequate", "repositioned",
];

const CATEGORIES: &[&str] = &["Nursing", "Physician", "Respiratory", "Radiology", "Case Management"];

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub episodes: Vec<Episode>,
    pub vocabulary: Vocabulary,
    pub edges: BTreeSet<ConceptPair>,
}

fn filler<R: Rng>(rng: &mut R, min: usize, max: usize) -> Vec<String> {
    (0..rng.random_range(min..=max))
        .map(|_| FILLER.choose(rng).expect("nonempty").to_string())
        .collect()
}

/// A surface form of `concept`, varied in case and punctuation.
fn mention<R: Rng>(rng: &mut R, concept: &LibraryConcept) -> String {
    let term = *concept.terms.choose(rng).expect("concept has terms");
    match rng.random_range(0..4) {
        0 => term.to_string(),
        1 => term.to_uppercase(),
        2 => term.replace(' ', "-"),
        _ => {
            let mut s = term.to_string();
            if let Some(f) = s.get_mut(0..1) {
                f.make_ascii_uppercase();
            }
            s + ","
        }
    }
}

fn note_text<R: Rng>(rng: &mut R, concepts: &[&LibraryConcept]) -> String {
    let mut words = filler(rng, 5, 12);
    for c in concepts {
        let at = rng.random_range(0..=words.len());
        words.insert(at, mention(rng, c));
    }
    words.join(" ")
}

fn pick_vocabulary(spec: &SyntheticSpec) -> Vec<&'static LibraryConcept> {
    let mut required = BTreeSet::new();
    spec.rules().for_each(|r| r.concepts(&mut required));
    let mut chosen: Vec<&LibraryConcept> = LIBRARY.iter().filter(|c| required.contains(c.id)).collect();
    for c in LIBRARY {
        if chosen.len() >= spec.vocab_size.max(required.len()) {
            break;
        }
        if !required.contains(c.id) {
            chosen.push(c);
        }
    }
    chosen.sort_by_key(|c| c.id);
    chosen
}

fn concept_edges<R: Rng>(rng: &mut R, concepts: &[&LibraryConcept]) -> BTreeSet<ConceptPair> {
    let mut edges = BTreeSet::new();
    if concepts.len() < 2 {
        return edges;
    }
    for a in concepts {
        for _ in 0..2 {
            let b = concepts.choose(rng).expect("nonempty");
            if let Some(p) = ConceptPair::new(a.id, b.id) {
                edges.insert(p);
            }
        }
    }
    edges
}

struct Plan {
    /// (step, concept) notes to add.
    mentions: Vec<(usize, &'static LibraryConcept)>,
    /// (feature, window) vital shifts to apply.
    shifts: Vec<(usize, std::ops::Range<usize>)>,
}

fn plant<R: Rng>(rule: &Rule, window: std::ops::Range<usize>, spec: &SyntheticSpec, rng: &mut R, plan: &mut Plan) {
    let noise = spec.noise;
    match rule {
        Rule::ConceptMentioned { concept_id } => {
            if rng.random::<f64>() >= noise {
                let concept = LIBRARY.iter().find(|c| c.id == concept_id).expect("validated");
                for _ in 0..spec.cue_mentions {
                    plan.mentions.push((rng.random_range(window.clone()), concept));
                }
            }
        }
        Rule::VitalMeanAbove { feature, .. } => {
            if rng.random::<f64>() >= spec.vital_noise.unwrap_or(noise) {
                plan.shifts.push((*feature, window));
            }
        }
        Rule::All { rules } | Rule::Any { rules } => {
            for r in rules {
                plant(r, window.clone(), spec, rng, plan);
            }
        }
    }
}

fn base_date() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2100, 1, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time")
}

fn hours_after(admission: NaiveDateTime, t: NaiveDateTime) -> f64 {
    (t - admission).num_seconds() as f64 / 3600.0
}

/// Per-step concept sets of a preprocessed episode.
pub fn step_concepts(matcher: &ConceptMatcher, ep: &Episode, threshold: f64) -> Result<Vec<BTreeSet<String>>> {
    ep.notes_by_step()
        .into_iter()
        .map(|notes| {
            let texts: Vec<&str> = notes.iter().map(|n| n.text.as_str()).collect();
            matcher.extract(&texts, threshold)
        })
        .collect()
}
/// Computes every task label with a rule in `spec` from the episode's evidence.
/// Computes every task label the spec defines from the episode's evidence.
pub fn planted_labels(spec: &SyntheticSpec, matcher: &ConceptMatcher, raw: &Episode) -> Result<Labels> {
    let pre = preprocess_notes(raw).episode;
    let concepts = step_concepts(matcher, &pre, DEFAULT_MATCH_THRESHOLD)?;
    let ev = Evidence {
        episode: &pre,
        step_concepts: &concepts,
    };
    let t_len = pre.steps;
    Ok(Labels {
        mortality: spec
            .mortality
            .as_ref()
            .map(|r| u8::from(r.evaluate(&ev, 0..t_len.min(MORTALITY_HOURS)))),
        decompensation: spec.decompensation.as_ref().map(|r| {
            (0..t_len)
                .map(|t| {
                    let start = spec.decompensation_window.map_or(0, |w| (t + 1).saturating_sub(w));
                    u8::from(r.evaluate(&ev, start..t + 1))
                })
                .collect()
        }),
        phenotyping: spec
            .phenotypes
            .as_ref()
            .map(|rs| rs.iter().map(|r| u8::from(r.evaluate(&ev, 0..t_len))).collect()),
    })
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let concepts = pick_vocabulary(spec);
    let vocabulary = Vocabulary::new(
        concepts
            .iter()
            .map(|c| ConceptEntry::new(c.id, c.terms[0], &c.terms[1..], c.group))
            .collect::<Result<_>>()?,
    )?;
    let edges = concept_edges(&mut rng, &concepts);
    let matcher = ConceptMatcher::new(&vocabulary)?;

    let mut rule_concepts = BTreeSet::new();
    spec.rules().for_each(|r| r.concepts(&mut rule_concepts));
    let distractors: Vec<&LibraryConcept> =
        concepts.iter().copied().filter(|c| !rule_concepts.contains(c.id)).collect();
    let offset_dist = Normal::new(0.0, 0.2).expect("valid normal");

    let mut episodes = Vec::with_capacity(spec.episodes);
    let mut patient = 0usize;
    while episodes.len() < spec.episodes {
        patient += 1;
        let stays = if rng.random::<f64>() < spec.repeat_patient_rate { 2 } else { 1 };
        for index in 0..stays {
            if episodes.len() >= spec.episodes {
                break;
            }
            let mut ep = generate_episode(spec, &mut rng, &distractors, &offset_dist, patient, index)?;
            ep.labels = planted_labels(spec, &matcher, &ep)?;
            flip_labels(&mut ep.labels, spec.label_noise, &mut rng);
            episodes.push(ep);
        }
    }
    Ok(SyntheticData {
        episodes,
        vocabulary,
        edges,
    })
}

fn flip_labels<R: Rng>(labels: &mut Labels, p: f64, rng: &mut R) {
    if p == 0.0 {
        return;
    }
    let mut flip = |v: &mut u8| {
        if rng.random::<f64>() < p {
            *v = 1 - *v;
        }
    };
    if let Some(v) = labels.mortality.as_mut() {
        flip(v);
    }
    labels.decompensation.iter_mut().flatten().for_each(&mut flip);
    labels.phenotyping.iter_mut().flatten().for_each(&mut flip);
}

fn generate_episode<R: Rng>(
    spec: &SyntheticSpec,
    rng: &mut R,
    distractors: &[&'static LibraryConcept],
    offset_dist: &Normal<f64>,
    patient: usize,
    index: usize,
) -> Result<Episode> {
    let steps = rng.random_range(spec.min_steps..=spec.max_steps);
    let admission = base_date()
        + Duration::days(rng.random_range(0..365))
        + Duration::minutes(rng.random_range(0..24 * 60));
    let n_vs = spec.n_vs;

    let mut plan = Plan {
        mentions: Vec::new(),
        shifts: Vec::new(),
    };
    let mort_window = 0..steps.min(MORTALITY_HOURS);
    if let Some(rule) = &spec.mortality {
        if rng.random::<f64>() < spec.positive_rate {
            plant(rule, mort_window, spec, rng, &mut plan);
        }
    }
    if let Some(rule) = &spec.decompensation {
        if rng.random::<f64>() < spec.positive_rate {
            plant(rule, steps / 4..(3 * steps / 4).max(steps / 4 + 1), spec, rng, &mut plan);
        }
    }
    if let Some(rules) = &spec.phenotypes {
        for rule in rules {
            if rng.random::<f64>() < spec.positive_rate {
                plant(rule, 0..steps, spec, rng, &mut plan);
            }
        }
    }

    let offsets: Vec<f64> = (0..n_vs).map(|_| offset_dist.sample(rng)).collect();
    let mut vitals = vec![0.0; steps * n_vs];
    let mut missing = vec![false; steps * n_vs];
    for t in 0..steps {
        for j in 0..n_vs {
            let z: f64 = StandardNormal.sample(rng);
            vitals[t * n_vs + j] = offsets[j] + z;
        }
    }
    for (feature, window) in &plan.shifts {
        for t in window.clone() {
            vitals[t * n_vs + feature] += spec.vital_shift;
        }
    }
    for i in 0..steps * n_vs {
        if rng.random::<f64>() < spec.vital_missing_rate {
            missing[i] = true;
            vitals[i] = 0.0;
        }
    }

    let mut notes = Vec::new();
    let mut add_note = |rng: &mut R, step: usize, text: String| {
        let hours = step as f64 + rng.random::<f64>();
        let category = *CATEGORIES.choose(rng).expect("nonempty");
        let note = if rng.random::<f64>() < spec.undated_note_rate {
            NoteRecord::dated(admission, hours, text, category)
        } else {
            NoteRecord::timed(admission, hours, text, category)
        };
        notes.push(note);
    };
    for t in 0..steps {
        if rng.random::<f64>() < spec.note_rate {
            let mut mentioned = Vec::new();
            if !distractors.is_empty() && rng.random::<f64>() < spec.distractor_rate {
                mentioned.push(*distractors.choose(rng).expect("nonempty"));
            }
            let text = note_text(rng, &mentioned);
            add_note(rng, t, text);
        }
    }
    for (step, concept) in &plan.mentions {
        let text = note_text(rng, &[concept]);
        add_note(rng, *step, text);
    }
    notes.shuffle(rng);

    // A closing note after everything else; preprocessing masks it.
    let latest = notes
        .iter()
        .map(NoteRecord::effective_time)
        .max()
        .unwrap_or(admission)
        .max(admission + Duration::hours(steps as i64));
    let closing = latest + Duration::minutes(1);
    notes.push(NoteRecord::timed(
        admission,
        hours_after(admission, closing),
        "patient resting no acute events overnight",
        "Nursing",
    ));
    if rng.random::<f64>() < spec.discharge_summary_rate {
        let mut all: Vec<&LibraryConcept> = Vec::new();
        let mut ids = BTreeSet::new();
        spec.rules().for_each(|r| r.concepts(&mut ids));
        all.extend(LIBRARY.iter().filter(|c| ids.contains(c.id)));
        let mut summary = NoteRecord::dated(admission, hours_after(admission, closing), note_text(rng, &all), "Discharge summary");
        summary.is_discharge_summary = true;
        notes.push(summary);
    }

    Ok(Episode {
        patient_id: format!("P{patient:05}"),
        episode_index: index as u32,
        admission,
        steps,
        n_vs,
        vitals,
        vitals_missing: missing,
        notes,
        labels: Labels::default(),
        preprocessed: false,
    })
}

/// Writes `episodes.jsonl`, `vocab.tsv`, `edges.tsv` and `spec.json`.
pub fn write_synthetic(dir: &Path, spec: &SyntheticSpec) -> Result<SyntheticData> {
    let data = generate_synthetic(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_episodes(&dir.join("episodes.jsonl"), &data.episodes)?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("vocab.tsv", data.vocabulary.to_tsv())?;
    write("edges.tsv", edges_to_tsv(&data.edges))?;
    write("spec.json", serde_json::to_string_pretty(spec)?)?;
    Ok(data)
}

/// Counts of positive labels per task, for quick inspection of a spec.
pub fn label_summary(episodes: &[Episode]) -> BTreeMap<&'static str, (usize, usize)> {
    let mut out = BTreeMap::new();
    for ep in episodes {
        if let Some(y) = ep.labels.mortality {
            let e = out.entry("mortality").or_insert((0, 0));
            e.0 += usize::from(y);
            e.1 += 1;
        }
        if let Some(y) = &ep.labels.decompensation {
            let e = out.entry("decompensation").or_insert((0, 0));
            e.0 += y.iter().map(|&v| usize::from(v)).sum::<usize>();
            e.1 += y.len();
        }
        if let Some(y) = &ep.labels.phenotyping {
            let e = out.entry("phenotyping").or_insert((0, 0));
            e.0 += y.iter().map(|&v| usize::from(v)).sum::<usize>();
            e.1 += y.len();
        }
    }
    out
}
