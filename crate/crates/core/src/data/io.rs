//! Episode JSON-lines format.
//!
//! ```text
//! {"patient_id":"P00001","episode_index":0,"admission":"2100-01-01T07:00:00",
//!  "vitals":{"dims":[48,8],"values":[...]},"vitals_missing":[false,...],
//!  "notes":[{"t":3.5,"text":"...","category":"Nursing",
//!            "is_discharge_summary":false,"has_chart_time":true}],
//!  "labels":{"mortality":1},"preprocessed":false}
//! ```
//!
//! A note's `t` is hours since admission. With `has_chart_time` false only
//! the calendar date of that instant is significant.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::episode::{Episode, Labels, NoteRecord};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct VitalsRecord {
    dims: [usize; 2],
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NoteLine {
    t: f64,
    text: String,
    #[serde(default)]
    category: String,
    #[serde(default)]
    is_discharge_summary: bool,
    #[serde(default = "yes")]
    has_chart_time: bool,
}

fn yes() -> bool {
    true
}

fn default_admission() -> NaiveDateTime {
    NaiveDateTime::default()
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeLine {
    patient_id: String,
    episode_index: u32,
    #[serde(default = "default_admission")]
    admission: NaiveDateTime,
    vitals: VitalsRecord,
    vitals_missing: Vec<bool>,
    #[serde(default)]
    notes: Vec<NoteLine>,
    #[serde(default)]
    labels: Labels,
    #[serde(default)]
    preprocessed: bool,
}

fn hours_between(from: NaiveDateTime, to: NaiveDateTime) -> f64 {
    (to - from).num_seconds() as f64 / 3600.0
}

impl From<&Episode> for EpisodeLine {
    fn from(ep: &Episode) -> Self {
        let notes = ep
            .notes
            .iter()
            .map(|n| {
                let at = n.chart_time.unwrap_or_else(|| n.chart_date.and_hms_opt(0, 0, 0).expect("midnight"));
                NoteLine {
                    t: hours_between(ep.admission, at),
                    text: n.text.clone(),
                    category: n.category.clone(),
                    is_discharge_summary: n.is_discharge_summary,
                    has_chart_time: n.chart_time.is_some(),
                }
            })
            .collect();
        Self {
            patient_id: ep.patient_id.clone(),
            episode_index: ep.episode_index,
            admission: ep.admission,
            vitals: VitalsRecord {
                dims: [ep.steps, ep.n_vs],
                values: ep.vitals.clone(),
            },
            vitals_missing: ep.vitals_missing.clone(),
            notes,
            labels: ep.labels.clone(),
            preprocessed: ep.preprocessed,
        }
    }
}

impl EpisodeLine {
    fn into_episode(self) -> Result<Episode> {
        let [steps, n_vs] = self.vitals.dims;
        let mut notes = Vec::with_capacity(self.notes.len());
        for n in self.notes {
            if !n.t.is_finite() {
                return Err(Error::Input(format!("note time {} is not finite", n.t)));
            }
            let at = self.admission + Duration::seconds((n.t * 3600.0).round() as i64);
            notes.push(NoteRecord {
                text: n.text,
                category: n.category,
                chart_date: at.date(),
                chart_time: n.has_chart_time.then_some(at),
                is_discharge_summary: n.is_discharge_summary,
            });
        }
        let mut vitals = self.vitals.values;
        for (v, &m) in vitals.iter_mut().zip(&self.vitals_missing) {
            if m {
                *v = 0.0;
            }
        }
        let ep = Episode {
            patient_id: self.patient_id,
            episode_index: self.episode_index,
            admission: self.admission,
            steps,
            n_vs,
            vitals,
            vitals_missing: self.vitals_missing,
            notes,
            labels: self.labels,
            preprocessed: self.preprocessed,
        };
        ep.check()?;
        Ok(ep)
    }
}

pub fn episode_to_json(ep: &Episode) -> Result<String> {
    Ok(serde_json::to_string(&EpisodeLine::from(ep))?)
}

pub fn episode_from_json(line: &str) -> Result<Episode> {
    let rec: EpisodeLine = serde_json::from_str(line)?;
    rec.into_episode()
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ep in episodes {
        w.write_all(episode_to_json(ep)?.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One line of an episode file that could not be accepted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub file: String,
    pub line: usize,
    pub episode: Option<String>,
    pub reason: String,
}

/// Reads every episode of a JSON-lines file. A line that is not valid JSON
/// of the episode shape is a parse error; an episode that parses but breaks
/// an invariant is reported in the rejection list.
pub fn read_episodes(path: &Path) -> Result<(Vec<Episode>, Vec<Rejection>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut episodes = Vec::new();
    let mut rejections = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let label = format!("{}_{}", rec.patient_id, rec.episode_index);
        match rec.into_episode() {
            Ok(ep) => episodes.push(ep),
            Err(e) => rejections.push(Rejection {
                file: path.display().to_string(),
                line: idx + 1,
                episode: Some(label),
                reason: e.to_string(),
            }),
        }
    }
    Ok((episodes, rejections))
}
