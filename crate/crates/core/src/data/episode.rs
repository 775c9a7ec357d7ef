use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{TaskKind, PHENOTYPE_COUNT};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoteRecord {
    pub text: String,
    pub category: String,
    pub chart_date: NaiveDate,
    pub chart_time: Option<NaiveDateTime>,
    pub is_discharge_summary: bool,
}

impl NoteRecord {
    /// Note timed `hours` after `admission`.
    pub fn timed(admission: NaiveDateTime, hours: f64, text: impl Into<String>, category: impl Into<String>) -> Self {
        let at = admission + Duration::seconds((hours * 3600.0).round() as i64);
        Self {
            text: text.into(),
            category: category.into(),
            chart_date: at.date(),
            chart_time: Some(at),
            is_discharge_summary: false,
        }
    }

    /// Note carrying only the date on which `hours` after `admission` falls.
    pub fn dated(admission: NaiveDateTime, hours: f64, text: impl Into<String>, category: impl Into<String>) -> Self {
        let mut note = Self::timed(admission, hours, text, category);
        note.chart_time = None;
        note
    }

    /// Chart time, or the last second of the chart date when only the date
    /// is known.
    pub fn effective_time(&self) -> NaiveDateTime {
        self.chart_time.unwrap_or_else(|| end_of_day(self.chart_date))
    }
}

pub fn end_of_day(date: NaiveDate) -> NaiveDateTime {
    date.and_time(NaiveTime::from_hms_opt(23, 59, 59).expect("valid time"))
}

/// Hour bucket of `time` on a grid starting at `admission`: whole hours
/// elapsed, with anything before admission placed in hour 0.
pub fn hour_bucket(admission: NaiveDateTime, time: NaiveDateTime) -> usize {
    let secs = (time - admission).num_seconds();
    if secs <= 0 {
        0
    } else {
        (secs / 3600) as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mortality: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decompensation: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phenotyping: Option<Vec<u8>>,
}

impl Labels {
    pub fn has(&self, task: TaskKind) -> bool {
        match task {
            TaskKind::Mortality => self.mortality.is_some(),
            TaskKind::Decompensation => self.decompensation.is_some(),
            TaskKind::Phenotyping => self.phenotyping.is_some(),
        }
    }
}

/// One ICU stay on an hourly grid.
///
/// Missing vital entries always hold `0.0` in `vitals`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub patient_id: String,
    pub episode_index: u32,
    pub admission: NaiveDateTime,
    pub steps: usize,
    pub n_vs: usize,
    pub vitals: Vec<f64>,
    pub vitals_missing: Vec<bool>,
    pub notes: Vec<NoteRecord>,
    pub labels: Labels,
    /// Set once note preprocessing has run.
    pub preprocessed: bool,
}

impl Episode {
    pub fn vital(&self, t: usize, j: usize) -> Option<f64> {
        let i = t * self.n_vs + j;
        (!self.vitals_missing[i]).then(|| self.vitals[i])
    }

    pub fn note_bucket(&self, note: &NoteRecord) -> usize {
        hour_bucket(self.admission, note.effective_time())
    }

    /// Notes grouped by hour bucket; notes beyond the last step are dropped.
    pub fn notes_by_step(&self) -> Vec<Vec<&NoteRecord>> {
        let mut out = vec![Vec::new(); self.steps];
        for n in &self.notes {
            let b = self.note_bucket(n);
            if b < self.steps {
                out[b].push(n);
            }
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(format!("{} #{}: {m}", self.patient_id, self.episode_index)));
        if self.patient_id.is_empty() {
            return bad("empty patient id".into());
        }
        if self.steps == 0 {
            return bad("episode has no steps".into());
        }
        if self.n_vs == 0 {
            return bad("no vital sign channels".into());
        }
        let cells = self.steps * self.n_vs;
        if self.vitals.len() != cells || self.vitals_missing.len() != cells {
            return bad(format!(
                "{} vitals / {} mask entries for {}x{}",
                self.vitals.len(),
                self.vitals_missing.len(),
                self.steps,
                self.n_vs
            ));
        }
        for (i, (&v, &m)) in self.vitals.iter().zip(&self.vitals_missing).enumerate() {
            if !m && !v.is_finite() {
                return bad(format!("non-finite vital at step {}, feature {}", i / self.n_vs, i % self.n_vs));
            }
        }
        if let Some(y) = self.labels.mortality {
            if y > 1 {
                return bad(format!("mortality label {y}"));
            }
        }
        if let Some(y) = &self.labels.decompensation {
            if y.len() != self.steps || y.iter().any(|&v| v > 1) {
                return bad(format!("decompensation labels must be {} values in {{0,1}}", self.steps));
            }
        }
        if let Some(y) = &self.labels.phenotyping {
            if y.len() != PHENOTYPE_COUNT || y.iter().any(|&v| v > 1) {
                return bad(format!("phenotype labels must be {PHENOTYPE_COUNT} values in {{0,1}}"));
            }
        }
        Ok(())
    }

    /// Label vector for `task` as floats over the steps the task uses.
    pub fn targets(&self, task: TaskKind) -> Result<Vec<f64>> {
        let missing = || Error::Eligibility(format!("episode {} has no {task} label", self.patient_id));
        let used = task.steps_used(self.steps)?;
        Ok(match task {
            TaskKind::Mortality => vec![f64::from(self.labels.mortality.ok_or_else(missing)?)],
            TaskKind::Decompensation => self
                .labels
                .decompensation
                .as_ref()
                .ok_or_else(missing)?
                .iter()
                .take(used)
                .map(|&v| f64::from(v))
                .collect(),
            TaskKind::Phenotyping => self
                .labels
                .phenotyping
                .as_ref()
                .ok_or_else(missing)?
                .iter()
                .map(|&v| f64::from(v))
                .collect(),
        })
    }

    pub fn id(&self) -> String {
        format!("{}_{}", self.patient_id, self.episode_index)
    }
}

