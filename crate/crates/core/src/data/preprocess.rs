use super::episode::{end_of_day, Episode};

/// Result of note preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub episode: Episode,
    /// No notes remain, so the stay is excluded from the dataset.
    pub excluded: bool,
}

/// Applies the note rules in order:
///
/// 1. notes without a chart time are timed at 23:59:59 of their chart date;
/// 2. discharge summaries are removed;
/// 3. the chronologically last remaining note is removed.
///
/// Remaining notes are left sorted by chart time. An episode already marked
/// preprocessed is returned unchanged.
pub fn preprocess_notes(episode: &Episode) -> Preprocessed {
    let mut ep = episode.clone();
    if !ep.preprocessed {
        for n in &mut ep.notes {
            if n.chart_time.is_none() {
                n.chart_time = Some(end_of_day(n.chart_date));
            }
        }
        ep.notes.retain(|n| !n.is_discharge_summary);
        // Stable sort: among notes sharing the latest time, the one listed
        // last is treated as the last note.
        ep.notes.sort_by_key(|n| n.effective_time());
        ep.notes.pop();
        ep.preprocessed = true;
    }
    let excluded = ep.notes.is_empty();
    Preprocessed { episode: ep, excluded }
}
