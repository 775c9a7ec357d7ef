use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::episode::Episode;
use super::io::{read_episodes, Rejection};
use super::preprocess::preprocess_notes;
use crate::error::{Error, Result};
use crate::hash::hash_with_seed;
use crate::sequence::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" | "validation" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train | val | test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

/// 70/15/15 assignment by hashed patient id.
pub fn split_of(patient_id: &str, split_seed: u64) -> Split {
    match hash_with_seed(patient_id, split_seed) % 100 {
        0..70 => Split::Train,
        70..85 => Split::Val,
        _ => Split::Test,
    }
}

/// Preprocessed, validated episodes for one task with patient-level splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: TaskKind,
    pub episodes: Vec<Episode>,
    pub splits: Vec<Split>,
    pub rejections: Vec<Rejection>,
}

impl Dataset {
    /// Preprocesses notes, drops stays left without notes or not eligible
    /// for `task`, and assigns splits.
    pub fn from_episodes(task: TaskKind, raw: Vec<Episode>, split_seed: u64) -> Self {
        let mut episodes = Vec::with_capacity(raw.len());
        let mut rejections = Vec::new();
        for ep in raw {
            let reject = |reason: String| Rejection {
                file: String::new(),
                line: 0,
                episode: Some(ep.id()),
                reason,
            };
            let reason = if let Err(e) = ep.check() {
                Some(e.to_string())
            } else if !ep.labels.has(task) {
                Some(format!("no {task} label"))
            } else if let Err(e) = task.steps_used(ep.steps) {
                Some(e.to_string())
            } else {
                None
            };
            if let Some(reason) = reason {
                rejections.push(reject(reason));
                continue;
            }
            let pre = preprocess_notes(&ep);
            if pre.excluded {
                rejections.push(reject("no notes remain after preprocessing".into()));
                continue;
            }
            episodes.push(pre.episode);
        }
        let splits = episodes.iter().map(|e| split_of(&e.patient_id, split_seed)).collect();
        Self {
            task,
            episodes,
            splits,
            rejections,
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.episodes.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Episode> {
        self.indices(split).into_iter().map(|i| &self.episodes[i]).collect()
    }

    pub fn n_vs(&self) -> Option<usize> {
        self.episodes.first().map(|e| e.n_vs)
    }

    pub fn find(&self, id: &str) -> Option<&Episode> {
        self.episodes.iter().find(|e| e.id() == id || e.patient_id == id)
    }
}

/// Episode files of a data directory: every `*.jsonl`, sorted by name.
pub fn episode_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "jsonl") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn read_dir_episodes(dir: &Path) -> Result<(Vec<Episode>, Vec<Rejection>)> {
    let mut episodes = Vec::new();
    let mut rejections = Vec::new();
    for file in episode_files(dir)? {
        let (eps, rej) = read_episodes(&file)?;
        episodes.extend(eps);
        rejections.extend(rej);
    }
    Ok((episodes, rejections))
}

pub fn load_dataset(dir: &Path, task: TaskKind) -> Result<Dataset> {
    load_dataset_with_seed(dir, task, 0)
}

pub fn load_dataset_with_seed(dir: &Path, task: TaskKind, split_seed: u64) -> Result<Dataset> {
    let (episodes, file_rejections) = read_dir_episodes(dir)?;
    if episodes.is_empty() && file_rejections.is_empty() {
        return Err(Error::EmptyDataset(dir.display().to_string()));
    }
    let mut ds = Dataset::from_episodes(task, episodes, split_seed);
    let mut rejections = file_rejections;
    rejections.append(&mut ds.rejections);
    ds.rejections = rejections;
    if ds.episodes.is_empty() {
        return Err(Error::EmptyDataset(dir.display().to_string()));
    }
    Ok(ds)
}
