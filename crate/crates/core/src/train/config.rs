//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{Aggregation, Connectivity, LayerKind};
use crate::error::{Error, Result};
use crate::knowledge::{DEFAULT_MATCH_THRESHOLD, DEFAULT_MAX_KG_NODES};
use crate::model::{Modalities, ModelSpec};
use crate::sequence::{TaskKind, DEFAULT_HIDDEN};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_BATCH_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub gnn_depth: usize,
    pub layer_kind: LayerKind,
    pub aggregation: Aggregation,
    pub max_kg_nodes: usize,
    pub use_ft: bool,
    pub use_gnn: bool,
    pub use_text: bool,
    pub use_kg: bool,
    pub seed: u64,
    pub dim: usize,
    pub hidden: usize,
    pub connectivity: Connectivity,
    pub carry_concepts: bool,
    pub match_threshold: f64,
    pub embedding_seed: u64,
    pub split_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_task(TaskKind::Mortality)
    }
}

impl TrainConfig {
    pub fn for_task(task: TaskKind) -> Self {
        Self {
            task,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: match task {
                TaskKind::Phenotyping => 40,
                _ => 20,
            },
            learning_rate: DEFAULT_LEARNING_RATE,
            gnn_depth: 2,
            layer_kind: LayerKind::SampleAggregate,
            aggregation: Aggregation::Sum,
            max_kg_nodes: DEFAULT_MAX_KG_NODES,
            use_ft: true,
            use_gnn: true,
            use_text: true,
            use_kg: true,
            seed: 0,
            dim: DEFAULT_DIM,
            hidden: DEFAULT_HIDDEN,
            connectivity: Connectivity::Full,
            carry_concepts: false,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            embedding_seed: 7,
            split_seed: 0,
        }
    }

    pub fn modalities(&self) -> Modalities {
        Modalities::new(self.use_ft, self.use_gnn, self.use_text, self.use_kg)
    }

    pub fn with_modalities(mut self, m: Modalities) -> Self {
        self.use_ft = m.use_ft;
        self.use_gnn = m.use_gnn;
        self.use_text = m.use_text;
        self.use_kg = m.use_kg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.modalities().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.match_threshold) {
            return Err(Error::Config(format!("match_threshold {} outside [0, 1]", self.match_threshold)));
        }
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("dim and hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self, n_vs: usize) -> ModelSpec {
        ModelSpec {
            task: self.task,
            n_vs,
            dim: self.dim,
            hidden: self.hidden,
            layer_kind: self.layer_kind,
            depth: self.gnn_depth,
            aggregation: self.aggregation,
            max_kg_nodes: self.max_kg_nodes,
            modalities: self.modalities(),
            connectivity: self.connectivity,
            groups: None,
            carry_concepts: self.carry_concepts,
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
            }
        }
        match key {
            "task" => self.task = value.parse()?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = num(key, value)?,
            "gnn_depth" => self.gnn_depth = num(key, value)?,
            "layer_kind" => self.layer_kind = value.parse()?,
            "aggregation" => self.aggregation = value.parse()?,
            "max_kg_nodes" => self.max_kg_nodes = num(key, value)?,
            "use_ft" => self.use_ft = flag(key, value)?,
            "use_gnn" => self.use_gnn = flag(key, value)?,
            "use_text" => self.use_text = flag(key, value)?,
            "use_kg" => self.use_kg = flag(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "connectivity" => self.connectivity = value.parse()?,
            "carry_concepts" => self.carry_concepts = flag(key, value)?,
            "match_threshold" => self.match_threshold = num(key, value)?,
            "embedding_seed" => self.embedding_seed = num(key, value)?,
            "split_seed" => self.split_seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults of the task named in the
    /// text (mortality when absent). `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", idx + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let task = match pairs.iter().rev().find(|(k, _)| k == "task") {
            Some((_, v)) => v.parse()?,
            None => TaskKind::Mortality,
        };
        let mut cfg = Self::for_task(task);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every field as `key = value`, in declaration order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("task", &self.task);
        put("batch_size", &self.batch_size);
        put("epochs", &self.epochs);
        put("learning_rate", &self.learning_rate);
        put("gnn_depth", &self.gnn_depth);
        put("layer_kind", &self.layer_kind);
        put("aggregation", &self.aggregation);
        put("max_kg_nodes", &self.max_kg_nodes);
        put("use_ft", &self.use_ft);
        put("use_gnn", &self.use_gnn);
        put("use_text", &self.use_text);
        put("use_kg", &self.use_kg);
        put("seed", &self.seed);
        put("dim", &self.dim);
        put("hidden", &self.hidden);
        put("connectivity", &self.connectivity);
        put("carry_concepts", &self.carry_concepts);
        put("match_threshold", &self.match_threshold);
        put("embedding_seed", &self.embedding_seed);
        put("split_seed", &self.split_seed);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.gnn_depth, 2);
        assert_eq!(c.max_kg_nodes, 30);
        assert_eq!(c.aggregation, Aggregation::Sum);
        assert_eq!(c.layer_kind, LayerKind::SampleAggregate);
        assert_eq!(TrainConfig::for_task(TaskKind::Phenotyping).epochs, 40);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::for_task(TaskKind::Decompensation);
        c.layer_kind = LayerKind::Attention;
        c.learning_rate = 3e-3;
        c.use_kg = false;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(TrainConfig::parse("colour = red"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("use_ft = false"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("epochs"), Err(Error::Config(_))));
        let c = TrainConfig::parse("task = pheno\n# comment\nepochs = 3 # inline\n").unwrap();
        assert_eq!((c.task, c.epochs), (TaskKind::Phenotyping, 3));
    }
}
