//! Mini-batch training with validation-based model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainConfig;
use super::corpus::Corpus;
use super::metrics::{task_metrics, MetricReport};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{Model, PreparedEpisode};
use crate::numeric::{OptimizerState, ParameterSet, Tape};
use crate::sequence::TaskKind;

/// Offset between the initialisation seed and the shuffling seed.
const SHUFFLE_STREAM: u64 = 0x5eed_0001;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-episode loss over the epoch's updates.
    pub train_loss: f64,
    pub val: Option<MetricReport>,
    pub val_error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The model with the parameters of the selected epoch.
    pub model: Model,
    pub final_params: ParameterSet,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

/// Predictions and targets of a set of episodes, concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub task: TaskKind,
    pub scores: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Predictions {
    pub fn metrics(&self) -> Result<MetricReport> {
        task_metrics(self.task, &self.scores, &self.targets)
    }
}

pub fn predict_all(model: &Model, prepared: &[PreparedEpisode]) -> Result<Predictions> {
    let mut scores = Vec::new();
    let mut targets = Vec::new();
    for p in prepared {
        scores.extend(model.predict(p)?);
        targets.extend_from_slice(&p.targets);
    }
    Ok(Predictions {
        task: model.spec.task,
        scores,
        targets,
    })
}

pub fn evaluate(model: &Model, prepared: &[PreparedEpisode]) -> Result<MetricReport> {
    predict_all(model, prepared)?.metrics()
}

/// Mean of the per-episode losses of one mini-batch, with gradients
/// accumulated into `params`.
pub fn batch_step(model: &Model, params: &mut ParameterSet, batch: &[&PreparedEpisode]) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for prep in batch {
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, params, prep)?;
        let loss = tape.bce(f.probs, prep.targets.clone())?;
        total += tape.scalar_value(loss);
        let scaled = tape.scale(loss, scale)?;
        tape.backward(scaled, params)?;
    }
    Ok(total * scale)
}

/// Trains `model` in place of its parameters on `train`, validating on `val`
/// after every epoch.
pub fn train_prepared(
    mut model: Model,
    train: &[PreparedEpisode],
    val: &[PreparedEpisode],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.epochs > 0 && train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut params = model.params.clone();
    let mut best: Option<(f64, usize, ParameterSet)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut optimizer = OptimizerState::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(SHUFFLE_STREAM));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedEpisode> = chunk.iter().map(|&i| &train[i]).collect();
            params.zero_grads();
            loss_sum += batch_step(&model, &mut params, &batch)? * batch.len() as f64;
            optimizer.step(&mut params)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Domain {
                op: "train",
                detail: format!("loss diverged at epoch {epoch}"),
            });
        }
        model.params = params.clone();
        let (val_report, val_error) = if val.is_empty() {
            (None, Some("validation split is empty".to_string()))
        } else {
            match evaluate(&model, val) {
                Ok(r) => (Some(r), None),
                Err(e @ Error::UndefinedMetric { .. }) => (None, Some(e.to_string())),
                Err(e) => return Err(e),
            }
        };
        // Highest validation AuPRC wins; later epochs win ties and stand in
        // when validation metrics are undefined.
        let score = val_report.as_ref().map_or(f64::NEG_INFINITY, |r| r.auprc);
        if best.as_ref().is_none_or(|(s, _, _)| score >= *s) {
            best = Some((score, epoch, params.clone()));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val: val_report,
            val_error,
        });
    }
    let best_epoch = best.as_ref().map(|(_, e, _)| *e);
    if let Some((_, _, p)) = best {
        model.params = p;
    }
    Ok(TrainOutcome {
        model,
        final_params: params,
        history,
        best_epoch,
    })
}

/// A freshly initialised model for `config` over `corpus`.
pub fn init_model(corpus: &Corpus, config: &TrainConfig) -> Result<Model> {
    config.validate()?;
    let spec = config.model_spec(corpus.n_vs());
    let params = spec.init_params(config.seed)?;
    let kg = corpus.build_kg(config.embedding_seed)?;
    Model::new(spec, params, kg)
}

/// Initialises and trains a model on the corpus train split, selecting on
/// the validation split.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    let model = init_model(corpus, config)?;
    let train = corpus.prepare(&model, &corpus.indices(Split::Train))?;
    let val = corpus.prepare(&model, &corpus.indices(Split::Val))?;
    train_prepared(model, &train, &val, config)
}

/// `task,epoch,seed,train_loss,auprc,auroc,macro_auc,micro_auc` rows.
pub fn history_csv(config: &TrainConfig, history: &[EpochRecord]) -> String {
    let mut out = String::from("task,epoch,seed,train_loss,auprc,auroc,macro_auc,micro_auc\n");
    for r in history {
        let cells = r.val.as_ref().map_or_else(|| ",,,".to_string(), MetricReport::csv_cells);
        out.push_str(&format!(
            "{},{},{},{:.9},{}\n",
            config.task, r.epoch, config.seed, r.train_loss, cells
        ));
    }
    out
}
