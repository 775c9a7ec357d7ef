//! Losses, metrics, the training loop, robustness and ablation experiments,
//! attention reports and checkpoints.

mod checkpoint;
mod config;
mod corpus;
mod experiments;
mod explain;
mod metrics;
mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_DIM, DEFAULT_LEARNING_RATE};
pub use corpus::{Corpus, EDGES_FILE, VOCAB_FILE};
pub use experiments::{
    ablation_csv, ablation_suite, ablation_summary, ablation_table, mask_inputs, mask_vitals, mean_std, median,
    missing_sweep, summary_csv, sweep_csv, sweep_summary, train_and_test, AblationRow, SummaryRow, SweepRow,
    METRICS_HEADER,
};
pub use explain::{attention_report, rank_concepts, trace_csv, AttentionSummary, ConceptScore, TracePoint, DEFAULT_TOP_K};
pub use metrics::{auprc, auroc, bce_loss, compute_metrics, compute_multilabel_metrics, task_metrics, MetricReport};
pub use trainer::{
    batch_step, evaluate, history_csv, init_model, predict_all, train, train_prepared, EpochRecord, Predictions,
    TrainOutcome,
};
