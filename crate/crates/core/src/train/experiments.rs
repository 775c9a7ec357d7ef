//! Vital-sign masking, the missing-data sweep and the component ablation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainConfig;
use super::corpus::Corpus;
use super::metrics::MetricReport;
use super::trainer::{evaluate, train, TrainOutcome};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{Modalities, Model, StepInputs, ABLATION_LADDER};
use crate::sequence::TaskKind;

pub const METRICS_HEADER: &str = "task,rung_or_ratio,seed,auprc,auroc,macro_auc,micro_auc";

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..=1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::Config(format!("masking ratio {ratio} outside [0, 1]")))
    }
}

/// One draw per entry, in row-major order, whether or not it is already
/// missing; masked values are zeroed.
fn mask_entries<R: Rng>(vitals: &[f64], missing: &[bool], ratio: f64, rng: &mut R) -> (Vec<f64>, Vec<bool>) {
    let mut v = vitals.to_vec();
    let mut m = missing.to_vec();
    for (val, miss) in v.iter_mut().zip(m.iter_mut()) {
        if rng.random::<f64>() < ratio {
            *val = 0.0;
            *miss = true;
        }
    }
    (v, m)
}

/// Copy of `dataset` with each vital entry independently marked missing
/// with probability `ratio`. Notes and labels are untouched.
pub fn mask_vitals(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    check_ratio(ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    for ep in &mut out.episodes {
        let (v, m) = mask_entries(&ep.vitals, &ep.vitals_missing, ratio, &mut rng);
        ep.vitals = v;
        ep.vitals_missing = m;
    }
    Ok(out)
}

/// [`mask_vitals`] applied to precomputed step inputs; the same seed masks
/// the same entries as on the episodes the inputs came from.
pub fn mask_inputs(inputs: &[StepInputs], ratio: f64, seed: u64) -> Result<Vec<StepInputs>> {
    check_ratio(ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(inputs
        .iter()
        .map(|inp| {
            let (v, m) = mask_entries(&inp.vitals, &inp.missing, ratio, &mut rng);
            inp.with_vitals(v, m)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub seed: u64,
    pub result: std::result::Result<MetricReport, String>,
}

/// Evaluates `model` on the episodes at `indices` under every (ratio, seed)
/// masking. Metric failures are recorded per row.
pub fn missing_sweep(
    model: &Model,
    corpus: &Corpus,
    indices: &[usize],
    ratios: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    for &r in ratios {
        check_ratio(r)?;
    }
    let base: Vec<StepInputs> = indices.iter().map(|&i| corpus.inputs[i].clone()).collect();
    let mut rows = Vec::with_capacity(ratios.len() * seeds.len());
    for &ratio in ratios {
        for &seed in seeds {
            let masked = mask_inputs(&base, ratio, seed)?;
            let result = corpus
                .prepare_with(model, indices, &masked)
                .and_then(|prep| evaluate(model, &prep))
                .map_err(|e| e.to_string());
            rows.push(SweepRow { ratio, seed, result });
        }
    }
    Ok(rows)
}

fn metric_row(task: TaskKind, label: &str, seed: u64, result: &std::result::Result<MetricReport, String>) -> String {
    let cells = match result {
        Ok(r) => r.csv_cells(),
        Err(_) => ",,,".into(),
    };
    format!("{task},{label},{seed},{cells}\n")
}

pub fn sweep_csv(task: TaskKind, rows: &[SweepRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&metric_row(task, &r.ratio.to_string(), r.seed, &r.result));
    }
    out
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Mean and standard deviation of AuPRC and AuROC per group label, over
/// the successful rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub runs: usize,
    pub failures: usize,
    pub auprc: (f64, f64),
    pub auroc: (f64, f64),
}

fn summarize<'a>(groups: impl Iterator<Item = (String, &'a std::result::Result<MetricReport, String>)>) -> Vec<SummaryRow> {
    let mut order: Vec<String> = Vec::new();
    let mut by: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for (label, result) in groups {
        if !by.contains_key(&label) {
            order.push(label.clone());
        }
        let entry = by.entry(label).or_default();
        match result {
            Ok(r) => {
                entry.0.push(r.auprc);
                entry.1.push(r.auroc);
            }
            Err(_) => entry.2 += 1,
        }
    }
    order
        .into_iter()
        .map(|label| {
            let (p, r, f) = &by[&label];
            SummaryRow {
                runs: p.len(),
                failures: *f,
                auprc: mean_std(p),
                auroc: mean_std(r),
                label,
            }
        })
        .collect()
}

pub fn sweep_summary(rows: &[SweepRow]) -> Vec<SummaryRow> {
    summarize(rows.iter().map(|r| (r.ratio.to_string(), &r.result)))
}

pub fn summary_csv(task: TaskKind, rows: &[SummaryRow]) -> String {
    let mut out = String::from("task,rung_or_ratio,runs,failures,auprc_mean,auprc_std,auroc_mean,auroc_std\n");
    for r in rows {
        out.push_str(&format!(
            "{task},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            csv_field(&r.label),
            r.runs,
            r.failures,
            r.auprc.0,
            r.auprc.1,
            r.auroc.0,
            r.auroc.1
        ));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub rung: String,
    pub modalities: Modalities,
    pub seed: u64,
    pub result: std::result::Result<MetricReport, String>,
}

/// Trains `config` on the corpus and evaluates the selected model on the
/// test split.
pub fn train_and_test(corpus: &Corpus, config: &TrainConfig) -> Result<(TrainOutcome, MetricReport)> {
    let outcome = train(corpus, config)?;
    let test = corpus.prepare(&outcome.model, &corpus.indices(Split::Test))?;
    let report = evaluate(&outcome.model, &test)?;
    Ok((outcome, report))
}

/// Every ladder rung under every seed, sharing all other settings of
/// `base`. A failing rung is recorded and the suite continues.
pub fn ablation_suite(corpus: &Corpus, base: &TrainConfig, seeds: &[u64]) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for (name, modalities) in ABLATION_LADDER {
        for &seed in seeds {
            let mut cfg = base.clone().with_modalities(modalities);
            cfg.seed = seed;
            let result = train_and_test(corpus, &cfg)
                .map(|(_, r)| r)
                .map_err(|e| e.to_string());
            rows.push(AblationRow {
                rung: name.to_string(),
                modalities,
                seed,
                result,
            });
        }
    }
    rows
}

pub fn ablation_csv(task: TaskKind, rows: &[AblationRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&metric_row(task, &csv_field(&r.rung), r.seed, &r.result));
    }
    out
}

pub fn ablation_summary(rows: &[AblationRow]) -> Vec<SummaryRow> {
    summarize(rows.iter().map(|r| (r.rung.clone(), &r.result)))
}

/// Plain-text table with one row per rung: `mean ± std` in percent.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let summary = ablation_summary(rows);
    let width = summary.iter().map(|s| s.label.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>13}  {:>13}\n", "Model", "AuPRC", "AuROC");
    for s in summary {
        let cell = |(m, sd): (f64, f64)| {
            if s.runs == 0 {
                "failed".to_string()
            } else {
                format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * sd)
            }
        };
        out.push_str(&format!("{:<width$}  {:>13}  {:>13}\n", s.label, cell(s.auprc), cell(s.auroc)));
    }
    out
}
