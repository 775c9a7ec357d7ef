//! Command-line front end: data generation, training, evaluation and the
//! analysis experiments, one verb per invocation.

mod plot;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kgicu::data::{read_dir_episodes, preprocess_notes, write_synthetic, Split, SyntheticSpec};
use kgicu::encoder::HashedBagEncoder;
use kgicu::knowledge::{load_edges, ConceptMatcher, HashedGaussian, Vocabulary};
use kgicu::model::{build_kg_from_inputs, Model, StepInputs};
use kgicu::sequence::TaskKind;
use kgicu::train::{
    ablation_csv, ablation_summary, ablation_table, attention_report, evaluate, history_csv, init_model,
    missing_sweep, summary_csv, sweep_csv, sweep_summary, train_prepared, Checkpoint, Corpus, TrainConfig,
    METRICS_HEADER,
};
use kgicu::{Error, Result};

#[derive(Parser)]
#[command(name = "kgicu", version, about = "Knowledge-graph enhanced ICU time-series prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted labels.
    GenSynth {
        /// JSON generator settings; a preset is used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Preset when no spec file is given: mortality, decomp or pheno.
        #[arg(long, default_value = "mortality")]
        preset: TaskKind,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the global knowledge graph of every concept found in the notes.
    BuildKg {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        edges: Option<PathBuf>,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = kgicu::train::DEFAULT_DIM)]
        dim: usize,
        #[arg(long, default_value_t = 7)]
        embedding_seed: u64,
        #[arg(long, default_value_t = kgicu::knowledge::DEFAULT_MATCH_THRESHOLD)]
        threshold: f64,
    },
    /// Train a model and write a checkpoint with history and test metrics.
    Train {
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prebuilt knowledge graph (from build-kg) instead of one built
        /// from the data directory.
        #[arg(long)]
        kg: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to the directory the checkpoint was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a checkpoint with vital signs randomly masked.
    MaskSweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        ratios: Vec<f64>,
        /// Number of masking seeds, 0..N.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-ratio mean and standard deviation.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Train and test every rung of the component ablation ladder.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long)]
        data: PathBuf,
        /// Number of training seeds, 0..N.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Attention summary and probability trace for one episode.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episode: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = kgicu::train::DEFAULT_TOP_K)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a CSV, attention JSON-lines or concepts JSON file as SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Attention record to draw (index into the JSON-lines file).
        #[arg(long, default_value_t = 0)]
        record: usize,
        /// Select the attention record by timestep instead.
        #[arg(long)]
        timestep: Option<usize>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// `path` with `suffix` appended to its file stem, e.g. `m.ckpt` →
/// `m.history.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn load_config(path: Option<&Path>, task: Option<TaskKind>, overrides: &[String]) -> Result<TrainConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(io_err(p))?,
        None => String::new(),
    };
    let mut cfg = TrainConfig::parse(&text)?;
    if let Some(task) = task {
        let named = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .any(|l| l.split_once('=').is_some_and(|(k, _)| k.trim() == "task"));
        if named && cfg.task != task {
            return Err(Error::Config(format!(
                "--task {task} conflicts with task = {} in the config file",
                cfg.task
            )));
        }
        if !named {
            cfg = TrainConfig::parse(&format!("task = {task}\n{text}"))?;
        }
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_corpus(ckpt: &Checkpoint, data: Option<&Path>) -> Result<Corpus> {
    let dir = data.map_or_else(|| PathBuf::from(&ckpt.data_dir), Path::to_path_buf);
    Corpus::load(&dir, &ckpt.config)
}

fn gen_synth(spec: Option<&Path>, preset: TaskKind, episodes: usize, seed: u64, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(p) => SyntheticSpec::from_json(&std::fs::read_to_string(p).map_err(io_err(p))?)?,
        None => match preset {
            TaskKind::Mortality => SyntheticSpec::mortality(episodes, seed),
            TaskKind::Decompensation => SyntheticSpec::decompensation(episodes, seed),
            TaskKind::Phenotyping => SyntheticSpec::phenotyping(episodes, seed),
        },
    };
    let data = write_synthetic(out, &spec)?;
    eprintln!(
        "wrote {} episodes, {} concepts, {} edges to {}",
        data.episodes.len(),
        data.vocabulary.len(),
        data.edges.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_kg(
    vocab: &Path,
    edges: Option<&Path>,
    episodes: &Path,
    out: &Path,
    dim: usize,
    embedding_seed: u64,
    threshold: f64,
) -> Result<()> {
    let vocabulary = Vocabulary::load_tsv(vocab)?;
    let edges = edges.map_or_else(|| Ok(BTreeSet::new()), load_edges)?;
    let (raw, rejections) = read_dir_episodes(episodes)?;
    for r in &rejections {
        eprintln!("rejected {}:{}: {}", r.file, r.line, r.reason);
    }
    let matcher = ConceptMatcher::new(&vocabulary)?;
    let encoder = HashedBagEncoder::new(dim);
    let inputs = raw
        .iter()
        .map(|ep| StepInputs::compute(&preprocess_notes(ep).episode, &matcher, threshold, &encoder))
        .collect::<Result<Vec<_>>>()?;
    let provider = HashedGaussian {
        dim,
        seed: embedding_seed,
    };
    let kg = build_kg_from_inputs(&inputs, &edges, &provider)?;
    kg.save(out)?;
    eprintln!("knowledge graph with {} concepts and {} edges written to {}", kg.nodes().len(), kg.edges().len(), out.display());
    Ok(())
}

fn train_cmd(cfg: TrainConfig, data: &Path, out: &Path, kg: Option<&Path>) -> Result<()> {
    let corpus = Corpus::load(data, &cfg)?;
    for r in &corpus.dataset.rejections {
        eprintln!("rejected {}: {}", r.episode.as_deref().unwrap_or(&r.file), r.reason);
    }
    let mut model = init_model(&corpus, &cfg)?;
    if let Some(path) = kg {
        let graph = kgicu::knowledge::GlobalKnowledgeGraph::load(path)?;
        model = Model::new(model.spec, model.params, graph)?;
    }
    let train = corpus.prepare(&model, &corpus.indices(Split::Train))?;
    let val = corpus.prepare(&model, &corpus.indices(Split::Val))?;
    eprintln!(
        "training {} on {} episodes ({} validation)",
        cfg.task,
        train.len(),
        val.len()
    );
    let outcome = train_prepared(model, &train, &val, &cfg)?;
    for r in &outcome.history {
        let val = r
            .val
            .as_ref()
            .map_or_else(|| r.val_error.clone().unwrap_or_default(), |v| format!("val auprc {:.4} auroc {:.4}", v.auprc, v.auroc));
        eprintln!("epoch {:>3}  loss {:.5}  {val}", r.epoch, r.train_loss);
    }
    let ckpt = Checkpoint {
        config: cfg.clone(),
        model: outcome.model,
        data_dir: data.to_string_lossy().into_owned(),
        best_epoch: outcome.best_epoch,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    ckpt.save(out)?;
    write_file(&sibling(out, "history.csv"), &history_csv(&cfg, &outcome.history))?;
    let test = corpus.prepare(&ckpt.model, &corpus.indices(Split::Test))?;
    let cells = match evaluate(&ckpt.model, &test) {
        Ok(r) => r.csv_cells(),
        Err(e @ Error::UndefinedMetric { .. }) => {
            eprintln!("test metrics: {e}");
            ",,,".into()
        }
        Err(e) => return Err(e),
    };
    let metrics = format!("{METRICS_HEADER}\n{},test,{},{cells}\n", cfg.task, cfg.seed);
    write_file(&sibling(out, "metrics.csv"), &metrics)?;
    eprintln!("checkpoint written to {}", out.display());
    Ok(())
}

fn evaluate_cmd(ckpt: &Path, data: Option<&Path>, split: Split, out: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let corpus = checkpoint_corpus(&ckpt, data)?;
    let prepared = corpus.prepare(&ckpt.model, &corpus.indices(split))?;
    let report = evaluate(&ckpt.model, &prepared)?;
    let text = format!(
        "{METRICS_HEADER}\n{},{split},{},{}\n",
        ckpt.config.task,
        ckpt.config.seed,
        report.csv_cells()
    );
    emit(out, &text)
}

#[allow(clippy::too_many_arguments)]
fn mask_sweep_cmd(
    ckpt: &Path,
    data: Option<&Path>,
    ratios: &[f64],
    seeds: u64,
    split: Split,
    out: Option<&Path>,
    summary: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let corpus = checkpoint_corpus(&ckpt, data)?;
    let seeds: Vec<u64> = (0..seeds).collect();
    let rows = missing_sweep(&ckpt.model, &corpus, &corpus.indices(split), ratios, &seeds)?;
    emit(out, &sweep_csv(ckpt.config.task, &rows))?;
    if let Some(path) = summary {
        write_file(path, &summary_csv(ckpt.config.task, &sweep_summary(&rows)))?;
    }
    Ok(())
}

fn ablate_cmd(cfg: TrainConfig, data: &Path, seeds: u64, out: Option<&Path>) -> Result<()> {
    let corpus = Corpus::load(data, &cfg)?;
    let seeds: Vec<u64> = (0..seeds).collect();
    let rows = kgicu::train::ablation_suite(&corpus, &cfg, &seeds);
    for r in &rows {
        if let Err(e) = &r.result {
            eprintln!("{} seed {}: {e}", r.rung, r.seed);
        }
    }
    let table = ablation_table(&rows);
    match out {
        Some(dir) => {
            write_file(&dir.join("ablation.csv"), &ablation_csv(cfg.task, &rows))?;
            write_file(&dir.join("ablation_summary.csv"), &summary_csv(cfg.task, &ablation_summary(&rows)))?;
            write_file(&dir.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        None => print!("{}", ablation_csv(cfg.task, &rows)),
    }
    Ok(())
}

fn explain_cmd(ckpt: &Path, episode: &str, data: Option<&Path>, top_k: usize, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    if !ckpt.model.uses_attention() {
        // Fail before loading data.
        return Err(Error::Capability(format!(
            "explain needs a model trained with layer_kind = attention; this checkpoint uses `{}`",
            ckpt.model.spec.layer_kind
        )));
    }
    let corpus = checkpoint_corpus(&ckpt, data)?;
    let idx = corpus
        .position(episode)
        .ok_or_else(|| Error::Input(format!("episode `{episode}` not found")))?;
    let prep = corpus.prepare(&ckpt.model, &[idx])?.remove(0);
    let summary = attention_report(&ckpt.model, &prep, top_k)?;
    summary.write(out)?;
    for (rank, c) in summary.top().iter().enumerate() {
        println!("{:>3}  {}  {:.6}  ({} steps)", rank + 1, c.concept_id, c.score, c.steps_present);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth {
            spec,
            preset,
            episodes,
            seed,
            out,
        } => gen_synth(spec.as_deref(), preset, episodes, seed, &out),
        Command::BuildKg {
            vocab,
            edges,
            episodes,
            out,
            dim,
            embedding_seed,
            threshold,
        } => build_kg(&vocab, edges.as_deref(), &episodes, &out, dim, embedding_seed, threshold),
        Command::Train {
            task,
            config,
            data,
            out,
            kg,
            overrides,
        } => train_cmd(load_config(config.as_deref(), task, &overrides)?, &data, &out, kg.as_deref()),
        Command::Evaluate { ckpt, data, split, out } => evaluate_cmd(&ckpt, data.as_deref(), split, out.as_deref()),
        Command::MaskSweep {
            ckpt,
            data,
            ratios,
            seeds,
            split,
            out,
            summary,
        } => mask_sweep_cmd(&ckpt, data.as_deref(), &ratios, seeds, split, out.as_deref(), summary.as_deref()),
        Command::Ablate {
            config,
            task,
            data,
            seeds,
            out,
            overrides,
        } => ablate_cmd(load_config(config.as_deref(), task, &overrides)?, &data, seeds, out.as_deref()),
        Command::Explain {
            ckpt,
            episode,
            data,
            top_k,
            out,
        } => explain_cmd(&ckpt, &episode, data.as_deref(), top_k, &out),
        Command::Plot {
            input,
            out,
            record,
            timestep,
            layer,
        } => plot::render(&input, &out, plot::Selection { record, timestep, layer }),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
