//! Command implementations behind the `relpred` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::{self, rank_relations, MetricsReport};
use crate::kg::{DatasetSplits, DatasetStats, OovPolicy, Split, Triple};
use crate::model::predict_scores;
use crate::train::{self, FitOptions, GridOutcome, GridSpec, Hyperparams, HyperparamsPatch, TrainHistory};

#[derive(Debug, Parser)]
#[command(name = "relpred", version, about = "Relation prediction for knowledge graph completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Directory holding train.txt, valid.txt and test.txt
    #[arg(long, global = true)]
    pub dataset_dir: Option<PathBuf>,
    /// Where outputs are written
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Hyperparameter file (`key = value` lines)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for initialization, shuffling and dropout
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Require bit-reproducible results
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Valid/test triples with labels unseen in training: skip (counted as misses) or error
    #[arg(long, global = true, value_enum, default_value_t = OovPolicy::Skip)]
    pub oov_policy: OovPolicy,
    /// Embedding size
    #[arg(long, global = true)]
    pub d: Option<usize>,
    /// Hidden layer width
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Training epochs
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Entity pairs per mini-batch
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Dropout rate on the hidden layer
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    /// L2 coefficient on weights and touched embeddings
    #[arg(long, global = true)]
    pub l2: Option<f64>,
    /// Adam learning rate
    #[arg(long, global = true)]
    pub lr: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Index a dataset and report its statistics
    Preprocess,
    /// Train a model, evaluate it on the test split and write a checkpoint
    Train {
        /// Also record validation Hits@1 after every epoch
        #[arg(long)]
        track_validation: bool,
    },
    /// Evaluate a checkpoint on a dataset split
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Grid search selecting by validation Hits@1
    Gridsearch {
        /// Grid file with one list per hyperparameter; defaults to the standard grid
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Rank all relations for an entity pair
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        object: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub hyper: Hyperparams,
    pub oov_policy: OovPolicy,
    pub threads: Option<usize>,
    pub deterministic: bool,
}

impl CommonArgs {
    fn patch(&self) -> HyperparamsPatch {
        HyperparamsPatch {
            d: self.d,
            k: self.k,
            epochs: self.epochs,
            batch_size: self.batch_size,
            dropout_rate: self.dropout,
            l2_coefficient: self.l2,
            learning_rate: self.lr,
            seed: self.seed,
        }
    }

    /// Defaults, then the config file, then command-line overrides.
    pub fn hyperparams(&self) -> Result<Hyperparams> {
        let mut h = match &self.config {
            Some(path) => Hyperparams::load(path)?,
            None => Hyperparams::default(),
        };
        self.patch().apply(&mut h);
        h.validate()?;
        Ok(h)
    }

    fn dataset_dir(&self) -> Result<PathBuf> {
        let dir = self
            .dataset_dir
            .clone()
            .ok_or_else(|| Error::Config("--dataset-dir is required".into()))?;
        check_dataset_dir(&dir)?;
        Ok(dir)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .clone()
            .ok_or_else(|| Error::Config("--out-dir is required".into()))?;
        prepare_out_dir(&dir)?;
        Ok(dir)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        Ok(RunConfig {
            dataset_dir: self.dataset_dir()?,
            out_dir: self.out_dir()?,
            hyper: self.hyperparams()?,
            oov_policy: self.oov_policy,
            threads: self.threads,
            deterministic: self.deterministic,
        })
    }
}

pub fn check_dataset_dir(dir: &Path) -> Result<()> {
    for name in ["train.txt", "valid.txt", "test.txt"] {
        let path = dir.join(name);
        fs::metadata(&path).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".relpred-write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Writes via a temporary sibling and renames, so a failed run leaves no
/// half-written file behind.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn configure_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
}

fn write_indexed(path: &Path, triples: &[Triple]) -> Result<()> {
    let mut text = String::with_capacity(triples.len() * 16);
    for t in triples {
        text.push_str(&format!("{}\t{}\t{}\n", t.s, t.p, t.o));
    }
    write_atomic(path, text.as_bytes())
}

pub fn cmd_preprocess(dataset_dir: &Path, out_dir: &Path, oov_policy: OovPolicy) -> Result<DatasetStats> {
    check_dataset_dir(dataset_dir)?;
    prepare_out_dir(out_dir)?;
    let splits = DatasetSplits::load_dir(dataset_dir, oov_policy)?;
    let stats = splits.stats();
    splits.vocab.write_to_dir(out_dir)?;
    write_indexed(&out_dir.join("train.idx"), &splits.train)?;
    write_indexed(&out_dir.join("valid.idx"), &splits.valid)?;
    write_indexed(&out_dir.join("test.idx"), &splits.test)?;
    let mut report = serde_json::to_value(&stats).expect("stats serialize");
    report["dataset"] = json!(dataset_name(dataset_dir));
    write_json(&out_dir.join("stats.json"), &report)?;
    Ok(stats)
}

/// The deterministic part of a run report: metrics, counts and the resolved
/// configuration. Wall-clock timings go to a separate file.
pub fn metrics_json(
    report: &MetricsReport,
    dataset: &str,
    split: Split,
    hyper: Option<&Hyperparams>,
    oov_policy: OovPolicy,
) -> Value {
    let mut map = Map::new();
    map.insert("dataset".into(), json!(dataset));
    map.insert("split".into(), json!(split.name()));
    for (n, v) in &report.hits {
        map.insert(format!("hits@{n}"), json!(v));
    }
    map.insert("num_triples".into(), json!(report.num_test_triples));
    map.insert("skipped_oov".into(), json!(report.skipped_oov));
    map.insert("oov_policy".into(), json!(oov_policy));
    if let Some(hyper) = hyper {
        if let Value::Object(h) = serde_json::to_value(hyper).expect("hyperparameters serialize") {
            map.extend(h);
        }
    }
    if !report.notes.is_empty() {
        map.insert("notes".into(), json!(report.notes));
    }
    Value::Object(map)
}

fn timing_json(history: &TrainHistory, runtime: f64) -> Value {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or_default();
    json!({
        "train_runtime_seconds": runtime,
        "epoch_seconds": history.epoch_seconds,
        "finished_unix_time": now,
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub report: MetricsReport,
    pub history: TrainHistory,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(config: &RunConfig, track_validation: bool) -> Result<TrainOutcome> {
    configure_threads(config.threads);
    let splits = DatasetSplits::load_dir(&config.dataset_dir, config.oov_policy)?;

    // Only the fit call is timed; parsing and indexing are excluded.
    let started = Instant::now();
    let (params, history) = train::fit_with(&splits, &config.hyper, FitOptions { track_validation })?;
    let runtime = started.elapsed().as_secs_f64();

    let mut report = eval::evaluate(&params, &splits, Split::Test)?;
    report.train_runtime_seconds = Some(runtime);

    let out = &config.out_dir;
    let ckpt = out.join("checkpoint.bin");
    let tmp = out.join("checkpoint.bin.tmp");
    checkpoint::save(&tmp, &params, &splits.vocab)?;
    fs::rename(&tmp, &ckpt).map_err(|e| Error::io(&ckpt, e))?;
    write_atomic(&out.join("config.toml"), config.hyper.to_config_string().as_bytes())?;
    let hist_tmp = out.join("history.csv.tmp");
    history.write_csv(&hist_tmp)?;
    let hist = out.join("history.csv");
    fs::rename(&hist_tmp, &hist).map_err(|e| Error::io(&hist, e))?;
    let name = dataset_name(&config.dataset_dir);
    write_json(
        &out.join("metrics.json"),
        &metrics_json(&report, &name, Split::Test, Some(&config.hyper), config.oov_policy),
    )?;
    write_json(&out.join("timing.json"), &timing_json(&history, runtime))?;
    Ok(TrainOutcome {
        report,
        history,
        checkpoint: ckpt,
    })
}

pub fn cmd_evaluate(
    checkpoint_path: &Path,
    dataset_dir: &Path,
    split: Split,
    oov_policy: OovPolicy,
) -> Result<MetricsReport> {
    let (params, vocab) = checkpoint::load(checkpoint_path)?;
    let splits = DatasetSplits::load_dir(dataset_dir, oov_policy)?;
    if splits.vocab.content_hash() != vocab.content_hash() {
        return Err(Error::Checkpoint(format!(
            "{} was trained on a different vocabulary than {}",
            checkpoint_path.display(),
            dataset_dir.display()
        )));
    }
    eval::evaluate(&params, &splits, split)
}

pub fn cmd_gridsearch(config: &RunConfig, grid: &GridSpec) -> Result<GridOutcome> {
    configure_threads(config.threads);
    let splits = DatasetSplits::load_dir(&config.dataset_dir, config.oov_policy)?;
    let outcome = train::grid_search(&splits, grid, config.hyper.seed)?;
    let out = &config.out_dir;
    let csv_path = out.join("grid.csv");
    let tmp = out.join("grid.csv.tmp");
    train::write_grid_csv(&tmp, &outcome.results)?;
    fs::rename(&tmp, &csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_atomic(&out.join("best.toml"), outcome.best.to_config_string().as_bytes())?;
    write_json(
        &out.join("best.json"),
        &json!({
            "dataset": dataset_name(&config.dataset_dir),
            "grid_points": outcome.results.len(),
            "best_index": outcome.best_index,
            "valid_hits@1": outcome.best_valid_hits1,
            "hyperparams": outcome.best,
        }),
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub ranked: Vec<(String, f64)>,
    pub clamped: bool,
}

pub fn cmd_predict(checkpoint_path: &Path, subject: &str, object: &str, top_k: usize) -> Result<Prediction> {
    let (params, vocab) = checkpoint::load(checkpoint_path)?;
    let lookup = |label: &str| {
        vocab.entity_id(label).ok_or_else(|| Error::OutOfVocabulary {
            label: label.to_owned(),
            split: "checkpoint".into(),
        })
    };
    let s = lookup(subject)?;
    let o = lookup(object)?;
    let scores = predict_scores(&params, s, o)?;
    let ranked = rank_relations(scores.as_slice().expect("contiguous scores"))?;
    let clamped = top_k > ranked.len();
    let ranked = ranked
        .as_slice()
        .iter()
        .take(top_k)
        .map(|&(r, p)| (vocab.relation_label(r).expect("relation in vocabulary").to_owned(), p))
        .collect();
    Ok(Prediction { ranked, clamped })
}

pub fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Preprocess => {
            let stats = cmd_preprocess(&common.dataset_dir()?, &common.out_dir()?, common.oov_policy)?;
            println!("entities               {}", stats.num_entities);
            println!("relations              {}", stats.num_relations);
            println!(
                "triples (train/valid/test) {}/{}/{}",
                stats.train_triples, stats.valid_triples, stats.test_triples
            );
            println!(
                "skipped OOV (valid/test)   {}/{}",
                stats.valid_skipped_oov, stats.test_skipped_oov
            );
            println!("training pairs         {}", stats.train_pairs);
            println!("multi-relation pairs   {}", stats.multi_relation_pairs);
        }
        Command::Train { track_validation } => {
            let config = common.run_config()?;
            let outcome = cmd_train(&config, *track_validation)?;
            print!("{}", outcome.report.table());
            for note in &outcome.report.notes {
                eprintln!("note: {note}");
            }
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Evaluate { checkpoint, split } => {
            let dataset_dir = common.dataset_dir()?;
            let report = cmd_evaluate(checkpoint, &dataset_dir, *split, common.oov_policy)?;
            print!("{}", report.table());
            if let Some(out) = &common.out_dir {
                prepare_out_dir(out)?;
                write_json(
                    &out.join(format!("metrics_{}.json", split.name())),
                    &metrics_json(&report, &dataset_name(&dataset_dir), *split, None, common.oov_policy),
                )?;
            }
        }
        Command::Gridsearch { grid } => {
            let config = common.run_config()?;
            let spec = match grid {
                Some(path) => GridSpec::load(path)?,
                None => GridSpec::default(),
            };
            let outcome = cmd_gridsearch(&config, &spec)?;
            println!(
                "best point {} of {}: valid hits@1 {:.4}",
                outcome.best_index + 1,
                outcome.results.len(),
                outcome.best_valid_hits1
            );
            print!("{}", outcome.best.to_config_string());
        }
        Command::Predict {
            checkpoint,
            subject,
            object,
            top_k,
        } => {
            let prediction = cmd_predict(checkpoint, subject, object, *top_k)?;
            if prediction.clamped {
                eprintln!(
                    "note: top-k {top_k} exceeds the number of relations; listing all {}",
                    prediction.ranked.len()
                );
            }
            for (i, (label, p)) in prediction.ranked.iter().enumerate() {
                println!("{}\t{label}\t{p:.6}", i + 1);
            }
        }
    }
    Ok(())
}
