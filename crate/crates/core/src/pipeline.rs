//! Pipeline stages. Each reads a [`RunConfig`], communicates with the other
//! stages only through files in the output directory, and is deterministic
//! given the config.

use std::fs;
use std::path::{Path, PathBuf};

use kd_autograd::RngState;
use serde::{Deserialize, Serialize};

use crate::config::{Checkpoint, CrossInit, RunConfig};
use crate::container::{load_encoder, save_cross_encoder, save_encoder};
use crate::data::{generate_task, TaskData};
use crate::encoder::{CrossEncoder, Encoder};
use crate::error::{Error, Result};
use crate::gradchecks::{self, GradCheckResult};
use crate::interaction::Scheme;
use crate::retrieval::{build_index, encode_records, evaluate, Metrics};
use crate::tokens::SequenceKind;
use crate::trainer::{
    mine_negatives, pretrain_cross_encoder, random_negatives, read_examples, train_cascade,
    train_interaction_distillation, warmup_cross_encoder, write_examples, EvalSet, TrainConfig,
    TrainLog,
};

const TAG_INIT: u64 = 1;
const TAG_CROSS_INIT: u64 = 2;
const TAG_RANDOM_NEGATIVES: u64 = 3;
const TAG_MINING: u64 = 4;
const TAG_WARMUP: u64 = 5;
const TAG_CROSS_PRETRAIN: u64 = 6;

/// File names inside the output directory.
pub struct RunPaths {
    pub out: PathBuf,
}

impl RunPaths {
    pub fn new(out: &Path) -> Self {
        Self {
            out: out.to_path_buf(),
        }
    }

    pub fn id_encoder(&self) -> PathBuf {
        self.out.join("id_encoder.kdc")
    }
    pub fn id_log(&self) -> PathBuf {
        self.out.join("id_log.jsonl")
    }
    pub fn id_metrics(&self) -> PathBuf {
        self.out.join("id_metrics.json")
    }
    pub fn mined(&self) -> PathBuf {
        self.out.join("mined.train.jsonl")
    }
    pub fn pretrain_log(&self) -> PathBuf {
        self.out.join("pretrain_log.jsonl")
    }

    pub fn warmup_log(&self) -> PathBuf {
        self.out.join("warmup_log.jsonl")
    }
    pub fn cascade_student(&self) -> PathBuf {
        self.out.join("cascade_student.kdc")
    }
    pub fn cascade_cross(&self) -> PathBuf {
        self.out.join("cascade_cross.kdc")
    }
    pub fn cascade_log(&self) -> PathBuf {
        self.out.join("cascade_log.jsonl")
    }
    pub fn cascade_metrics(&self) -> PathBuf {
        self.out.join("cascade_metrics.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.out.join("metrics.json")
    }
    pub fn run_file(&self) -> PathBuf {
        self.out.join("run.tsv")
    }
    pub fn gradcheck(&self) -> PathBuf {
        self.out.join("gradcheck.json")
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Generates the synthetic task and writes it to the data directory.
pub fn generate_data(cfg: &RunConfig) -> Result<TaskData> {
    let task = generate_task(&cfg.task_spec())?;
    task.save(&cfg.data_dir())?;
    write_json(&cfg.data_dir().join("spec.json"), &cfg.task_spec())?;
    Ok(task)
}

pub fn load_data(cfg: &RunConfig) -> Result<TaskData> {
    let dir = cfg.data_dir();
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "no dataset at {}; run generate-data first",
            dir.display()
        )));
    }
    let task = TaskData::load(&dir)?;
    if let Some(bad) = task
        .corpus
        .iter()
        .chain(task.train.queries.iter())
        .find(|r| r.token_ids.iter().any(|&t| t as usize >= cfg.vocab_size))
    {
        return Err(Error::Vocabulary {
            id: *bad.token_ids.iter().max().unwrap_or(&0),
            vocab_size: cfg.vocab_size,
            context: format!("record {}", bad.id),
        });
    }
    Ok(task)
}

fn eval_set<'a>(cfg: &RunConfig, task: &'a TaskData) -> Result<EvalSet<'a>> {
    Ok(EvalSet {
        corpus: &task.corpus,
        split: task.split(&cfg.eval_split)?,
        mrr_cutoff: cfg.mrr_cutoff,
        recall_cutoffs: cfg.recall_cutoffs.clone(),
    })
}

/// Metrics of `encoder` on the configured split and scheme.
pub fn evaluate_encoder(cfg: &RunConfig, task: &TaskData, encoder: &Encoder) -> Result<Metrics> {
    let li = cfg.eval_scheme == Scheme::Li;
    let index = build_index(encoder, &task.corpus, li, li && cfg.normalize_tokens)?;
    evaluate(
        encoder,
        &index,
        task.split(&cfg.eval_split)?,
        cfg.eval_scheme,
        cfg.mrr_cutoff,
        &cfg.recall_cutoffs,
    )
}

pub fn initial_encoder(cfg: &RunConfig) -> Result<Encoder> {
    Encoder::new(cfg.encoder()?, &mut RngState::new(cfg.seed).split(TAG_INIT))
}

/// Step 2: interaction distillation from a fresh encoder on random negatives.
pub fn run_train_id(cfg: &RunConfig) -> Result<(Encoder, TrainLog, Metrics)> {
    let paths = RunPaths::new(&cfg.out_dir);
    ensure_dir(&paths.out)?;
    let task = load_data(cfg)?;
    let seed = RngState::new(cfg.seed)
        .split(TAG_RANDOM_NEGATIVES)
        .next_u64();
    let examples = random_negatives(&task.corpus, &task.train, cfg.n_negatives, seed)?;
    let ev = eval_set(cfg, &task)?;
    let (encoder, log) = train_interaction_distillation(
        &cfg.id_train()?,
        &examples,
        initial_encoder(cfg)?,
        cfg.eval_each_epoch.then_some(&ev),
    )?;
    let metrics = evaluate_encoder(cfg, &task, &encoder)?;
    save_encoder(&paths.id_encoder(), &encoder)?;
    log.write(&paths.id_log())?;
    write_json(&paths.id_metrics(), &metrics)?;
    Ok((encoder, log, metrics))
}

/// Hard negatives for the training split from the Step 2 encoder.
pub fn run_mine(cfg: &RunConfig) -> Result<usize> {
    let paths = RunPaths::new(&cfg.out_dir);
    let task = load_data(cfg)?;
    let encoder = load_encoder(&paths.id_encoder())?;
    let examples = mine_negatives(
        &encoder,
        &task.corpus,
        &task.train,
        cfg.top_m,
        cfg.n_negatives,
        &RngState::new(cfg.seed).split(TAG_MINING),
    )?;
    write_examples(&paths.mined(), &examples)?;
    Ok(examples.len())
}

fn initial_cross(cfg: &RunConfig, task: &TaskData, student: &Encoder) -> Result<CrossEncoder> {
    let paths = RunPaths::new(&cfg.out_dir);
    let mut rng = RngState::new(cfg.seed).split(TAG_CROSS_INIT);
    match cfg.cross_init {
        CrossInit::Random => CrossEncoder::new(cfg.cross_encoder()?, &mut rng),
        CrossInit::Pretrained => {
            let cross = CrossEncoder::new(cfg.cross_encoder()?, &mut rng)?;
            let pre = TrainConfig {
                seed: RngState::new(cfg.seed).split(TAG_CROSS_PRETRAIN).next_u64(),
                ..cfg.cross_pretrain()?
            };
            let query_len = (cfg.query_len_min, cfg.query_len_max);
            let (cross, log) = pretrain_cross_encoder(
                &pre,
                &task.corpus,
                cfg.cross_pretrain_queries,
                query_len,
                cross,
            )?;
            log.write(&paths.pretrain_log())?;
            Ok(cross)
        }
        CrossInit::Student => {
            if cfg.cross_n_layers != student.config().n_layers {
                return Err(Error::Config(format!(
                    "cross_init = student needs cross_n_layers = {}",
                    student.config().n_layers
                )));
            }
            CrossEncoder::from_encoder(student.duplicate()?)
        }
    }
}

/// Step 3: cross-encoder warmup, then joint cascade distillation on mined
/// negatives, continuing from the Step 2 encoder.
pub fn run_train_cascade(cfg: &RunConfig) -> Result<(Encoder, TrainLog, Metrics)> {
    let paths = RunPaths::new(&cfg.out_dir);
    let task = load_data(cfg)?;
    let student = load_encoder(&paths.id_encoder())?;
    let examples = read_examples(&paths.mined(), &task.corpus, &task.train.queries)?;
    let train = cfg.cascade_train()?;
    let cross = initial_cross(cfg, &task, &student)?;
    let warm_cfg = TrainConfig {
        seed: RngState::new(cfg.seed).split(TAG_WARMUP).next_u64(),
        ..train.clone()
    };
    let (cross, warm_log) = warmup_cross_encoder(&warm_cfg, &examples, cross, cfg.warmup_epochs)?;
    warm_log.write(&paths.warmup_log())?;
    let ev = eval_set(cfg, &task)?;
    let ((student, cross), log) = train_cascade(
        &train,
        &examples,
        student,
        cross,
        cfg.eval_each_epoch.then_some(&ev),
    )?;
    let metrics = evaluate_encoder(cfg, &task, &student)?;
    save_encoder(&paths.cascade_student(), &student)?;
    save_cross_encoder(&paths.cascade_cross(), &cross)?;
    log.write(&paths.cascade_log())?;
    write_json(&paths.cascade_metrics(), &metrics)?;
    Ok((student, log, metrics))
}

/// The encoder selected by `eval_checkpoint`.
pub fn select_encoder(cfg: &RunConfig) -> Result<Encoder> {
    let paths = RunPaths::new(&cfg.out_dir);
    let from_file = |p: PathBuf| {
        if p.exists() {
            load_encoder(&p)
        } else {
            Err(Error::Config(format!(
                "checkpoint {} not found",
                p.display()
            )))
        }
    };
    match cfg.eval_checkpoint {
        Checkpoint::Random => initial_encoder(cfg),
        Checkpoint::Id => from_file(paths.id_encoder()),
        Checkpoint::Cascade => from_file(paths.cascade_student()),
        Checkpoint::Latest => {
            if paths.cascade_student().exists() {
                load_encoder(&paths.cascade_student())
            } else if paths.id_encoder().exists() {
                load_encoder(&paths.id_encoder())
            } else {
                Err(Error::Config(format!(
                    "no trained checkpoint in {}",
                    paths.out.display()
                )))
            }
        }
    }
}

pub fn run_eval(cfg: &RunConfig) -> Result<Metrics> {
    let paths = RunPaths::new(&cfg.out_dir);
    ensure_dir(&paths.out)?;
    let task = load_data(cfg)?;
    let encoder = select_encoder(cfg)?;
    let metrics = evaluate_encoder(cfg, &task, &encoder)?;
    write_json(&paths.metrics(), &metrics)?;
    Ok(metrics)
}

/// Writes the top `retrieve_k` passages of every query of the eval split as
/// `query_id \t passage_id \t rank \t score` lines.
pub fn run_retrieve(cfg: &RunConfig) -> Result<usize> {
    let paths = RunPaths::new(&cfg.out_dir);
    ensure_dir(&paths.out)?;
    let task = load_data(cfg)?;
    let encoder = select_encoder(cfg)?;
    let li = cfg.eval_scheme == Scheme::Li;
    let normalize = li && cfg.normalize_tokens;
    let index = build_index(&encoder, &task.corpus, li, normalize)?;
    let split = task.split(&cfg.eval_split)?;
    let reps = encode_records(&encoder, &split.queries, SequenceKind::Query, normalize)?;
    let ranked = index.retrieve_all(&reps, cfg.retrieve_k, cfg.eval_scheme)?;
    let mut text = String::new();
    for list in &ranked {
        for (rank, (pid, score)) in list.entries.iter().enumerate() {
            text.push_str(&format!(
                "{}\t{pid}\t{}\t{score:e}\n",
                list.query_id,
                rank + 1
            ));
        }
    }
    fs::write(paths.run_file(), text).map_err(|e| Error::io(paths.run_file(), e))?;
    Ok(ranked.len())
}

/// Runs the registered gradient checks and writes a report.
pub fn run_gradcheck(cfg: &RunConfig, tolerance: f64) -> Result<Vec<GradCheckResult>> {
    let paths = RunPaths::new(&cfg.out_dir);
    ensure_dir(&paths.out)?;
    let results = gradchecks::run_all(tolerance)?;
    write_json(&paths.gradcheck(), &results)?;
    Ok(results)
}

/// Reads a metrics file written by any stage.
pub fn read_metrics(path: &Path) -> Result<Metrics> {
    read_json(path)
}
