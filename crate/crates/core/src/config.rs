//! Run configuration: one flat TOML document per experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticTaskSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::interaction::Scheme;
use crate::losses::{LossConfig, LossFlags, LossWeights};
use crate::trainer::{Optimizer, Step, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// How the cascade's cross-encoder is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossInit {
    Random,
    /// Copy the Step 2 encoder into the cross-encoder's trunk.
    Student,
    /// Random initialisation followed by training on pseudo-queries sampled
    /// from the corpus.
    Pretrained,
}

/// Which encoder `eval` and `retrieve` load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Checkpoint {
    /// The most advanced stage present in the output directory.
    Latest,
    /// A freshly initialised encoder.
    Random,
    Id,
    Cascade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Pre-tokenised dataset directory; defaults to `<out_dir>/data`.
    pub data_dir: Option<PathBuf>,

    pub vocab_size: usize,
    pub n_topics: usize,
    pub passages_per_topic: usize,
    pub passage_len_min: usize,
    pub passage_len_max: usize,
    pub query_len_min: usize,
    pub query_len_max: usize,
    pub query_noise_rate: f64,
    pub n_background_words: usize,
    pub background_rate: f64,
    pub zipf_exponent: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub task_seed: u64,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub cross_n_layers: usize,
    pub cross_init: CrossInit,
    pub cross_pretrain_epochs: usize,
    pub cross_pretrain_queries: usize,
    pub cross_pretrain_lr: f64,

    pub batch_queries: usize,
    pub n_negatives: usize,
    pub id_epochs: usize,
    pub warmup_epochs: usize,
    pub cascade_epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub n_shards: usize,
    pub cross_batch: bool,
    pub id_prime: bool,
    pub normalize_tokens: bool,
    pub temperature: f64,
    pub detach_teachers: bool,
    pub top_m: usize,
    pub eval_each_epoch: bool,

    pub id_l_de: bool,
    pub id_l_li: bool,
    pub id_l_li_to_de: bool,
    pub id_l_dualreg: bool,

    pub cd_l_de: bool,
    pub cd_l_li: bool,
    pub cd_l_ce: bool,
    pub cd_l_li_to_de: bool,
    pub cd_l_ce_to_li: bool,
    pub cd_l_ce_to_de: bool,
    pub cd_l_attn: bool,
    pub cd_l_dualreg: bool,

    pub eval_split: String,
    pub eval_scheme: Scheme,
    pub eval_checkpoint: Checkpoint,
    pub mrr_cutoff: usize,
    pub recall_cutoffs: Vec<usize>,
    pub retrieve_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = SyntheticTaskSpec::default();
        let enc = EncoderConfig::default();
        let train = TrainConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data_dir: None,
            vocab_size: task.vocab_size,
            n_topics: task.n_topics,
            passages_per_topic: task.passages_per_topic,
            passage_len_min: task.passage_len.0,
            passage_len_max: task.passage_len.1,
            query_len_min: task.query_len.0,
            query_len_max: task.query_len.1,
            query_noise_rate: task.query_noise_rate,
            n_background_words: task.n_background_words,
            background_rate: task.background_rate,
            zipf_exponent: task.zipf_exponent,
            n_train: task.n_train,
            n_dev: task.n_dev,
            n_test: task.n_test,
            task_seed: task.seed,
            d_model: enc.d_model,
            n_layers: enc.n_layers,
            n_heads: enc.n_heads,
            d_ff: enc.d_ff,
            max_len: enc.max_len,
            dropout: enc.dropout_p,
            cross_n_layers: enc.n_layers,
            cross_init: CrossInit::Pretrained,
            cross_pretrain_epochs: 12,
            cross_pretrain_queries: 800,
            cross_pretrain_lr: 3e-3,
            batch_queries: train.batch_queries,
            n_negatives: train.n_negatives,
            id_epochs: train.epochs,
            warmup_epochs: 0,
            cascade_epochs: 2,
            learning_rate: train.learning_rate,
            optimizer: Optimizer::Adam,
            n_shards: 1,
            cross_batch: false,
            id_prime: false,
            normalize_tokens: false,
            temperature: 1.0,
            detach_teachers: true,
            top_m: 64,
            eval_each_epoch: false,
            id_l_de: true,
            id_l_li: true,
            id_l_li_to_de: true,
            id_l_dualreg: false,
            cd_l_de: true,
            cd_l_li: true,
            cd_l_ce: true,
            cd_l_li_to_de: true,
            cd_l_ce_to_li: true,
            cd_l_ce_to_de: true,
            cd_l_attn: true,
            cd_l_dualreg: false,
            eval_split: "dev".into(),
            eval_scheme: Scheme::De,
            eval_checkpoint: Checkpoint::Latest,
            mrr_cutoff: 10,
            recall_cutoffs: vec![5, 20, 50, 100, 1000],
            retrieve_k: 100,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.mrr_cutoff == 0 || self.recall_cutoffs.contains(&0) || self.retrieve_k == 0 {
            return Err(Error::Config("metric cutoffs must be at least 1".into()));
        }
        if self.recall_cutoffs.is_empty() {
            return Err(Error::Config("recall_cutoffs is empty".into()));
        }
        if self.top_m == 0 {
            return Err(Error::Config("top_m must be at least 1".into()));
        }
        if !["train", "dev", "test"].contains(&self.eval_split.as_str()) {
            return Err(Error::Config(format!(
                "unknown eval_split {:?}",
                self.eval_split
            )));
        }
        if self.eval_scheme == Scheme::Ce {
            return Err(Error::Config("eval_scheme must be de or li".into()));
        }
        if let Some(d) = &self.data_dir {
            if !d.is_dir() {
                return Err(Error::Config(format!(
                    "data_dir {} does not exist",
                    d.display()
                )));
            }
        }
        self.encoder()?.validate()?;
        self.cross_encoder()?.validate()?;
        self.id_train()?.validate()?;
        self.cascade_train()?.validate()?;
        if self.cross_init == CrossInit::Pretrained {
            self.cross_pretrain()?.validate()?;
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn task_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            vocab_size: self.vocab_size,
            n_topics: self.n_topics,
            passages_per_topic: self.passages_per_topic,
            passage_len: (self.passage_len_min, self.passage_len_max),
            query_len: (self.query_len_min, self.query_len_max),
            query_noise_rate: self.query_noise_rate,
            n_background_words: self.n_background_words,
            background_rate: self.background_rate,
            zipf_exponent: self.zipf_exponent,
            n_train: self.n_train,
            n_dev: self.n_dev,
            n_test: self.n_test,
            seed: self.task_seed,
        }
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout_p: self.dropout,
        })
    }

    pub fn cross_encoder(&self) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            n_layers: self.cross_n_layers,
            ..self.encoder()?
        })
    }

    fn train(&self, step: Step, epochs: usize, flags: LossFlags) -> TrainConfig {
        TrainConfig {
            step,
            batch_queries: self.batch_queries,
            n_negatives: self.n_negatives,
            epochs,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            n_shards: self.n_shards,
            cross_batch: self.cross_batch,
            id_prime: self.id_prime,
            loss: LossConfig {
                flags,
                weights: LossWeights::default(),
                temperature: self.temperature,
            },
            normalize_tokens: self.normalize_tokens,
            seed: self.seed,
        }
    }

    pub fn id_train(&self) -> Result<TrainConfig> {
        let flags = LossFlags {
            de: self.id_l_de,
            li: self.id_l_li,
            li_to_de: self.id_l_li_to_de,
            dual_reg: self.id_l_dualreg,
            detach_teachers: self.detach_teachers,
            ..LossFlags::none()
        };
        Ok(self.train(Step::Id, self.id_epochs, flags))
    }

    pub fn cascade_train(&self) -> Result<TrainConfig> {
        let flags = LossFlags {
            de: self.cd_l_de,
            li: self.cd_l_li,
            ce: self.cd_l_ce,
            li_to_de: self.cd_l_li_to_de,
            ce_to_li: self.cd_l_ce_to_li,
            ce_to_de: self.cd_l_ce_to_de,
            attn: self.cd_l_attn,
            dual_reg: self.cd_l_dualreg,
            detach_teachers: self.detach_teachers,
        };
        Ok(self.train(Step::Cascade, self.cascade_epochs, flags))
    }

    /// Pseudo-query training of a fresh cross-encoder. The per-epoch query
    /// count and length range come from `cross_pretrain_queries` and the task.
    pub fn cross_pretrain(&self) -> Result<TrainConfig> {
        if self.cross_pretrain_queries == 0 {
            return Err(Error::Config(
                "cross_pretrain_queries must be at least 1".into(),
            ));
        }
        Ok(TrainConfig {
            learning_rate: self.cross_pretrain_lr,
            ..self.train(
                Step::Cascade,
                self.cross_pretrain_epochs,
                LossFlags::supervised(false, false, true),
            )
        })
    }
}
