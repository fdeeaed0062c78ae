//! Training loops: interaction distillation of the shared dual-encoder /
//! late-interaction encoder, and cascade distillation with a cross-encoder.

pub mod candidates;
pub mod log;
pub mod mining;

use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::time::Instant;

use kd_autograd::{Adam, RngState, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{pseudo_queries, Record, Split};
use crate::encoder::{
    extract_cross_attention, BatchEncoding, CrossEncoder, EncodedSequence, Encoder,
};
use crate::error::{Error, Result};
use crate::interaction::{
    batch_late_scores, batch_metric_scores, gather_candidates, late_attention_maps,
    late_score_reps, metric_score, token_view, PassageId, QueryId, Scheme, ScoreDistribution,
    ScoreSet,
};
use crate::losses::{
    cascade_loss, interaction_distill_loss, AttentionPair, DistillBatch, LossBundle, LossConfig,
    LossFlags, LossTerm, QueryScores,
};
use crate::retrieval::{build_index, evaluate};
use crate::tokens::TokenSequence;

pub use candidates::{
    build_candidate_lists, shard_ranges, BatchCandidates, CandidateMode, QueryCandidates,
};
pub use log::{EvalSnapshot, StepRecord, TrainLog};
pub use mining::{
    mine_negatives, random_negatives, read_examples, write_examples, TrainingExample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Id,
    Cascade,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step: Step,
    pub batch_queries: usize,
    pub n_negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Simulated devices for cross-batch gathering.
    pub n_shards: usize,
    pub cross_batch: bool,
    /// Distil over the full gathered list rather than the local shard's.
    pub id_prime: bool,
    pub loss: LossConfig,
    /// L2-normalise token vectors before late interaction.
    pub normalize_tokens: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step: Step::Id,
            batch_queries: 8,
            n_negatives: 7,
            epochs: 3,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            n_shards: 1,
            cross_batch: false,
            id_prime: false,
            loss: LossConfig {
                flags: LossFlags::interaction(),
                ..LossConfig::default()
            },
            normalize_tokens: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_negatives == 0 || self.n_shards == 0 || self.batch_queries == 0 {
            return Err(Error::Config(
                "n_negatives, n_shards and batch_queries must all be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.loss.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    fn mode(&self) -> CandidateMode {
        CandidateMode {
            cross_batch: self.cross_batch,
            id_prime: self.id_prime,
            n_shards: self.n_shards,
        }
    }
}

/// Held-out data for periodic evaluation of the dual-encoder.
pub struct EvalSet<'a> {
    pub corpus: &'a [Record],
    pub split: &'a Split,
    pub mrr_cutoff: usize,
    pub recall_cutoffs: Vec<usize>,
}

impl EvalSet<'_> {
    pub fn snapshot(&self, encoder: &Encoder, step: usize, epoch: usize) -> Result<EvalSnapshot> {
        let index = build_index(encoder, self.corpus, false, false)?;
        let m = evaluate(
            encoder,
            &index,
            self.split,
            Scheme::De,
            self.mrr_cutoff,
            &self.recall_cutoffs,
        )?;
        Ok(EvalSnapshot {
            step,
            epoch,
            mrr: m.mrr,
            recall: m.recall,
        })
    }
}

struct Needs {
    de: bool,
    li: bool,
    ce: bool,
    attn: bool,
    dual: bool,
}

fn needs(flags: &LossFlags, allowed: &[LossTerm]) -> Needs {
    let on = |t: LossTerm| allowed.contains(&t) && flags.get(t);
    let attn = on(LossTerm::Attn);
    let li = on(LossTerm::Li) || on(LossTerm::LiToDe) || on(LossTerm::CeToLi) || attn;
    let dual = on(LossTerm::DualReg);
    Needs {
        de: on(LossTerm::De) || on(LossTerm::LiToDe) || on(LossTerm::CeToDe) || dual,
        li,
        ce: on(LossTerm::Ce) || on(LossTerm::CeToLi) || on(LossTerm::CeToDe) || attn,
        attn,
        dual,
    }
}

fn content_view(batch: &BatchEncoding, i: usize, normalize: bool) -> Result<Tensor> {
    token_view(&batch.sequence(i)?, normalize)
}

/// Scores every query of a batch against its candidates and assembles the
/// loss over the terms in `allowed` that the config switches on.
pub fn batch_loss(
    student: Option<&Encoder>,
    cross: Option<&CrossEncoder>,
    examples: &[&TrainingExample],
    cfg: &TrainConfig,
    allowed: &[LossTerm],
    rng: &RngState,
    step: usize,
) -> Result<(LossBundle, BatchCandidates)> {
    let finite = |m: &Tensor, term: &'static str| -> Result<()> {
        match m.data().iter().find(|v| !v.is_finite()) {
            Some(&value) => Err(Error::NonFiniteLoss { term, value, step }),
            None => Ok(()),
        }
    };
    let own: Vec<Vec<PassageId>> = examples.iter().map(|e| e.passage_ids()).collect();
    let cands = build_candidate_lists(&own, cfg.mode());
    let mut seqs: HashMap<PassageId, &TokenSequence> = HashMap::new();
    for e in examples {
        seqs.insert(e.positive_id, &e.positive);
        for (id, s) in e.negative_ids.iter().zip(&e.negatives) {
            seqs.insert(*id, s);
        }
    }
    let pool: Vec<&TokenSequence> = cands.pool.iter().map(|id| seqs[id]).collect();
    let queries: Vec<&TokenSequence> = examples.iter().map(|e| &e.query).collect();
    let need = needs(&cfg.loss.flags, allowed);

    let mut per_query: Vec<QueryScores> = examples
        .iter()
        .zip(&cands.queries)
        .map(|(e, c)| QueryScores::new(e.query_id, c.positive_index, c.distill_len))
        .collect();

    let mut student_out = None;
    if need.de || need.li {
        let enc =
            student.ok_or_else(|| Error::Contract("loss needs the student encoder".into()))?;
        let q = enc.forward(&queries, &mut rng.split(0), true)?;
        let p = enc.forward(&pool, &mut rng.split(1), true)?;
        let de = if need.de {
            Some(batch_metric_scores(&q, &p)?)
        } else {
            None
        };
        let li = if need.li {
            Some(batch_late_scores(
                &q,
                &queries,
                &p,
                &pool,
                cfg.normalize_tokens,
            )?)
        } else {
            None
        };
        for (m, term) in [(&de, "s_de"), (&li, "s_li")] {
            if let Some(m) = m {
                finite(m, term)?;
            }
        }
        let (mut de2, mut li2) = (None, None);
        if need.dual {
            // second passage pass, same query representations
            let p2 = enc.forward(&pool, &mut rng.split(2), true)?;
            de2 = Some(batch_metric_scores(&q, &p2)?);
            if need.li {
                li2 = Some(batch_late_scores(
                    &q,
                    &queries,
                    &p2,
                    &pool,
                    cfg.normalize_tokens,
                )?);
            }
        }
        for (qi, (qs, c)) in per_query.iter_mut().zip(&cands.queries).enumerate() {
            let pick = |m: &Option<Tensor>, scheme| -> Result<Option<ScoreSet>> {
                m.as_ref()
                    .map(|m| {
                        gather_candidates(
                            m,
                            qi,
                            qs.query_id,
                            &c.pool_columns,
                            c.ids.clone(),
                            scheme,
                        )
                    })
                    .transpose()
            };
            qs.de = pick(&de, Scheme::De)?;
            qs.li = pick(&li, Scheme::Li)?;
            qs.de_second = pick(&de2, Scheme::De)?;
            qs.li_second = pick(&li2, Scheme::Li)?;
        }
        student_out = Some((q, p));
    }

    if need.ce {
        let model = cross.ok_or_else(|| Error::Contract("loss needs the cross-encoder".into()))?;
        let mut pairs = Vec::new();
        let mut offsets = Vec::with_capacity(examples.len());
        for (e, c) in examples.iter().zip(&cands.queries) {
            offsets.push(pairs.len());
            pairs.extend(c.pool_columns.iter().map(|&col| (&e.query, pool[col])));
        }
        let out = model.forward_pairs(&pairs, &mut rng.split(3), true)?;
        finite(&out.scores, "s_ce")?;
        let mut li_tokens: HashMap<usize, Tensor> = HashMap::new();
        for (qi, (qs, c)) in per_query.iter_mut().zip(&cands.queries).enumerate() {
            let off = offsets[qi];
            let scores = out.scores.slice(0, off..off + c.ids.len())?;
            qs.ce = Some(ScoreSet::new(
                qs.query_id,
                c.ids.clone(),
                scores,
                Scheme::Ce,
            )?);
            if need.attn {
                let (q, p) = student_out.as_ref().ok_or_else(|| {
                    Error::Contract("attention distillation needs the student".into())
                })?;
                let n_heads = model.config().n_heads;
                let q_tokens = content_view(q, qi, cfg.normalize_tokens)?;
                for (j, &col) in c.pool_columns.iter().enumerate().take(c.distill_len) {
                    let p_tokens = match li_tokens.get(&col) {
                        Some(t) => t.clone(),
                        None => {
                            let t = content_view(p, col, cfg.normalize_tokens)?;
                            li_tokens.insert(col, t.clone());
                            t
                        }
                    };
                    let (l, k) = out.layouts[off + j];
                    qs.attention.push(AttentionPair {
                        ce: extract_cross_attention(&out.pair_attention(off + j)?, l, k)?,
                        li: late_attention_maps(&q_tokens, &p_tokens, n_heads)?,
                    });
                }
            }
        }
    }

    let batch = DistillBatch { queries: per_query };
    let bundle = if allowed.iter().any(|t| t.uses_cross()) {
        cascade_loss(&batch, &cfg.loss)?
    } else {
        interaction_distill_loss(&batch, &cfg.loss)?
    };
    Ok((bundle, cands))
}

fn check_finite(bundle: &LossBundle, step: usize) -> Result<()> {
    for (term, v) in bundle.values() {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: term.name(),
                value: v,
                step,
            });
        }
    }
    let total = bundle.total.item();
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "total",
            value: total,
            step,
        });
    }
    Ok(())
}

/// Shared optimisation loop.
fn run(
    cfg: &TrainConfig,
    examples: &[TrainingExample],
    student: Option<&Encoder>,
    cross: Option<&CrossEncoder>,
    allowed: &[LossTerm],
    eval: Option<&EvalSet>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let start = Instant::now();
    let mut params: Vec<Tensor> = Vec::new();
    if let Some(s) = student {
        params.extend(s.params());
    }
    if let Some(c) = cross {
        params.extend(c.params());
    }
    let mut adam = match cfg.optimizer {
        Optimizer::Adam => Adam::new(cfg.learning_rate),
    };
    let root = RngState::new(cfg.seed);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        root.split(1).split(epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_queries) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (bundle, cands) = batch_loss(
                student,
                cross,
                &batch,
                cfg,
                allowed,
                &root.split(2).split(step as u64),
                step,
            )?;
            check_finite(&bundle, step)?;
            bundle.total.backward()?;
            for p in &params {
                if p.grad().is_none() {
                    p.set_grad(Some(vec![0.0; p.numel()]));
                }
            }
            adam.step(&params)?;
            log.steps.push(StepRecord {
                step,
                epoch,
                terms: bundle
                    .values()
                    .into_iter()
                    .map(|(t, v)| (t.name().to_string(), v))
                    .collect(),
                total: bundle.total.item(),
                list_sizes: cands.queries.iter().map(|q| q.ids.len()).collect(),
                distill_sizes: cands.queries.iter().map(|q| q.distill_len).collect(),
                duplicates: cands.duplicates,
            });
            if cands.duplicates > 0 {
                ::log::debug!(
                    "step {step}: dropped {} duplicate candidates",
                    cands.duplicates
                );
            }
            step += 1;
        }
        if let (Some(ev), Some(s)) = (eval, student) {
            let snap = ev.snapshot(s, step, epoch)?;
            ::log::info!("epoch {epoch}: MRR@{} {:.4}", ev.mrr_cutoff, snap.mrr);
            log.evals.push(snap);
        }
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Trains the shared encoder with `L_id` (plus dual regularisation when flagged).
pub fn train_interaction_distillation(
    cfg: &TrainConfig,
    examples: &[TrainingExample],
    encoder: Encoder,
    eval: Option<&EvalSet>,
) -> Result<(Encoder, TrainLog)> {
    if cfg.step != Step::Id {
        return Err(Error::Config(
            "interaction distillation expects step = id".into(),
        ));
    }
    let log = run(
        cfg,
        examples,
        Some(&encoder),
        None,
        &LossTerm::INTERACTION,
        eval,
    )?;
    Ok((encoder, log))
}

/// Jointly trains the student encoder and the cross-encoder with `L_cd`.
pub fn train_cascade(
    cfg: &TrainConfig,
    examples: &[TrainingExample],
    student: Encoder,
    cross: CrossEncoder,
    eval: Option<&EvalSet>,
) -> Result<((Encoder, CrossEncoder), TrainLog)> {
    if cfg.step != Step::Cascade {
        return Err(Error::Config(
            "cascade distillation expects step = cascade".into(),
        ));
    }
    if cross.config().n_heads != student.config().n_heads {
        return Err(Error::Config(format!(
            "attention distillation pairs heads one to one: cross-encoder has {}, student {}",
            cross.config().n_heads,
            student.config().n_heads
        )));
    }
    let log = run(
        cfg,
        examples,
        Some(&student),
        Some(&cross),
        &LossTerm::ALL,
        eval,
    )?;
    Ok(((student, cross), log))
}

/// Supervised-only training of the cross-encoder (`L_ce`), used to give the
/// cascade a competent teacher before joint training.
pub fn warmup_cross_encoder(
    cfg: &TrainConfig,
    examples: &[TrainingExample],
    cross: CrossEncoder,
    epochs: usize,
) -> Result<(CrossEncoder, TrainLog)> {
    let cfg = TrainConfig {
        epochs,
        loss: LossConfig {
            flags: LossFlags::supervised(false, false, true),
            ..cfg.loss
        },
        ..cfg.clone()
    };
    let log = run(&cfg, examples, None, Some(&cross), &[LossTerm::Ce], None)?;
    Ok((cross, log))
}

/// Self-supervised cross-encoder pretraining on the corpus alone: every epoch
/// draws fresh pseudo-queries (token subsets of random passages) with random
/// negatives and trains `L_ce` on them. Stands in for a pretrained teacher
/// checkpoint.
pub fn pretrain_cross_encoder(
    cfg: &TrainConfig,
    corpus: &[Record],
    queries_per_epoch: usize,
    query_len: (usize, usize),
    cross: CrossEncoder,
) -> Result<(CrossEncoder, TrainLog)> {
    let root = RngState::new(cfg.seed);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let split = pseudo_queries(
            corpus,
            queries_per_epoch,
            query_len,
            &mut root.split(1).split(epoch as u64),
        )?;
        let examples = random_negatives(
            corpus,
            &split,
            cfg.n_negatives,
            root.split(2).split(epoch as u64).next_u64(),
        )?;
        let epoch_cfg = TrainConfig {
            epochs: 1,
            seed: root.split(3).split(epoch as u64).next_u64(),
            loss: LossConfig {
                flags: LossFlags::supervised(false, false, true),
                ..cfg.loss
            },
            ..cfg.clone()
        };
        let part = run(
            &epoch_cfg,
            &examples,
            None,
            Some(&cross),
            &[LossTerm::Ce],
            None,
        )?;
        let offset = log.steps.len();
        log.steps.extend(part.steps.into_iter().map(|mut s| {
            s.step += offset;
            s.epoch = epoch;
            s
        }));
        ::log::info!(
            "pretraining epoch {epoch}: mean l_ce {:.4}",
            epoch_means(&log, epoch)
                .get("l_ce")
                .copied()
                .unwrap_or(f64::NAN)
        );
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((cross, log))
}

fn checksum(t: &Tensor) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    t.id().hash(&mut h);
    t.shape().hash(&mut h);
    for v in t.data().iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Repeated dropout passes of the same passages against one fixed query
/// representation.
pub struct DualRegSession<'a> {
    encoder: &'a Encoder,
    query_id: QueryId,
    query: &'a EncodedSequence,
    fingerprint: (u64, u64),
    with_li: bool,
    normalize: bool,
}

/// Distributions of one dropout pass.
#[derive(Debug, Clone)]
pub struct PassDistributions {
    pub de: ScoreDistribution,
    pub li: Option<ScoreDistribution>,
}

impl<'a> DualRegSession<'a> {
    pub fn new(
        encoder: &'a Encoder,
        query_id: QueryId,
        query: &'a EncodedSequence,
        with_li: bool,
        normalize: bool,
    ) -> Self {
        Self {
            encoder,
            query_id,
            query,
            fingerprint: (checksum(&query.cls_rep), checksum(&query.token_reps)),
            with_li,
            normalize,
        }
    }

    /// Encodes the passages in train mode with `rng` and scores them against
    /// the session's query. Fails if the query representation has changed.
    pub fn pass(
        &self,
        passages: &[(PassageId, &TokenSequence)],
        rng: &mut RngState,
    ) -> Result<PassDistributions> {
        if (
            checksum(&self.query.cls_rep),
            checksum(&self.query.token_reps),
        ) != self.fingerprint
        {
            return Err(Error::Contract(
                "query representation changed between dual-regularisation passes".into(),
            ));
        }
        if passages.is_empty() {
            return Err(Error::Contract("empty candidate list".into()));
        }
        let seqs: Vec<&TokenSequence> = passages.iter().map(|p| p.1).collect();
        let ids: Vec<PassageId> = passages.iter().map(|p| p.0).collect();
        let batch = self.encoder.forward(&seqs, rng, true)?;
        let mut de = Vec::with_capacity(seqs.len());
        let mut li = Vec::new();
        let q_tokens = token_view(self.query, self.normalize)?;
        for i in 0..seqs.len() {
            let p = batch.sequence(i)?;
            de.push(metric_score(self.query, &p)?.reshape(&[1])?);
            if self.with_li {
                li.push(
                    late_score_reps(&q_tokens, &token_view(&p, self.normalize)?)?.reshape(&[1])?,
                );
            }
        }
        let de = ScoreSet::new(
            self.query_id,
            ids.clone(),
            Tensor::concat(&de, 0)?,
            Scheme::De,
        )?
        .to_distribution(1.0)?;
        let li = if self.with_li {
            Some(
                ScoreSet::new(self.query_id, ids, Tensor::concat(&li, 0)?, Scheme::Li)?
                    .to_distribution(1.0)?,
            )
        } else {
            None
        };
        Ok(PassDistributions { de, li })
    }
}

/// Two dropout passes of the passages from seeds derived from `rng`, both
/// scored against the same query representation.
pub fn dual_reg_forward(
    encoder: &Encoder,
    query_id: QueryId,
    query: &EncodedSequence,
    passages: &[(PassageId, &TokenSequence)],
    rng: &RngState,
    with_li: bool,
) -> Result<(PassDistributions, PassDistributions)> {
    let session = DualRegSession::new(encoder, query_id, query, with_li, false);
    let a = session.pass(passages, &mut rng.split(0))?;
    let b = session.pass(passages, &mut rng.split(1))?;
    Ok((a, b))
}

/// Mean of every logged term over the steps of one epoch.
pub fn epoch_means(log: &TrainLog, epoch: usize) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in log.steps.iter().filter(|s| s.epoch == epoch) {
        for (k, v) in &s.terms {
            let e = sums.entry(k.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}
