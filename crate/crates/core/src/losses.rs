//! Supervised and distillation loss terms and their assembly into the
//! interaction-distillation and cascade-distillation objectives.

use kd_autograd::{kl_divergence, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::{QueryId, ScoreDistribution, ScoreSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    De,
    Li,
    Ce,
    LiToDe,
    CeToLi,
    CeToDe,
    Attn,
    DualReg,
}

impl LossTerm {
    pub const ALL: [LossTerm; 8] = [
        LossTerm::De,
        LossTerm::Li,
        LossTerm::Ce,
        LossTerm::LiToDe,
        LossTerm::CeToLi,
        LossTerm::CeToDe,
        LossTerm::Attn,
        LossTerm::DualReg,
    ];

    /// Terms of the interaction-distillation objective.
    pub const INTERACTION: [LossTerm; 4] = [
        LossTerm::De,
        LossTerm::Li,
        LossTerm::LiToDe,
        LossTerm::DualReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::De => "l_de",
            LossTerm::Li => "l_li",
            LossTerm::Ce => "l_ce",
            LossTerm::LiToDe => "l_li_to_de",
            LossTerm::CeToLi => "l_ce_to_li",
            LossTerm::CeToDe => "l_ce_to_de",
            LossTerm::Attn => "l_attn",
            LossTerm::DualReg => "l_dualreg",
        }
    }

    /// Whether the term needs cross-encoder outputs.
    pub fn uses_cross(self) -> bool {
        matches!(
            self,
            LossTerm::Ce | LossTerm::CeToLi | LossTerm::CeToDe | LossTerm::Attn
        )
    }
}

/// Per-term switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossFlags {
    pub de: bool,
    pub li: bool,
    pub ce: bool,
    pub li_to_de: bool,
    pub ce_to_li: bool,
    pub ce_to_de: bool,
    pub attn: bool,
    pub dual_reg: bool,
    /// Block gradients into the teacher side of every distillation term.
    pub detach_teachers: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self::cascade()
    }
}

impl LossFlags {
    pub fn none() -> Self {
        Self {
            de: false,
            li: false,
            ce: false,
            li_to_de: false,
            ce_to_li: false,
            ce_to_de: false,
            attn: false,
            dual_reg: false,
            detach_teachers: true,
        }
    }

    /// `L_de + L_li + L_li→de`
    pub fn interaction() -> Self {
        Self {
            de: true,
            li: true,
            li_to_de: true,
            ..Self::none()
        }
    }

    /// All seven cascade terms.
    pub fn cascade() -> Self {
        Self {
            de: true,
            li: true,
            ce: true,
            li_to_de: true,
            ce_to_li: true,
            ce_to_de: true,
            attn: true,
            ..Self::none()
        }
    }

    /// Supervised terms only, for the given heads.
    pub fn supervised(de: bool, li: bool, ce: bool) -> Self {
        Self {
            de,
            li,
            ce,
            ..Self::none()
        }
    }

    pub fn get(&self, term: LossTerm) -> bool {
        match term {
            LossTerm::De => self.de,
            LossTerm::Li => self.li,
            LossTerm::Ce => self.ce,
            LossTerm::LiToDe => self.li_to_de,
            LossTerm::CeToLi => self.ce_to_li,
            LossTerm::CeToDe => self.ce_to_de,
            LossTerm::Attn => self.attn,
            LossTerm::DualReg => self.dual_reg,
        }
    }

    pub fn set(&mut self, term: LossTerm, on: bool) {
        let slot = match term {
            LossTerm::De => &mut self.de,
            LossTerm::Li => &mut self.li,
            LossTerm::Ce => &mut self.ce,
            LossTerm::LiToDe => &mut self.li_to_de,
            LossTerm::CeToLi => &mut self.ce_to_li,
            LossTerm::CeToDe => &mut self.ce_to_de,
            LossTerm::Attn => &mut self.attn,
            LossTerm::DualReg => &mut self.dual_reg,
        };
        *slot = on;
    }

    pub fn without(mut self, term: LossTerm) -> Self {
        self.set(term, false);
        self
    }

    pub fn active(&self) -> Vec<LossTerm> {
        LossTerm::ALL.into_iter().filter(|&t| self.get(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub de: f64,
    pub li: f64,
    pub ce: f64,
    pub li_to_de: f64,
    pub ce_to_li: f64,
    pub ce_to_de: f64,
    pub attn: f64,
    pub dual_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            de: 1.0,
            li: 1.0,
            ce: 1.0,
            li_to_de: 1.0,
            ce_to_li: 1.0,
            ce_to_de: 1.0,
            attn: 1.0,
            dual_reg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::De => self.de,
            LossTerm::Li => self.li,
            LossTerm::Ce => self.ce,
            LossTerm::LiToDe => self.li_to_de,
            LossTerm::CeToLi => self.ce_to_li,
            LossTerm::CeToDe => self.ce_to_de,
            LossTerm::Attn => self.attn,
            LossTerm::DualReg => self.dual_reg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub flags: LossFlags,
    pub weights: LossWeights,
    /// Softmax temperature for the distributions compared by KL terms.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            flags: LossFlags::default(),
            weights: LossWeights::default(),
            temperature: 1.0,
        }
    }
}

/// `-log softmax(scores)[positive]`
pub fn contrastive_nll(scores: &ScoreSet, positive_index: usize) -> Result<Tensor> {
    contrastive_nll_tensor(&scores.scores, positive_index)
}

fn contrastive_nll_tensor(scores: &Tensor, positive_index: usize) -> Result<Tensor> {
    let n = scores.numel();
    if positive_index >= n {
        return Err(Error::Contract(format!(
            "positive index {positive_index} out of {n} candidates"
        )));
    }
    Ok(scores
        .log_softmax(0)?
        .slice(0, positive_index..positive_index + 1)?
        .sum()
        .neg())
}

fn check_aligned(a: &[u64], b: &[u64]) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!(
            "candidate lists differ: {a:?} vs {b:?}"
        )));
    }
    Ok(())
}

/// `KL(teacher ‖ student)` over aligned candidates.
pub fn distill_kl(
    teacher: &ScoreDistribution,
    student: &ScoreDistribution,
    detach_teacher: bool,
) -> Result<Tensor> {
    check_aligned(&teacher.candidate_ids, &student.candidate_ids)?;
    if teacher.query_id != student.query_id {
        return Err(Error::Contract(format!(
            "distributions belong to queries {} and {}",
            teacher.query_id, student.query_id
        )));
    }
    let t = if detach_teacher {
        teacher.probs.detach()
    } else {
        teacher.probs.clone()
    };
    Ok(kl_divergence(&t, &student.probs)?)
}

/// Mean over heads and query rows of the row KL from cross-encoder maps to
/// late-interaction maps, both `[heads, l, k]`. The cross side never receives
/// gradient.
pub fn attention_distill(ce_maps: &Tensor, li_maps: &Tensor) -> Result<Tensor> {
    if ce_maps.shape() != li_maps.shape() || ce_maps.ndim() != 3 {
        return Err(Error::Contract(format!(
            "attention maps {:?} and {:?} do not match",
            ce_maps.shape(),
            li_maps.shape()
        )));
    }
    Ok(kl_divergence(&ce_maps.detach(), li_maps)?)
}

/// `½ [KL(a‖b) + KL(b‖a)]`, with gradient into both sides.
pub fn dual_reg(a: &ScoreDistribution, b: &ScoreDistribution) -> Result<Tensor> {
    check_aligned(&a.candidate_ids, &b.candidate_ids)?;
    let ab = kl_divergence(&a.probs, &b.probs)?;
    let ba = kl_divergence(&b.probs, &a.probs)?;
    Ok(ab.add(&ba)?.scale(0.5))
}

/// One (cross-encoder, late-interaction) attention pair for a query–passage pair.
#[derive(Debug, Clone)]
pub struct AttentionPair {
    /// `[heads, l, k]`, renormalised cross-encoder block.
    pub ce: Tensor,
    /// `[heads, l, k]`, row-softmaxed late-interaction maps.
    pub li: Tensor,
}

/// Scores of one query over its candidate list. The first `distill_len`
/// candidates form the list used by distillation terms.
#[derive(Debug, Clone)]
pub struct QueryScores {
    pub query_id: QueryId,
    pub positive_index: usize,
    pub distill_len: usize,
    pub de: Option<ScoreSet>,
    pub li: Option<ScoreSet>,
    pub ce: Option<ScoreSet>,
    /// Second dropout pass of the passages for dual regularisation.
    pub de_second: Option<ScoreSet>,
    pub li_second: Option<ScoreSet>,
    pub attention: Vec<AttentionPair>,
}

impl QueryScores {
    pub fn new(query_id: QueryId, positive_index: usize, distill_len: usize) -> Self {
        Self {
            query_id,
            positive_index,
            distill_len,
            de: None,
            li: None,
            ce: None,
            de_second: None,
            li_second: None,
            attention: Vec::new(),
        }
    }

    fn sets(&self) -> impl Iterator<Item = &ScoreSet> {
        [
            &self.de,
            &self.li,
            &self.ce,
            &self.de_second,
            &self.li_second,
        ]
        .into_iter()
        .flatten()
    }

    fn validate(&self) -> Result<()> {
        let mut sets = self.sets();
        let Some(first) = sets.next() else {
            return Err(Error::Contract(format!(
                "query {} carries no scores",
                self.query_id
            )));
        };
        for s in sets {
            check_aligned(&first.candidate_ids, &s.candidate_ids)?;
        }
        let n = first.len();
        if self.positive_index >= n {
            return Err(Error::Contract(format!(
                "query {}: positive index {} out of {n} candidates",
                self.query_id, self.positive_index
            )));
        }
        if self.distill_len == 0 || self.distill_len > n || self.positive_index >= self.distill_len
        {
            return Err(Error::Contract(format!(
                "query {}: distillation prefix {} invalid for {n} candidates",
                self.query_id, self.distill_len
            )));
        }
        Ok(())
    }

    fn distribution(
        &self,
        set: &ScoreSet,
        temperature: f64,
        prefix: usize,
    ) -> Result<ScoreDistribution> {
        if prefix == set.len() {
            return set.to_distribution(temperature);
        }
        let sub = ScoreSet::new(
            set.query_id,
            set.candidate_ids[..prefix].to_vec(),
            set.scores.slice(0, 0..prefix)?,
            set.scheme,
        )?;
        sub.to_distribution(temperature)
    }
}

#[derive(Debug, Clone, Default)]
pub struct DistillBatch {
    pub queries: Vec<QueryScores>,
}

/// Named loss terms and their weighted total.
#[derive(Debug, Clone)]
pub struct LossBundle {
    terms: Vec<(LossTerm, Tensor)>,
    pub weights: LossWeights,
    pub total: Tensor,
}

impl LossBundle {
    pub fn get(&self, term: LossTerm) -> Option<&Tensor> {
        self.terms.iter().find(|(t, _)| *t == term).map(|(_, v)| v)
    }

    pub fn value(&self, term: LossTerm) -> Option<f64> {
        self.get(term).map(Tensor::item)
    }

    pub fn terms(&self) -> &[(LossTerm, Tensor)] {
        &self.terms
    }

    /// `(name, value)` for every present term, in canonical order.
    pub fn values(&self) -> Vec<(LossTerm, f64)> {
        self.terms.iter().map(|(t, v)| (*t, v.item())).collect()
    }
}

fn missing(term: LossTerm, what: &str, q: QueryId) -> Error {
    Error::Contract(format!(
        "{} requested but query {q} has no {what}",
        term.name()
    ))
}

fn require<'a>(
    set: &'a Option<ScoreSet>,
    term: LossTerm,
    what: &str,
    q: QueryId,
) -> Result<&'a ScoreSet> {
    set.as_ref().ok_or_else(|| missing(term, what, q))
}

fn query_term(qs: &QueryScores, term: LossTerm, cfg: &LossConfig) -> Result<Tensor> {
    let q = qs.query_id;
    let t = cfg.temperature;
    let detach = cfg.flags.detach_teachers;
    let n = qs.distill_len;
    let kl = |teacher: &ScoreSet, student: &ScoreSet| -> Result<Tensor> {
        distill_kl(
            &qs.distribution(teacher, t, n)?,
            &qs.distribution(student, t, n)?,
            detach,
        )
    };
    Ok(match term {
        LossTerm::De => contrastive_nll(require(&qs.de, term, "de scores", q)?, qs.positive_index)?,
        LossTerm::Li => contrastive_nll(require(&qs.li, term, "li scores", q)?, qs.positive_index)?,
        LossTerm::Ce => contrastive_nll(require(&qs.ce, term, "ce scores", q)?, qs.positive_index)?,
        LossTerm::LiToDe => kl(
            require(&qs.li, term, "li scores", q)?,
            require(&qs.de, term, "de scores", q)?,
        )?,
        LossTerm::CeToLi => kl(
            require(&qs.ce, term, "ce scores", q)?,
            require(&qs.li, term, "li scores", q)?,
        )?,
        LossTerm::CeToDe => kl(
            require(&qs.ce, term, "ce scores", q)?,
            require(&qs.de, term, "de scores", q)?,
        )?,
        LossTerm::Attn => {
            if qs.attention.is_empty() {
                return Err(missing(term, "attention pairs", q));
            }
            let mut acc: Option<Tensor> = None;
            for pair in &qs.attention {
                let v = attention_distill(&pair.ce, &pair.li)?;
                acc = Some(match acc {
                    None => v,
                    Some(a) => a.add(&v)?,
                });
            }
            acc.expect("nonempty")
                .scale(1.0 / qs.attention.len() as f64)
        }
        LossTerm::DualReg => {
            let first = require(&qs.de, term, "de scores", q)?;
            let second = require(&qs.de_second, term, "second-pass de scores", q)?;
            let mut v = dual_reg(&first.to_distribution(t)?, &second.to_distribution(t)?)?;
            if let Some(li) = &qs.li {
                let li2 = require(&qs.li_second, term, "second-pass li scores", q)?;
                v = v.add(&dual_reg(
                    &li.to_distribution(t)?,
                    &li2.to_distribution(t)?,
                )?)?;
            }
            v
        }
    })
}

fn assemble(batch: &DistillBatch, cfg: &LossConfig, allowed: &[LossTerm]) -> Result<LossBundle> {
    if batch.queries.is_empty() {
        return Err(Error::Contract("empty distillation batch".into()));
    }
    for q in &batch.queries {
        q.validate()?;
    }
    let nq = batch.queries.len() as f64;
    let mut terms = Vec::new();
    for term in LossTerm::ALL {
        if !allowed.contains(&term) || !cfg.flags.get(term) {
            continue;
        }
        let mut acc: Option<Tensor> = None;
        for q in &batch.queries {
            let v = query_term(q, term, cfg)?;
            acc = Some(match acc {
                None => v,
                Some(a) => a.add(&v)?,
            });
        }
        if let Some(sum) = acc {
            terms.push((term, sum.scale(1.0 / nq)));
        }
    }
    if terms.is_empty() {
        return Err(Error::Config("no loss terms enabled".into()));
    }
    let mut total: Option<Tensor> = None;
    for (term, v) in &terms {
        let w = v.scale(cfg.weights.get(*term));
        total = Some(match total {
            None => w,
            Some(t) => t.add(&w)?,
        });
    }
    Ok(LossBundle {
        terms,
        weights: cfg.weights,
        total: total.expect("at least one term"),
    })
}

/// `L_id = L_de + L_li + L_li→de`, plus dual regularisation when flagged.
/// Flags for cross-encoder terms are ignored.
pub fn interaction_distill_loss(batch: &DistillBatch, cfg: &LossConfig) -> Result<LossBundle> {
    assemble(batch, cfg, &LossTerm::INTERACTION)
}

/// `L_cd = L_ce + L_li + L_de + L_ce→li + L_attn + L_li→de + L_ce→de` with
/// per-term switches.
pub fn cascade_loss(batch: &DistillBatch, cfg: &LossConfig) -> Result<LossBundle> {
    assemble(batch, cfg, &LossTerm::ALL)
}
