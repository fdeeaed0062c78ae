//! Relevance scorers: metric interaction (single-vector dot product), late
//! interaction (MaxSim over token representations) and cross interaction
//! (cross-encoder head), plus candidate-list and batched forms.

use kd_autograd::{RngState, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::{BatchEncoding, CrossEncoder, EncodedSequence};
use crate::error::{Error, Result};
use crate::tokens::{TokenSequence, CLS_ID, FIRST_CONTENT_ID};

pub type QueryId = u64;
pub type PassageId = u64;

const MASK_BIAS: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    De,
    Li,
    Ce,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::De => "de",
            Scheme::Li => "li",
            Scheme::Ce => "ce",
        }
    }
}

/// Raw scores of one query against an ordered candidate list.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub query_id: QueryId,
    pub candidate_ids: Vec<PassageId>,
    /// `[candidates]`
    pub scores: Tensor,
    pub scheme: Scheme,
}

/// Softmax of a [`ScoreSet`] over its candidates.
#[derive(Debug, Clone)]
pub struct ScoreDistribution {
    pub query_id: QueryId,
    pub candidate_ids: Vec<PassageId>,
    /// `[candidates]`
    pub probs: Tensor,
    pub scheme: Scheme,
}

impl ScoreSet {
    pub fn new(
        query_id: QueryId,
        candidate_ids: Vec<PassageId>,
        scores: Tensor,
        scheme: Scheme,
    ) -> Result<Self> {
        if candidate_ids.is_empty() {
            return Err(Error::Contract("empty candidate list".into()));
        }
        if scores.shape() != [candidate_ids.len()] {
            return Err(Error::Contract(format!(
                "{} candidates but scores of shape {:?}",
                candidate_ids.len(),
                scores.shape()
            )));
        }
        let mut sorted = candidate_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!(
                "duplicate candidate ids in {candidate_ids:?}"
            )));
        }
        if scores.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite {} score",
                scheme.name()
            )));
        }
        Ok(Self {
            query_id,
            candidate_ids,
            scores,
            scheme,
        })
    }

    pub fn len(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidate_ids.is_empty()
    }

    /// Softmax over candidates of `scores / temperature`.
    pub fn to_distribution(&self, temperature: f64) -> Result<ScoreDistribution> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let logits = if temperature == 1.0 {
            self.scores.clone()
        } else {
            self.scores.scale(1.0 / temperature)
        };
        Ok(ScoreDistribution {
            query_id: self.query_id,
            candidate_ids: self.candidate_ids.clone(),
            probs: logits.softmax(0)?,
            scheme: self.scheme,
        })
    }
}

/// `s_de = ⟨cls(q), cls(p)⟩`
pub fn metric_score(q: &EncodedSequence, p: &EncodedSequence) -> Result<Tensor> {
    if q.cls_rep.shape() != p.cls_rep.shape() {
        return Err(Error::Contract(format!(
            "cls dimensions differ: {:?} vs {:?}",
            q.cls_rep.shape(),
            p.cls_rep.shape()
        )));
    }
    Ok(q.cls_rep.dot(&p.cls_rep)?)
}

/// Content-token representations, optionally scaled to unit length.
pub fn token_view(enc: &EncodedSequence, normalize: bool) -> Result<Tensor> {
    let reps = enc.content_reps()?;
    Ok(if normalize {
        reps.l2_normalize_last()?
    } else {
        reps
    })
}

/// MaxSim over content tokens: `Σ_x max_y ⟨h_q^x, h_p^y⟩`.
pub fn late_score(q: &EncodedSequence, p: &EncodedSequence) -> Result<Tensor> {
    late_score_reps(&q.content_reps()?, &p.content_reps()?)
}

/// MaxSim on explicit `[l, d]` and `[k, d]` token matrices.
pub fn late_score_reps(q_tokens: &Tensor, p_tokens: &Tensor) -> Result<Tensor> {
    let (qs, ps) = (q_tokens.shape(), p_tokens.shape());
    if qs.len() != 2 || ps.len() != 2 || qs[1] != ps[1] {
        return Err(Error::Contract(format!(
            "token matrices {qs:?} and {ps:?} are incompatible"
        )));
    }
    if qs[0] == 0 || ps[0] == 0 {
        return Err(Error::Contract(
            "late interaction needs at least one token on each side".into(),
        ));
    }
    Ok(q_tokens.matmul_nt(p_tokens)?.max_axis(1)?.sum())
}

/// `s_ce(q, p)` from the cross-encoder head.
pub fn cross_score(
    model: &CrossEncoder,
    q: &TokenSequence,
    p: &TokenSequence,
    rng: &mut RngState,
    train: bool,
) -> Result<Tensor> {
    Ok(model.cross_encode(q, p, rng, train)?.0)
}

/// Scores one encoded query against encoded candidates with the de or li scheme.
pub fn score_candidates(
    scheme: Scheme,
    query_id: QueryId,
    query: &EncodedSequence,
    candidates: &[(PassageId, &EncodedSequence)],
) -> Result<ScoreSet> {
    if candidates.is_empty() {
        return Err(Error::Contract("empty candidate list".into()));
    }
    let scores = candidates
        .iter()
        .map(|(_, p)| match scheme {
            Scheme::De => metric_score(query, p),
            Scheme::Li => late_score(query, p),
            Scheme::Ce => Err(Error::Contract(
                "cross interaction scores token sequences; use score_candidates_cross".into(),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    let stacked = stack_scalars(&scores)?;
    ScoreSet::new(
        query_id,
        candidates.iter().map(|(id, _)| *id).collect(),
        stacked,
        scheme,
    )
}

/// Cross-encoder scores of one query against candidate passages, in one batch.
pub fn score_candidates_cross(
    model: &CrossEncoder,
    query_id: QueryId,
    query: &TokenSequence,
    candidates: &[(PassageId, &TokenSequence)],
    rng: &mut RngState,
    train: bool,
) -> Result<ScoreSet> {
    if candidates.is_empty() {
        return Err(Error::Contract("empty candidate list".into()));
    }
    let pairs: Vec<_> = candidates.iter().map(|(_, p)| (query, *p)).collect();
    let out = model.forward_pairs(&pairs, rng, train)?;
    ScoreSet::new(
        query_id,
        candidates.iter().map(|(id, _)| *id).collect(),
        out.scores,
        Scheme::Ce,
    )
}

fn stack_scalars(scalars: &[Tensor]) -> Result<Tensor> {
    let parts = scalars
        .iter()
        .map(|s| s.reshape(&[1]))
        .collect::<kd_autograd::Result<Vec<_>>>()?;
    Ok(Tensor::concat(&parts, 0)?)
}

/// Per-head late-interaction maps: token features are split into `n_heads`
/// contiguous slices and each head's `[l, k]` similarity block is row-softmaxed.
pub fn late_attention_maps(q_tokens: &Tensor, p_tokens: &Tensor, n_heads: usize) -> Result<Tensor> {
    let (qs, ps) = (q_tokens.shape(), p_tokens.shape());
    if qs.len() != 2 || ps.len() != 2 || qs[1] != ps[1] {
        return Err(Error::Contract(format!(
            "token matrices {qs:?} and {ps:?} are incompatible"
        )));
    }
    let d = qs[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!(
            "feature size {d} is not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let (l, k) = (qs[0], ps[0]);
    let qh = q_tokens.reshape(&[l, n_heads, dh])?.permute(&[1, 0, 2])?;
    let ph = p_tokens.reshape(&[k, n_heads, dh])?.permute(&[1, 0, 2])?;
    Ok(qh.bmm_nt(&ph)?.softmax(2)?)
}

fn is_content(t: u32) -> bool {
    t >= FIRST_CONTENT_ID
}

/// Dual-encoder scores of every query in a batch against every passage in a
/// pool: `[queries, passages]`.
pub fn batch_metric_scores(queries: &BatchEncoding, passages: &BatchEncoding) -> Result<Tensor> {
    Ok(queries.cls()?.matmul_nt(&passages.cls()?)?)
}

/// Late-interaction scores of every query against every passage in a pool,
/// `[queries, passages]`. Special and padding positions are excluded on both
/// sides; the result equals [`late_score`] pair by pair.
pub fn batch_late_scores(
    queries: &BatchEncoding,
    query_seqs: &[&TokenSequence],
    passages: &BatchEncoding,
    passage_seqs: &[&TokenSequence],
    normalize: bool,
) -> Result<Tensor> {
    let (b, lq) = (queries.batch_size(), queries.padded_len);
    let (np, lp) = (passages.batch_size(), passages.padded_len);
    if query_seqs.len() != b || passage_seqs.len() != np {
        return Err(Error::Contract(
            "sequence lists do not match the encoded batches".into(),
        ));
    }
    let d = queries.hidden.shape()[2];
    let mut qt = queries.hidden.reshape(&[b * lq, d])?;
    let mut pt = passages.hidden.reshape(&[np * lp, d])?;
    if normalize {
        qt = qt.l2_normalize_last()?;
        pt = pt.l2_normalize_last()?;
    }
    let content = |seq: &TokenSequence, i: usize| -> bool {
        let ids = seq.token_ids();
        // [SEP] closes the sequence; content lies strictly between it and [CLS]
        i > 0 && i + 1 < seq.len() && ids[0] == CLS_ID && is_content(ids[i])
    };
    let mut bias = vec![0.0; b * lq * np * lp];
    for pi in 0..np {
        for j in 0..lp {
            if !content(passage_seqs[pi], j) {
                for qi in 0..b * lq {
                    bias[(qi * np + pi) * lp + j] = MASK_BIAS;
                }
            }
        }
    }
    let mut qmask = vec![0.0; b * lq * np];
    for qi in 0..b {
        for x in 0..lq {
            if content(query_seqs[qi], x) {
                qmask[(qi * lq + x) * np..(qi * lq + x + 1) * np].fill(1.0);
            }
        }
    }
    let best = qt
        .matmul_nt(&pt)?
        .add(&Tensor::new(&[b * lq, np * lp], bias)?)?
        .reshape(&[b * lq * np, lp])?
        .max_axis(1)?
        .reshape(&[b, lq, np])?
        .mul(&Tensor::new(&[b, lq, np], qmask)?)?;
    Ok(best.sum_axis(1)?)
}

/// Picks per-query candidate scores out of a `[queries, pool]` matrix.
pub fn gather_candidates(
    matrix: &Tensor,
    query_row: usize,
    query_id: QueryId,
    pool_columns: &[usize],
    candidate_ids: Vec<PassageId>,
    scheme: Scheme,
) -> Result<ScoreSet> {
    let cols = matrix.shape()[1];
    let flat: Vec<usize> = pool_columns.iter().map(|c| query_row * cols + c).collect();
    let scores = matrix.gather(&flat, &[flat.len()])?;
    ScoreSet::new(query_id, candidate_ids, scores, scheme)
}
