//! Exact brute-force retrieval over encoded passages and ranking metrics.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use kd_autograd::{no_grad, RngState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{corpus_hash, encoder_fingerprint, Container};
use crate::data::{Record, Split};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::interaction::{PassageId, QueryId, Scheme};
use crate::tokens::SequenceKind;

/// Environment variable bounding the scoring thread pool.
pub const THREADS_ENV: &str = "KD_SCORE_THREADS";

const ENCODE_BATCH: usize = 64;

/// Plain-data representation of one encoded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseRep {
    pub id: u64,
    pub cls: Vec<f64>,
    /// Content-token rows, `len × d`, flattened.
    pub tokens: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassageIndex {
    pub passage_ids: Vec<PassageId>,
    pub dim: usize,
    /// `M × d`, row-major.
    pub cls_matrix: Vec<f64>,
    /// Per-passage content-token rows, when stored.
    pub token_store: Option<Vec<Vec<f64>>>,
    pub normalized_tokens: bool,
    pub fingerprint: String,
    pub corpus_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: QueryId,
    pub entries: Vec<(PassageId, f64)>,
    pub k: usize,
    /// Set when fewer than `k` passages exist.
    pub truncated: bool,
}

impl RankedList {
    pub fn ids(&self) -> Vec<PassageId> {
        self.entries.iter().map(|e| e.0).collect()
    }
}

fn l2_rows(rows: &mut [f64], d: usize) {
    for r in rows.chunks_mut(d) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            r.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Encodes records in eval mode (dropout off) in fixed-size batches.
pub fn encode_records(
    encoder: &Encoder,
    records: &[Record],
    kind: SequenceKind,
    normalize_tokens: bool,
) -> Result<Vec<DenseRep>> {
    let _guard = no_grad();
    let d = encoder.config().d_model;
    let vocab = encoder.config().vocab_size;
    let mut rng = RngState::new(0);
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(ENCODE_BATCH) {
        for r in chunk {
            if let Some(&bad) = r.token_ids.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::Vocabulary {
                    id: bad,
                    vocab_size: vocab,
                    context: format!(" in record {}", r.id),
                });
            }
        }
        let seqs: Vec<_> = chunk.iter().map(|r| r.sequence(kind)).collect();
        let refs: Vec<_> = seqs.iter().collect();
        let batch = encoder.forward(&refs, &mut rng, false)?;
        let hidden = batch.hidden.to_vec();
        let l = batch.padded_len;
        for (i, r) in chunk.iter().enumerate() {
            let base = i * l * d;
            let len = seqs[i].len();
            let mut tokens = hidden[base + d..base + (len - 1) * d].to_vec();
            if normalize_tokens {
                l2_rows(&mut tokens, d);
            }
            out.push(DenseRep {
                id: r.id,
                cls: hidden[base..base + d].to_vec(),
                tokens,
            });
        }
    }
    Ok(out)
}

pub fn build_index(
    encoder: &Encoder,
    corpus: &[Record],
    store_tokens: bool,
    normalize_tokens: bool,
) -> Result<PassageIndex> {
    if corpus.is_empty() {
        return Err(Error::Contract("cannot index an empty corpus".into()));
    }
    let reps = encode_records(encoder, corpus, SequenceKind::Passage, normalize_tokens)?;
    let dim = encoder.config().d_model;
    let mut cls_matrix = Vec::with_capacity(reps.len() * dim);
    let mut store = Vec::with_capacity(if store_tokens { reps.len() } else { 0 });
    let mut passage_ids = Vec::with_capacity(reps.len());
    for r in reps {
        passage_ids.push(r.id);
        cls_matrix.extend_from_slice(&r.cls);
        if store_tokens {
            store.push(r.tokens);
        }
    }
    Ok(PassageIndex {
        passage_ids,
        dim,
        cls_matrix,
        token_store: store_tokens.then_some(store),
        normalized_tokens: normalize_tokens,
        fingerprint: encoder_fingerprint(encoder),
        corpus_hash: corpus_hash(corpus),
    })
}

/// Same accumulation order as the autodiff dot product.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// MaxSim with the accumulation order of the autodiff implementation.
pub fn maxsim(q_tokens: &[f64], p_tokens: &[f64], d: usize) -> f64 {
    let mut total = 0.0;
    for x in q_tokens.chunks(d) {
        let mut rows = p_tokens.chunks(d);
        let mut best = dot(x, rows.next().expect("nonempty passage"));
        for y in rows {
            let s = dot(x, y);
            if s > best {
                best = s;
            }
        }
        total += best;
    }
    total
}

impl PassageIndex {
    pub fn len(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passage_ids.is_empty()
    }

    pub fn check_encoder(&self, encoder: &Encoder) -> Result<()> {
        let fp = encoder_fingerprint(encoder);
        if fp != self.fingerprint {
            return Err(Error::Contract(format!(
                "index was built with encoder {} but queries use {}",
                &self.fingerprint[..12],
                &fp[..12]
            )));
        }
        Ok(())
    }

    /// Score of every passage, in index order.
    pub fn scores(&self, query: &DenseRep, scheme: Scheme) -> Result<Vec<f64>> {
        match scheme {
            Scheme::De => {
                if query.cls.len() != self.dim {
                    return Err(Error::Contract(format!(
                        "query dim {} vs index dim {}",
                        query.cls.len(),
                        self.dim
                    )));
                }
                Ok(self
                    .cls_matrix
                    .chunks(self.dim)
                    .map(|row| dot(&query.cls, row))
                    .collect())
            }
            Scheme::Li => {
                let store = self.token_store.as_ref().ok_or_else(|| {
                    Error::Contract("late-interaction retrieval needs a token store".into())
                })?;
                if query.tokens.is_empty() {
                    return Err(Error::Contract(format!(
                        "query {} has no content tokens",
                        query.id
                    )));
                }
                Ok(store
                    .iter()
                    .map(|p| maxsim(&query.tokens, p, self.dim))
                    .collect())
            }
            Scheme::Ce => Err(Error::Contract(
                "the index serves de and li retrieval only".into(),
            )),
        }
    }

    /// Exact top-k; ties go to the smaller passage id.
    pub fn retrieve_topk(&self, query: &DenseRep, k: usize, scheme: Scheme) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        let scores = self.scores(query, scheme)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(self.passage_ids[a].cmp(&self.passage_ids[b]))
        });
        let take = k.min(order.len());
        Ok(RankedList {
            query_id: query.id,
            entries: order[..take]
                .iter()
                .map(|&i| (self.passage_ids[i], scores[i]))
                .collect(),
            k,
            truncated: k > order.len(),
        })
    }

    /// Top-k for many queries, scored in parallel; output order follows input.
    pub fn retrieve_all(
        &self,
        queries: &[DenseRep],
        k: usize,
        scheme: Scheme,
    ) -> Result<Vec<RankedList>> {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| {
            queries
                .par_iter()
                .map(|q| self.retrieve_topk(q, k, scheme))
                .collect()
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let lengths: Vec<usize> = self
            .token_store
            .as_ref()
            .map(|s| s.iter().map(|t| t.len() / self.dim).collect())
            .unwrap_or_default();
        let meta = serde_json::json!({
            "passage_ids": self.passage_ids,
            "dim": self.dim,
            "fingerprint": self.fingerprint,
            "corpus_hash": self.corpus_hash,
            "normalized_tokens": self.normalized_tokens,
            "token_lengths": self.token_store.as_ref().map(|_| lengths),
        });
        let mut c = Container::new("index", meta);
        c.push("cls", &[self.len(), self.dim], self.cls_matrix.clone())?;
        if let Some(store) = &self.token_store {
            let flat: Vec<f64> = store.iter().flatten().copied().collect();
            c.push("tokens", &[flat.len() / self.dim.max(1), self.dim], flat)?;
        }
        Ok(c)
    }

    pub fn from_container(c: Container, corpus: &[Record]) -> Result<Self> {
        if c.kind != "index" {
            return Err(Error::Format(format!(
                "expected an index container, found {}",
                c.kind
            )));
        }
        #[derive(Deserialize)]
        struct Meta {
            passage_ids: Vec<u64>,
            dim: usize,
            fingerprint: String,
            corpus_hash: String,
            normalized_tokens: bool,
            token_lengths: Option<Vec<usize>>,
        }
        let meta: Meta =
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::Format(e.to_string()))?;
        let expected = corpus_hash(corpus);
        if meta.corpus_hash != expected {
            return Err(Error::Contract(format!(
                "index corpus hash {} does not match corpus {}",
                &meta.corpus_hash[..12],
                &expected[..12]
            )));
        }
        let cls = c.array("cls")?;
        if cls.dims != [meta.passage_ids.len(), meta.dim] {
            return Err(Error::Format(format!("cls array has dims {:?}", cls.dims)));
        }
        let token_store = match meta.token_lengths {
            None => None,
            Some(lengths) => {
                let flat = &c.array("tokens")?.values;
                if lengths.len() != meta.passage_ids.len()
                    || lengths.iter().sum::<usize>() * meta.dim != flat.len()
                {
                    return Err(Error::Format(
                        "token store does not match its lengths".into(),
                    ));
                }
                let mut off = 0;
                Some(
                    lengths
                        .iter()
                        .map(|&l| {
                            let s = flat[off..off + l * meta.dim].to_vec();
                            off += l * meta.dim;
                            s
                        })
                        .collect(),
                )
            }
        };
        Ok(Self {
            passage_ids: meta.passage_ids,
            dim: meta.dim,
            cls_matrix: cls.values.clone(),
            token_store,
            normalized_tokens: meta.normalized_tokens,
            fingerprint: meta.fingerprint,
            corpus_hash: meta.corpus_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path, corpus: &[Record]) -> Result<Self> {
        Self::from_container(Container::read(path)?, corpus)
    }
}

/// Reciprocal rank of the first relevant passage within the top `k`, else 0.
pub fn mrr_at_k(ranked: &RankedList, positives: &[PassageId], k: usize) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Contract(format!(
            "query {} has no positives",
            ranked.query_id
        )));
    }
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    Ok(ranked
        .entries
        .iter()
        .take(k)
        .position(|(id, _)| positives.contains(id))
        .map_or(0.0, |r| 1.0 / (r + 1) as f64))
}

/// Fraction of queries with at least one relevant passage in the top `k`.
pub fn recall_at_k(
    ranked: &[RankedList],
    positives: &BTreeMap<QueryId, Vec<PassageId>>,
    k: usize,
) -> Result<f64> {
    if ranked.is_empty() {
        return Err(Error::Contract("recall over an empty query set".into()));
    }
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    let mut hits = 0usize;
    for r in ranked {
        let pos = positives
            .get(&r.query_id)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Contract(format!("query {} has no positives", r.query_id)))?;
        if r.entries.iter().take(k).any(|(id, _)| pos.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Mean MRR@k over queries (misses count as 0).
pub fn mean_mrr(
    ranked: &[RankedList],
    positives: &BTreeMap<QueryId, Vec<PassageId>>,
    k: usize,
) -> Result<f64> {
    if ranked.is_empty() {
        return Err(Error::Contract("MRR over an empty query set".into()));
    }
    let mut total = 0.0;
    for r in ranked {
        let pos = positives.get(&r.query_id).map(Vec::as_slice).unwrap_or(&[]);
        total += mrr_at_k(r, pos, k)?;
    }
    Ok(total / ranked.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scheme: Scheme,
    pub n_queries: usize,
    pub mrr_cutoff: usize,
    pub mrr: f64,
    /// Recall keyed by (clamped) cutoff.
    pub recall: BTreeMap<usize, f64>,
}

/// Clamps recall cutoffs to the corpus size, dropping duplicates.
pub fn clamp_cutoffs(cutoffs: &[usize], corpus_size: usize) -> Vec<usize> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for &c in cutoffs {
        let k = if c > corpus_size {
            log::warn!("recall cutoff {c} exceeds corpus size {corpus_size}; clamped");
            corpus_size
        } else {
            c
        };
        if seen.insert(k) {
            out.push(k);
        }
    }
    out
}

/// Encodes a split's queries and reports MRR and recall against the index.
pub fn evaluate(
    encoder: &Encoder,
    index: &PassageIndex,
    split: &Split,
    scheme: Scheme,
    mrr_cutoff: usize,
    recall_cutoffs: &[usize],
) -> Result<Metrics> {
    index.check_encoder(encoder)?;
    if split.queries.is_empty() {
        return Err(Error::Contract("evaluation split has no queries".into()));
    }
    let cutoffs = clamp_cutoffs(recall_cutoffs, index.len());
    let depth = cutoffs
        .iter()
        .copied()
        .chain([mrr_cutoff])
        .max()
        .unwrap_or(mrr_cutoff);
    let reps = encode_records(
        encoder,
        &split.queries,
        SequenceKind::Query,
        index.normalized_tokens,
    )?;
    let ranked = index.retrieve_all(&reps, depth, scheme)?;
    let positives = split.positives();
    let mut recall = BTreeMap::new();
    for &k in &cutoffs {
        recall.insert(k, recall_at_k(&ranked, &positives, k)?);
    }
    Ok(Metrics {
        scheme,
        n_queries: ranked.len(),
        mrr_cutoff,
        mrr: mean_mrr(&ranked, &positives, mrr_cutoff)?,
        recall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn ranked(qid: u64, ids: &[u64]) -> RankedList {
        RankedList {
            query_id: qid,
            entries: ids.iter().map(|&i| (i, 0.0)).collect(),
            k: ids.len(),
            truncated: false,
        }
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr_at_k(&ranked(0, &[5, 1, 2]), &[5], 10).unwrap(), 1.0);
        assert_eq!(
            mrr_at_k(&ranked(0, &[1, 2, 3, 5, 6]), &[5], 10).unwrap(),
            0.25
        );
        let eleven: Vec<u64> = (0..11).collect();
        assert_eq!(mrr_at_k(&ranked(0, &eleven), &[10], 10).unwrap(), 0.0);
        assert!(mrr_at_k(&ranked(0, &[1]), &[], 10).is_err());
    }

    #[test]
    fn recall_examples() {
        let lists = vec![ranked(0, &[1, 2]), ranked(1, &[3, 4]), ranked(2, &[5, 6])];
        let mut pos = BTreeMap::new();
        pos.insert(0, vec![1]);
        pos.insert(1, vec![4]);
        pos.insert(2, vec![9]);
        assert!((recall_at_k(&lists, &pos, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((recall_at_k(&lists, &pos, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(recall_at_k(&[], &pos, 1).is_err());
    }

    #[test]
    fn cutoffs_clamp() {
        assert_eq!(
            clamp_cutoffs(&[5, 20, 50, 100, 1000], 60),
            vec![5, 20, 50, 60]
        );
    }

    fn setup() -> (Encoder, Vec<Record>) {
        let cfg = EncoderConfig {
            vocab_size: 40,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 16,
            dropout_p: 0.1,
        };
        let enc = Encoder::new(cfg, &mut RngState::new(1)).unwrap();
        let mut rng = RngState::new(2);
        let corpus = (0..10)
            .map(|i| Record {
                id: 100 + i,
                token_ids: (0..2 + rng.below(5))
                    .map(|_| 3 + rng.below(37) as u32)
                    .collect(),
            })
            .collect();
        (enc, corpus)
    }

    #[test]
    fn index_bookkeeping_and_determinism() {
        let (enc, corpus) = setup();
        let a = build_index(&enc, &corpus, true, false).unwrap();
        let b = build_index(&enc, &corpus, true, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cls_matrix.len(), 10 * 8);
        for (store, rec) in a.token_store.as_ref().unwrap().iter().zip(&corpus) {
            assert_eq!(store.len(), rec.token_ids.len() * 8);
        }
        let one = build_index(&enc, &corpus[..1], false, false).unwrap();
        assert_eq!(one.cls_matrix.len(), 8);
        assert!(one.token_store.is_none());
        let bad = vec![Record {
            id: 7,
            token_ids: vec![55],
        }];
        assert!(matches!(
            build_index(&enc, &bad, false, false),
            Err(Error::Vocabulary { id: 55, .. })
        ));
    }

    #[test]
    fn retrieval_matches_single_sequence_scoring() {
        use crate::interaction::{late_score, metric_score};
        let (enc, corpus) = setup();
        let index = build_index(&enc, &corpus, true, false).unwrap();
        let query = Record {
            id: 1,
            token_ids: vec![4, 9, 20],
        };
        let rep = encode_records(
            &enc,
            std::slice::from_ref(&query),
            SequenceKind::Query,
            false,
        )
        .unwrap()
        .remove(0);
        let mut rng = RngState::new(0);
        let qe = enc
            .encode(&query.sequence(SequenceKind::Query), &mut rng, false)
            .unwrap();
        for scheme in [Scheme::De, Scheme::Li] {
            let full = index.retrieve_topk(&rep, 10, scheme).unwrap();
            let mut oracle: Vec<(u64, f64)> = corpus
                .iter()
                .map(|p| {
                    let pe = enc
                        .encode(&p.sequence(SequenceKind::Passage), &mut rng, false)
                        .unwrap();
                    let s = match scheme {
                        Scheme::De => metric_score(&qe, &pe).unwrap().item(),
                        _ => late_score(&qe, &pe).unwrap().item(),
                    };
                    (p.id, s)
                })
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            assert_eq!(full.ids(), oracle.iter().map(|o| o.0).collect::<Vec<_>>());
            for (got, want) in full.entries.iter().zip(&oracle) {
                assert!((got.1 - want.1).abs() < 1e-9);
            }
            let top3 = index.retrieve_topk(&rep, 3, scheme).unwrap();
            assert_eq!(top3.ids(), full.ids()[..3].to_vec());
            let over = index.retrieve_topk(&rep, 15, scheme).unwrap();
            assert!(over.truncated && over.entries.len() == 10);
        }
        let no_tokens = build_index(&enc, &corpus, false, false).unwrap();
        assert!(no_tokens.retrieve_topk(&rep, 3, Scheme::Li).is_err());
    }

    #[test]
    fn index_persistence_checks_corpus() {
        let (enc, corpus) = setup();
        let index = build_index(&enc, &corpus, true, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        index.save(&path).unwrap();
        assert_eq!(PassageIndex::load(&path, &corpus).unwrap(), index);
        let mut other = corpus.clone();
        other[0].token_ids[0] += 1;
        assert!(matches!(
            PassageIndex::load(&path, &other),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fingerprint_mismatch_is_refused() {
        let (enc, corpus) = setup();
        let index = build_index(&enc, &corpus, false, false).unwrap();
        let other = Encoder::new(enc.config().clone(), &mut RngState::new(99)).unwrap();
        assert!(index.check_encoder(&other).is_err());
    }
}
