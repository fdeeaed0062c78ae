//! Training examples: random negatives for the first training stage and
//! retriever-mined hard negatives for the second.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use kd_autograd::RngState;
use serde::{Deserialize, Serialize};

use crate::data::{Record, Split};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::interaction::{PassageId, QueryId, Scheme};
use crate::retrieval::{build_index, encode_records, PassageIndex};
use crate::tokens::{SequenceKind, TokenSequence};

/// A query with one positive and its negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub query_id: QueryId,
    pub query: TokenSequence,
    pub positive_id: PassageId,
    pub positive: TokenSequence,
    pub negative_ids: Vec<PassageId>,
    pub negatives: Vec<TokenSequence>,
}

/// Compact on-disk form: ids only, resolved against corpus and queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleIds {
    pub query_id: QueryId,
    pub positive_id: PassageId,
    pub negative_ids: Vec<PassageId>,
}

impl TrainingExample {
    pub fn ids(&self) -> ExampleIds {
        ExampleIds {
            query_id: self.query_id,
            positive_id: self.positive_id,
            negative_ids: self.negative_ids.clone(),
        }
    }

    /// Positive followed by negatives.
    pub fn passage_ids(&self) -> Vec<PassageId> {
        std::iter::once(self.positive_id)
            .chain(self.negative_ids.iter().copied())
            .collect()
    }
}

/// Lookup of passages and queries by id.
pub struct Catalog<'a> {
    corpus: &'a [Record],
    by_id: HashMap<PassageId, usize>,
}

impl<'a> Catalog<'a> {
    pub fn new(corpus: &'a [Record]) -> Self {
        Self {
            corpus,
            by_id: corpus.iter().enumerate().map(|(i, r)| (r.id, i)).collect(),
        }
    }

    pub fn passage(&self, id: PassageId) -> Result<&'a Record> {
        self.by_id
            .get(&id)
            .map(|&i| &self.corpus[i])
            .ok_or_else(|| Error::Contract(format!("unknown passage {id}")))
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    pub fn example(&self, query: &Record, ids: ExampleIds) -> Result<TrainingExample> {
        if ids.negative_ids.contains(&ids.positive_id) {
            return Err(Error::Contract(format!(
                "query {}: positive {} listed among negatives",
                ids.query_id, ids.positive_id
            )));
        }
        let negatives = ids
            .negative_ids
            .iter()
            .map(|&p| Ok(self.passage(p)?.sequence(SequenceKind::Passage)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingExample {
            query_id: query.id,
            query: query.sequence(SequenceKind::Query),
            positive_id: ids.positive_id,
            positive: self
                .passage(ids.positive_id)?
                .sequence(SequenceKind::Passage),
            negative_ids: ids.negative_ids,
            negatives,
        })
    }
}

fn sample_excluding(
    pool: &[PassageId],
    exclude: PassageId,
    n: usize,
    rng: &mut RngState,
) -> Vec<PassageId> {
    let candidates: Vec<PassageId> = pool.iter().copied().filter(|&p| p != exclude).collect();
    rng.sample_indices(candidates.len(), n.min(candidates.len()))
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// `n` negatives per query drawn uniformly from the corpus.
pub fn random_negatives(
    corpus: &[Record],
    split: &Split,
    n: usize,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    let catalog = Catalog::new(corpus);
    if corpus.len() <= n {
        return Err(Error::Config(format!(
            "corpus of {} cannot supply {n} negatives",
            corpus.len()
        )));
    }
    let all: Vec<PassageId> = corpus.iter().map(|r| r.id).collect();
    let root = RngState::new(seed);
    let gold = split.gold()?;
    split
        .queries
        .iter()
        .zip(gold)
        .map(|(q, pos)| {
            let mut rng = root.split(q.id);
            let negative_ids = sample_excluding(&all, pos, n, &mut rng);
            catalog.example(
                q,
                ExampleIds {
                    query_id: q.id,
                    positive_id: pos,
                    negative_ids,
                },
            )
        })
        .collect()
}

/// Hard negatives: the retriever's top `top_m` passages by dual-encoder score,
/// minus the positive, sampled down to `n` without replacement. When fewer
/// than `n` remain the whole corpus is sampled instead.
pub fn mine_negatives(
    encoder: &Encoder,
    corpus: &[Record],
    split: &Split,
    top_m: usize,
    n: usize,
    rng: &RngState,
) -> Result<Vec<TrainingExample>> {
    let index = build_index(encoder, corpus, false, false)?;
    mine_with_index(encoder, &index, corpus, split, top_m, n, rng)
}

pub fn mine_with_index(
    encoder: &Encoder,
    index: &PassageIndex,
    corpus: &[Record],
    split: &Split,
    top_m: usize,
    n: usize,
    rng: &RngState,
) -> Result<Vec<TrainingExample>> {
    if n == 0 || top_m == 0 {
        return Err(Error::Config(
            "top_m and the negative count must be positive".into(),
        ));
    }
    if corpus.len() <= n {
        return Err(Error::Config(format!(
            "corpus of {} cannot supply {n} negatives",
            corpus.len()
        )));
    }
    index.check_encoder(encoder)?;
    let catalog = Catalog::new(corpus);
    let gold = split.gold()?;
    let reps = encode_records(encoder, &split.queries, SequenceKind::Query, false)?;
    let ranked = index.retrieve_all(&reps, top_m, Scheme::De)?;
    let all: Vec<PassageId> = corpus.iter().map(|r| r.id).collect();
    let mut fallbacks = 0;
    let out = split
        .queries
        .iter()
        .zip(gold)
        .zip(ranked)
        .map(|((q, pos), list)| {
            let mut qrng = rng.split(q.id);
            let top: Vec<PassageId> = list.ids().into_iter().filter(|&p| p != pos).collect();
            let negative_ids = if top.len() >= n {
                sample_excluding(&top, pos, n, &mut qrng)
            } else {
                fallbacks += 1;
                sample_excluding(&all, pos, n, &mut qrng)
            };
            catalog.example(
                q,
                ExampleIds {
                    query_id: q.id,
                    positive_id: pos,
                    negative_ids,
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    if fallbacks > 0 {
        log::warn!("{fallbacks} queries had fewer than {n} mined candidates; sampled from the whole corpus");
    }
    Ok(out)
}

pub fn write_examples(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    let mut text = String::new();
    for e in examples {
        text.push_str(&serde_json::to_string(&e.ids()).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_examples(
    path: &Path,
    corpus: &[Record],
    queries: &[Record],
) -> Result<Vec<TrainingExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let catalog = Catalog::new(corpus);
    let by_id: HashMap<QueryId, &Record> = queries.iter().map(|q| (q.id, q)).collect();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let ids: ExampleIds = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.into(),
                line: i + 1,
                message: e.to_string(),
            })?;
            let q = by_id
                .get(&ids.query_id)
                .ok_or_else(|| Error::Contract(format!("unknown query {}", ids.query_id)))?;
            catalog.example(q, ids)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_task, SyntheticTaskSpec};
    use crate::encoder::EncoderConfig;

    fn task(passages_per_topic: usize) -> crate::data::TaskData {
        generate_task(&SyntheticTaskSpec {
            vocab_size: 200,
            n_topics: 4,
            passages_per_topic,
            n_background_words: 40,
            n_train: 6,
            n_dev: 2,
            n_test: 0,
            ..SyntheticTaskSpec::default()
        })
        .unwrap()
    }

    fn encoder() -> Encoder {
        let cfg = EncoderConfig {
            vocab_size: 200,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 40,
            dropout_p: 0.1,
        };
        Encoder::new(cfg, &mut RngState::new(5)).unwrap()
    }

    #[test]
    fn mined_examples_exclude_positive_and_are_deterministic() {
        let t = task(10);
        let enc = encoder();
        let a = mine_negatives(&enc, &t.corpus, &t.train, 16, 7, &RngState::new(3)).unwrap();
        let b = mine_negatives(&enc, &t.corpus, &t.train, 16, 7, &RngState::new(3)).unwrap();
        assert_eq!(a, b);
        for e in &a {
            assert_eq!(e.negative_ids.len(), 7);
            assert!(!e.negative_ids.contains(&e.positive_id));
            let mut ids = e.negative_ids.clone();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 7);
        }
    }

    #[test]
    fn exhaustion_uses_every_other_passage() {
        let t = task(2);
        let enc = encoder();
        let n = t.corpus.len() - 1;
        let ex = mine_negatives(&enc, &t.corpus, &t.train, 256, n, &RngState::new(1)).unwrap();
        for e in ex {
            let mut got = e.negative_ids.clone();
            got.sort_unstable();
            let want: Vec<u64> = t
                .corpus
                .iter()
                .map(|r| r.id)
                .filter(|&p| p != e.positive_id)
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn fallback_when_top_list_is_short() {
        let t = task(10);
        let enc = encoder();
        let ex = mine_negatives(&enc, &t.corpus, &t.train, 3, 7, &RngState::new(1)).unwrap();
        assert!(ex
            .iter()
            .all(|e| e.negative_ids.len() == 7 && !e.negative_ids.contains(&e.positive_id)));
    }

    #[test]
    fn random_negatives_and_files() {
        let t = task(10);
        let ex = random_negatives(&t.corpus, &t.train, 5, 9).unwrap();
        assert_eq!(ex, random_negatives(&t.corpus, &t.train, 5, 9).unwrap());
        assert!(ex
            .iter()
            .all(|e| e.negative_ids.len() == 5 && !e.negative_ids.contains(&e.positive_id)));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ex.jsonl");
        write_examples(&p, &ex).unwrap();
        assert_eq!(read_examples(&p, &t.corpus, &t.train.queries).unwrap(), ex);
    }
}
