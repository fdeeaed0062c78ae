//! Synthetic retrieval tasks and the on-disk formats for corpora, queries and
//! relevance judgements.
//!
//! Corpus and query files hold one JSON object per line with an `id` and the
//! content `token_ids` (no special tokens). Qrels are tab-separated
//! `query_id passage_id relevance` lines.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use kd_autograd::RngState;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::{PassageId, QueryId};
use crate::tokens::{SequenceKind, TokenSequence, FIRST_CONTENT_ID};

/// A passage or query: an id and its content tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub token_ids: Vec<u32>,
}

impl Record {
    pub fn sequence(&self, kind: SequenceKind) -> TokenSequence {
        TokenSequence::from_content(&self.token_ids, kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Qrel {
    pub query_id: QueryId,
    pub passage_id: PassageId,
    pub relevance: u32,
}

/// Queries of one split with their judgements.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub queries: Vec<Record>,
    pub qrels: Vec<Qrel>,
}

impl Split {
    /// Relevant passages per query.
    pub fn positives(&self) -> BTreeMap<QueryId, Vec<PassageId>> {
        let mut map: BTreeMap<QueryId, Vec<PassageId>> = BTreeMap::new();
        for q in &self.qrels {
            if q.relevance > 0 {
                map.entry(q.query_id).or_default().push(q.passage_id);
            }
        }
        map
    }

    /// The single gold passage of each query, in query order.
    pub fn gold(&self) -> Result<Vec<PassageId>> {
        let pos = self.positives();
        self.queries
            .iter()
            .map(|q| match pos.get(&q.id).map(Vec::as_slice) {
                Some([p]) => Ok(*p),
                Some(ps) => Err(Error::Contract(format!(
                    "query {} has {} positives, expected one",
                    q.id,
                    ps.len()
                ))),
                None => Err(Error::Contract(format!("query {} has no positive", q.id))),
            })
            .collect()
    }

    /// Checks that qrels reference existing queries and passages.
    pub fn validate(&self, corpus: &[Record]) -> Result<()> {
        let qids: HashSet<u64> = self.queries.iter().map(|q| q.id).collect();
        let pids: HashSet<u64> = corpus.iter().map(|p| p.id).collect();
        for r in &self.qrels {
            if !qids.contains(&r.query_id) {
                return Err(Error::Contract(format!(
                    "qrel references unknown query {}",
                    r.query_id
                )));
            }
            if !pids.contains(&r.passage_id) {
                return Err(Error::Contract(format!(
                    "qrel references unknown passage {}",
                    r.passage_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskData {
    pub corpus: Vec<Record>,
    pub train: Split,
    pub dev: Split,
    pub test: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub n_topics: usize,
    pub passages_per_topic: usize,
    /// Inclusive content-length range of passages.
    pub passage_len: (usize, usize),
    /// Inclusive content-length range of queries.
    pub query_len: (usize, usize),
    /// Fraction of query tokens drawn from outside the gold passage's topic.
    pub query_noise_rate: f64,
    /// Size of the topic-independent word pool.
    pub n_background_words: usize,
    /// Fraction of passage tokens drawn from the background pool.
    pub background_rate: f64,
    /// Zipf exponent of word frequencies within a topic.
    pub zipf_exponent: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            n_topics: 50,
            passages_per_topic: 40,
            passage_len: (16, 32),
            query_len: (4, 8),
            query_noise_rate: 0.1,
            n_background_words: 200,
            background_rate: 0.3,
            zipf_exponent: 1.0,
            n_train: 400,
            n_dev: 100,
            n_test: 100,
            seed: 17,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn corpus_size(&self) -> usize {
        self.n_topics * self.passages_per_topic
    }

    fn topic_block(&self) -> usize {
        let content = self
            .vocab_size
            .saturating_sub(FIRST_CONTENT_ID as usize + self.n_background_words);
        content / self.n_topics.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::TaskSpec(m));
        if self.n_topics == 0 || self.passages_per_topic == 0 {
            return bad("need at least one topic and one passage per topic".into());
        }
        if self.topic_block() < 2 {
            return bad(format!(
                "vocabulary of {} leaves fewer than 2 words for each of {} topics",
                self.vocab_size, self.n_topics
            ));
        }
        if self.vocab_size > u32::MAX as usize {
            return bad("vocabulary too large".into());
        }
        let (pl, ph) = self.passage_len;
        let (ql, qh) = self.query_len;
        if pl == 0 || pl > ph || ql == 0 || ql > qh {
            return bad(format!(
                "invalid length ranges {:?} / {:?}",
                self.passage_len, self.query_len
            ));
        }
        if !(0.0..1.0).contains(&self.query_noise_rate) {
            return bad(format!(
                "query_noise_rate {} not in [0, 1)",
                self.query_noise_rate
            ));
        }
        if !(0.0..1.0).contains(&self.background_rate)
            || (self.background_rate > 0.0 && self.n_background_words == 0)
        {
            return bad(format!("background_rate {} unusable", self.background_rate));
        }
        let n_queries = self.n_train + self.n_dev + self.n_test;
        if n_queries == 0 || n_queries > self.corpus_size() {
            return bad(format!(
                "{n_queries} queries need distinct gold passages but the corpus has {}",
                self.corpus_size()
            ));
        }
        Ok(())
    }

    /// Longest content a generated passage or query can have.
    pub fn max_content_len(&self) -> usize {
        self.passage_len.1.max(self.query_len.1)
    }
}

fn weighted_pick(cumulative: &[f64], rng: &mut RngState) -> usize {
    let total = *cumulative.last().expect("nonempty weights");
    let u = rng.uniform() * total;
    cumulative
        .iter()
        .position(|&c| u < c)
        .unwrap_or(cumulative.len() - 1)
}

/// Builds a corpus and query splits. Each passage mixes Zipf-weighted words of
/// its topic with background words; each query samples distinct positions of
/// its gold passage and replaces a fraction of them with off-topic words.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let root = RngState::new(spec.seed);
    let block = spec.topic_block();
    let bg_start = FIRST_CONTENT_ID as usize;
    let topic_start = bg_start + spec.n_background_words;
    let mut cumulative = Vec::with_capacity(block);
    let mut acc = 0.0;
    for r in 0..block {
        acc += 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent);
        cumulative.push(acc);
    }

    let mut rng = root.split(1);
    let mut corpus = Vec::with_capacity(spec.corpus_size());
    let mut topic_of = Vec::with_capacity(spec.corpus_size());
    for t in 0..spec.n_topics {
        for _ in 0..spec.passages_per_topic {
            let len = spec.passage_len.0 + rng.below(spec.passage_len.1 - spec.passage_len.0 + 1);
            let tokens = (0..len)
                .map(|_| {
                    if rng.uniform() < spec.background_rate {
                        (bg_start + rng.below(spec.n_background_words)) as u32
                    } else {
                        (topic_start + t * block + weighted_pick(&cumulative, &mut rng)) as u32
                    }
                })
                .collect();
            corpus.push(Record {
                id: corpus.len() as u64,
                token_ids: tokens,
            });
            topic_of.push(t);
        }
    }

    let mut rng = root.split(2);
    let n_queries = spec.n_train + spec.n_dev + spec.n_test;
    let golds = rng.sample_indices(corpus.len(), n_queries);
    let content_hi = topic_start + spec.n_topics * block;
    let mut splits = [Split::default(), Split::default(), Split::default()];
    for (qi, &g) in golds.iter().enumerate() {
        let gold = &corpus[g];
        let want = spec.query_len.0 + rng.below(spec.query_len.1 - spec.query_len.0 + 1);
        let len = want.min(gold.token_ids.len());
        let positions = rng.sample_indices(gold.token_ids.len(), len);
        let own = topic_start + topic_of[g] * block..topic_start + (topic_of[g] + 1) * block;
        let tokens = positions
            .iter()
            .map(|&p| {
                if rng.uniform() < spec.query_noise_rate {
                    loop {
                        let w = topic_start + rng.below(content_hi - topic_start);
                        if !own.contains(&w) {
                            break w as u32;
                        }
                    }
                } else {
                    gold.token_ids[p]
                }
            })
            .collect();
        let split = if qi < spec.n_train {
            0
        } else if qi < spec.n_train + spec.n_dev {
            1
        } else {
            2
        };
        let id = qi as u64;
        splits[split].queries.push(Record {
            id,
            token_ids: tokens,
        });
        splits[split].qrels.push(Qrel {
            query_id: id,
            passage_id: gold.id,
            relevance: 1,
        });
    }
    let [train, dev, test] = splits;
    Ok(TaskData {
        corpus,
        train,
        dev,
        test,
    })
}

/// Self-supervised queries: each samples `len` distinct positions of a
/// uniformly chosen passage, which becomes its single positive. Query ids are
/// `0..n`.
pub fn pseudo_queries(
    corpus: &[Record],
    n: usize,
    len: (usize, usize),
    rng: &mut RngState,
) -> Result<Split> {
    if corpus.is_empty() || len.0 == 0 || len.0 > len.1 {
        return Err(Error::Config(format!(
            "cannot draw pseudo-queries of length {len:?} from {} passages",
            corpus.len()
        )));
    }
    let mut split = Split::default();
    for i in 0..n as u64 {
        let gold = &corpus[rng.below(corpus.len())];
        let want = len.0 + rng.below(len.1 - len.0 + 1);
        let positions = rng.sample_indices(gold.token_ids.len(), want.min(gold.token_ids.len()));
        split.queries.push(Record {
            id: i,
            token_ids: positions.iter().map(|&p| gold.token_ids[p]).collect(),
        });
        split.qrels.push(Qrel {
            query_id: i,
            passage_id: gold.id,
            relevance: 1,
        });
    }
    Ok(split)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id) {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("duplicate id {}", rec.id),
            });
        }
        if rec.token_ids.is_empty() || rec.token_ids.iter().any(|&t| t < FIRST_CONTENT_ID) {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                message: "token_ids must be nonempty content ids".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_qrels(path: &Path, qrels: &[Qrel]) -> Result<()> {
    let mut text = String::new();
    for q in qrels {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            q.query_id, q.passage_id, q.relevance
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_qrels(path: &Path) -> Result<Vec<Qrel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| parse_err(format!("{s:?}: {e}")))
        };
        out.push(Qrel {
            query_id: num(fields[0])?,
            passage_id: num(fields[1])?,
            relevance: num(fields[2])? as u32,
        });
    }
    Ok(out)
}

/// File names used inside a data directory.
pub mod layout {
    pub const CORPUS: &str = "corpus.jsonl";

    pub fn queries(split: &str) -> String {
        format!("queries.{split}.jsonl")
    }

    pub fn qrels(split: &str) -> String {
        format!("qrels.{split}.tsv")
    }
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

impl TaskData {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_records(&dir.join(layout::CORPUS), &self.corpus)?;
        for name in SPLITS {
            let s = self.split(name)?;
            write_records(&dir.join(layout::queries(name)), &s.queries)?;
            write_qrels(&dir.join(layout::qrels(name)), &s.qrels)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let corpus = read_records(&dir.join(layout::CORPUS))?;
        let mut splits = Vec::new();
        for name in SPLITS {
            let queries_path = dir.join(layout::queries(name));
            let split = if queries_path.exists() {
                Split {
                    queries: read_records(&queries_path)?,
                    qrels: read_qrels(&dir.join(layout::qrels(name)))?,
                }
            } else {
                Split::default()
            };
            split.validate(&corpus)?;
            splits.push(split);
        }
        let test = splits.pop().unwrap_or_default();
        let dev = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Ok(Self {
            corpus,
            train,
            dev,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            vocab_size: 200,
            n_topics: 5,
            passages_per_topic: 10,
            n_background_words: 40,
            n_train: 20,
            n_dev: 10,
            n_test: 5,
            ..SyntheticTaskSpec::default()
        }
    }

    #[test]
    fn noise_free_queries_come_from_gold() {
        let spec = SyntheticTaskSpec {
            query_noise_rate: 0.0,
            ..small()
        };
        let task = generate_task(&spec).unwrap();
        assert_eq!(task.corpus.len(), 50);
        for split in [&task.train, &task.dev, &task.test] {
            let gold = split.gold().unwrap();
            for (q, g) in split.queries.iter().zip(gold) {
                let passage = &task.corpus[g as usize].token_ids;
                assert!(q.token_ids.iter().all(|t| passage.contains(t)));
            }
        }
    }

    #[test]
    fn vocabulary_too_small() {
        let spec = SyntheticTaskSpec {
            vocab_size: 60,
            n_topics: 20,
            n_background_words: 40,
            ..small()
        };
        assert!(matches!(generate_task(&spec), Err(Error::TaskSpec(_))));
        let spec = SyntheticTaskSpec {
            query_noise_rate: 1.0,
            ..small()
        };
        assert!(matches!(generate_task(&spec), Err(Error::TaskSpec(_))));
    }

    #[test]
    fn ids_in_range_and_one_positive() {
        let spec = small();
        let task = generate_task(&spec).unwrap();
        for r in task.corpus.iter().chain(&task.train.queries) {
            assert!(r
                .token_ids
                .iter()
                .all(|&t| t >= FIRST_CONTENT_ID && (t as usize) < spec.vocab_size));
        }
        for s in [&task.train, &task.dev, &task.test] {
            assert_eq!(s.gold().unwrap().len(), s.queries.len());
            s.validate(&task.corpus).unwrap();
        }
        assert_eq!(task.train.queries.len(), 20);
    }

    #[test]
    fn files_are_deterministic_and_round_trip() {
        let task = generate_task(&small()).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        task.save(a.path()).unwrap();
        generate_task(&small()).unwrap().save(b.path()).unwrap();
        for name in [
            layout::CORPUS.to_string(),
            layout::queries("dev"),
            layout::qrels("train"),
        ] {
            assert_eq!(
                fs::read(a.path().join(&name)).unwrap(),
                fs::read(b.path().join(&name)).unwrap()
            );
        }
        assert_eq!(TaskData::load(a.path()).unwrap(), task);
    }

    #[test]
    fn malformed_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.tsv");
        fs::write(&p, "1\t2\t1\n3\t4\n").unwrap();
        assert!(matches!(read_qrels(&p), Err(Error::Parse { line: 2, .. })));
        let p = dir.path().join("c.jsonl");
        fs::write(
            &p,
            "{\"id\":1,\"token_ids\":[5]}\n{\"id\":1,\"token_ids\":[6]}\n",
        )
        .unwrap();
        assert!(matches!(
            read_records(&p),
            Err(Error::Parse { line: 2, .. })
        ));
        fs::write(&p, "{\"id\":1,\"token_ids\":[1]}\n").unwrap();
        assert!(read_records(&p).is_err());
    }

    #[test]
    fn pseudo_queries_sample_their_passage() {
        let task = generate_task(&small()).unwrap();
        let a = pseudo_queries(&task.corpus, 30, (2, 4), &mut RngState::new(3)).unwrap();
        let b = pseudo_queries(&task.corpus, 30, (2, 4), &mut RngState::new(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.queries.len(), 30);
        a.validate(&task.corpus).unwrap();
        for (q, g) in a.queries.iter().zip(a.gold().unwrap()) {
            let passage = &task.corpus[g as usize].token_ids;
            assert!((2..=4).contains(&q.token_ids.len()) || q.token_ids.len() == passage.len());
            assert!(q.token_ids.iter().all(|t| passage.contains(t)));
        }
        assert!(pseudo_queries(&task.corpus, 3, (0, 2), &mut RngState::new(3)).is_err());
    }
}
