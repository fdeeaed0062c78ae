//! Per-query candidate lists for a training batch, with optional cross-batch
//! gathering over simulated shards.

use std::collections::HashMap;

use crate::interaction::PassageId;

/// Candidate layout of one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryCandidates {
    /// Passage ids, positive first.
    pub ids: Vec<PassageId>,
    /// Columns of the batch passage pool, aligned with `ids`.
    pub pool_columns: Vec<usize>,
    pub positive_index: usize,
    /// Prefix of `ids` used by distillation terms.
    pub distill_len: usize,
}

/// Candidate lists of a whole batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchCandidates {
    /// Distinct passages to encode, in first-appearance order.
    pub pool: Vec<PassageId>,
    pub queries: Vec<QueryCandidates>,
    /// Duplicate ids dropped while building the lists.
    pub duplicates: usize,
}

/// How a batch's lists are assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateMode {
    pub cross_batch: bool,
    /// Distil over the full gathered list instead of the local shard's.
    pub id_prime: bool,
    pub n_shards: usize,
}

/// Contiguous near-equal partition of `n` queries into `shards` ranges.
pub fn shard_ranges(n: usize, shards: usize) -> Vec<std::ops::Range<usize>> {
    let shards = shards.max(1);
    let base = n / shards;
    let extra = n % shards;
    let mut start = 0;
    (0..shards)
        .map(|s| {
            let len = base + usize::from(s < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Builds the lists. `own[i]` is query `i`'s positive followed by its explicit
/// negatives.
///
/// Without cross-batch gathering each query sees only its own passages. With
/// it, a query's list is its own passages, then the rest of its shard's, then
/// every other shard's; plain interaction distillation uses the prefix that
/// ends with the local shard, while the primed variant uses the whole list.
pub fn build_candidate_lists(own: &[Vec<PassageId>], mode: CandidateMode) -> BatchCandidates {
    let mut pool = Vec::new();
    let mut column: HashMap<PassageId, usize> = HashMap::new();
    let mut duplicates = 0;
    let mut queries = Vec::with_capacity(own.len());
    let shards = shard_ranges(own.len(), mode.n_shards);
    let shard_of = |q: usize| shards.iter().position(|r| r.contains(&q)).unwrap_or(0);

    for (qi, items) in own.iter().enumerate() {
        let mut ids = Vec::new();
        let mut push_all = |src: &[PassageId], ids: &mut Vec<PassageId>| {
            for &p in src {
                if ids.contains(&p) {
                    duplicates += 1;
                } else {
                    ids.push(p);
                }
            }
        };
        push_all(items, &mut ids);
        let mut distill_len = ids.len();
        if mode.cross_batch {
            let local = shard_of(qi);
            for other in shards[local].clone().filter(|&o| o != qi) {
                push_all(&own[other], &mut ids);
            }
            distill_len = ids.len();
            for (s, range) in shards.iter().enumerate() {
                if s != local {
                    for other in range.clone() {
                        push_all(&own[other], &mut ids);
                    }
                }
            }
            if mode.id_prime {
                distill_len = ids.len();
            }
        }
        let pool_columns = ids
            .iter()
            .map(|&p| {
                *column.entry(p).or_insert_with(|| {
                    pool.push(p);
                    pool.len() - 1
                })
            })
            .collect();
        queries.push(QueryCandidates {
            ids,
            pool_columns,
            positive_index: 0,
            distill_len,
        });
    }
    BatchCandidates {
        pool,
        queries,
        duplicates,
    }
}
