use kd_autograd::{RngState, Tensor};
use kd_core::data::{generate_task, SyntheticTaskSpec, TaskData};
use kd_core::encoder::{CrossEncoder, Encoder, EncoderConfig};
use kd_core::interaction::PassageId;
use kd_core::losses::{LossConfig, LossFlags, LossTerm};
use kd_core::tokens::{SequenceKind, TokenSequence};
use kd_core::trainer::{
    batch_loss, build_candidate_lists, dual_reg_forward, random_negatives, train_cascade,
    train_interaction_distillation, CandidateMode, Step, TrainConfig, TrainingExample,
};
use kd_core::Error;

fn task() -> TaskData {
    generate_task(&SyntheticTaskSpec {
        vocab_size: 160,
        n_topics: 6,
        passages_per_topic: 10,
        n_background_words: 30,
        passage_len: (4, 8),
        query_len: (2, 4),
        n_train: 16,
        n_dev: 4,
        n_test: 0,
        ..SyntheticTaskSpec::default()
    })
    .unwrap()
}

fn enc_cfg(dropout_p: f64) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 160,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_len: 24,
        dropout_p,
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        batch_queries: 4,
        n_negatives: 3,
        epochs: 2,
        ..TrainConfig::default()
    }
}

fn examples(t: &TaskData) -> Vec<TrainingExample> {
    random_negatives(&t.corpus, &t.train, 3, 5).unwrap()
}

fn values(params: &[Tensor]) -> Vec<Vec<f64>> {
    params.iter().map(Tensor::to_vec).collect()
}

#[test]
fn shard_count_is_neutral_without_cross_batch() {
    let t = task();
    let ex = examples(&t);
    let runs: Vec<_> = [1, 2, 4]
        .iter()
        .map(|&n_shards| {
            let enc = Encoder::new(enc_cfg(0.1), &mut RngState::new(1)).unwrap();
            let cfg = TrainConfig {
                n_shards,
                ..train_cfg()
            };
            train_interaction_distillation(&cfg, &ex, enc, None).unwrap()
        })
        .collect();
    for (enc, log) in &runs[1..] {
        assert!(log.same_trace(&runs[0].1));
        assert_eq!(values(&enc.params()), values(&runs[0].0.params()));
    }
}

#[test]
fn cross_batch_list_sizes_follow_pool_arithmetic() {
    let t = task();
    let ex = examples(&t);
    let own = 1 + 3;
    for n_shards in [1, 2, 4] {
        for id_prime in [false, true] {
            let enc = Encoder::new(enc_cfg(0.1), &mut RngState::new(1)).unwrap();
            let cfg = TrainConfig {
                n_shards,
                cross_batch: true,
                id_prime,
                epochs: 1,
                ..train_cfg()
            };
            let (_, log) = train_interaction_distillation(&cfg, &ex, enc, None).unwrap();
            for rec in &log.steps {
                let b = rec.list_sizes.len();
                let gathered = b * own - rec.duplicates;
                assert!(rec.list_sizes.iter().all(|&n| n <= b * own));
                if rec.duplicates == 0 {
                    assert!(rec.list_sizes.iter().all(|&n| n == gathered));
                    let local = b.div_ceil(n_shards) * own;
                    for (i, &d) in rec.distill_sizes.iter().enumerate() {
                        let shard = shard_len(b, n_shards, i);
                        let expected = if id_prime { gathered } else { shard * own };
                        assert_eq!(d, expected, "query {i}, shards {n_shards}");
                        assert!(d <= local || id_prime);
                    }
                }
            }
        }
    }
}

// size of the shard holding query `i` under a contiguous split
fn shard_len(n: usize, shards: usize, i: usize) -> usize {
    let mut start = 0;
    for s in 0..shards {
        let len = n / shards + usize::from(s < n % shards);
        if i < start + len {
            return len;
        }
        start += len;
    }
    unreachable!()
}

#[test]
fn candidate_lists_with_disjoint_passages() {
    let own: Vec<Vec<PassageId>> = (0..4)
        .map(|q| (0..4).map(|j| q * 10 + j).collect())
        .collect();
    for (n_shards, id_prime, distill) in
        [(2, false, 8), (2, true, 16), (1, false, 16), (4, false, 4)]
    {
        let c = build_candidate_lists(
            &own,
            CandidateMode {
                cross_batch: true,
                id_prime,
                n_shards,
            },
        );
        assert_eq!(c.pool.len(), 16);
        for (i, q) in c.queries.iter().enumerate() {
            assert_eq!(q.ids.len(), 16);
            assert_eq!(q.distill_len, distill);
            assert_eq!(q.ids[q.positive_index], own[i][0]);
            assert_eq!(&q.ids[..4], &own[i][..]);
        }
    }
    let plain = build_candidate_lists(
        &own,
        CandidateMode {
            cross_batch: false,
            id_prime: false,
            n_shards: 2,
        },
    );
    assert!(plain
        .queries
        .iter()
        .all(|q| q.ids.len() == 4 && q.distill_len == 4));
}

#[test]
fn id_prime_changes_only_the_distillation_term() {
    let t = task();
    let ex = examples(&t);
    let batch: Vec<&TrainingExample> = ex.iter().take(4).collect();
    let enc = Encoder::new(enc_cfg(0.1), &mut RngState::new(1)).unwrap();
    let rng = RngState::new(9);
    let run = |id_prime| {
        let cfg = TrainConfig {
            n_shards: 2,
            cross_batch: true,
            id_prime,
            ..train_cfg()
        };
        batch_loss(
            Some(&enc),
            None,
            &batch,
            &cfg,
            &LossTerm::INTERACTION,
            &rng,
            0,
        )
        .unwrap()
    };
    let (plain, pc) = run(false);
    let (prime, qc) = run(true);
    if pc.duplicates == 0 {
        assert!(pc
            .queries
            .iter()
            .all(|q| q.ids.len() == 16 && q.distill_len == 8));
        assert!(qc
            .queries
            .iter()
            .all(|q| q.ids.len() == 16 && q.distill_len == 16));
    }
    assert_eq!(plain.value(LossTerm::De), prime.value(LossTerm::De));
    assert_eq!(plain.value(LossTerm::Li), prime.value(LossTerm::Li));
    assert_ne!(plain.value(LossTerm::LiToDe), prime.value(LossTerm::LiToDe));
}

#[test]
fn cascade_without_distillation_is_the_sum_of_supervised_terms() {
    let t = task();
    let ex = examples(&t);
    let batch: Vec<&TrainingExample> = ex.iter().take(4).collect();
    let student = Encoder::new(enc_cfg(0.1), &mut RngState::new(1)).unwrap();
    let mut cross = CrossEncoder::new(enc_cfg(0.1), &mut RngState::new(2)).unwrap();
    randomise_head(&mut cross);
    let cfg = TrainConfig {
        step: Step::Cascade,
        loss: LossConfig {
            flags: LossFlags::supervised(true, true, true),
            ..LossConfig::default()
        },
        ..train_cfg()
    };
    let (bundle, _) = batch_loss(
        Some(&student),
        Some(&cross),
        &batch,
        &cfg,
        &LossTerm::ALL,
        &RngState::new(3),
        0,
    )
    .unwrap();
    let names: Vec<LossTerm> = bundle.values().iter().map(|(t, _)| *t).collect();
    assert_eq!(names, vec![LossTerm::De, LossTerm::Li, LossTerm::Ce]);
    let sum: f64 = bundle.values().iter().map(|(_, v)| v).sum();
    assert!((bundle.total.item() - sum).abs() < 1e-12);
}

fn randomise_head(cross: &mut CrossEncoder) {
    let mut rng = RngState::new(77);
    let values: Vec<(String, Vec<f64>)> = cross
        .named_params()
        .into_iter()
        .map(|(name, p)| {
            let v = if name.starts_with("head") {
                (0..p.numel()).map(|_| rng.normal() * 0.5).collect()
            } else {
                p.to_vec()
            };
            (name, v)
        })
        .collect();
    cross.load_values(&values).unwrap();
}

fn grad_norms(params: &[Tensor]) -> f64 {
    params
        .iter()
        .filter_map(Tensor::grad)
        .flat_map(|g| g.into_iter())
        .map(|g| g * g)
        .sum()
}

#[test]
fn gradients_reach_only_the_trained_side() {
    let t = task();
    let ex = examples(&t);
    let batch: Vec<&TrainingExample> = ex.iter().take(4).collect();
    let cases = [
        (LossTerm::Ce, false, true),
        (LossTerm::CeToDe, true, false),
        (LossTerm::CeToLi, true, false),
        (LossTerm::Attn, true, false),
        (LossTerm::De, true, false),
    ];
    for (term, student_moves, cross_moves) in cases {
        let student = Encoder::new(enc_cfg(0.0), &mut RngState::new(1)).unwrap();
        let mut cross = CrossEncoder::new(enc_cfg(0.0), &mut RngState::new(2)).unwrap();
        randomise_head(&mut cross);
        let mut flags = LossFlags::none();
        flags.set(term, true);
        let cfg = TrainConfig {
            step: Step::Cascade,
            loss: LossConfig {
                flags,
                ..LossConfig::default()
            },
            ..train_cfg()
        };
        let (bundle, _) = batch_loss(
            Some(&student),
            Some(&cross),
            &batch,
            &cfg,
            &LossTerm::ALL,
            &RngState::new(3),
            0,
        )
        .unwrap();
        bundle.total.backward().unwrap();
        assert_eq!(
            grad_norms(&student.params()) > 0.0,
            student_moves,
            "{term:?} student"
        );
        assert_eq!(
            grad_norms(&cross.params()) > 0.0,
            cross_moves,
            "{term:?} cross"
        );
    }
}

#[test]
fn cascade_without_teacher_loss_freezes_the_cross_encoder() {
    let t = task();
    let ex = examples(&t);
    let student = Encoder::new(enc_cfg(0.1), &mut RngState::new(1)).unwrap();
    let before_student = values(&student.params());
    let cross = CrossEncoder::new(enc_cfg(0.1), &mut RngState::new(2)).unwrap();
    let before = values(&cross.params());
    let cfg = TrainConfig {
        step: Step::Cascade,
        epochs: 1,
        loss: LossConfig {
            flags: LossFlags::cascade().without(LossTerm::Ce),
            ..LossConfig::default()
        },
        ..train_cfg()
    };
    let ((student, cross), _) = train_cascade(&cfg, &ex, student, cross, None).unwrap();
    assert_eq!(values(&cross.params()), before);
    assert_ne!(values(&student.params()), before_student);
}

#[test]
fn dual_reg_passes_differ_under_dropout() {
    let t = task();
    let enc = Encoder::new(enc_cfg(0.1), &mut RngState::new(3)).unwrap();
    let ps: Vec<TokenSequence> = t.corpus[..6]
        .iter()
        .map(|r| r.sequence(SequenceKind::Passage))
        .collect();
    let cands: Vec<(PassageId, &TokenSequence)> =
        t.corpus[..6].iter().map(|r| r.id).zip(&ps).collect();
    for seed in 0..20 {
        let q =
            t.train.queries[seed as usize % t.train.queries.len()].sequence(SequenceKind::Query);
        let qe = enc.encode(&q, &mut RngState::new(seed), false).unwrap();
        let (a, b) = dual_reg_forward(&enc, 0, &qe, &cands, &RngState::new(seed), true).unwrap();
        assert_ne!(a.de.probs.to_vec(), b.de.probs.to_vec(), "seed {seed}");
        assert_ne!(
            a.li.unwrap().probs.to_vec(),
            b.li.unwrap().probs.to_vec(),
            "seed {seed}"
        );
    }
}

#[test]
fn non_finite_scores_abort_with_the_offending_term() {
    let t = task();
    let ex = examples(&t);
    let enc = Encoder::new(enc_cfg(0.1), &mut RngState::new(1)).unwrap();
    let poisoned: Vec<(String, Vec<f64>)> = enc
        .named_params()
        .into_iter()
        .map(|(n, p)| {
            let v = if n == "lnf_b" {
                vec![f64::NAN; p.numel()]
            } else {
                p.to_vec()
            };
            (n, v)
        })
        .collect();
    let mut enc = enc;
    enc.load_values(&poisoned).unwrap();
    let cfg = TrainConfig {
        loss: LossConfig {
            flags: LossFlags::supervised(true, false, false),
            ..LossConfig::default()
        },
        ..train_cfg()
    };
    match train_interaction_distillation(&cfg, &ex, enc, None) {
        Err(Error::NonFiniteLoss { term, value, step }) => {
            assert_eq!(term, "s_de");
            assert!(value.is_nan());
            assert_eq!(step, 0);
        }
        other => panic!(
            "expected a non-finite diagnostic, got {:?}",
            other.map(|_| ())
        ),
    }
}
