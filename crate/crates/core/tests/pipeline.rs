use std::collections::HashSet;
use std::path::Path;

use kd_core::config::{Checkpoint, RunConfig};
use kd_core::data::{generate_task, SyntheticTaskSpec};
use kd_core::interaction::Scheme;
use kd_core::pipeline::{self, RunPaths};
use kd_core::retrieval::{mean_mrr, RankedList};
use kd_core::Error;

fn tiny(out: &Path) -> RunConfig {
    RunConfig {
        out_dir: out.to_path_buf(),
        vocab_size: 200,
        n_topics: 4,
        passages_per_topic: 8,
        passage_len_min: 4,
        passage_len_max: 8,
        query_len_min: 2,
        query_len_max: 4,
        n_background_words: 20,
        n_train: 16,
        n_dev: 6,
        n_test: 4,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_len: 24,
        cross_n_layers: 1,
        batch_queries: 4,
        n_negatives: 3,
        id_epochs: 1,
        warmup_epochs: 1,
        cascade_epochs: 1,
        cross_pretrain_epochs: 2,
        cross_pretrain_queries: 8,
        top_m: 8,
        recall_cutoffs: vec![1, 5, 1000],
        retrieve_k: 5,
        ..RunConfig::default()
    }
}

#[test]
fn stages_produce_their_artefacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let paths = RunPaths::new(dir.path());
    pipeline::generate_data(&cfg).unwrap();
    let (_, log, m) = pipeline::run_train_id(&cfg).unwrap();
    assert_eq!(log.steps.len(), 4);
    assert!((0.0..=1.0).contains(&m.mrr));
    // cutoff 1000 clamps to the corpus size
    assert_eq!(m.recall.keys().copied().collect::<Vec<_>>(), vec![1, 5, 32]);
    assert_eq!(m.recall[&32], 1.0);
    assert_eq!(pipeline::run_mine(&cfg).unwrap(), 16);
    pipeline::run_train_cascade(&cfg).unwrap();
    pipeline::run_eval(&cfg).unwrap();
    assert_eq!(pipeline::run_retrieve(&cfg).unwrap(), 6);
    for p in [
        paths.id_encoder(),
        paths.id_log(),
        paths.id_metrics(),
        paths.mined(),
        paths.pretrain_log(),
        paths.warmup_log(),
        paths.cascade_student(),
        paths.cascade_cross(),
        paths.cascade_log(),
        paths.cascade_metrics(),
        paths.metrics(),
        paths.run_file(),
    ] {
        assert!(p.is_file(), "{} missing", p.display());
    }
    let run = std::fs::read_to_string(paths.run_file()).unwrap();
    let lines: Vec<Vec<&str>> = run.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(lines.len(), 6 * 5);
    assert!(lines.iter().all(|f| f.len() == 4));
    assert_eq!(lines[0][2], "1");
    assert_eq!(lines[4][2], "5");
    // the latest checkpoint is the cascade student
    let latest = pipeline::read_metrics(&paths.metrics()).unwrap();
    assert_eq!(
        latest,
        pipeline::read_metrics(&paths.cascade_metrics()).unwrap()
    );
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert!(matches!(
        pipeline::run_train_id(&cfg),
        Err(Error::Config(_))
    ));
    pipeline::generate_data(&cfg).unwrap();
    assert!(pipeline::run_mine(&cfg).is_err());
    assert!(matches!(pipeline::run_eval(&cfg), Err(Error::Config(_))));
    let random = RunConfig {
        eval_checkpoint: Checkpoint::Random,
        ..cfg.clone()
    };
    assert!(pipeline::run_eval(&random).is_ok());
    let small_vocab = RunConfig {
        vocab_size: 50,
        ..cfg
    };
    assert!(matches!(
        pipeline::run_train_id(&small_vocab),
        Err(Error::Vocabulary { .. })
    ));
}

#[test]
fn li_evaluation_and_retrieval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        eval_scheme: Scheme::Li,
        eval_checkpoint: Checkpoint::Random,
        normalize_tokens: true,
        ..tiny(dir.path())
    };
    pipeline::generate_data(&cfg).unwrap();
    let m = pipeline::run_eval(&cfg).unwrap();
    assert_eq!(m.scheme, Scheme::Li);
    assert_eq!(pipeline::run_retrieve(&cfg).unwrap(), 6);
}

#[test]
fn unrelated_queries_score_near_chance() {
    // nearly every query word is off-topic for its gold passage
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        query_noise_rate: 0.99,
        n_topics: 10,
        passages_per_topic: 40,
        n_dev: 60,
        eval_checkpoint: Checkpoint::Random,
        ..tiny(dir.path())
    };
    pipeline::generate_data(&cfg).unwrap();
    let m = pipeline::run_eval(&cfg).unwrap();
    // a uniformly random ranking of 400 passages has expected MRR@10 of about 0.007
    assert!(m.mrr < 0.1, "MRR {}", m.mrr);
}

#[test]
fn generated_task_is_solvable_by_word_overlap() {
    let task = generate_task(&SyntheticTaskSpec::default()).unwrap();
    let ranked: Vec<RankedList> = task
        .dev
        .queries
        .iter()
        .map(|q| {
            let words: HashSet<u32> = q.token_ids.iter().copied().collect();
            let mut scored: Vec<(u64, f64)> = task
                .corpus
                .iter()
                .map(|p| {
                    (
                        p.id,
                        p.token_ids.iter().filter(|t| words.contains(t)).count() as f64
                            / p.token_ids.len() as f64,
                    )
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            scored.truncate(10);
            RankedList {
                query_id: q.id,
                entries: scored,
                k: 10,
                truncated: false,
            }
        })
        .collect();
    let mrr = mean_mrr(&ranked, &task.dev.positives(), 10).unwrap();
    assert!(mrr > 0.5, "word-overlap MRR@10 {mrr}");
}

#[test]
fn gradcheck_stage_writes_a_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let results = pipeline::run_gradcheck(&cfg, 1e-4).unwrap();
    assert!(results.iter().all(|r| r.passed), "{results:?}");
    let text = std::fs::read_to_string(RunPaths::new(dir.path()).gradcheck()).unwrap();
    assert!(text.contains("cascade_loss"));
}
