use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"schema_version = 1
vocab_size = 200
n_topics = 4
passages_per_topic = 8
passage_len_min = 4
passage_len_max = 8
query_len_min = 2
query_len_max = 4
n_background_words = 20
n_train = 16
n_dev = 6
n_test = 4
d_model = 8
n_layers = 1
n_heads = 2
d_ff = 16
max_len = 24
cross_n_layers = 1
cross_pretrain_epochs = 1
cross_pretrain_queries = 8
batch_queries = 4
n_negatives = 3
id_epochs = 1
warmup_epochs = 1
cascade_epochs = 1
top_m = 8
recall_cutoffs = [1, 5]
retrieve_k = 5
"#;

fn kdistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdistill"))
        .args(args)
        .output()
        .unwrap()
}

fn stage(stage: &str, config: &Path, out: &Path) -> Output {
    kdistill(&[
        stage,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ])
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("out");
    for s in [
        "generate-data",
        "train-id",
        "mine-negatives",
        "train-cascade",
        "eval",
        "retrieve",
    ] {
        let o = stage(s, &config, &out);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{s}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    assert!(out.join("metrics.json").is_file());
    assert!(out.join("run.tsv").is_file());
}

#[test]
fn quiet_stages_print_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let o = stage(
        "generate-data",
        &tiny_config(dir.path()),
        &dir.path().join("out"),
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(kdistill(&["no-such-stage"]).status.code(), Some(2));
    assert_eq!(kdistill(&["eval", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        kdistill(&["eval", "--seed", "minus-one"]).status.code(),
        Some(2)
    );
}

#[test]
fn contract_failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    // nothing generated yet
    let o = stage("train-id", &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\nn_negatives = 0\n").unwrap();
    assert_eq!(
        stage("generate-data", &bad, &dir.path().join("out"))
            .status
            .code(),
        Some(1)
    );
    let missing = dir.path().join("missing.toml");
    assert_eq!(
        stage("generate-data", &missing, &dir.path().join("out"))
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("out");
    let o = kdistill(&[
        "gradcheck",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().count() > 0 && !text.contains("FAIL"));
}
