//! `kdistill`: command-line driver for the distillation pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kd_core::config::RunConfig;
use kd_core::gradchecks::DEFAULT_TOLERANCE;
use kd_core::pipeline;
use kd_core::retrieval::Metrics;

#[derive(Parser)]
#[command(
    name = "kdistill",
    version,
    about = "Interaction and cascade distillation for dense retrievers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (flat TOML); defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Only print errors.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, queries and qrels.
    GenerateData(Common),
    /// Step 2: interaction distillation on random negatives.
    TrainId(Common),
    /// Mine hard negatives with the Step 2 encoder.
    MineNegatives(Common),
    /// Step 3: cascade distillation on mined negatives.
    TrainCascade(Common),
    /// Evaluate a checkpoint on the configured split.
    Eval(Common),
    /// Write ranked lists for the configured split.
    Retrieve(Common),
    /// Run the registered finite-difference gradient checks.
    Gradcheck(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenerateData(c)
            | Command::TrainId(c)
            | Command::MineNegatives(c)
            | Command::TrainCascade(c)
            | Command::Eval(c)
            | Command::Retrieve(c)
            | Command::Gradcheck(c) => c,
        }
    }
}

fn load_config(c: &Common) -> kd_core::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summary(m: &Metrics) -> String {
    let recall: Vec<String> = m
        .recall
        .iter()
        .map(|(k, v)| format!("R@{k}={v:.4}"))
        .collect();
    format!("MRR@{}={:.4} {}", m.mrr_cutoff, m.mrr, recall.join(" "))
}

fn run(cmd: &Command) -> kd_core::Result<bool> {
    let cfg = load_config(cmd.common())?;
    let quiet = cmd.common().quiet;
    let say = |line: String| {
        if !quiet {
            println!("{line}");
        }
    };
    match cmd {
        Command::GenerateData(_) => {
            let task = pipeline::generate_data(&cfg)?;
            say(format!(
                "wrote {} passages, {}/{}/{} queries to {}",
                task.corpus.len(),
                task.train.queries.len(),
                task.dev.queries.len(),
                task.test.queries.len(),
                cfg.data_dir().display()
            ));
        }
        Command::TrainId(_) => {
            let (_, log, m) = pipeline::run_train_id(&cfg)?;
            say(format!("{} steps, {}", log.steps.len(), summary(&m)));
        }
        Command::MineNegatives(_) => {
            let n = pipeline::run_mine(&cfg)?;
            say(format!("mined negatives for {n} queries"));
        }
        Command::TrainCascade(_) => {
            let (_, log, m) = pipeline::run_train_cascade(&cfg)?;
            say(format!("{} steps, {}", log.steps.len(), summary(&m)));
        }
        Command::Eval(_) => say(summary(&pipeline::run_eval(&cfg)?)),
        Command::Retrieve(_) => {
            let n = pipeline::run_retrieve(&cfg)?;
            say(format!("ranked lists for {n} queries"));
        }
        Command::Gradcheck(_) => {
            let results = pipeline::run_gradcheck(&cfg, DEFAULT_TOLERANCE)?;
            for r in &results {
                say(format!(
                    "{} {:<26} {:.3e}",
                    if r.passed { "ok  " } else { "FAIL" },
                    r.name,
                    r.max_rel_error
                ));
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.command.common().quiet {
        "error"
    } else {
        "info"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
