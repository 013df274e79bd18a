use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use retriever_core::config::RunConfig;
use retriever_core::data::{
    build_pools, catalog_to_json, dialogues_to_json, generate_synthetic_corpus, load_catalog,
    load_dialogues, load_pools, pools_to_jsonl, Catalog, Turn,
};
use retriever_core::evaluation::evaluate_run;
use retriever_core::pipeline::train_from_corpus;
use retriever_core::scoring::{scores_to_jsonl, ScoreOptions, Scorer};
use retriever_core::training::{load_checkpoint, save_checkpoint};

const CATALOG_FILE: &str = "catalog.json";
const DIALOGUES_FILE: &str = "dialogues.json";

/// Response retrieval: synthesize data, train, build pools, evaluate.
///
/// Settings come from an optional TOML file (--config) and are overridden by
/// flags. Set RETRIEVER_THREADS to cap scoring threads (0 = all cores).
#[derive(Parser)]
#[command(name = "retriever", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic catalog.json and dialogues.json.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a JSONL training log.
    Train(TrainArgs),
    /// Build one candidate pool per dialogue turn.
    Pool(PoolArgs),
    /// Rank pools with a checkpoint and report MRR, recall and mean rank.
    Evaluate(EvaluateArgs),
    /// Rank pools with a checkpoint and export every candidate's scores.
    Score(ScoreArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration [default: built-in settings]
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root seed [default: config value, else 0]
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of catalog objects [default: config value, else 20]
    #[arg(long)]
    objects: Option<usize>,
    /// Number of dialogue turns [default: config value, else 64]
    #[arg(long)]
    turns: Option<usize>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding catalog.json and dialogues.json
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Checkpoint to write
    #[arg(long, value_name = "CKPT")]
    out: PathBuf,
    /// Training steps [default: config value, else 2000]
    #[arg(long)]
    steps: Option<u64>,
    /// Examples per batch [default: config value, else 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: config value, else 0.001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Keep encoder weights fixed [default: config value, else off]
    #[arg(long)]
    freeze_encoder: bool,
    /// Training log [default: <CKPT>.log.jsonl]
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PoolArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding catalog.json and dialogues.json
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Candidates per pool, truth included [default: config value, else 10]
    #[arg(long)]
    pool_size: Option<usize>,
    /// Pools file to write (JSON lines)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct RankArgs {
    /// Checkpoint to load
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Pools file (JSON lines)
    #[arg(long, value_name = "FILE")]
    pools: PathBuf,
    /// Directory with the catalog and dialogues the pools were built from
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Rank by log-likelihood only [default: off]
    #[arg(long)]
    no_grounding: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    rank: RankArgs,
    /// Report file [default: <POOLS>.report.json]
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    rank: RankArgs,
    /// Scores file to write (JSON lines)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_data(dir: &Path) -> Result<(Catalog, Vec<Turn>)> {
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    let catalog = load_catalog(&dir.join(CATALOG_FILE))?;
    let turns = load_dialogues(&dir.join(DIALOGUES_FILE), &catalog)?;
    Ok((catalog, turns))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(n) = args.objects {
        cfg.data.num_objects = n;
    }
    if let Some(n) = args.turns {
        cfg.data.num_turns = n;
    }
    if cfg.data.num_objects == 0 && cfg.data.num_turns > 0 {
        bail!("cannot generate turns without objects");
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let corpus = generate_synthetic_corpus(cfg.data.num_objects, cfg.data.num_turns, cfg.seed);
    write(
        &args.out.join(CATALOG_FILE),
        catalog_to_json(&corpus.catalog),
    )?;
    write(
        &args.out.join(DIALOGUES_FILE),
        dialogues_to_json(&corpus.turns),
    )?;
    write(&args.out.join("run_config.toml"), cfg.to_toml())?;
    eprintln!(
        "wrote {} objects and {} turns to {}",
        corpus.catalog.len(),
        corpus.turns.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(s) = args.steps {
        cfg.training.steps = s;
    }
    if let Some(b) = args.batch_size {
        cfg.training.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        cfg.training.learning_rate = lr;
    }
    if args.freeze_encoder {
        cfg.training.freeze_encoder = true;
    }
    let (catalog, turns) = load_data(&args.data)?;
    let log_path = args
        .log
        .unwrap_or_else(|| with_suffix(&args.out, ".log.jsonl"));
    let mut log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log_err = None;
    let result = train_from_corpus(&cfg, &catalog, &turns, |entry| {
        if log_err.is_none() {
            let line = serde_json::to_string(entry).expect("log entry serializes");
            if let Err(e) = writeln!(log, "{line}") {
                log_err = Some(e);
            }
        }
    });
    if let Some(e) = log_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    let (ck, summary) = result?;
    save_checkpoint(&ck, &args.out)?;
    write(&with_suffix(&args.out, ".config.toml"), cfg.to_toml())?;
    eprintln!(
        "trained {} steps: loss {:.4} -> {:.4}; checkpoint {}",
        summary.steps,
        summary.losses.first().copied().unwrap_or(f64::NAN),
        summary.final_loss(),
        args.out.display()
    );
    Ok(())
}

fn pool(args: PoolArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(k) = args.pool_size {
        cfg.data.pool_size = k;
    }
    let (_, turns) = load_data(&args.data)?;
    let pools = build_pools(&turns, cfg.data.pool_size, cfg.seed)?;
    write(&args.out, pools_to_jsonl(&pools))?;
    eprintln!(
        "wrote {} pools of {} to {}",
        pools.len(),
        cfg.data.pool_size,
        args.out.display()
    );
    Ok(())
}

fn rank(
    args: &RankArgs,
) -> Result<(
    retriever_core::evaluation::EvalReport,
    Vec<retriever_core::scoring::ScoreRecord>,
)> {
    let ck = load_checkpoint(&args.ckpt)?;
    let pools = load_pools(&args.pools)?;
    let (catalog, turns) = load_data(&args.data)?;
    let scorer = Scorer {
        model: &ck.model,
        vocab: &ck.vocab,
        options: ScoreOptions {
            grounding: !args.no_grounding,
            likelihood: true,
        },
    };
    Ok(evaluate_run(&pools, &turns, &catalog, &scorer)?)
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (report, _) = rank(&args.rank)?;
    let json = report.to_json();
    let out = args
        .out
        .unwrap_or_else(|| args.rank.pools.with_extension("report.json"));
    write(&out, &json)?;
    print!("{json}");
    Ok(())
}

fn score(args: ScoreArgs) -> Result<()> {
    let (report, records) = rank(&args.rank)?;
    write(&args.out, scores_to_jsonl(&records))?;
    eprintln!(
        "scored {} pools, MRR {:.4}",
        report.num_examples, report.mrr
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Pool(a) => pool(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Score(a) => score(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
