//! `scga`: generate data, train, decode and inspect the dialogue model.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scga::config::Config;
use scga::data::{build_vocabulary, generate_splits, read_dataset, write_dataset};
use scga::export::{attention_record, graph_record};
use scga::gradsuite::{self, SUITE_SEEDS};
use scga::model::{DecodeStrategy, PreparedSample};
use scga::training::{evaluate, RunDir, Trainer};
use scga::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Gradient checks pass below this relative error.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "scga", version, about = "Video-grounded dialogue with structured co-reference graph attention")]
struct Cli {
    /// TOML config file; keys not given keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set d=32`. Repeatable, applied
    /// after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.jsonl and val.jsonl from the synthetic world generator.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Generator seed (overrides `data_seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset directory; writes a run directory.
    Train {
        /// Directory holding train.jsonl and val.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Decode every sample of a dataset file and write one JSON line each.
    Decode {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        /// Beam width; greedy search when absent.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Finite-difference check of every op, module and the training loss.
    CheckGrads {
        /// Number of seeds.
        #[arg(long, default_value_t = SUITE_SEEDS.len() as u64)]
        seeds: u64,
    },
    /// Attention maps of a trained model as JSON lines.
    DumpAttention {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Spatio-temporal graphs and n-hop adjacencies as JSON lines.
    DumpGraph {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file (JSON lines).
    #[arg(long)]
    data: PathBuf,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    Ok(cfg)
}

fn write_lines<T: serde::Serialize>(path: &Path, items: &[T]) -> CmdResult {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("records serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn load_model(args: &ModelArgs) -> Result<(Trainer, Vec<PreparedSample>), Failure> {
    let trainer = Trainer::load(&args.checkpoint)?;
    let samples = trainer.model.prepare_all(&read_dataset(&args.data)?)?;
    Ok((trainer, samples))
}

fn gen_data(cfg: &Config, out: &Path, seed: Option<u64>) -> CmdResult {
    let seed = seed.unwrap_or(cfg.data_seed);
    let (train, val) = generate_splits(&cfg.world_spec(), cfg.train_samples, cfg.eval_samples, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_dataset(&out.join("train.jsonl"), &train)?;
    write_dataset(&out.join("val.jsonl"), &val)?;
    println!("wrote {} train and {} val samples to {}", train.len(), val.len(), out.display());
    Ok(())
}

fn train(cfg: &Config, data: &Path, run_dir: &Path) -> CmdResult {
    let train = read_dataset(&data.join("train.jsonl"))?;
    let val = read_dataset(&data.join("val.jsonl"))?;
    let mut trainer = Trainer::new(cfg, build_vocabulary(&train))?;
    let train = trainer.model.prepare_all(&train)?;
    let val = trainer.model.prepare_all(&val)?;
    let run = RunDir::create(run_dir)?;
    fs::write(run.root.join("config.toml"), cfg.to_toml()).map_err(|e| Error::Io {
        path: run.root.join("config.toml"),
        source: e,
    })?;
    trainer.fit(&train, &val, Some(&run), |m| {
        let em = m.exact_match.map_or(String::new(), |x| format!(" exact {x:.3}"));
        let rf = m.referent_acc.map_or(String::new(), |x| format!(" referent {x:.3}"));
        println!(
            "epoch {:>3} step {:>5} lr {:.2e} train {:.5} val {:.5} token_acc {:.4}{rf}{em}",
            m.epoch, m.step, m.lr, m.train_loss, m.val_loss, m.token_acc
        );
        let _ = std::io::stdout().flush();
        true
    })?;
    println!("run written to {}", run.root.display());
    Ok(())
}

fn decode(args: &ModelArgs, out: &Path, beam: Option<usize>) -> CmdResult {
    let (trainer, samples) = load_model(args)?;
    let strategy = match beam {
        Some(0) => return Err(Failure::Usage("--beam must be at least 1".into())),
        Some(b) => DecodeStrategy::Beam(b),
        None => DecodeStrategy::Greedy,
    };
    let records = samples
        .iter()
        .map(|s| trainer.model.decode_record(&trainer.store, s, strategy))
        .collect::<scga::Result<Vec<_>>>()?;
    write_lines(out, &records)?;
    let report = evaluate(&trainer.model, &trainer.store, &samples, Some(strategy))?;
    if let Some(em) = report.exact_match {
        println!("{} samples, exact match {em:.4}", records.len());
    }
    Ok(())
}

fn check_grads(seeds: u64) -> CmdResult {
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (1..=seeds).collect();
    let rows = gradsuite::run(&seeds)?;
    let mut failed = false;
    println!("{:<22} {:>7} {:>6}  max rel error", "check", "entries", "kinked");
    for r in &rows {
        let ok = r.max_rel_error < GRAD_TOLERANCE;
        failed |= !ok;
        println!(
            "{:<22} {:>7} {:>6}  {:.3e} {}",
            r.name,
            r.entries,
            r.kinked,
            r.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed {
        return Err(Error::Numeric(format!("gradient check above {GRAD_TOLERANCE:e}")).into());
    }
    Ok(())
}

fn dump_attention(args: &ModelArgs, out: &Path, limit: Option<usize>) -> CmdResult {
    let (trainer, samples) = load_model(args)?;
    let n = limit.unwrap_or(samples.len()).min(samples.len());
    let records = samples[..n]
        .iter()
        .map(|s| attention_record(&trainer.model, &trainer.store, s))
        .collect::<scga::Result<Vec<_>>>()?;
    write_lines(out, &records)
}

fn dump_graph(cfg: &Config, data: &Path, out: &Path, limit: Option<usize>) -> CmdResult {
    let samples = read_dataset(data)?;
    let n = limit.unwrap_or(samples.len()).min(samples.len());
    let assignment = cfg.head_assignment()?;
    let records = samples[..n]
        .iter()
        .map(|s| {
            let graph = scga::stgraph::SpatioTemporalGraph::build(
                &s.video,
                cfg.tau_s,
                cfg.tau_t,
                assignment.clone(),
            )?;
            Ok(graph_record(
                &s.id,
                s.video.frames(),
                s.video.objects(),
                s.video.labels(),
                &graph,
            ))
        })
        .collect::<scga::Result<Vec<_>>>()?;
    write_lines(out, &records)
}

fn run(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData { out, seed } => gen_data(&cfg, out, *seed),
        Command::Train { data, run } => train(&cfg, data, run),
        Command::Decode { model, out, beam } => decode(model, out, *beam),
        Command::CheckGrads { seeds } => check_grads(*seeds),
        Command::DumpAttention { model, out, limit } => dump_attention(model, out, *limit),
        Command::DumpGraph { data, out, limit } => dump_graph(&cfg, data, out, *limit),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SCGA_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numeric(_) => EXIT_NUMERIC,
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
            ExitCode::from(code)
        }
    }
}
