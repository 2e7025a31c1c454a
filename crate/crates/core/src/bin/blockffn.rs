//! Command-line entry points.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use blockffn::decode::{decode_loop, greedy_decode, DraftPolicyKind, Drafter};
use blockffn::kernel::{bench_chunk_ffn, BenchConfig};
use blockffn::train::config::parse_matrix;
use blockffn::train::data::{detokenize, ingest, load_split, tokenize};
use blockffn::train::{evaluate_ppl, report, run_ablation, Checkpoint, TrainConfig, Trainer};
use blockffn::{Error, Result};

#[derive(Parser)]
#[command(name = "blockffn", version, about = "Train, measure and decode BlockFFN toy models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics.csv and checkpoints.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Held-out perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Byte file to evaluate on; defaults to the checkpoint's held-out split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sparsity, allocation and magnitude artifacts of a checkpoint.
    Report {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "runs/report")]
        out: PathBuf,
    },
    /// Sparse versus dense chunk kernel timings as CSV.
    BenchKernel {
        /// TOML bench shape; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "0.05,0.1,0.25,0.5,0.75,1.0", value_delimiter = ',')]
        densities: Vec<f64>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Speculative decoding from a prompt; prints statistics as JSON.
    SpecDecode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "self_greedy")]
        policy: String,
        /// Drafts per verification step.
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        max_tokens: usize,
        #[arg(long, default_value_t = 4)]
        ngram_order: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model per objective kind, e.g. `null,cs@0.05,l1,al+cs`.
    Ablate {
        #[arg(long)]
        matrix: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
}

fn heldout_or(ck: &Checkpoint, data: Option<&Path>) -> Result<Vec<usize>> {
    match data {
        Some(p) => ingest(p),
        None => Ok(load_split(&ck.config.data)?.heldout),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let config = TrainConfig::load(&config)?;
            let mut trainer = Trainer::new(&config)?;
            let log = trainer.run(Some(&out))?;
            if let Some(last) = log.last() {
                print_json(last)?;
            }
        }
        Command::Eval { ckpt, data } => {
            let ck = Checkpoint::load(&ckpt)?;
            let tokens = heldout_or(&ck, data.as_deref())?;
            let ppl = evaluate_ppl(&ck.model, &tokens)?;
            print_json(&serde_json::json!({ "ppl": ppl, "tokens": tokens.len() }))?;
        }
        Command::Report { ckpt, data, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let tokens = heldout_or(&ck, data.as_deref())?;
            let r = report(&ck.model, &tokens, Some(&out))?;
            print_json(&r.mean)?;
        }
        Command::BenchKernel { config, densities, out } => {
            let config = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => BenchConfig::default(),
            };
            let rows = bench_chunk_ffn(&config, &densities)?;
            let sink: Box<dyn Write> = match &out {
                Some(p) => Box::new(std::fs::File::create(p).map_err(|e| Error::Io { path: p.clone(), source: e })?),
                None => Box::new(std::io::stdout()),
            };
            let mut w = csv::Writer::from_writer(sink);
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush().map_err(|e| Error::Io { path: out.unwrap_or_default(), source: e })?;
        }
        Command::SpecDecode { ckpt, prompt, policy, n, max_tokens, ngram_order, seed } => {
            let ck = Checkpoint::load(&ckpt)?;
            let kind: DraftPolicyKind = policy.parse()?;
            let corpus = if kind == DraftPolicyKind::Ngram { load_split(&ck.config.data)?.train } else { Vec::new() };
            let mut drafter = Drafter::new(kind, &corpus, ngram_order, seed)?;
            let prompt = tokenize(prompt.as_bytes());
            let out = decode_loop(&ck.model, &mut drafter, &prompt, max_tokens, n)?;
            let lossless = out.tokens == greedy_decode(&ck.model, &prompt, max_tokens)?;
            print_json(&serde_json::json!({
                "policy": kind.name(),
                "n": n,
                "text": detokenize(&out.tokens),
                "matches_greedy": lossless,
                "summary": out.stats.summary(),
                "stats": out.stats,
            }))?;
        }
        Command::Ablate { matrix, config, out } => {
            let base = TrainConfig::load(&config)?;
            let arms = parse_matrix(&matrix)?;
            let results = run_ablation(&base, &arms, Some(&out))?;
            print_json(&results)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
