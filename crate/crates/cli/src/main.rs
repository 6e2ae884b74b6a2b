//! `apex` — fit, inspect and evaluate prototype explanations of a frozen
//! GAP + linear-head audio classifier.
//!
//! Exit codes: 0 success, 1 a check failed (invariance breach, numeric
//! blow-up), 2 bad usage or unreadable/invalid input.

mod commands;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use apex_core::ApexError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "apex", version, about = "Prototype explanations for frozen audio classifiers")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "APEX_THREADS")]
    threads: Option<usize>,

    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic ground-truth benchmark.
    Synth(commands::SynthArgs),
    /// Learn the channel transform and write the state.
    Fit(commands::FitArgs),
    /// Build the prototype bank from a fitted state.
    Bank(commands::BankArgs),
    /// Explain samples: top channels, regions, heatmaps, prototypes.
    Explain(commands::ExplainArgs),
    /// Compare original and folded logits for a state.
    Invariance(commands::InvarianceArgs),
    /// Masking ablation: no mask vs random masks vs APEX masks.
    MaskEval(commands::MaskEvalArgs),
    /// EER / AUROC / AP (binary CSV) or aEER / cmAP / AUROC / T1-Acc (JSONL).
    Metrics(commands::MetricsArgs),
}

/// Inputs shared by the commands that read an exported dataset.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset manifest (JSONL). Relative paths inside resolve against its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Classifier head container; defaults to `head.apx` next to the manifest.
    #[arg(long)]
    pub head: Option<PathBuf>,
}

/// A failed check, as opposed to bad input.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 1;
    }
    match err.downcast_ref::<ApexError>() {
        Some(ApexError::Numeric(_)) => 1,
        _ => 2,
    }
}

fn init_logging(quiet: bool) {
    let default = if quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format(|buf, record| {
            writeln!(
                buf,
                "level={} target={} {}",
                record.level().as_str().to_ascii_lowercase(),
                record.target(),
                record.args()
            )
        })
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.quiet);
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Fit(a) => commands::fit(a),
        Command::Bank(a) => commands::bank(a),
        Command::Explain(a) => commands::explain(a),
        Command::Invariance(a) => commands::invariance(a),
        Command::MaskEval(a) => commands::mask_eval(a),
        Command::Metrics(a) => commands::metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // the reader went away (`apex ... | head`); nothing left to report
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
