use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod error;

use error::CliError;

/// Domain-adaptive hashing pipeline.
///
/// Every subcommand resolves one configuration (defaults, then `--config`,
/// then each `--set` in order) and works inside the run directory
/// `<paths.output_root>/seed<seed>-<config hash>` unless `--out` is given.
#[derive(Debug, Parser)]
#[command(name = "couple", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set gamma=0.3` or `--set loss_weights.mix=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Directory for outputs instead of the run directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the configured synthetic or digit datasets.
    Synth,
    /// Build the cross-domain relationship graph of the configured data.
    Graph,
    /// Solve the flow diffusion on a graph dump and select the confident set.
    Diffuse {
        /// Graph JSON; defaults to `graph.json` in the output directory.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Run warm-up and adaptation end to end, then encode and evaluate.
    Train,
    /// Encode features with a trained checkpoint.
    Encode {
        /// Defaults to `model.ckpt` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset manifest to encode; defaults to the configured source and target.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Codes file for `--manifest`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build a Hamming index from a codes file.
    Index {
        #[arg(long)]
        codes: PathBuf,
        /// u64 payload ids, one per code.
        #[arg(long)]
        ids: Option<PathBuf>,
    },
    /// Top-K Hamming search.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        ids: Option<PathBuf>,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Score query codes against a labelled database.
    Eval {
        /// Defaults to `target.hsh` in the output directory.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// LBL1 file; defaults to the configured hidden target labels.
        #[arg(long)]
        query_labels: Option<PathBuf>,
        /// Defaults to `source.hsh` in the output directory.
        #[arg(long)]
        database: Option<PathBuf>,
        /// LBL1 file; defaults to the configured source labels.
        #[arg(long)]
        database_labels: Option<PathBuf>,
    },
    /// Packed Hamming scan against a float32 inner-product scan.
    Speedtest {
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        bits: usize,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        repetitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Seed-averaged sensitivity to γ and the walk length k.
    Sweep {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7])]
        gammas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3, 4, 5, 6, 7, 8, 9, 10])]
        ks: Vec<usize>,
        /// Every (γ, k) pair instead of one parameter at a time.
        #[arg(long)]
        full_grid: bool,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("COUPLE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("COUPLE_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return CliError::Usage(e.render().to_string().trim().to_string()).report(),
    };
    let result = configure_threads().and_then(|()| commands::dispatch(&cli));
    match result {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
            // a closed stdout is not a failure of the command itself
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => e.report(),
    }
}
