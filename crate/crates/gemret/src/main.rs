//! Thin argument-parsing shell over [`gemret::cli`].

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gemret::cli;
use gemret::config::{load_config, RunConfig};
use gemret::retrieval::QEConfig;

#[derive(Parser)]
#[command(
    name = "gemret",
    version,
    about = "Image retrieval with trainable generalized-mean pooling"
)]
struct Args {
    /// RNG seed; overrides the config file's `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: images, visibility graph, manifest.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a model on tuples mined from a visibility graph.
    Train {
        /// Visibility graph JSON; images resolve relative to its directory.
        #[arg(long)]
        graph: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Report JSON path (default: checkpoint with a .report.json suffix).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Learn discriminative whitening from graph-labeled pairs.
    Whiten {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// Output dimensionality D ≤ descriptor dimension.
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a descriptor index over a dataset manifest.
    Index {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional whitening file applied after descriptor extraction.
        #[arg(long)]
        whitening: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every manifest query against an index and report mAP.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Average query expansion over the top N results.
        #[arg(long, value_name = "N", conflicts_with = "alpha_qe")]
        aqe: Option<usize>,
        /// α-weighted query expansion: --alpha-qe <ALPHA> <N>.
        #[arg(long, num_args = 2, value_names = ["ALPHA", "N"])]
        alpha_qe: Option<Vec<String>>,
        /// Ranked list output file.
        #[arg(long)]
        ranked: Option<PathBuf>,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// Corrupt one analytic gradient to prove the check can fail.
        #[arg(long)]
        corrupt: bool,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> gemret::Result<()> {
    let args = Args::parse();
    if let Some(n) = args.threads {
        // Ignore rebuild attempts when a pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }

    match args.command {
        Command::Synth { out } => {
            cli::cmd_synth(&cfg, &out)?;
            println!("dataset written to {}", out.display());
            Ok(())
        }
        Command::Train { graph, out, report } => {
            let report_path = report.unwrap_or_else(|| report_path_for(&out));
            let r = cli::cmd_train(&cfg, &graph, &out, &report_path)?;
            println!(
                "best validation {:.4} at epoch {} of {}; checkpoint {}",
                r.validation[r.selected_epoch],
                r.selected_epoch,
                cfg.epochs,
                out.display()
            );
            Ok(())
        }
        Command::Whiten { checkpoint, graph, dim, out } => {
            cli::cmd_whiten(&cfg, &checkpoint, &graph, dim, &out)?;
            println!("whitening written to {}", out.display());
            Ok(())
        }
        Command::Index { checkpoint, whitening, manifest, out } => {
            cli::cmd_index(&cfg, &checkpoint, whitening.as_deref(), &manifest, &out)?;
            println!("index written to {}", out.display());
            Ok(())
        }
        Command::Eval { index, manifest, aqe, alpha_qe, ranked } => {
            let qe = parse_qe(aqe, alpha_qe)?;
            let (_, text) = cli::cmd_eval(&index, &manifest, qe.as_ref(), ranked.as_deref())?;
            print!("{text}");
            Ok(())
        }
        Command::Gradcheck { corrupt } => {
            let text = cli::cmd_gradcheck(cfg.seed, corrupt)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn report_path_for(checkpoint: &PathBuf) -> PathBuf {
    let mut name = checkpoint.file_stem().unwrap_or_default().to_os_string();
    name.push(".report.json");
    checkpoint.with_file_name(name)
}

fn parse_qe(
    aqe: Option<usize>,
    alpha_qe: Option<Vec<String>>,
) -> gemret::Result<Option<QEConfig>> {
    let bad = |message: String| gemret::Error::Config {
        path: "<args>".into(),
        line: 0,
        message,
    };
    if let Some(n) = aqe {
        // Average QE is exactly the α = 0 special case.
        return Ok(Some(QEConfig { n_qe: n, alpha: 0.0 }));
    }
    match alpha_qe {
        None => Ok(None),
        Some(vals) => {
            let alpha: f64 = vals[0]
                .parse()
                .map_err(|e| bad(format!("--alpha-qe alpha: {e}")))?;
            let n_qe: usize = vals[1]
                .parse()
                .map_err(|e| bad(format!("--alpha-qe n: {e}")))?;
            Ok(Some(QEConfig { n_qe, alpha }))
        }
    }
}
