use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparsekp::synth::Split;
use sparsekp::LossVariant;
use sparsekp_cli::commands;
use sparsekp_cli::results::{self, ResultRow};
use sparsekp_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "sparsekp", version, about = "Sparse-label keypoint heatmap benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic loss gradients against central differences.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_grad: Option<f64>,
    },
    /// Train one model with the configured loss.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Loss the checkpoint was trained with (selects the decode threshold).
        #[arg(long)]
        loss: Option<LossVariant>,
    },
    /// Train and score every (loss, seed) pair.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "MSE,Hill,CragAndTail")]
        losses: Vec<LossVariant>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Train and score every (ablation row, seed) pair.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "default")]
        rows: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Re-render tables and plots from existing result CSVs.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_rows(outcomes: &[commands::RunOutcome]) {
    let mut rows: Vec<ResultRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    rows.extend(results::median_rows(&rows));
    print!("{}", results::render_table(&rows));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let m = commands::gen_data(&cfg, common.out.as_deref())?;
            println!("wrote {} samples to {}", m.samples.len(), m.root.display());
        }
        Command::Gradcheck {
            out,
            trials,
            seed,
            corrupt_grad,
        } => print!("{}", commands::cmd_gradcheck(out.as_deref(), trials, seed, corrupt_grad)?),
        Command::Train { common } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let log = commands::cmd_train(&cfg, common.out.as_deref())?;
            println!(
                "best epoch {} (val loss {}), stopped: {:?}",
                log.best_epoch,
                log.best_val_loss(),
                log.stop_reason
            );
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            loss,
        } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let r = commands::cmd_eval(&cfg, &checkpoint, split, loss, common.out.as_deref())?;
            println!(
                "localization P {:.4} R {:.4} F1 {:.4} | multilabel P {:.4} R {:.4} F1 {:.4}",
                r.localization.precision,
                r.localization.recall,
                r.localization.f1,
                r.stations.precision,
                r.stations.recall,
                r.stations.f1
            );
        }
        Command::Benchmark {
            common,
            losses,
            seeds,
            threads,
        } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let seeds = seeds.unwrap_or_else(|| cfg.seeds.clone());
            let out = common.out.unwrap_or_else(|| cfg.out.clone());
            print_rows(&commands::cmd_benchmark(&cfg, &losses, &seeds, &out, threads)?);
        }
        Command::Ablate {
            common,
            rows,
            seeds,
            threads,
        } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let seeds = seeds.unwrap_or_else(|| cfg.seeds.clone());
            let out = common.out.unwrap_or_else(|| cfg.out.clone());
            print_rows(&commands::cmd_ablate(&cfg, &rows, &seeds, &out, threads)?);
        }
        Command::Report { out } => print!("{}", commands::cmd_report(&out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
