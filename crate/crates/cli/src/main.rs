use std::path::PathBuf;
use std::process::ExitCode;

use augweight_cli::commands::{cmd_train, cmd_verify, count_status, resolve_out};
use augweight_cli::compare::{render_summary, run_matrix, CompareMatrix};
use augweight_cli::config::{load_run_config, split_overrides};
use augweight_cli::{CliError, CliResult, EXIT_OK};
use augweight_core::suites::Status;
use clap::{Parser, Subcommand};

/// Train and verify loss-dependent gradient weighting on synthetic
/// sequence tasks.
///
/// Any `--<section>.<key>=<value>` argument overrides the matching config
/// field, e.g. `--optim.epochs=50`.
#[derive(Parser)]
#[command(name = "augweight", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run; writes config.toml, metrics.csv and model.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a verification suite: identity, bounds, transport, gradients,
    /// convergence, or all.
    Verify {
        suite: String,
        #[arg(long, default_value = "verify-out")]
        out: PathBuf,
    },
    /// Run a methods × seeds matrix and summarize it.
    Compare {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli, overrides: &[String]) -> CliResult<()> {
    if !overrides.is_empty() && !matches!(cli.command, Command::Train { .. }) {
        return Err(CliError::Config("dotted overrides only apply to train".into()));
    }
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load_run_config(&config, overrides)?;
            let out = resolve_out(out, &cfg)?;
            let outcome = cmd_train(&cfg, &out)?;
            println!(
                "{}: test loss {:.4}, token acc {:.4}, seq acc {:.4}, {} samples -> {}",
                cfg.run_id(),
                outcome.test.loss,
                outcome.test.token_acc,
                outcome.test.seq_acc,
                outcome.samples_processed,
                out.display()
            );
        }
        Command::Verify { suite, out } => {
            let reports = cmd_verify(&suite, &out)?;
            println!(
                "{} pass, {} reported",
                count_status(&reports, Status::Pass),
                count_status(&reports, Status::Reported)
            );
        }
        Command::Compare { matrix, out } => {
            let m = CompareMatrix::load(&matrix)?;
            let summary = run_matrix(&m, &out, |line| eprintln!("{line}"))?;
            print!("{}", render_summary(&summary));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { augweight_cli::EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
