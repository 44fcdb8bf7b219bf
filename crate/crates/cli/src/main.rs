use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use codenoise_cli::{report, run, Overrides};

#[derive(Parser)]
#[command(
    name = "codenoise",
    version,
    about = "Long-sequence co-denoising experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repeat: Option<usize>,
    },
    /// Summarize metric CSVs and write plot data.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            workers,
            seed,
            repeat,
        } => run(
            &config,
            &out,
            &Overrides {
                workers,
                seed,
                repeat,
            },
        )
        .map(|o| o.summary),
        Command::Report { csv, out } => report(&csv, &out),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
