use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use starris_rsma::check;
use starris_rsma::harness::{
    emit, run_experiment, write_rows, ExperimentSpec, Format, Sweep, SweepVar,
};

#[derive(Parser)]
#[command(
    name = "starris",
    version,
    about = "Max-min energy-efficiency experiments for STAR-RIS rate splitting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run(RunArgs),
    /// Run the experiment over a sweep given on the command line.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "var")]
        variable: SweepVar,
        /// Comma-separated, strictly increasing values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Run the verification suite and print a pass/fail table.
    Check {
        /// Comma-separated criterion numbers (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: Format,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

const EXIT_TRIAL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn load(args: &RunArgs, sweep: Option<Sweep>) -> Result<ExperimentSpec, String> {
    let mut spec = ExperimentSpec::from_path(&args.config).map_err(|e| e.to_string())?;
    if let Some(seed) = args.seed {
        spec.base.seed = seed;
    }
    if args.workers.is_some() {
        spec.workers = args.workers;
    }
    if sweep.is_some() {
        spec.sweep = sweep;
    }
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn run(args: &RunArgs, sweep: Option<Sweep>) -> ExitCode {
    let spec = match load(args, sweep) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let rows = match run_experiment(&spec) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_TRIAL);
        }
    };
    let written = match &args.out {
        Some(path) => emit(&rows, path, args.format),
        None => {
            let mut stdout = std::io::stdout().lock();
            write_rows(&rows, args.format, &mut stdout).and_then(|_| Ok(stdout.flush()?))
        }
    };
    if let Err(e) = written {
        eprintln!("error: cannot write results: {e}");
        return ExitCode::from(EXIT_TRIAL);
    }
    let failed = rows.iter().filter(|r| r.status == "error").count();
    if failed > 0 {
        eprintln!("{failed} of {} rows failed", rows.len());
        return ExitCode::from(EXIT_TRIAL);
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => run(&args, None),
        Command::Sweep {
            run: args,
            variable,
            values,
        } => run(&args, Some(Sweep { variable, values })),
        Command::Check { only } => {
            let ids = if only.is_empty() {
                check::ALL.to_vec()
            } else {
                only
            };
            let outcomes = check::run(&ids);
            for o in &outcomes {
                println!("{}", o.line());
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} passed, {failed} failed", outcomes.len() - failed);
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_TRIAL)
            }
        }
    }
}
