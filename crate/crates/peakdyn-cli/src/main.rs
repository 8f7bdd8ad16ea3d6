use clap::Parser;
use peakdyn_cli::config::{ExperimentConfig, ExperimentKind};
use peakdyn_cli::error::CliError;
use peakdyn_cli::{resolve_out, run_all};
use std::path::PathBuf;
use std::process::ExitCode;

/// Runs peak dynamics experiments from a TOML config.
#[derive(Debug, Parser)]
#[command(name = "peakdyn", version)]
struct Args {
    /// Experiment kind; must agree with `kind` in the config.
    kind: ExperimentKind,
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overridden by PEAKDYN_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("peakdyn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(args: Args) -> Result<(), CliError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if config.kind != args.kind {
        return Err(CliError::Config(format!(
            "command line asks for {} but the config is for {}",
            args.kind.name(),
            config.kind.name()
        )));
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if args.threads == Some(0) {
        return Err(CliError::Config("--threads must be positive".into()));
    }
    let out = resolve_out(args.out);
    let outcomes = run_all(&config, &out, args.threads)?;
    let mut first_err = None;
    for o in outcomes {
        match o.result {
            Ok(_) => println!("{}: ok ({})", o.tag, o.dir.display()),
            Err(e) => {
                println!("{}: {e} ({})", o.tag, o.dir.display());
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}
