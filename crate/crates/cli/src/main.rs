use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use roaforge_cli::{
    cmd_baseline, cmd_eval, cmd_export_smt2, cmd_train, cmd_verify, CliError, CliResult, Overrides, Resolved, RunConfig,
};

#[derive(Parser, Debug)]
#[command(name = "roaforge", version, about = "Learn a controller, a neural Lyapunov function and residual dynamics; estimate and certify the region of attraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the training loop and write metrics, checkpoint and report.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Recompute ratios, ISS diagnostics and boundary rollouts of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Grid-falsify the decrease condition (exit 0: none found, 1: counterexample, 2: error).
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        zeta: Option<f64>,
        #[arg(long)]
        resolution: Option<f64>,
    },
    /// LQR gain, Riccati solution and the quadratic baseline RoA estimate.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the falsification query as an SMT-LIB2 script.
    ExportSmt2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        zeta: Option<f64>,
    },
}

fn setup(common: &Common, iterations: Option<usize>) -> CliResult<Resolved> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(anyhow::anyhow!("thread pool: {e}")))?;
    }
    let cfg = RunConfig::load(&common.config).map_err(CliError::Config)?;
    let ov = Overrides { seed: common.seed, out: common.out.clone(), iterations };
    cfg.resolve(&ov).map_err(CliError::Config)
}

fn print_json<T: serde::Serialize>(v: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(v).map_err(|e| CliError::Other(e.into()))?);
    Ok(())
}

fn load(res: &Resolved, path: &Path) -> CliResult<roaforge::lyapnet::Networks> {
    res.load_networks(path).map_err(CliError::Other)
}

fn run(cli: Cli) -> CliResult<u8> {
    match cli.command {
        Command::Train { common, iterations } => {
            let res = setup(&common, iterations)?;
            let (_, summary) = cmd_train(&res)?;
            print_json(&summary)?;
        }
        Command::Eval { common, checkpoint } => {
            let res = setup(&common, None)?;
            let nets = load(&res, &checkpoint)?;
            print_json(&cmd_eval(&res, &nets)?)?;
        }
        Command::Verify { common, checkpoint, zeta, resolution } => {
            let res = setup(&common, None)?;
            let nets = load(&res, &checkpoint)?;
            let result = cmd_verify(&res, &nets, zeta, resolution)?;
            print_json(&result)?;
            return Ok(if result.counterexample.is_some() { 1 } else { 0 });
        }
        Command::Baseline { common, checkpoint } => {
            let res = setup(&common, None)?;
            let nets = checkpoint.map(|p| load(&res, &p)).transpose()?;
            print_json(&cmd_baseline(&res, nets.as_ref())?)?;
        }
        Command::ExportSmt2 { common, checkpoint, zeta } => {
            let res = setup(&common, None)?;
            let nets = load(&res, &checkpoint)?;
            let path = cmd_export_smt2(&res, &nets, zeta)?;
            println!("{}", path.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROAFORGE_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
