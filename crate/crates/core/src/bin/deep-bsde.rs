use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deep_bsde::experiments::{emit_plots, exit, resolve, run, ExperimentMode, Outcome, Overrides, PRESET_NAMES};

#[derive(Parser)]
#[command(name = "deep-bsde", version, about = "Deep BSDE solver for coupled FBSDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train policies and report the Y0 error.
    Solve(Common),
    /// Step-size study over `converge.n_list`.
    Converge(Common),
    /// Check the weak-coupling and monotonicity condition.
    Audit(Common),
    /// Regression Monte Carlo reference solution (dimension <= 3).
    Oracle(Common),
    /// Train one policy and compare it with the oracle.
    Crosscheck(Common),
    /// Run whatever `mode` the config names.
    Run(Common),
    /// Draw SVG charts from the CSVs in a result directory.
    Plot {
        /// Directory holding aggregate.csv and/or convergence.csv.
        dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: `output` from the config, else `out/<mode>`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<String>,
    /// Sequential runs and zeroed wall-clock columns.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    max_seconds: Option<u64>,
    /// Write this many simulated paths of the first trained policy.
    #[arg(long)]
    export_paths: Option<usize>,
}

fn execute(mode: Option<ExperimentMode>, c: Common) -> i32 {
    let text = match &c.config {
        Some(p) => match std::fs::read_to_string(p) {
            Ok(t) => Some(t),
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", p.display());
                return exit::CONFIG;
            }
        },
        None => None,
    };
    if text.is_none() && c.preset.is_none() && mode != Some(ExperimentMode::Audit) {
        eprintln!("note: no --config or --preset given; using the linear1d-smoke defaults");
    }
    let overrides = Overrides {
        preset: c.preset,
        mode,
        seed: c.seed,
        deterministic: c.deterministic,
        max_seconds: c.max_seconds.map(|s| s as f64),
        export_paths: c.export_paths,
        output: c.out.map(|p| p.display().to_string()),
    };
    let cfg = match resolve(text.as_deref(), &overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return exit::CONFIG;
        }
    };
    let Some(mode) = cfg.mode else {
        eprintln!("config error: mode: `run` needs a mode in the config file");
        return exit::CONFIG;
    };
    let out = cfg
        .output
        .clone()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out").join(mode.to_string()));
    match run(&cfg, &out) {
        Ok(res) => {
            println!("wrote {} files to {}", res.artifacts.len(), out.display());
            match res.outcome {
                Outcome::Ok => exit::OK,
                Outcome::AuditFailed => {
                    println!("condition does not hold");
                    exit::AUDIT_FAILED
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit::RUNTIME
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Solve(c) => execute(Some(ExperimentMode::Solve), c),
        Command::Converge(c) => execute(Some(ExperimentMode::Converge), c),
        Command::Audit(c) => execute(Some(ExperimentMode::Audit), c),
        Command::Oracle(c) => execute(Some(ExperimentMode::Oracle), c),
        Command::Crosscheck(c) => execute(Some(ExperimentMode::Crosscheck), c),
        Command::Run(c) => execute(None, c),
        Command::Plot { dir, out } => {
            let dir = dir.or(out).unwrap_or_else(|| PathBuf::from("."));
            match emit_plots(&dir) {
                Ok(files) => {
                    for f in files {
                        println!("{}", f.display());
                    }
                    exit::OK
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit::RUNTIME
                }
            }
        }
        Command::Presets => {
            for p in PRESET_NAMES {
                println!("{p}");
            }
            exit::OK
        }
    };
    ExitCode::from(code as u8)
}
