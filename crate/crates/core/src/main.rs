use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mfcascade::experiment::{execute, selftest, validate, write_outcome, ExperimentConfig, ExperimentKind, Severity};
use mfcascade::Result;

#[derive(Parser)]
#[command(name = "mfcascade", version, about = "Random cascade simulation and multifractal analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Structure function and large-deviation spectrum.
    Spectrum(RunArgs),
    /// Convergence rate of the structure function.
    Convergence(RunArgs),
    /// Growth speeds along μ_q-typical points.
    Growthspeed(RunArgs),
    /// Large-deviation counts against the renewal bound.
    Ldrenewal(RunArgs),
    /// Limsup covers and their box dimension.
    Ubiquity(RunArgs),
    /// Check a config without simulating.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fast exact checks of the core identities.
    Selftest {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    depth: Option<u32>,
    #[arg(long)]
    replicas: Option<u32>,
}

fn run_experiment(kind: ExperimentKind, args: RunArgs) -> Result<bool> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| mfcascade::Error::Config(e.to_string()))?;
    }
    let mut config = ExperimentConfig::load(&args.config)?;
    config.kind = Some(kind);
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(d) = args.depth {
        config.depth = d;
    }
    if let Some(r) = args.replicas {
        config.replicas = r;
    }
    let out = args
        .out
        .or_else(|| config.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    for d in validate(&config).iter().filter(|d| d.severity == Severity::Warning) {
        eprintln!("warning: {}", d.message);
    }
    let start = Instant::now();
    let outcome = execute(&config)?;
    let summary = write_outcome(&config, &outcome, &out, start.elapsed().as_secs_f64())?;
    for c in &summary.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("wrote {} files to {}", summary.files.len() + 1, out.display());
    Ok(summary.all_passed)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Spectrum(a) => run_experiment(ExperimentKind::Spectrum, a),
        Command::Convergence(a) => run_experiment(ExperimentKind::Convergence, a),
        Command::Growthspeed(a) => run_experiment(ExperimentKind::Growthspeed, a),
        Command::Ldrenewal(a) => run_experiment(ExperimentKind::Ldrenewal, a),
        Command::Ubiquity(a) => run_experiment(ExperimentKind::Ubiquity, a),
        Command::Validate { config } => {
            let config = ExperimentConfig::load(&config)?;
            let diagnostics = validate(&config);
            for d in &diagnostics {
                let tag = match d.severity {
                    Severity::Error => "error",
                    Severity::Warning => "warning",
                };
                println!("{tag}: {}", d.message);
            }
            if diagnostics.is_empty() {
                println!("ok");
            }
            Ok(diagnostics.iter().all(|d| d.severity != Severity::Error))
        }
        Command::Selftest { out } => {
            let checks = selftest()?;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let text = serde_json::to_string_pretty(&serde_json::json!({ "checks": checks }))
                    .map_err(|e| mfcascade::Error::Io(e.to_string()))?;
                std::fs::write(dir.join("summary.json"), text)?;
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
