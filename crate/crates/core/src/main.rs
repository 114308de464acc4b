use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zqv_transport::experiment::{run, ExperimentConfig, ExperimentKind};
use zqv_transport::Error;

/// Monte Carlo experiments for transport equations driven by Hermite noise.
#[derive(Parser)]
#[command(name = "zqv-transport", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for artifacts and manifest.json.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Increment law and covariance of the noise.
    NoiseStats,
    /// Zero quadratic variation certificate with a Wiener control.
    Qv,
    /// Flow inversion and Picard agreement.
    Flow,
    /// Weak formulation residual and its refinement.
    TransportWeakform,
    /// Isometry and derivative oracles.
    Malliavin,
    /// Density existence diagnostics for u(t, x).
    Density,
    /// Lower bound of the derivative bracket.
    BoundCheck,
    /// Kernel values K and dK on a coarse grid as CSV.
    KernelTable,
    /// Print validation diagnostics for the config and exit.
    Validate,
}

fn kind(c: Command) -> Option<ExperimentKind> {
    Some(match c {
        Command::NoiseStats => ExperimentKind::NoiseStats,
        Command::Qv => ExperimentKind::Qv,
        Command::Flow => ExperimentKind::Flow,
        Command::TransportWeakform => ExperimentKind::TransportWeakform,
        Command::Malliavin => ExperimentKind::Malliavin,
        Command::Density => ExperimentKind::Density,
        Command::BoundCheck => ExperimentKind::BoundCheck,
        Command::KernelTable => ExperimentKind::KernelTable,
        Command::Validate => return None,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut cfg = match &cli.common.config {
        Some(p) => match ExperimentConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => ExperimentConfig::default(),
    };
    if let Some(k) = kind(cli.command) {
        cfg.kind = k;
    }
    if let Some(v) = cli.common.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.common.paths {
        cfg.paths = v;
    }
    if let Some(v) = cli.common.threads {
        cfg.threads = Some(v);
    }
    if let Some(v) = cli.common.out {
        cfg.out = v;
    }
    let diags = cfg.validate();
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("config: {d}");
        }
        return ExitCode::from(2);
    }
    if kind(cli.command).is_none() {
        println!("config valid");
        return ExitCode::SUCCESS;
    }
    if let Some(n) = cfg.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cfg) {
        Ok(m) => {
            for c in &m.checks {
                println!(
                    "{} {}: value {:.6e}, threshold {:.6e}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.threshold
                );
            }
            println!("manifest: {}", cfg.out.join("manifest.json").display());
            if m.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e @ Error::Argument(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {} experiment: {e}", cfg.kind.as_str());
            ExitCode::from(3)
        }
    }
}
