use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ibpcl_cli::{runner, ExperimentConfig, RunError};
use ibpcl_core::gradcheck;

/// Variational continual learning with IBP-masked Bayesian networks.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a stream from a TOML config.
    Run { config: PathBuf },
    /// Continue a run from one of its checkpoints.
    Resume { checkpoint: PathBuf },
    /// Recompute ACC/FWT/BWT and mask statistics of a run directory.
    Report { run_dir: PathBuf },
    /// Finite-difference checks of primitive and full-objective gradients.
    Gradcheck,
}

fn print_row(t: usize, row: &[f64]) {
    let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
    eprintln!("task {}: {}", t + 1, cells.join(" "));
}

fn finish(dir: PathBuf, r: &ibpcl_core::cl::ResultMatrix) {
    if let Ok(m) = r.metrics() {
        let fwt = m.fwt.map_or("n/a".to_string(), |f| format!("{f:.4}"));
        println!("ACC {:.4}  FWT {fwt}  BWT {:.4}", m.acc, m.bwt);
    }
    println!("outputs in {}", dir.display());
}

fn gradcheck_cmd() -> Result<bool, RunError> {
    const PRIMITIVE_TOL: f64 = 1e-4;
    const OBJECTIVE_TOL: f64 = 1e-3;
    let prims = gradcheck::primitive_suite(1).map_err(|e| RunError::Report(e.to_string()))?;
    let worst_prim = prims.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    for c in &prims {
        println!("{:<16} {:.3e}", c.name, c.max_rel_err);
    }
    let sup = gradcheck::supervised_check(1)?;
    let vae = gradcheck::vae_check(1)?;
    println!("{:<16} {sup:.3e}", "supervised elbo");
    println!("{:<16} {vae:.3e}", "vae elbo");
    println!("max relative error: primitives {worst_prim:.3e} (< {PRIMITIVE_TOL:e}), objectives {:.3e} (< {OBJECTIVE_TOL:e})", sup.max(vae));
    Ok(worst_prim < PRIMITIVE_TOL && sup.max(vae) < OBJECTIVE_TOL)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut progress = print_row;
    let result = match cli.command {
        Command::Run { config } => {
            ExperimentConfig::load(&config)
                .map_err(RunError::from)
                .and_then(|cfg| runner::run(&cfg, &mut progress))
                .map(|(dir, r)| finish(dir, &r))
        }
        Command::Resume { checkpoint } => runner::resume(&checkpoint, &mut progress).map(|(dir, r)| finish(dir, &r)),
        Command::Report { run_dir } => runner::report(&run_dir).map(|rep| {
            println!("tasks completed: {}", rep.tasks_done);
            match rep.metrics {
                Some(m) => {
                    let fwt = m.fwt.map_or("n/a".to_string(), |f| format!("{f:.4}"));
                    println!("ACC {:.4}  FWT {fwt}  BWT {:.4}", m.acc, m.bwt);
                }
                None => println!("R incomplete; no summary"),
            }
            if let Some(f) = rep.final_acc {
                println!("final-row mean {f:.4}");
            }
            for row in rep.structure.iter().filter(|r| r.task_a == r.task_b) {
                println!("layer {} after task {}: filled {:.3}", row.layer + 1, row.task_b + 1, row.filled);
            }
        }),
        Command::Gradcheck => match gradcheck_cmd() {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
