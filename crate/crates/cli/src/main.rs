use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rer_core::harness::{
    parse_grid_arg, run_bounds, run_experiment, run_gradcheck, run_sweep, write_outputs, ExperimentConfig,
    GradcheckFault, GradcheckOptions,
};
use rer_core::Error;

#[derive(Parser)]
#[command(name = "rer", version, about = "Relational experience replay experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment config and write results
    Run { config: PathBuf },
    /// Check the analytic relation-net gradient against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Corrupt the analytic gradient on purpose (the check must then fail)
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
    /// Joint-training and no-buffer fine-tuning reference accuracies
    Bounds { config: PathBuf },
    /// Run the config once per point of a parameter grid
    Sweep {
        config: PathBuf,
        /// `dotted.key=v1,v2,...`; repeat for a Cartesian product
        #[arg(long, required = true)]
        grid: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    FlipBufferCoefficient,
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) | Error::Json(_) | Error::Usage(_) | Error::Io(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(config: PathBuf) -> Result<ExitCode, Error> {
    let cfg = ExperimentConfig::load(&config)?;
    let res = run_experiment(&cfg)?;
    let dir = cfg.resolved_output_dir();
    write_outputs(&res, &dir, cfg.write_traces)?;
    for (name, p) in &res.summary.protocols {
        let bwt = match (p.bwt_mean, p.bwt_std) {
            (Some(m), Some(s)) => format!("{:.4} ± {:.4}", m, s),
            _ => "n/a".into(),
        };
        println!(
            "{} {name}: ACC {:.4} ± {:.4}  BWT {bwt}",
            res.summary.method, p.acc_mean, p.acc_std
        );
    }
    for (seed, err) in &res.summary.failed_seeds {
        eprintln!("seed {seed} failed: {err}");
    }
    println!("wrote {}", dir.display());
    Ok(if res.summary.failed_seeds.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn gradcheck(trials: usize, seed: u64, tolerance: f64, fault: Option<Fault>) -> Result<ExitCode, Error> {
    let report = run_gradcheck(&GradcheckOptions {
        trials,
        seed,
        tolerance,
        fault: fault.map(|Fault::FlipBufferCoefficient| GradcheckFault::FlipBufferCoefficient),
        ..GradcheckOptions::default()
    })?;
    println!(
        "gradcheck: {} trials, worst relative error {:.3e}, worst grouped-vs-flat error {:.3e}",
        report.trials.len(),
        report.worst_rel_err,
        report.worst_group_err
    );
    if report.passed {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL");
        Ok(ExitCode::from(1))
    }
}

fn bounds(config: PathBuf) -> Result<ExitCode, Error> {
    let cfg = ExperimentConfig::load(&config)?;
    let b = run_bounds(&cfg)?;
    let dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("bounds.json"), serde_json::to_string_pretty(&b)? + "\n")?;
    println!("upper (joint) ACC {:.4} ± {:.4}", b.upper.acc_mean, b.upper.acc_std);
    println!("lower (no buffer) ACC {:.4} ± {:.4}", b.lower.acc_mean, b.lower.acc_std);
    Ok(ExitCode::SUCCESS)
}

fn sweep(config: PathBuf, grid: Vec<String>) -> Result<ExitCode, Error> {
    let text = std::fs::read_to_string(&config)?;
    let base: serde_json::Value = serde_json::from_str(&text)?;
    let cfg = ExperimentConfig::from_json(&text)?;
    let grid = grid.iter().map(|g| parse_grid_arg(g)).collect::<Result<Vec<_>, _>>()?;
    let out = cfg.resolved_output_dir();
    let mut failed = false;
    for (label, s) in run_sweep(&base, &grid, &out)? {
        failed |= !s.failed_seeds.is_empty();
        for (name, p) in &s.protocols {
            println!("{label} {name}: ACC {:.4} ± {:.4}", p.acc_mean, p.acc_std);
        }
    }
    println!("wrote {}", out.display());
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run { config } => run(config),
        Command::Gradcheck {
            trials,
            seed,
            tolerance,
            inject_fault,
        } => gradcheck(trials, seed, tolerance, inject_fault),
        Command::Bounds { config } => bounds(config),
        Command::Sweep { config, grid } => sweep(config, grid),
    };
    res.unwrap_or_else(|e| exit_for(&e))
}
