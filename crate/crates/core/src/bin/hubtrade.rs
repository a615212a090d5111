use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hubtrade::io::{builtin, export_results, export_scenario, load_scenario};
use hubtrade::runner::{compare, run, RunOverrides};

/// Loss-aware peer-to-peer trading tariffs for multi-energy-hub networks.
#[derive(Parser)]
#[command(name = "hubtrade", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonFlags {
    /// Number of daily windows (retiles the scenario data when it differs).
    #[arg(long)]
    days: Option<usize>,
    /// Settlement period in steps (must divide the run length).
    #[arg(long)]
    tf: Option<usize>,
    /// Inner-loop tolerance on squared primal residuals.
    #[arg(long)]
    eps: Option<f64>,
    /// Outer-loop stability tolerance.
    #[arg(long)]
    sigma: Option<f64>,
    /// Initial uniform tariff.
    #[arg(long)]
    gamma0: Option<f64>,
    /// Initial outer step size.
    #[arg(long)]
    alpha0: Option<f64>,
    /// Output directory for result tables.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Cross-check clearings and settlements against centralized solves
    /// (small instances only).
    #[arg(long)]
    oracle: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the rolling-horizon tariff design and export the result tables.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
        /// Skip the leader loop and clear at this constant tariff.
        #[arg(long)]
        constant_gamma: Option<f64>,
    },
    /// Compare the designed tariff against constant tariffs on identical data.
    Compare {
        scenario: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
        /// Comma-separated constant tariff values.
        #[arg(long, value_delimiter = ',', default_value = "0,0.005,0.01,0.05")]
        gammas: Vec<f64>,
    },
    /// Write a bundled scenario pack to disk.
    Gen {
        /// Output path of the scenario file.
        #[arg(long)]
        out: PathBuf,
        /// Pack name: ieee33-5hub or two-bus.
        #[arg(long, default_value = "ieee33-5hub")]
        pack: String,
        #[arg(long, default_value_t = 1)]
        days: usize,
    },
}

fn overrides(flags: &CommonFlags, constant_gamma: Option<f64>) -> RunOverrides {
    RunOverrides {
        days: flags.days,
        t_f: flags.tf,
        eps: flags.eps,
        sigma: flags.sigma,
        gamma0: flags.gamma0,
        alpha0: flags.alpha0,
        constant_gamma,
        oracle: flags.oracle,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            flags,
            constant_gamma,
        } => {
            let scenario = match load_scenario(&scenario) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let ov = overrides(&flags, constant_gamma);
            match run(&scenario, &ov) {
                Ok(outputs) => {
                    if let Err(e) = export_results(&outputs, &flags.out) {
                        eprintln!("error: {e}");
                        return ExitCode::from(1);
                    }
                    let windows = outputs.windows.len();
                    let converged = outputs.windows.iter().filter(|w| w.converged).count();
                    println!(
                        "{windows} window(s), {converged} converged; results in {}",
                        flags.out.display()
                    );
                    for (i, w) in outputs.windows.iter().enumerate() {
                        println!(
                            "  window {i}: trades {:.1} kWh, system cost {:.2}, tariff collected {:.4}",
                            w.total_trades_kwh, w.system_cost, w.tariff_collected
                        );
                        if let Some(gap) = w.oracle_gap {
                            println!("    centralized-oracle relative gap: {gap:.3e}");
                        }
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Compare {
            scenario,
            flags,
            gammas,
        } => {
            let scenario = match load_scenario(&scenario) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let ov = overrides(&flags, None);
            match compare(&scenario, &gammas, &ov) {
                Ok(table) => {
                    let csv = table.to_csv();
                    print!("{csv}");
                    if let Err(e) = std::fs::create_dir_all(&flags.out).and_then(|_| {
                        std::fs::write(flags.out.join("comparison.csv"), csv.as_bytes())
                    }) {
                        eprintln!("error: {e}");
                        return ExitCode::from(1);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Gen { out, pack, days } => {
            let scenario = match pack.as_str() {
                "ieee33-5hub" => builtin::ieee33_5hub(days),
                "two-bus" => builtin::two_bus_toy(24 * days.max(1)),
                other => {
                    eprintln!("error: unknown pack {other}");
                    return ExitCode::from(2);
                }
            };
            match export_scenario(&scenario, &out) {
                Ok(()) => {
                    println!("wrote {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
