use std::process::ExitCode;

use clap::Parser;
use clfcbf_cli::{cmd_compare, cmd_defaults, cmd_run, cmd_sweep, Cli, CliError, Command};

fn opt(v: Option<usize>) -> String {
    v.map_or("-".into(), |s| s.to_string())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(args) => {
            let m = cmd_run(args)?;
            let s = &m.summary;
            println!("mode {} digest {}", m.mode.map_or("?", |m| m.name()), m.config_digest);
            println!(
                "converged {} steps {} deadlock {} final avg goal distance {} min h {}",
                s["converged"], s["steps_to_convergence"], s["deadlock"], s["final_avg_goal_distance"], s["min_h"]
            );
            println!("wrote {}", args.scenario.out_dir.display());
        }
        Command::Compare(args) => {
            let (m, verdict) = cmd_compare(args)?;
            println!("{:<10} {:>9} {:>10} {:>8} {:>16}", "mode", "deadlock", "converged", "steps", "final avg dist");
            for s in m.summary["summaries"].as_array().into_iter().flatten() {
                println!(
                    "{:<10} {:>9} {:>10} {:>8} {:>16.6}",
                    s["mode"].as_str().unwrap_or("?"),
                    s["deadlock"].to_string(),
                    s["converged"].to_string(),
                    opt(s["steps_to_convergence"].as_u64().map(|v| v as usize)),
                    s["final_avg_goal_distance"].as_f64().unwrap_or(f64::NAN)
                );
            }
            println!("verdict: {}", verdict.text);
        }
        Command::Sweep(args) => {
            let (_, rows) = cmd_sweep(args)?;
            println!("{:>4} {:<10} {:>12} {:>12} {:>12}", "N", "mode", "mean", "min", "max");
            for r in rows {
                println!("{:>4} {:<10} {:>12.6} {:>12.6} {:>12.6}", r.n, r.mode.name(), r.mean, r.min, r.max);
            }
        }
        Command::Defaults => print!("{}", cmd_defaults()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
