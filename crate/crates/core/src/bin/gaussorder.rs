use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gaussorder::anticonc::{nazarov_bound, theorem1_bound};
use gaussorder::config::RunConfig;
use gaussorder::report::{fmt_num, run, RunOptions};
use gaussorder::testing::kfwer_upper_bound;
use gaussorder::verify::verify_reports;

/// Monte Carlo checks for anti-concentration of Gaussian order statistics
/// and k-FWER step-down testing.
#[derive(Parser)]
#[command(name = "gaussorder", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario in a config file and write the report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out_dir` in the config; default `report`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Recompute pass/fail from the CSVs in a report directory.
    Verify {
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a bound formula.
    #[command(subcommand)]
    Bound(Bound),
}

#[derive(Subcommand)]
enum Bound {
    /// 2 ε k (1 + E‖X‖∞)
    Theorem1 {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        e_max_norm: f64,
    },
    /// (ε / sqrt(min var W)) (sqrt(2 ln C(p, k)) + 2)
    Nazarov {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        p: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        min_var_w: f64,
    },
    /// α + 2 γ k (1 + E‖U‖∞) + δ
    Kfwer(KfwerArgs),
}

#[derive(Args)]
struct KfwerArgs {
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    gamma: f64,
    #[arg(long)]
    e_max_norm: f64,
    #[arg(long)]
    delta: f64,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> gaussorder::Result<u8> {
    match cli.command {
        Command::Run { config, out, seed, workers } => {
            let cfg = RunConfig::from_toml(&std::fs::read_to_string(&config)?)?;
            let out = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("report"));
            let bundle = run(&cfg, &RunOptions { out_dir: Some(out.clone()), seed, workers })?;
            for o in &bundle.outcomes {
                match &o.result {
                    Ok(r) => println!("{} {} {}", o.id, o.kind, if r.pass { "pass" } else { "FAIL" }),
                    Err(e) => println!("{} {} ERROR {e}", o.id, o.kind),
                }
            }
            println!("report written to {}", out.display());
            Ok(if bundle.all_pass() { 0 } else { 1 })
        }
        Command::Verify { out } => {
            let s = verify_reports(&out)?;
            for f in &s.findings {
                println!("{f}");
            }
            println!(
                "{} rows checked, {} findings: {}",
                s.rows_checked,
                s.findings.len(),
                if s.pass() { "pass" } else { "FAIL" }
            );
            Ok(s.exit_code() as u8)
        }
        Command::Bound(b) => {
            let v = match b {
                Bound::Theorem1 { epsilon, k, e_max_norm } => theorem1_bound(epsilon, k, e_max_norm)?,
                Bound::Nazarov { epsilon, p, k, min_var_w } => nazarov_bound(epsilon, p, k, min_var_w)?,
                Bound::Kfwer(a) => kfwer_upper_bound(a.alpha, a.k, a.gamma, a.e_max_norm, a.delta)?,
            };
            println!("{}", fmt_num(v));
            Ok(0)
        }
    }
}
