use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use leeds_core::harness::{self, ExperimentConfig, SweepParam};

/// Online meta-learning under distribution shift on synthetic few-shot streams.
///
/// Any config field can be overridden with a flag naming its dotted path, e.g.
/// `--stream.p_stay 0.75`, `--det.ell=1.2` or `--n_seeds 1`.
#[derive(Debug, Parser)]
#[command(name = "leeds", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every configured mode on every seed and write episodes and summaries.
    Run { config: PathBuf },
    /// Run one experiment per value of a detector or stream parameter.
    Sweep {
        config: PathBuf,
        /// One of ell, tau, delta, p_stay.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
    },
    /// Assumption checks, detection-error bounds and regret measurements.
    Theory { config: PathBuf },
    /// Print the default switch threshold and calibrated shift thresholds.
    Calibrate { config: PathBuf },
}

/// Long options owned by the argument parser; every other `--key` is a config override.
const CLAP_FLAGS: [&str; 4] = ["help", "version", "param", "values"];

type Overrides = Vec<(String, String)>;

/// Splits `--a.b value` / `--a.b=value` overrides from the arguments clap sees.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if CLAP_FLAGS.contains(&name.as_str()) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .with_context(|| format!("override --{name} needs a value"))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn load(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path, overrides)?)
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

fn print_summaries(summaries: &[harness::ModeSummary]) {
    println!(
        "{:<14} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "mode", "seeds", "overall", "std", "pretrain", "precision", "recall"
    );
    for s in summaries {
        let ood: Vec<String> = s.ood_acc_mean.iter().map(|(d, a)| format!("ood{d}={}", fmt(*a))).collect();
        println!(
            "{:<14} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}  {}",
            s.mode.as_str(),
            s.seed_count,
            fmt(s.overall_acc_mean),
            fmt(s.overall_acc_std),
            fmt(s.pretrain_acc_mean),
            fmt(s.precision_mean),
            fmt(s.recall_mean),
            ood.join(" ")
        );
    }
}

fn execute(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load(&config, overrides)?;
            let res = harness::run_experiment(&cfg)?;
            print_summaries(&res.summaries);
            println!("wrote {}", res.output_dir.display());
        }
        Command::Sweep { config, param, values } => {
            let cfg = load(&config, overrides)?;
            let param: SweepParam = param.parse()?;
            let points = harness::sweep(&cfg, param, &values)?;
            let mut failed = 0;
            for p in &points {
                println!("{} = {}", param.as_str(), p.value);
                match &p.result {
                    Ok(res) => print_summaries(&res.summaries),
                    Err(e) => {
                        failed += 1;
                        println!("  error: {e}");
                    }
                }
            }
            println!("wrote {}", cfg.output_dir.join("sweep.csv").display());
            if failed == points.len() {
                anyhow::bail!("every sweep point failed");
            }
        }
        Command::Theory { config } => {
            let cfg = load(&config, overrides)?;
            let report = harness::run_theory(&cfg)?;
            for c in &report.checks {
                let status = match c.pass {
                    Some(true) => "pass",
                    Some(false) => "FAIL",
                    None => "info",
                };
                let bound = c.bound.map(|b| format!(" (bound {})", fmt(b))).unwrap_or_default();
                println!("{status:<5} {:<48} {}{bound}", c.name, fmt(c.measured));
            }
            println!("wrote {}", cfg.output_dir.join("theory.json").display());
        }
        Command::Calibrate { config } => {
            let cfg = load(&config, overrides)?;
            let report = harness::calibrate(&cfg)?;
            println!("ell default (ln K) = {}", report.ell_default);
            for s in &report.seeds {
                println!(
                    "seed {} ({}): tau = {}  held-out in-distribution rate = {}",
                    s.index, s.seed, s.tau, s.held_out_ind_rate
                );
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<leeds_core::Error>() {
        Some(e) if e.is_config() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match execute(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, ov) =
            split_overrides(s(&["leeds", "run", "c.json", "--stream.p_stay", "0.75", "--det.ell=1.5"])).unwrap();
        assert_eq!(rest, s(&["leeds", "run", "c.json"]));
        assert_eq!(
            ov,
            vec![
                ("stream.p_stay".to_string(), "0.75".to_string()),
                ("det.ell".to_string(), "1.5".to_string())
            ]
        );
    }

    #[test]
    fn plain_flags_pass_through() {
        let (rest, ov) = split_overrides(s(&["leeds", "sweep", "c.json", "--param", "ell", "--values", "1,2"])).unwrap();
        assert_eq!(rest.len(), 7);
        assert!(ov.is_empty());
        assert!(split_overrides(s(&["leeds", "run", "c.json", "--stream.p_stay"])).is_err());
        let (_, ov) = split_overrides(s(&["leeds", "run", "c.json", "--n_seeds", "1"])).unwrap();
        assert_eq!(ov, vec![("n_seeds".to_string(), "1".to_string())]);
    }
}
