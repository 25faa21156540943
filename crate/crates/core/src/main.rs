use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pathway_cl::harness::{self, RunConfig};
use pathway_cl::{Error, Result};

#[derive(Parser)]
#[command(name = "pathway-cl", version, about = "Pathway-routed continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over its task stream.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Sweep the pathway count with a fixed head budget.
    SweepK {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run several configs on one stream and tabulate the orderings.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Index the run summaries in a directory into index.csv.
    Report {
        #[arg(long = "in")]
        dir: PathBuf,
    },
}

fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    RunConfig::from_json(&text)
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load(&config)?;
            let report = harness::run_method(&cfg)?;
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            for s in &report.metrics.steps {
                println!(
                    "task {}: loss {:.4} acc {:.3} S {} P {} energy {:.4e}",
                    s.t,
                    s.loss,
                    s.accuracy,
                    f(s.stability),
                    f(s.plasticity),
                    s.energy_total
                );
                if s.budget_ok == Some(false) {
                    println!("  energy budget exceeded by {:.4e}", -s.budget_margin.unwrap_or(0.0));
                }
            }
            print_paths(&harness::emit_report(&report, &out)?);
        }
        Command::SweepK { config, k, out } => {
            let cfg = load(&config)?;
            let table = harness::sweep_k(&cfg, &k)?;
            print!("{}", table.to_csv());
            print_paths(&harness::emit_sweep(&table, &out)?);
        }
        Command::Compare { configs, out } => {
            let cfgs = configs.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
            let (cmp, reports) = harness::compare(&cfgs)?;
            print!("{}", cmp.to_csv());
            for r in &reports {
                print_paths(&harness::emit_report(r, &out)?);
            }
            print_paths(&harness::emit_comparison(&cmp, &out)?);
        }
        Command::Report { dir } => {
            println!("wrote {}", harness::index_dir(&dir)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
