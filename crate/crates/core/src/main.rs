use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use multiesn::config::{ExperimentConfig, Scale};
use multiesn::experiment::{cmd_analyze, cmd_generate_data, cmd_report, cmd_run, cmd_tune};
use multiesn::regime::RegimeRegistry;
use multiesn::Error;

#[derive(Parser)]
#[command(name = "multiesn", version, about = "Multi-reservoir echo state networks on NARMA-10")]
struct Cli {
    /// JSON config merged over the scale preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value by dotted key, e.g. `bptt.lr0=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    set: Vec<String>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel repetitions or trials.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,
    #[arg(long, default_value = "full", global = true)]
    scale: Scale,
    /// Output directory.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/validation/test splits as CSV and binary.
    GenerateData,
    /// Random search on the validation split.
    Tune,
    /// Train and test the configured regime for every repetition.
    Run,
    /// Correlation matrices and signal excerpts for a chain3 run report.
    Analyze {
        report: PathBuf,
        /// Report whose best run is the reference; defaults to the hand-designed targets.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Summary table over run reports.
    Report { reports: Vec<PathBuf> },
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.5}"))
}

fn execute(cli: Cli) -> Result<bool, Error> {
    let cfg = || ExperimentConfig::resolve(cli.scale, cli.config.as_deref(), &cli.set, cli.seed);
    match &cli.command {
        Command::GenerateData => {
            for p in cmd_generate_data(&cfg()?, &cli.out)? {
                println!("{}", cli.out.join(p).display());
            }
            Ok(true)
        }
        Command::Tune => {
            let r = cmd_tune(&cfg()?, &cli.out, cli.jobs)?;
            println!("best trial {} value {:.6} ({} of {} failed)", r.best.id, r.best.value, r.failed, r.budget);
            for (id, e) in &r.failures {
                println!("  trial {id} failed: {e}");
            }
            for (k, v) in &r.best.point {
                println!("  {k} = {v}");
            }
            Ok(true)
        }
        Command::Run => {
            let cfg = cfg()?;
            let r = cmd_run(&cfg, &RegimeRegistry::standard(), &cli.out, cli.jobs)?;
            if let Some(s) = &r.source {
                println!("source: val {} test {} (run {:?})", fmt(Some(s.val_nmse)), fmt(Some(s.test_nmse)), s.selected_run);
            }
            println!("run  status  val_nmse  test_nmse");
            for row in &r.runs {
                println!("{:>3}  {:<6}  {:>8}  {:>9}  {}", row.run_id, row.status, fmt(row.val_nmse), fmt(row.test_nmse), row.error.as_deref().unwrap_or(""));
            }
            if let Some(s) = &r.summary {
                println!("mean {:.5} std {:.5} best run {} ({:.5})", s.mean, s.std, s.best_run, s.best_nmse);
            }
            Ok(r.all_completed())
        }
        Command::Analyze { report, reference } => {
            let a = cmd_analyze(report, reference.as_deref(), &cli.out)?;
            println!("reference {} runs {:?}", a.reference, a.runs);
            for p in &a.artifacts {
                println!("{}", cli.out.join(p).display());
            }
            Ok(true)
        }
        Command::Report { reports } => {
            println!("label  completed/requested  mean  std  best");
            for row in cmd_report(reports, &cli.out)? {
                match row.summary {
                    Some(s) => println!("{}  {}/{}  {:.5}  {:.5}  run {} ({:.5})", row.label, s.count, row.requested, s.mean, s.std, s.best_run, s.best_nmse),
                    None => println!("{}  0/{}", row.label, row.requested),
                }
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
