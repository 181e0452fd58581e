use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selfcond_cli::config::{FileConfig, Overrides, DEFAULT_OUT, OUT_ENV};
use selfcond_cli::runner::{self, CellOutcome};
use selfcond_cli::{exit, report, CliError, CliResult, Dataset, ExperimentConfig, Method};

#[derive(Parser)]
#[command(name = "selfcond", version, about = "Self-conditioned GAN experiments on 2D Gaussian mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every cell of a sweep and write summary.csv.
    Run(RunArgs),
    /// Print the aggregated table for an output directory and write report.csv.
    Report {
        /// Output directory (defaults to $SELFCOND_OUT, then ./runs).
        dir: Option<PathBuf>,
    },
    /// Continue an interrupted cell from its last checkpoint.
    Resume {
        cell: String,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with sweep axes and a [train] table; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    dataset: Option<Dataset>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Cluster counts to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Per-dimension variances to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    variance: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output root (defaults to $SELFCOND_OUT, then ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cells trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    /// Re-run cells that are already complete.
    #[arg(long)]
    force: bool,
    /// Draw fresh mixture samples for every batch instead of a fixed training set.
    #[arg(long)]
    infinite_data: bool,
    /// Also write each cell's training set as train.csv (x,y,true_mode).
    #[arg(long)]
    export_data: bool,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    recluster_every: Option<u64>,
    #[arg(long)]
    online_start: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    no_warm_start: bool,
    #[arg(long)]
    no_matching: bool,
}

impl RunArgs {
    fn overrides(self) -> Overrides {
        Overrides {
            dataset: self.dataset,
            method: self.method,
            k: self.k,
            variance: self.variance,
            seeds: self.seeds,
            out: self.out,
            jobs: self.jobs,
            force: self.force,
            export_data: self.export_data,
            infinite_data: self.infinite_data,
            iterations: self.iterations,
            recluster_every: self.recluster_every,
            online_start: self.online_start,
            eval_every: self.eval_every,
            eval_samples: self.eval_samples,
            train_size: self.train_size,
            no_warm_start: self.no_warm_start,
            no_matching: self.no_matching,
        }
    }
}

fn env_out() -> Option<PathBuf> {
    std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn run(args: RunArgs) -> CliResult<i32> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let cfg = ExperimentConfig::resolve(file, args.overrides(), env_out())?;
    let summary = runner::run(&cfg, &log)?;
    let failed = summary.failed();
    eprintln!(
        "{} cells, {failed} failed; summary at {}",
        summary.outcomes.len(),
        cfg.out.join(runner::SUMMARY).display()
    );
    Ok(if failed > 0 { exit::PARTIAL_FAILURE } else { exit::OK })
}

fn report(dir: Option<PathBuf>) -> CliResult<i32> {
    let dir = dir.or_else(env_out).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let rows = report::collect(&dir)?;
    print!("{}", report::to_text(&rows));
    let path = dir.join("report.csv");
    std::fs::write(&path, report::to_csv(&rows)).map_err(CliError::io(&path))?;
    let failed = rows.iter().any(|r| r.failed_count > 0);
    Ok(if failed { exit::PARTIAL_FAILURE } else { exit::OK })
}

fn resume(cell: String, out: Option<PathBuf>) -> CliResult<i32> {
    let out = out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    Ok(match runner::resume(&out, &cell, &log)? {
        CellOutcome::Failed(_) => exit::PARTIAL_FAILURE,
        CellOutcome::Completed | CellOutcome::Skipped => exit::OK,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Report { dir } => report(dir),
        Command::Resume { cell, out } => resume(cell, out),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
