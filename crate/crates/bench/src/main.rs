use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vpng_bench::checks;
use vpng_bench::config::ExperimentConfig;
use vpng_bench::data::{self, encode_idx_images, IdxImages};
use vpng_bench::experiment::{run_grid, run_seeds, Task};
use vpng_bench::metrics::{read_csv, summarize, write_csv, MetricsRow};

#[derive(Parser)]
#[command(name = "vpng-bench", version, about = "Run and check variational predictive natural-gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of a config over its seeds and write the metrics CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        /// First seed; the seed count comes from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Validate the config and write a header-only CSV.
        #[arg(long)]
        dry_run: bool,
    },
    /// Grid search: like `run`, then report the best cell.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    Gen {
        #[arg(long, value_enum)]
        kind: GenKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the acceptance checks and print one line per criterion.
    Check {
        /// Comma-separated criterion numbers; all by default.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
    /// Re-aggregate a metrics CSV into summary lines.
    Summarize {
        #[arg(long)]
        csv: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Logreg,
    Toy,
    Images,
    Ratings,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run { config, out, seed, dry_run } => {
            let mut cfg = load_config(&config)?;
            if let Some(first) = seed {
                let count = cfg.seeds.len() as u64;
                cfg.seeds = (first..first + count).collect();
            }
            if dry_run {
                Task::build(&cfg.task)?;
                write_rows(&out, &[])?;
                println!("config ok: {} cell(s) x {} seed(s); wrote header to {}", cfg.grid().len(), cfg.seeds.len(), out.display());
                return Ok(ExitCode::SUCCESS);
            }
            let rows = run_all(&cfg)?;
            write_rows(&out, &rows)?;
            print_summary(&rows)?;
        }
        Command::Grid { config, out } => {
            let cfg = load_config(&config)?;
            let task = Task::build(&cfg.task)?;
            let outcome = run_grid(&task, &cfg.grid(), &cfg.seeds)?;
            let rows: Vec<MetricsRow> = outcome.cells.iter().flat_map(|c| c.runs.iter().flat_map(|r| r.rows.clone())).collect();
            if let Some(out) = out {
                write_rows(&out, &rows)?;
            }
            print_summary(&rows)?;
            let best = outcome.best();
            for cell in &outcome.cells {
                let diverged = cell.runs.iter().filter(|r| r.diverged.is_some()).count();
                if diverged > 0 {
                    println!("{} step={}: {diverged} seed(s) diverged", vpng_bench::experiment::method_label(&cell.config), cell.config.step_size);
                }
            }
            match best.metric {
                Some(m) => println!("best: {} step={} selection metric {m:.4}", vpng_bench::experiment::method_label(&best.config), best.config.step_size),
                None => println!("best: none (every cell diverged)"),
            }
        }
        Command::Gen { kind, out, seed } => gen(kind, &out, seed.unwrap_or(0))?,
        Command::Check { only } => {
            let ids = if only.is_empty() { checks::ALL.to_vec() } else { only };
            let mut all_passed = true;
            for id in ids {
                let report = checks::run(id)?;
                all_passed &= report.passed;
                println!("{report}");
            }
            return Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::Summarize { csv } => {
            let rows = read_csv(fs::File::open(&csv).with_context(|| format!("opening {}", csv.display()))?)?;
            print_summary(&rows)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn run_all(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let task = Task::build(&cfg.task)?;
    let mut rows = Vec::new();
    for config in cfg.grid() {
        for run in run_seeds(&task, &config, &cfg.seeds, cfg.record_wall_clock)? {
            if let Some(reason) = &run.diverged {
                eprintln!("seed {} {} step={} diverged: {reason}", run.seed, config.method.as_str(), config.step_size);
            }
            rows.extend(run.rows);
        }
    }
    Ok(rows)
}

fn write_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(std::io::BufWriter::new(file), rows)?;
    Ok(())
}

fn print_summary(rows: &[MetricsRow]) -> Result<()> {
    if rows.is_empty() {
        bail!("no metrics recorded");
    }
    for s in summarize(rows)? {
        println!("{s}");
    }
    Ok(())
}

fn gen(kind: GenKind, out: &Path, seed: u64) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(out).with_context(|| format!("creating {}", out.display()))?);
    match kind {
        GenKind::Logreg | GenKind::Toy => {
            let ds = if matches!(kind, GenKind::Logreg) { data::gen_logreg_data(500, seed) } else { data::gen_toy_data(100, 0.01, seed) };
            let width = ds.rows[0].len();
            let header: Vec<String> = match kind {
                GenKind::Logreg => (1..width).map(|i| format!("x{i}")).chain(["y".to_string()]).collect(),
                _ => (1..=width).map(|i| format!("x{i}")).collect(),
            };
            let mut csv = csv::Writer::from_writer(&mut w);
            csv.write_record(&header)?;
            for row in &ds.rows {
                csv.serialize(row)?;
            }
            csv.flush()?;
        }
        GenKind::Images => {
            let ds = data::gen_images(1000, 200, seed);
            let pixels = ds.rows.iter().map(|r| r.iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect()).collect();
            w.write_all(&encode_idx_images(&IdxImages { rows: 8, cols: 8, pixels }))?;
        }
        GenKind::Ratings => {
            // Observed cells only, on the half-star grid that the loader maps back to counts.
            let ds = data::gen_ratings(50, 30, seed);
            writeln!(w, "user,movie,rating")?;
            for (u, row) in ds.rows.iter().enumerate() {
                for (m, &c) in row.iter().enumerate() {
                    if c > 0.0 {
                        writeln!(w, "{u},{m},{}", (c + 1.0) / 2.0)?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
