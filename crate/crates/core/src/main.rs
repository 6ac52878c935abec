use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fairtier::metrics::{self, ExportFormat};
use fairtier::{parse_scenario, RunSummary, Scenario};

#[derive(Parser)]
#[command(name = "fairtier", version, about = "Multi-tenant memory tiering simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more scenarios and write their time series.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Output file; only valid with a single scenario.
        #[arg(long)]
        out: Option<PathBuf>,
        /// csv or jsonl
        #[arg(long)]
        format: Option<String>,
        /// Override the scenario's rng seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario's duration in ticks.
        #[arg(long)]
        duration: Option<u64>,
        /// Run up to N scenario files in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check a scenario file and list every violation.
    Validate { scenario: PathBuf },
    /// Print final placement and counter totals from an export file.
    Summary { export: PathBuf },
}

struct RunOverrides {
    out: Option<PathBuf>,
    format: Option<ExportFormat>,
    seed: Option<u64>,
    duration: Option<u64>,
}

fn load(path: &Path, o: &RunOverrides) -> Result<Scenario> {
    let mut s = parse_scenario(path).with_context(|| format!("{}", path.display()))?;
    if let Some(seed) = o.seed {
        s.machine.rng_seed = seed;
    }
    if let Some(d) = o.duration {
        if d == 0 {
            bail!("--duration must be positive");
        }
        s.duration = d;
    }
    if let Some(out) = &o.out {
        s.output.path = Some(out.clone());
        s.output.format = ExportFormat::from_path(out);
    }
    if let Some(f) = o.format {
        s.output.format = f;
    }
    if s.output.path.is_none() {
        let ext = match s.output.format {
            ExportFormat::Csv => "csv",
            ExportFormat::Jsonl => "jsonl",
        };
        s.output.path = Some(path.with_extension(ext));
    }
    Ok(s)
}

fn print_summary(path: &Path, out: &Path, s: &RunSummary) {
    println!("{}: {} ticks -> {}", path.display(), s.ticks, out.display());
    for c in &s.containers {
        println!(
            "  {:<12} local {:>8} cxl {:>8} demoted {:>8} promoted {:>8} thrash {:>6}",
            c.container, c.local_pages, c.cxl_pages, c.demoted, c.promoted, c.thrash_events
        );
    }
    for e in &s.oom_events {
        println!("  out of memory: {} at tick {} ({} pages)", e.container, e.tick, e.requested);
    }
}

fn run_one(path: &Path, o: &RunOverrides) -> Result<()> {
    let s = load(path, o)?;
    let result = fairtier::run_and_export(&s).context("writing export")?;
    print_summary(path, s.output.path.as_deref().unwrap_or(path), &result.summary);
    Ok(())
}

fn run_all(paths: &[PathBuf], o: &RunOverrides, jobs: usize) -> Result<()> {
    if o.out.is_some() && paths.len() > 1 {
        bail!("--out needs exactly one scenario file");
    }
    if jobs <= 1 || paths.len() == 1 {
        return paths.iter().try_for_each(|p| run_one(p, o));
    }
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(paths.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(p) = paths.get(i) else { break };
                if let Err(e) = run_one(p, o) {
                    failures.lock().unwrap().push(format!("{e:#}"));
                }
            });
        }
    });
    let failures = failures.into_inner().unwrap();
    if !failures.is_empty() {
        bail!("{} run(s) failed:\n{}", failures.len(), failures.join("\n"));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenarios,
            out,
            format,
            seed,
            duration,
            jobs,
        } => format
            .map(|f| f.parse::<ExportFormat>())
            .transpose()
            .map_err(anyhow::Error::from)
            .and_then(|format| {
                let o = RunOverrides {
                    out,
                    format,
                    seed,
                    duration,
                };
                run_all(&scenarios, &o, jobs)
            }),
        Command::Validate { scenario } => parse_scenario(&scenario)
            .map(|s| println!("{}: ok ({} containers, {} ticks)", scenario.display(), s.containers.len(), s.duration))
            .with_context(|| format!("{}", scenario.display())),
        Command::Summary { export } => metrics::read_export(&export)
            .map(|run| print!("{}", metrics::format_summary(&run)))
            .with_context(|| format!("{}", export.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
