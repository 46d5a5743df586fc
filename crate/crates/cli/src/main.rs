use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use avmp_core::report::{self, BootstrapOptions, ReportMode, ResultSet};
use avmp_core::stats::{DEFAULT_BOOTSTRAP_RESAMPLES, DEFAULT_BOOTSTRAP_SEED};
use avmp_core::sweep::{self, SweepConfig};
use avmp_core::workloads;
use avmp_core::AvmpError;

const EXIT_CONFIG: u8 = 1;
const EXIT_CELL: u8 = 2;
const EXIT_REPORT: u8 = 3;

#[derive(Parser)]
#[command(name = "avmp", version, about = "Run allocator sweeps and summarise their results")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Tables,
    Bootstrap,
    Figures,
}

impl From<Mode> for ReportMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Tables => ReportMode::Tables,
            Mode::Bootstrap => ReportMode::Bootstrap,
            Mode::Figures => ReportMode::Figures,
        }
    }
}

#[derive(clap::Args)]
struct BootstrapArgs {
    /// Variant every other variant is compared against.
    #[arg(long, default_value = "fixed_dual_mr05")]
    baseline: String,
    #[arg(long = "resamples", short = 'B', default_value_t = DEFAULT_BOOTSTRAP_RESAMPLES)]
    resamples: usize,
    #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_SEED)]
    seed: u64,
}

impl BootstrapArgs {
    fn options(&self) -> BootstrapOptions {
        BootstrapOptions {
            baseline: self.baseline.clone(),
            resamples: self.resamples,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Expand a sweep config and run every cell.
    Sweep {
        #[arg(long, short)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long, short)]
        output_dir: Option<PathBuf>,
        /// Overrides `parallelism` from the config.
        #[arg(long, short = 'j')]
        parallelism: Option<usize>,
        /// Corpus used by trace-replay workloads.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also write the allocator event log to events.jsonl.
        #[arg(long)]
        events: bool,
    },
    /// Aggregate result files into tables, bootstrap reports or figure series.
    Report {
        #[arg(long, short, value_enum)]
        mode: Mode,
        #[arg(long, short, default_value = "report")]
        output_dir: PathBuf,
        #[command(flatten)]
        bootstrap: BootstrapArgs,
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
    /// Paired-bootstrap comparisons against a baseline variant.
    Bootstrap {
        #[arg(long, short, default_value = "report")]
        output_dir: PathBuf,
        #[command(flatten)]
        bootstrap: BootstrapArgs,
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
    /// Parse a conversation corpus and print prompt-length statistics.
    IngestTrace {
        #[arg(long)]
        trace: PathBuf,
    },
}

struct Failure {
    code: u8,
    err: AvmpError,
}

fn fail(code: u8) -> impl FnOnce(AvmpError) -> Failure {
    move |err| Failure { code, err }
}

fn run_sweep(
    config: PathBuf,
    output_dir: Option<PathBuf>,
    parallelism: Option<usize>,
    trace: Option<PathBuf>,
    events: bool,
) -> Result<(), Failure> {
    let mut cfg = SweepConfig::load(&config).map_err(fail(EXIT_CONFIG))?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    if let Some(p) = parallelism {
        cfg.parallelism = p;
    }
    if let Some(trace) = trace {
        cfg.set_trace_path(&trace);
    }
    cfg.validate().map_err(fail(EXIT_CONFIG))?;
    eprintln!("running {} cells on {} workers", cfg.grid_size(), cfg.parallelism);
    let out = sweep::run_sweep(&cfg, events).map_err(|err| {
        let code = match err {
            AvmpError::CellFailed { .. } => EXIT_CELL,
            AvmpError::Config(_) => EXIT_CONFIG,
            _ => EXIT_CELL,
        };
        Failure { code, err }
    })?;
    println!("{}", out.results_path.display());
    if let Some(p) = out.events_path {
        println!("{}", p.display());
    }
    Ok(())
}

fn run_report(
    mode: ReportMode,
    output_dir: PathBuf,
    opts: BootstrapOptions,
    results: Vec<PathBuf>,
) -> Result<(), Failure> {
    let mut all = Vec::new();
    for path in &results {
        all.extend(sweep::read_results(path).map_err(fail(EXIT_REPORT))?);
    }
    let set = ResultSet::new(all).map_err(fail(EXIT_REPORT))?;
    let written = report::write_report(&set, mode, &output_dir, &opts).map_err(fail(EXIT_REPORT))?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn ingest(trace: PathBuf) -> Result<(), Failure> {
    let t = workloads::load_sharegpt(&trace).map_err(fail(EXIT_CONFIG))?;
    let summary = serde_json::json!({
        "prompts": t.prompt_tokens.len(),
        "conversations_seen": t.conversations_seen,
        "skipped": t.skipped,
        "floor_clamp_rate": t.floor_rate(),
        "ceiling_clamped": t.ceiling_clamped,
        "median_tokens": t.median(),
        "p95_tokens": t.p95(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serialises"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Sweep {
            config,
            output_dir,
            parallelism,
            trace,
            events,
        } => run_sweep(config, output_dir, parallelism, trace, events),
        Command::Report {
            mode,
            output_dir,
            bootstrap,
            results,
        } => run_report(mode.into(), output_dir, bootstrap.options(), results),
        Command::Bootstrap {
            output_dir,
            bootstrap,
            results,
        } => run_report(ReportMode::Bootstrap, output_dir, bootstrap.options(), results),
        Command::IngestTrace { trace } => ingest(trace),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, err }) => {
            eprintln!("error: {err}");
            ExitCode::from(code)
        }
    }
}
