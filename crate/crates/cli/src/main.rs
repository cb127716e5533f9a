use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use emcomm::harness::{self, RunConfig, SweepAxis};
use emcomm::trainer::SchemeVariant;

/// Emergent communication experiments under bandwidth and complexity budgets.
#[derive(Parser, Debug)]
#[command(name = "emcomm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one scheme over one or more seeds.
    Train(RunArgs),
    /// Sweep bandwidth, eps_c or hidden width and aggregate over seeds.
    Sweep(SweepArgs),
    /// Check the variational bound on random discrete channels.
    VerifyBound(BoundArgs),
    /// Build plot-data tables from run directories.
    Report(ReportArgs),
    /// Run the scripted orchestrator scenario against a protocol registry.
    Registry(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, replacing `[run] seeds`.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    variant: Option<SchemeVariant>,
    /// Comma-separated evaluation budgets in message dimensions.
    #[arg(long, value_delimiter = ',')]
    budgets: Vec<usize>,
    /// Output root (default: `[run] out`, then $EMCOMM_OUT, then `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    axis: Option<SweepAxis>,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    /// Comma-separated schemes to include.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<SchemeVariant>,
}

#[derive(Args, Debug)]
struct BoundArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 8)]
    max_states: usize,
    #[arg(long, default_value_t = 8)]
    max_symbols: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the per-channel report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories (each containing manifest.toml and metrics.csv).
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

/// Usage and configuration problems exit with 2; everything else with 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<emcomm::Error> for Failure {
    fn from(e: emcomm::Error) -> Self {
        match e {
            emcomm::Error::Config(_) | emcomm::Error::UnknownGoal(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if !args.seed.is_empty() {
        cfg.run.seeds = args.seed.clone();
    }
    if let Some(v) = args.variant {
        cfg.run.variant = v;
    }
    if !args.budgets.is_empty() {
        cfg.trainer.eval_budgets = args.budgets.clone();
    }
    if let Some(out) = &args.out {
        cfg.run.out = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let root = cfg.output_root();
            for run in harness::cmd_train(&cfg, &root)? {
                let last = run.outcome.metrics.iter().filter(|m| m.budget == run.manifest.msg_dim).last();
                match last {
                    Some(m) => println!(
                        "{}\tstep {}\tlevel accuracy {:.4}\tclass accuracy {:.4}\tmean KL {:.4}",
                        run.dir.display(),
                        m.step,
                        m.level_accuracy,
                        m.class_accuracy,
                        m.mean_kl
                    ),
                    None => println!("{}", run.dir.display()),
                }
            }
        }
        Command::Sweep(args) => {
            let mut cfg = load_config(&args.run)?;
            if let Some(axis) = args.axis {
                cfg.sweep.axis = axis;
            }
            if !args.grid.is_empty() {
                cfg.sweep.grid = args.grid;
            }
            if !args.variants.is_empty() {
                cfg.sweep.variants = args.variants;
            }
            let result = harness::cmd_sweep(&cfg, &cfg.output_root())?;
            println!("variant\tvalue\tseeds\tmedian\tq25\tq75");
            for s in &result.summary {
                println!(
                    "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
                    s.variant, s.value, s.seeds, s.median, s.q25, s.q75
                );
            }
            eprintln!("wrote {}", result.dir.display());
        }
        Command::VerifyBound(args) => {
            let report = harness::verify_bound(args.trials, args.max_states, args.max_symbols, args.seed)?;
            match &args.out {
                Some(path) => {
                    let file = std::fs::File::create(path)
                        .with_context(|| format!("cannot create {}", path.display()))?;
                    report.write_tsv(std::io::BufWriter::new(file)).context("writing report")?;
                }
                None => report.write_tsv(std::io::stdout().lock()).context("writing report")?,
            }
            let violations = report.violations();
            eprintln!(
                "{} channels, worst gap {:.3e}, max marginal-prior gap {:.3e}, {violations} violations",
                args.trials,
                report.worst_gap(),
                report.max_marginal_gap()
            );
            if violations > 0 {
                return Err(Failure::Runtime(anyhow::anyhow!("{violations} bound violations")));
            }
        }
        Command::Report(args) => {
            for path in harness::cmd_report(&args.runs, &args.out)? {
                println!("{}", path.display());
            }
        }
        Command::Registry(args) => {
            let cfg = load_config(&args)?;
            let root = cfg.output_root().join("registry");
            let report = harness::run_scenario(&cfg, &root)?;
            for o in &report.outcomes {
                println!(
                    "{}\t{}\t{}\t{}",
                    o.request_id,
                    o.goal,
                    o.protocol.as_deref().unwrap_or("solo"),
                    if o.cache_hit { "reused" } else if o.solo { "-" } else { "emerged" }
                );
            }
            println!(
                "trainer invocations {}, executions {}",
                report.trainer_invocations, report.executions
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
