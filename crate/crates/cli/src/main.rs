use std::fs::{self, File};
use std::io::BufWriter;
use std::ops::Range;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use log::info;

use cotdma::analytic::{write_gain_csv, ForkSampler};
use cotdma::experiment::{emit_report, gain_sweep, write_samples, Format, Plan, RunResult, SweepSummary, WORKERS_ENV};
use cotdma::scenario::{Scenario, ScenarioConfig, System};
use cotdma::trace::TraceOptions;

/// Simulate overlapping Wi-Fi BSSs with and without coordinated TDMA
/// TXOP sharing between two APs.
#[derive(Debug, Parser)]
#[command(name = "simulate", version, after_help = AFTER_HELP)]
struct Args {
    /// Scenario file (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Scenario to run when no config file is given.
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Run one system only; both run on the same seeds by default.
    #[arg(long)]
    system: Option<System>,
    /// VC stations per BSS: `N`, `a..b` or `a..=b`.
    #[arg(long = "vc-stas", value_parser = parse_range)]
    vc_stas: Option<Range<u64>>,
    /// Seeds: `N`, `a..b` or `a..=b` (default: 0..n_iterations).
    #[arg(long, value_parser = parse_range)]
    seeds: Option<Range<u64>>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    /// Per-run trace logs written next to the report.
    #[arg(long, value_enum, default_value_t = TraceArg::None)]
    trace: TraceArg,
    /// Pool latency samples across seeds before taking percentiles.
    #[arg(long)]
    pooled: bool,
    /// Give the uncoordinated runs their own seeds.
    #[arg(long)]
    independent: bool,
    /// Also dump every latency sample to `samples.csv`.
    #[arg(long)]
    samples: bool,
    /// Measure the access-delay gain of the pair on a two-AP network
    /// instead of running the sweep; writes `gain.csv`.
    #[arg(long)]
    gain: bool,
    /// Simulated time per run in microseconds, overriding the config.
    #[arg(long)]
    sim_time_us: Option<u64>,
}

const AFTER_HELP: &str = "Worker threads: set COTDMA_WORKERS (default: all cores).";

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    PlotData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TraceArg {
    Frames,
    Grants,
    None,
}

fn parse_range(s: &str) -> Result<Range<u64>, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("`{t}`: {e}"));
    let r = if let Some((a, b)) = s.split_once("..=") {
        num(a)?..num(b)? + 1
    } else if let Some((a, b)) = s.split_once("..") {
        num(a)?..num(b)?
    } else {
        let n = num(s)?;
        n..n + 1
    };
    if r.is_empty() {
        return Err(format!("empty range `{s}`"));
    }
    Ok(r)
}

fn load_config(args: &Args) -> Result<ScenarioConfig> {
    let mut cfg = match (&args.config, args.scenario) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut cfg = ScenarioConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
            if let Some(sc) = args.scenario {
                cfg.scenario = sc;
            }
            cfg
        }
        (None, Some(sc)) => ScenarioConfig::new(sc, System::Coordinated, 2),
        (None, None) => bail!("either --config or --scenario is required"),
    };
    if let Some(t) = args.sim_time_us {
        cfg.sim_time_us = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_traces(results: &[RunResult], kind: TraceArg, out: &std::path::Path) -> Result<()> {
    for r in results {
        let name = format!(
            "trace_{}_{}_n{}_seed{}_{}.csv",
            r.key.scenario.to_string().to_lowercase(),
            r.key.system,
            r.key.vc_stas,
            r.seed,
            if kind == TraceArg::Frames { "frames" } else { "grants" }
        );
        let path = out.join(name);
        let w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        match kind {
            TraceArg::Frames => r.trace.write_frames(w),
            TraceArg::Grants => r.trace.write_grants(w),
            TraceArg::None => Ok(()),
        }
        .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(args: Args) -> Result<()> {
    let cfg = load_config(&args)?;
    let seeds: Vec<u64> = args.seeds.clone().unwrap_or(0..cfg.n_iterations as u64).collect();
    let levels: Vec<usize> = match &args.vc_stas {
        Some(r) => r.clone().map(|n| n as usize).collect(),
        None => vec![cfg.n_vc_stas],
    };
    if args.gain {
        let levels = gain_sweep(&cfg, &levels, &seeds, &ForkSampler::default())?;
        fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
        let path = args.out.join("gain.csv");
        let rows: Vec<_> = levels.into_iter().map(|l| l.row).collect();
        let w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_gain_csv(&rows, w).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
        return Ok(());
    }
    let systems = match args.system {
        Some(s) => vec![s],
        None => System::ALL.to_vec(),
    };
    let mut plan = Plan::paired(cfg, seeds);
    plan.vc_stas = levels;
    plan.systems = systems;
    plan.keep_samples = args.pooled || args.samples;
    plan.independent = args.independent;
    plan.trace = TraceOptions {
        frames: args.trace != TraceArg::None,
        segments: false,
    };
    info!(
        "{} runs: levels {:?}, systems {:?}, {} seeds ({}={})",
        plan.vc_stas.len() * plan.systems.len() * plan.seeds.len(),
        plan.vc_stas,
        plan.systems,
        plan.seeds.len(),
        WORKERS_ENV,
        std::env::var(WORKERS_ENV).unwrap_or_else(|_| "unset".into())
    );

    let results = plan.run()?;
    let summary = SweepSummary::from_results(&results, args.pooled)?;
    let format = match args.format {
        FormatArg::Csv => Format::Csv,
        FormatArg::Json => Format::Json,
        FormatArg::PlotData => Format::PlotData,
    };
    for p in emit_report(&summary, format, &args.out)? {
        println!("{}", p.display());
    }
    if args.trace != TraceArg::None {
        write_traces(&results, args.trace, &args.out)?;
    }
    if args.samples {
        let path = args.out.join("samples.csv");
        let w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_samples(&results, w).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("simulate: {e:#}");
            ExitCode::FAILURE
        }
    }
}
