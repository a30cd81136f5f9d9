//! Paired-seed experiments over congestion levels and systems, and the
//! CSV / JSON / plot-data writers.
//!
//! Runs fan out over a rayon pool whose size comes from `COTDMA_WORKERS`
//! (all cores when unset). Every run owns its simulator; results are
//! joined in seed order, so output never depends on the worker count.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{summarize, AnalyticError, ForkSampler, GainRow, PairSample};
use crate::metrics::{aggregate, Group, Metric, MetricsError, RunReport, Summary};
use crate::scenario::{build_for_system, ConfigError, Scenario, ScenarioConfig, System};
use crate::sim::{RunCounters, SimError, Simulator};
use crate::trace::{Trace, TraceOptions};

pub const WORKERS_ENV: &str = "COTDMA_WORKERS";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("no seeds given")]
    NoSeeds,
    #[error("nothing to report")]
    EmptySummary,
    #[error("{context}: {source}")]
    Config { context: String, source: ConfigError },
    #[error("{context}: {source}")]
    Sim { context: String, source: SimError },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{context}: {source}")]
    Analytic { context: String, source: AnalyticError },
    #[error("invalid worker count in {WORKERS_ENV}: {0}")]
    Workers(String),
}

/// One configuration point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub scenario: Scenario,
    pub system: System,
    pub vc_stas: usize,
}

/// Result of one seeded run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub key: CellKey,
    pub seed: u64,
    pub report: RunReport,
    pub counters: RunCounters,
    pub trace: Trace,
}

/// Builds and runs one seed of `cfg` under `system`.
pub fn run_one(
    cfg: &ScenarioConfig,
    system: System,
    seed: u64,
    trace: TraceOptions,
    keep_samples: bool,
) -> Result<RunResult, ExperimentError> {
    let key = CellKey {
        scenario: cfg.scenario,
        system,
        vc_stas: cfg.n_vc_stas,
    };
    let context = format!("{} {} n_vc_stas={} seed={seed}", cfg.scenario, system, cfg.n_vc_stas);
    let built = build_for_system(cfg, system, seed).map_err(|source| ExperimentError::Config {
        context: context.clone(),
        source,
    })?;
    let sim = Simulator::new(Arc::new(built.network), seed, built.coordination, trace)
        .map_err(|source| ExperimentError::Sim { context, source })?;
    let out = sim.run_keeping(keep_samples);
    Ok(RunResult {
        key,
        seed,
        report: out.report,
        counters: out.counters,
        trace: out.trace,
    })
}

fn pool() -> Result<rayon::ThreadPool, ExperimentError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| ExperimentError::Workers(v.clone()))?;
        if n == 0 {
            return Err(ExperimentError::Workers(v));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| ExperimentError::Workers(e.to_string()))
}

/// What to run: every combination of congestion level, system and seed.
#[derive(Debug, Clone)]
pub struct Plan {
    pub base: ScenarioConfig,
    pub vc_stas: Vec<usize>,
    pub systems: Vec<System>,
    pub seeds: Vec<u64>,
    pub trace: TraceOptions,
    pub keep_samples: bool,
    /// Draw the uncoordinated runs from a disjoint seed range instead of
    /// reusing the coordinated seeds.
    pub independent: bool,
}

/// Offset applied to uncoordinated seeds in independent mode.
pub const INDEPENDENT_SEED_OFFSET: u64 = 1 << 32;

impl Plan {
    /// Both systems on the same seeds at the configured congestion level.
    pub fn paired(base: ScenarioConfig, seeds: Vec<u64>) -> Self {
        Plan {
            vc_stas: vec![base.n_vc_stas],
            base,
            systems: System::ALL.to_vec(),
            seeds,
            trace: TraceOptions::default(),
            keep_samples: false,
            independent: false,
        }
    }

    /// Runs the plan; results come back in (level, system, seed) order.
    pub fn run(&self) -> Result<Vec<RunResult>, ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::NoSeeds);
        }
        let mut jobs = Vec::new();
        for &n in &self.vc_stas {
            let mut cfg = self.base.clone();
            cfg.n_vc_stas = n;
            for &system in &self.systems {
                for &seed in &self.seeds {
                    let seed = if self.independent && system == System::Uncoordinated {
                        seed.wrapping_add(INDEPENDENT_SEED_OFFSET)
                    } else {
                        seed
                    };
                    jobs.push((cfg.clone(), system, seed));
                }
            }
        }
        pool()?.install(|| {
            jobs.par_iter()
                .map(|(cfg, system, seed)| run_one(cfg, *system, *seed, self.trace, self.keep_samples))
                .collect()
        })
    }
}

/// Aggregated cells of a sweep, keyed by configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepSummary {
    pub cells: BTreeMap<CellKey, Summary>,
}

impl SweepSummary {
    pub fn from_results(results: &[RunResult], pooled: bool) -> Result<Self, ExperimentError> {
        let mut by: BTreeMap<CellKey, Vec<RunReport>> = BTreeMap::new();
        for r in results {
            by.entry(r.key).or_default().push(r.report.clone());
        }
        let mut cells = BTreeMap::new();
        for (k, reports) in by {
            cells.insert(k, aggregate(&reports, pooled)?);
        }
        Ok(SweepSummary { cells })
    }

    /// Flat rows in the results-CSV layout.
    pub fn records(&self) -> Vec<SummaryRecord> {
        let mut out = Vec::new();
        for (k, s) in &self.cells {
            for r in &s.rows {
                out.push(SummaryRecord {
                    scenario: k.scenario,
                    system: k.system,
                    vc_stas: k.vc_stas,
                    group: if r.metric == Metric::ThroughputBps {
                        "network".into()
                    } else {
                        r.group.name().into()
                    },
                    metric: r.metric.name().into(),
                    mean: r.value.mean,
                    ci_low: r.value.ci_low,
                    ci_high: r.value.ci_high,
                    n_iter: s.n_iter,
                });
            }
        }
        out
    }

    pub fn mean(&self, key: CellKey, g: Group, m: Metric) -> Option<f64> {
        self.cells.get(&key)?.get(g, m).map(|v| v.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub scenario: Scenario,
    pub system: System,
    pub vc_stas: usize,
    pub group: String,
    pub metric: String,
    pub mean: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Json,
    PlotData,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "plot-data" => Ok(Format::PlotData),
            _ => Err(format!("unknown format `{s}` (csv, json, plot-data)")),
        }
    }
}

pub fn write_csv<W: Write>(records: &[SummaryRecord], mut w: W) -> io::Result<()> {
    writeln!(w, "scenario,system,vc_stas,group,metric,mean,ci_low,ci_high,n_iter")?;
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_default();
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{:.3},{},{},{}",
            r.scenario,
            r.system,
            r.vc_stas,
            r.group,
            r.metric,
            r.mean,
            opt(r.ci_low),
            opt(r.ci_high),
            r.n_iter
        )?;
    }
    Ok(())
}

/// The six comparison panels: a metric of a group against congestion.
pub const PANELS: [(&str, Group, Metric); 6] = [
    ("a_co_ll_p95", Group::CoLl, Metric::P95LatencyUs),
    ("b_co_ll_dl_p95", Group::CoLlDl, Metric::P95LatencyUs),
    ("c_co_ll_ul_p95", Group::CoLlUl, Metric::P95LatencyUs),
    ("d_non_co_ll_p95", Group::NonCoLl, Metric::P95LatencyUs),
    ("e_co_vc_p95", Group::CoVc, Metric::P95LatencyUs),
    ("f_throughput", Group::CoLl, Metric::ThroughputBps),
];

/// Series files `<scenario>_<panel>.dat`: `vc_stas coordinated
/// uncoordinated`, one line per congestion level.
pub fn plot_data(summary: &SweepSummary) -> BTreeMap<String, String> {
    let mut files = BTreeMap::new();
    let scenarios: Vec<Scenario> = {
        let mut v: Vec<_> = summary.cells.keys().map(|k| k.scenario).collect();
        v.dedup();
        v
    };
    for sc in scenarios {
        let mut levels: Vec<usize> = summary
            .cells
            .keys()
            .filter(|k| k.scenario == sc)
            .map(|k| k.vc_stas)
            .collect();
        levels.sort_unstable();
        levels.dedup();
        for (name, g, m) in PANELS {
            let mut text = String::from("# vc_stas coordinated uncoordinated\n");
            for &n in &levels {
                let v = |system| {
                    summary
                        .mean(
                            CellKey {
                                scenario: sc,
                                system,
                                vc_stas: n,
                            },
                            g,
                            m,
                        )
                        .map(|x| format!("{x:.3}"))
                        .unwrap_or_else(|| "nan".into())
                };
                text.push_str(&format!(
                    "{n} {} {}\n",
                    v(System::Coordinated),
                    v(System::Uncoordinated)
                ));
            }
            files.insert(format!("{}_{name}.dat", sc.to_string().to_lowercase()), text);
        }
    }
    files
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the summary into `dir` and returns the files written.
pub fn emit_report(summary: &SweepSummary, format: Format, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    if summary.cells.is_empty() {
        return Err(ExperimentError::EmptySummary);
    }
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    match format {
        Format::Csv => {
            let p = dir.join("results.csv");
            let mut buf = Vec::new();
            write_csv(&summary.records(), &mut buf).expect("in-memory write");
            write_file(&p, &buf)?;
            written.push(p);
        }
        Format::Json => {
            let p = dir.join("results.json");
            let text = serde_json::to_string_pretty(&summary.records()).expect("records serialize");
            write_file(&p, text.as_bytes())?;
            written.push(p);
        }
        Format::PlotData => {
            for (name, text) in plot_data(summary) {
                let p = dir.join(name);
                write_file(&p, text.as_bytes())?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

/// Reads back a JSON report.
pub fn parse_json(text: &str) -> Result<Vec<SummaryRecord>, serde_json::Error> {
    serde_json::from_str(text)
}

/// Raw latency dump, one sample per line, labelled with its partition group.
pub fn write_samples<W: Write>(results: &[RunResult], mut w: W) -> io::Result<()> {
    writeln!(w, "scenario,system,vc_stas,seed,group,latency_us")?;
    for r in results {
        for g in Group::PARTITION {
            for x in r.report.samples.get(&g).into_iter().flatten() {
                writeln!(
                    w,
                    "{},{},{},{},{},{x:.3}",
                    r.key.scenario, r.key.system, r.key.vc_stas, r.seed, g
                )?;
            }
        }
    }
    Ok(())
}

/// The controlled two-AP network used for gain measurements: the pair
/// alone on the channel, every other setting as in `base`.
pub fn controlled_gain_config(base: &ScenarioConfig) -> ScenarioConfig {
    let mut cfg = base.clone();
    cfg.system = System::Coordinated;
    cfg.n_bss = 2;
    cfg.mapc_pair = Some((0, 1));
    cfg
}

/// Fork-sampled gain components at one congestion level.
#[derive(Debug, Clone)]
pub struct GainLevel {
    pub row: GainRow,
    pub samples: Vec<PairSample>,
}

/// Samples the gain of the controlled network at each congestion level,
/// pooling the pairs of all seeds.
pub fn gain_sweep(
    base: &ScenarioConfig,
    levels: &[usize],
    seeds: &[u64],
    sampler: &ForkSampler,
) -> Result<Vec<GainLevel>, ExperimentError> {
    if seeds.is_empty() {
        return Err(ExperimentError::NoSeeds);
    }
    let jobs: Vec<(usize, u64)> = levels
        .iter()
        .flat_map(|&n| seeds.iter().map(move |&s| (n, s)))
        .collect();
    let per_job: Vec<Vec<PairSample>> = pool()?.install(|| {
        jobs.par_iter()
            .map(|&(n, seed)| {
                let mut cfg = controlled_gain_config(base);
                cfg.n_vc_stas = n;
                let context = format!("gain {} n_vc_stas={n} seed={seed}", cfg.scenario);
                let built =
                    build_for_system(&cfg, System::Coordinated, seed).map_err(|source| ExperimentError::Config {
                        context: context.clone(),
                        source,
                    })?;
                sampler
                    .run(Arc::new(built.network), seed)
                    .map_err(|source| ExperimentError::Analytic { context, source })
            })
            .collect::<Result<_, _>>()
    })?;
    let mut out = Vec::new();
    for (k, &n) in levels.iter().enumerate() {
        let samples: Vec<PairSample> = per_job[k * seeds.len()..(k + 1) * seeds.len()].concat();
        let row = summarize(n, &samples).map_err(|source| ExperimentError::Analytic {
            context: format!("gain summary n_vc_stas={n}"),
            source,
        })?;
        out.push(GainLevel { row, samples });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(scenario: Scenario, n: usize) -> ScenarioConfig {
        let mut c = ScenarioConfig::new(scenario, System::Coordinated, n);
        c.sim_time_us = 300_000;
        c.warmup_us = 50_000;
        c
    }

    #[test]
    fn paired_plan_shape_and_determinism() {
        let plan = Plan::paired(short(Scenario::RTMG, 2), vec![1, 2]);
        let a = plan.run().unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a.iter().filter(|r| r.key.system == System::Coordinated).count(), 2);
        let b = plan.run().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.report, y.report);
        }
    }

    #[test]
    fn shared_seed_has_identical_mean() {
        let one = Plan::paired(short(Scenario::RTMG, 2), vec![3]).run().unwrap();
        let many = Plan::paired(short(Scenario::RTMG, 2), vec![3, 4, 5]).run().unwrap();
        let a = &one[0].report;
        let b = many
            .iter()
            .find(|r| r.seed == 3 && r.key.system == System::Coordinated)
            .unwrap();
        assert_eq!(a, &b.report);
    }

    #[test]
    fn outputs_round_trip() {
        let mut plan = Plan::paired(short(Scenario::RTMG, 2), vec![1, 2]);
        plan.vc_stas = vec![2, 3];
        let s = SweepSummary::from_results(&plan.run().unwrap(), false).unwrap();
        assert_eq!(s.cells.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&s, Format::Json, dir.path()).unwrap();
        let back = parse_json(&fs::read_to_string(&files[0]).unwrap()).unwrap();
        assert_eq!(back, s.records());

        let files = emit_report(&s, Format::Csv, dir.path()).unwrap();
        let text = fs::read_to_string(&files[0]).unwrap();
        assert!(text.starts_with("scenario,system,vc_stas,group,metric,mean,ci_low,ci_high,n_iter\n"));
        assert!(text.contains("RTMG,coordinated,2,co_ll,p95_latency_us,"));
        assert!(text.contains(",network,throughput_bps,"));

        let files = emit_report(&s, Format::PlotData, dir.path()).unwrap();
        assert_eq!(files.len(), PANELS.len());
        let a = fs::read_to_string(dir.path().join("rtmg_a_co_ll_p95.dat")).unwrap();
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("2 ") && lines[2].starts_with("3 "));
        assert_eq!(lines[1].split(' ').count(), 3);
    }

    #[test]
    fn empty_summary_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(&SweepSummary::default(), Format::Csv, dir.path()),
            Err(ExperimentError::EmptySummary)
        ));
        let plan = Plan::paired(short(Scenario::RTMG, 2), vec![]);
        assert!(matches!(plan.run(), Err(ExperimentError::NoSeeds)));
    }

    #[test]
    fn raw_dump_labels_groups() {
        let mut plan = Plan::paired(short(Scenario::RTMG, 2), vec![1]);
        plan.keep_samples = true;
        let res = plan.run().unwrap();
        let mut buf = Vec::new();
        write_samples(&res, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().count() > 10);
        assert!(text.lines().skip(1).all(|l| l.split(',').count() == 6));
        assert!(text.contains(",co_ll,"));
    }
}
