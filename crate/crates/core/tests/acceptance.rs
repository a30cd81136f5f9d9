//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release -p cotdma --test acceptance`. The
//! process exits nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use cotdma::analytic::{summarize, ForkSampler, PairSample};
use cotdma::engine::{RngStream, SimTime};
use cotdma::experiment::{run_one, Plan, RunResult};
use cotdma::mac::{EdcaContender, EdcaParams, MacConfig, MediumTrigger};
use cotdma::metrics::{jitter, mean_ci, percentile, Group, MeanCi, Metric};
use cotdma::phy::{ppdu_airtime, PhyConfig, MAX_AMPDU_MPDUS};
use cotdma::scenario::{build_for_system, Scenario, ScenarioConfig, System};
use cotdma::trace::{check_trace, Invariant, TraceOptions};
use cotdma::types::AccessCategory;

const SEEDS: u64 = 50;
const LEVELS: [usize; 4] = [2, 3, 4, 5];
const MIN_REDUCTION_HIGH: f64 = 0.10;
const THROUGHPUT_TOL: f64 = 0.05;
const APPROX_TOL: f64 = 0.20;
const MIN_PAIRS: usize = 500;
const CONFORMANCE_RUNS: u64 = 50;

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    println!(
        "{} criterion {:>2} {}: {}",
        if v.pass { "PASS" } else { "FAIL" },
        v.id,
        v.name,
        v.detail
    );
}

/// Per-seed values of one metric, keyed by (scenario, system, level).
struct Sweep {
    values: BTreeMap<(Scenario, System, usize, Group, Metric), Vec<f64>>,
}

impl Sweep {
    fn run() -> Self {
        let mut values: BTreeMap<_, Vec<f64>> = BTreeMap::new();
        for scenario in [Scenario::RTMG, Scenario::VR] {
            let mut plan = Plan::paired(
                ScenarioConfig::new(scenario, System::Coordinated, 2),
                (0..SEEDS).collect(),
            );
            plan.vc_stas = LEVELS.to_vec();
            let results: Vec<RunResult> = plan.run().expect("sweep runs");
            for r in &results {
                for g in Group::ALL {
                    for m in Metric::ALL {
                        if let Some(x) = r.report.metric(g, m) {
                            values
                                .entry((scenario, r.key.system, r.key.vc_stas, g, m))
                                .or_default()
                                .push(x);
                        }
                    }
                }
            }
        }
        Sweep { values }
    }

    fn series(&self, sc: Scenario, sys: System, n: usize, g: Group, m: Metric) -> &[f64] {
        let v = &self.values[&(sc, sys, n, g, m)];
        assert_eq!(v.len(), SEEDS as usize, "{sc} {sys} n={n} {g} {m:?}: missing seeds");
        v
    }

    fn mean(&self, sc: Scenario, sys: System, n: usize, g: Group, m: Metric) -> f64 {
        let v = self.series(sc, sys, n, g, m);
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Per-seed `uncoordinated - coordinated`.
    fn gap(&self, sc: Scenario, n: usize, g: Group, m: Metric) -> Vec<f64> {
        let c = self.series(sc, System::Coordinated, n, g, m);
        let u = self.series(sc, System::Uncoordinated, n, g, m);
        u.iter().zip(c).map(|(u, c)| u - c).collect()
    }

    fn reduction(&self, sc: Scenario, n: usize, g: Group, m: Metric) -> f64 {
        let c = self.mean(sc, System::Coordinated, n, g, m);
        let u = self.mean(sc, System::Uncoordinated, n, g, m);
        (u - c) / u
    }
}

fn ci(xs: &[f64]) -> MeanCi {
    mean_ci(xs).expect("enough seeds for an interval")
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn contains_zero(c: &MeanCi) -> bool {
    c.ci_low.unwrap_or(f64::NEG_INFINITY) <= 0.0 && c.ci_high.unwrap_or(f64::INFINITY) >= 0.0
}

const P95: Metric = Metric::P95LatencyUs;

fn criterion_1(s: &Sweep) -> Verdict {
    let sc = Scenario::RTMG;
    let mut pass = true;
    let mut parts = Vec::new();
    for n in LEVELS {
        let c = s.mean(sc, System::Coordinated, n, Group::CoLl, P95);
        let u = s.mean(sc, System::Uncoordinated, n, Group::CoLl, P95);
        let red = s.reduction(sc, n, Group::CoLl, P95);
        pass &= c < u;
        if n >= 4 {
            pass &= red >= MIN_REDUCTION_HIGH;
        }
        parts.push(format!("n={n} {:.2}/{:.2} ms ({:.1}%)", c / 1e3, u / 1e3, 100.0 * red));
    }
    Verdict {
        id: 1,
        name: "co-BSS LL p95 coordinated < uncoordinated, RTMG, >=10% at n=4,5",
        pass,
        detail: parts.join(", "),
    }
}

/// Gap trend checks for one scenario: (inversions beyond CI, count of
/// inversions, growth-rate increases beyond CI, description).
fn gap_shape(s: &Sweep, sc: Scenario) -> (usize, usize, usize, String) {
    let gaps: Vec<Vec<f64>> = LEVELS.iter().map(|&n| s.gap(sc, n, Group::CoLl, P95)).collect();
    let mut inversions = 0;
    let mut significant_inversions = 0;
    let steps: Vec<Vec<f64>> = gaps.windows(2).map(|w| diff(&w[1], &w[0])).collect();
    for st in &steps {
        let c = ci(st);
        if c.mean < 0.0 {
            inversions += 1;
            if !contains_zero(&c) {
                significant_inversions += 1;
            }
        }
    }
    let mut accelerations = 0;
    for w in steps.windows(2) {
        let c = ci(&diff(&w[1], &w[0]));
        if c.mean > 0.0 && !contains_zero(&c) {
            accelerations += 1;
        }
    }
    let means: Vec<String> = gaps.iter().map(|g| format!("{:.0}", ci(g).mean)).collect();
    let incs: Vec<String> = steps
        .iter()
        .map(|st| {
            let c = ci(st);
            format!(
                "{:+.0}[{:.0},{:.0}]",
                c.mean,
                c.ci_low.unwrap_or(f64::NAN),
                c.ci_high.unwrap_or(f64::NAN)
            )
        })
        .collect();
    (
        significant_inversions,
        inversions,
        accelerations,
        format!("{sc} gaps {} us, increments {}", means.join("/"), incs.join(" ")),
    )
}

fn criterion_2_3(s: &Sweep) -> (Verdict, Verdict) {
    let mut pass2 = true;
    let mut pass3 = true;
    let mut d2 = Vec::new();
    let mut d3 = Vec::new();
    for sc in [Scenario::RTMG, Scenario::VR] {
        let (sig_inv, inv, acc, desc) = gap_shape(s, sc);
        pass2 &= inv <= 1 && sig_inv == 0;
        pass3 &= acc == 0;
        d2.push(format!("{desc}; {inv} inversion(s)"));
        d3.push(format!("{desc}; {acc} significant increase(s) of the increment"));
    }
    (
        Verdict {
            id: 2,
            name: "p95 gap nondecreasing in congestion",
            pass: pass2,
            detail: d2.join(" | "),
        },
        Verdict {
            id: 3,
            name: "gap increments nonincreasing",
            pass: pass3,
            detail: d3.join(" | "),
        },
    )
}

fn criterion_4(s: &Sweep) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for sc in [Scenario::RTMG, Scenario::VR] {
        for n in LEVELS {
            let c = s.mean(sc, System::Coordinated, n, Group::CoLl, Metric::JitterUs);
            let u = s.mean(sc, System::Uncoordinated, n, Group::CoLl, Metric::JitterUs);
            pass &= c < u;
            parts.push(format!("{sc} n={n} {:.2}/{:.2}", c / 1e3, u / 1e3));
        }
    }
    Verdict {
        id: 4,
        name: "co-BSS LL jitter coordinated < uncoordinated (ms)",
        pass,
        detail: parts.join(", "),
    }
}

fn criterion_5(s: &Sweep) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in LEVELS {
        let r = s.reduction(Scenario::RTMG, n, Group::CoLl, P95);
        let v = s.reduction(Scenario::VR, n, Group::CoLl, P95);
        pass &= v < r;
        parts.push(format!("n={n} VR {:.1}% vs RTMG {:.1}%", 100.0 * v, 100.0 * r));
    }
    Verdict {
        id: 5,
        name: "VR p95 reduction smaller than RTMG",
        pass,
        detail: parts.join(", "),
    }
}

fn criterion_6(s: &Sweep) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    let m = Metric::ThroughputBps;
    for sc in [Scenario::RTMG, Scenario::VR] {
        for n in LEVELS {
            let c = s.mean(sc, System::Coordinated, n, Group::CoLl, m);
            let u = s.mean(sc, System::Uncoordinated, n, Group::CoLl, m);
            let rel = (c - u) / u;
            pass &= rel.abs() <= THROUGHPUT_TOL;
            parts.push(format!("{sc} n={n} {:+.2}%", 100.0 * rel));
        }
    }
    Verdict {
        id: 6,
        name: "network throughput within 5%",
        pass,
        detail: parts.join(", "),
    }
}

fn criterion_7(s: &Sweep) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    // (group, coordinated expected to be >= uncoordinated)
    for (g, higher) in [(Group::NonCoLl, true), (Group::CoVc, false)] {
        for sc in [Scenario::RTMG, Scenario::VR] {
            let mut misses = 0;
            let mut significant = 0;
            for n in LEVELS {
                // coordinated - uncoordinated
                let d: Vec<f64> = s.gap(sc, n, g, P95).iter().map(|x| -x).collect();
                let c = ci(&d);
                let ok = if higher { c.mean >= 0.0 } else { c.mean <= 0.0 };
                if !ok {
                    misses += 1;
                    if !contains_zero(&c) {
                        significant += 1;
                    }
                }
            }
            pass &= misses <= 1 && significant == 0;
            parts.push(format!("{g} {sc}: {misses} miss(es), {significant} beyond CI"));
        }
    }
    Verdict {
        id: 7,
        name: "non-co-BSS LL p95 c >= u, co-BSS VC p95 c <= u",
        pass,
        detail: parts.join(", "),
    }
}

fn criterion_8() -> Verdict {
    let mut cfg = ScenarioConfig::new(Scenario::RTMG, System::Coordinated, *LEVELS.last().unwrap());
    cfg.n_bss = 2;
    cfg.sim_time_us = 3_000_000;
    let sampler = ForkSampler::default();
    let mut samples: Vec<PairSample> = Vec::new();
    let mut seed = 0;
    while samples.len() < MIN_PAIRS && seed < 20 {
        let built = build_for_system(&cfg, System::Coordinated, seed).expect("controlled scenario builds");
        samples.extend(sampler.run(Arc::new(built.network), seed).expect("fork sampling"));
        seed += 1;
    }
    let row = summarize(cfg.n_vc_stas, &samples).expect("valid components");
    let rel = (row.gain_eq3_us - row.gain_measured_us).abs() / row.gain_measured_us.abs();
    let pass = row.n_pairs >= MIN_PAIRS && row.bound_violations == 0 && rel <= APPROX_TOL;
    Verdict {
        id: 8,
        name: "analytic gain: lower bound never exceeds exact, approximation within 20%",
        pass,
        detail: format!(
            "{} pairs over {seed} seeds; lower bound > exact in {} pairs; exact {:.1} us (max |exact - measured| {:.2e}), \
             lower bound {:.1} us, approximation {:.1} us vs measured {:.1} us ({:.0}% error)",
            row.n_pairs,
            row.bound_violations,
            row.gain_eq1_us,
            row.max_exact_error_us,
            row.gain_eq2_us,
            row.gain_eq3_us,
            row.gain_measured_us,
            100.0 * rel
        ),
    }
}

// HE data subcarriers of the full-band RU and (bits per subcarrier,
// coding rate) per MCS.
fn oracle_airtime_us(octets: u64, mcs: u8, cfg: &PhyConfig) -> f64 {
    let nsd = match cfg.bandwidth_mhz {
        20 => 234.0,
        40 => 468.0,
        80 => 980.0,
        160 => 1960.0,
        _ => unreachable!(),
    };
    let (bits, rate) = [
        (1.0, 1.0 / 2.0),
        (2.0, 1.0 / 2.0),
        (2.0, 3.0 / 4.0),
        (4.0, 1.0 / 2.0),
        (4.0, 3.0 / 4.0),
        (6.0, 2.0 / 3.0),
        (6.0, 3.0 / 4.0),
        (6.0, 5.0 / 6.0),
        (8.0, 3.0 / 4.0),
        (8.0, 5.0 / 6.0),
        (10.0, 3.0 / 4.0),
        (10.0, 5.0 / 6.0),
    ][mcs as usize];
    let symbol_us = 12.8 + cfg.gi_ns as f64 / 1000.0;
    let rate_mbps = nsd * bits * rate * cfg.n_ss as f64 / symbol_us;
    let n_dbps = (rate_mbps * symbol_us).round();
    let n_sym = ((octets * 8) as f64 / n_dbps).ceil();
    cfg.data_preamble_us as f64 + n_sym * symbol_us
}

fn criterion_9() -> Verdict {
    let started = Instant::now();
    let mut rng = RngStream::new(99, 1);
    let mut airtime_bad = 0;
    let mut first_airtime_miss = None;
    for _ in 0..1000 {
        let cfg = PhyConfig {
            bandwidth_mhz: [20, 40, 80, 160][rng.gen_range(0..4)],
            gi_ns: [800, 1600, 3200][rng.gen_range(0..3)],
            n_ss: rng.gen_range(1..=2),
            ..PhyConfig::default()
        };
        let mcs = rng.gen_range(0..=11u8);
        let octets = rng.gen_range(1..=200_000u64);
        let n_mpdus = rng.gen_range(1..=MAX_AMPDU_MPDUS as u32);
        let want = oracle_airtime_us(octets, mcs, &cfg);
        let fits = want <= cfg.max_ppdu_us as f64 + 1e-6;
        let got = ppdu_airtime(octets, mcs, n_mpdus, &cfg);
        match &got {
            Ok(d) if fits && (d.as_us_f64() - want).abs() < 1e-6 => {}
            Err(_) if !fits => {}
            _ => {
                airtime_bad += 1;
                first_airtime_miss.get_or_insert(format!(
                    " (first: {octets} B mcs {mcs} {} MHz gi {} ns {} ss: {got:?} vs {want:.3} us)",
                    cfg.bandwidth_mhz, cfg.gi_ns, cfg.n_ss
                ));
            }
        }
    }

    let mut stats_bad = 0;
    for _ in 0..200 {
        let n = rng.gen_range(2..500);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1e5)).collect();
        let p = 0.95;
        let got = percentile(&xs, p).unwrap();
        // smallest sample with at least p * n samples at or below it
        let want = xs
            .iter()
            .copied()
            .filter(|&x| xs.iter().filter(|&&y| y <= x).count() as f64 >= p * n as f64 - 1e-9)
            .fold(f64::INFINITY, f64::min);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt();
        if got != want || (jitter(&xs).unwrap() - sd).abs() > 1e-9 * sd.max(1.0) {
            stats_bad += 1;
        }
    }

    let mac = MacConfig::default();
    let params = EdcaParams::default();
    let mut chi_bad = Vec::new();
    for ac in AccessCategory::ALL {
        let k = params.get(ac).cw_min as usize + 1;
        let mut counts = vec![0u64; k];
        let rounds = 20_000;
        for _ in 0..rounds {
            let mut e = EdcaContender::new(params, &mac);
            e.advance(MediumTrigger::Traffic { ac, nonempty: true }, SimTime::ZERO, &mut rng);
            counts[e.counter(ac).unwrap() as usize] += 1;
        }
        let expected = rounds as f64 / k as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let critical = chi_square_critical_99(k - 1);
        if stat >= critical {
            chi_bad.push(format!("{ac} {stat:.1}>={critical:.1}"));
        }
    }

    let cfg = ScenarioConfig::new(Scenario::RTMG, System::Coordinated, 3);
    let bytes = |seed| {
        let r = run_one(
            &cfg,
            System::Coordinated,
            seed,
            TraceOptions {
                frames: true,
                segments: false,
            },
            true,
        )
        .unwrap();
        let mut out = serde_json::to_vec(&r.report).unwrap();
        r.trace.write_frames(&mut out).unwrap();
        r.trace.write_grants(&mut out).unwrap();
        out
    };
    let (a, b) = (bytes(11), bytes(11));
    let identical = a == b;

    let pass = airtime_bad == 0 && stats_bad == 0 && chi_bad.is_empty() && identical;
    Verdict {
        id: 9,
        name: "deterministic oracles",
        pass,
        detail: format!(
            "airtime mismatches {airtime_bad}/1000{}, percentile/jitter mismatches {stats_bad}/200, \
             backoff chi-square failures [{}], same-seed output identical: {identical} ({} bytes), {:.1}s",
            first_airtime_miss.unwrap_or_default(),
            chi_bad.join(" "),
            a.len(),
            started.elapsed().as_secs_f64()
        ),
    }
}

fn chi_square_critical_99(df: usize) -> f64 {
    ChiSquared::new(df as f64).unwrap().inverse_cdf(0.99)
}

fn criterion_10() -> Verdict {
    let mut totals: BTreeMap<Invariant, usize> = BTreeMap::new();
    let mut frames = 0;
    let mut grants = 0;
    let mut examples = Vec::new();
    for k in 0..CONFORMANCE_RUNS {
        let scenario = if k % 2 == 0 { Scenario::RTMG } else { Scenario::VR };
        let n = LEVELS[(k as usize / 2) % LEVELS.len()];
        let cfg = ScenarioConfig::new(scenario, System::Coordinated, n);
        let r = run_one(
            &cfg,
            System::Coordinated,
            k,
            TraceOptions {
                frames: true,
                segments: false,
            },
            false,
        )
        .unwrap();
        let rep = check_trace(&r.trace, &cfg.edca);
        frames += rep.frames_checked;
        grants += rep.grants_checked;
        for (inv, c) in &rep.violations {
            *totals.entry(*inv).or_default() += c;
        }
        examples.extend(rep.examples.into_iter().take(1));
    }
    let required = [
        Invariant::SingleShare,
        Invariant::Containment,
        Invariant::RoleLegality,
        Invariant::PrioritySoundness,
    ];
    let pass = grants > 0 && required.iter().all(|i| totals.get(i).copied().unwrap_or(0) == 0);
    let counts: Vec<String> = totals.iter().map(|(i, c)| format!("{i:?}={c}")).collect();
    let mut detail = format!(
        "{CONFORMANCE_RUNS} runs, {frames} frames, {grants} grants; violations {}",
        counts.join(" ")
    );
    if let Some(e) = examples.first() {
        detail.push_str(&format!("; first: {e}"));
    }
    Verdict {
        id: 10,
        name: "trace conformance of coordinated runs",
        pass,
        detail,
    }
}

/// Criteria selected by `ACCEPTANCE_ONLY` (comma-separated ids), all by default.
fn selected() -> Vec<u32> {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(v) => v.split(',').filter_map(|t| t.trim().parse().ok()).collect(),
        Err(_) => (1..=10).collect(),
    }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let only = selected();
    let mut verdicts = Vec::new();
    if only.iter().any(|id| (1..=7).contains(id)) {
        let sweep = Sweep::run();
        println!(
            "sweep: 2 scenarios x {} levels x 2 systems x {SEEDS} seeds in {:.0}s",
            LEVELS.len(),
            started.elapsed().as_secs_f64()
        );
        let (c2, c3) = criterion_2_3(&sweep);
        verdicts.extend([
            criterion_1(&sweep),
            c2,
            c3,
            criterion_4(&sweep),
            criterion_5(&sweep),
            criterion_6(&sweep),
            criterion_7(&sweep),
        ]);
    }
    verdicts.retain(|v| only.contains(&v.id));
    if only.contains(&8) {
        verdicts.push(criterion_8());
    }
    if only.contains(&9) {
        verdicts.push(criterion_9());
    }
    if only.contains(&10) {
        verdicts.push(criterion_10());
    }
    for v in &verdicts {
        report(v);
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.0}s",
        verdicts.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
