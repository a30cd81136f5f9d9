//! Channel-access-delay gain of the sharing AP: the exact decomposition,
//! its lower bound for equal frame-exchange times, and the high-congestion
//! approximation, plus extraction of the components from paired traces.
//!
//! Subscripts follow the usual notation: system `u` (uncoordinated) or `c`
//! (coordinated), AP `i` (the one whose access interval is measured) and
//! AP `j` (its partner).

use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::mapc::MapcPair;
use crate::sim::{NetworkConfig, SimError, Simulator};
use crate::trace::{AccessRecord, Segment, SegmentKind, TraceOptions};
use crate::types::DeviceId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticError {
    #[error("negative component {name} = {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("network has no MAPC pair")]
    NoPair,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// System index into the component tables.
pub const U: usize = 0;
pub const C: usize = 1;
/// AP index into the component tables.
pub const I: usize = 0;
pub const J: usize = 1;

/// Time components of one access interval in both systems, in µs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GainComponents {
    /// `t_fe[s][k]`: AP `k`'s own frame exchanges.
    pub t_fe: [[f64; 2]; 2],
    /// Polling, sharing handshake and truncation residue of both APs.
    pub t_overhead_u: f64,
    pub t_overhead_c: f64,
    /// `t_busy[s][k]`: medium occupied by others while AP `k` waits.
    pub t_busy: [[f64; 2]; 2],
    pub t_cotdma: f64,
}

impl GainComponents {
    pub fn validate(&self) -> Result<(), AnalyticError> {
        let named = [
            ("t_fe_u_i", self.t_fe[U][I]),
            ("t_fe_u_j", self.t_fe[U][J]),
            ("t_fe_c_i", self.t_fe[C][I]),
            ("t_fe_c_j", self.t_fe[C][J]),
            ("t_overhead_u", self.t_overhead_u),
            ("t_overhead_c", self.t_overhead_c),
            ("t_busy_u_i", self.t_busy[U][I]),
            ("t_busy_u_j", self.t_busy[U][J]),
            ("t_busy_c_i", self.t_busy[C][I]),
            ("t_busy_c_j", self.t_busy[C][J]),
            ("t_cotdma", self.t_cotdma),
        ];
        for (name, value) in named {
            if !(value >= 0.0) {
                return Err(AnalyticError::Negative { name, value });
            }
        }
        Ok(())
    }

    /// Access interval of AP `i` in system `s` implied by the components.
    pub fn interval(&self, s: usize) -> f64 {
        let ov = if s == U { self.t_overhead_u } else { self.t_overhead_c };
        let co = if s == U { 0.0 } else { self.t_cotdma };
        ov + self.t_fe[s][I] + self.t_fe[s][J] + self.t_busy[s][J] + self.t_busy[s][I] + co
    }
}

/// Exact gain `interval_u - interval_c`. The coordinated side keeps its
/// own `T^Busy_{c,i}`, which is zero when AP `i` regains the medium right
/// after the partner's exchanges.
pub fn access_delay_gain(c: &GainComponents) -> Result<f64, AnalyticError> {
    c.validate()?;
    Ok(c.interval(U) - c.interval(C))
}

/// The gain with the frame-exchange terms dropped; a lower bound whenever
/// the uncoordinated exchanges take at least as long.
pub fn access_delay_gain_lower_bound(c: &GainComponents) -> Result<f64, AnalyticError> {
    c.validate()?;
    Ok(c.t_overhead_u + c.t_busy[U][J] + c.t_busy[U][I]
        - (c.t_overhead_c + c.t_busy[C][J] + c.t_busy[C][I] + c.t_cotdma))
}

/// High-congestion approximation `T^Busy_{u,i} - T^Co-TDMA`.
pub fn access_delay_gain_approx(t_busy_ui: f64, t_cotdma: f64) -> f64 {
    t_busy_ui - t_cotdma
}

/// Start of a successful access and the next one by the same AP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccessIntervalMeasurement {
    pub ap: DeviceId,
    pub first_access_start: SimTime,
    pub second_access_start: SimTime,
}

impl AccessIntervalMeasurement {
    pub fn interval_us(&self) -> f64 {
        (self.second_access_start - self.first_access_start).as_us_f64()
    }
}

/// Components of one branch over `[t0, t1)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Side {
    fe: [f64; 2],
    overhead: f64,
    busy: [f64; 2],
    cotdma: f64,
}

/// Splits `[t0, t1)` into the labelled segments of the two APs and the
/// rest. Overlapping labelled time is counted once, for the earlier
/// segment; failed accesses count as busy.
fn decompose(segments: &[Segment], aps: [DeviceId; 2], t0: SimTime, t1: SimTime) -> Side {
    let mut segs: Vec<&Segment> = segments
        .iter()
        .filter(|s| aps.contains(&s.holder) && s.kind != SegmentKind::Failed && s.end > t0 && s.start < t1)
        .collect();
    segs.sort_by_key(|s| (s.start, s.end));
    // integer nanoseconds so the parts add up exactly
    let (mut fe, mut overhead, mut cotdma, mut labelled) = ([0u64; 2], 0u64, 0u64, 0u64);
    let mut cursor = t0;
    let mut j_seen = false;
    let mut busy_before_j = 0u64;
    for s in segs {
        let a = s.start.max(cursor);
        let b = s.end.min(t1);
        if b <= a {
            continue;
        }
        let k = if s.holder == aps[I] { I } else { J };
        if !j_seen {
            busy_before_j += (a - cursor).as_ns();
            j_seen = k == J;
        }
        let d = (b - a).as_ns();
        labelled += d;
        match s.kind {
            SegmentKind::Fe => fe[k] += d,
            SegmentKind::Poll | SegmentKind::Ctrl | SegmentKind::Residual => overhead += d,
            SegmentKind::CoTdma => cotdma += d,
            SegmentKind::Failed => unreachable!("filtered"),
        }
        cursor = b;
    }
    let total_busy = (t1 - t0).as_ns() - labelled;
    if !j_seen {
        busy_before_j = total_busy;
    }
    let us = |ns: u64| ns as f64 / 1_000.0;
    Side {
        fe: [us(fe[I]), us(fe[J])],
        overhead: us(overhead),
        busy: [us(total_busy - busy_before_j), us(busy_before_j)],
        cotdma: us(cotdma),
    }
}

/// One forked sample: the same access of AP `i` continued in both systems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub components: GainComponents,
    pub u: AccessIntervalMeasurement,
    pub c: AccessIntervalMeasurement,
    /// The coordinated TXOP at `t0` issued a confirmed grant.
    pub shared: bool,
}

impl PairSample {
    pub fn measured_gain_us(&self) -> f64 {
        self.u.interval_us() - self.c.interval_us()
    }
}

/// Steps a branch until AP `ap` completes a successful access after the one
/// at `t0`. `None` if the access at `t0` failed or the horizon is hit.
fn next_access(sim: &mut Simulator, ap: DeviceId, t0: SimTime, horizon: SimTime) -> Option<(SimTime, bool)> {
    let find = |acc: &[AccessRecord]| -> (Option<bool>, Option<SimTime>) {
        let first = acc.iter().find(|a| a.device == ap && a.time == t0).map(|a| a.ok);
        let next = acc
            .iter()
            .find(|a| a.device == ap && a.time > t0 && a.ok)
            .map(|a| a.time);
        (first, next)
    };
    loop {
        let (first, next) = find(&sim.trace().accesses);
        if first == Some(false) {
            return None;
        }
        if let (Some(true), Some(t1)) = (first, next) {
            let shared = sim
                .trace()
                .accesses
                .iter()
                .any(|a| a.device == ap && a.time == t0 && a.shared);
            return Some((t1, shared));
        }
        if !sim.step_until(horizon) {
            return None;
        }
    }
}

/// Forks a coordinated run at successive accesses of the pair APs after
/// warm-up and extracts the components of each interval in both systems.
pub struct ForkSampler {
    pub max_pairs: usize,
    /// Longest branch continuation before a sample is abandoned.
    pub horizon: SimTime,
}

impl Default for ForkSampler {
    fn default() -> Self {
        ForkSampler {
            max_pairs: 200,
            horizon: SimTime::from_ms(200),
        }
    }
}

impl ForkSampler {
    pub fn run(&self, net: Arc<NetworkConfig>, seed: u64) -> Result<Vec<PairSample>, AnalyticError> {
        let pair: MapcPair = net.mapc.ok_or(AnalyticError::NoPair)?;
        let aps = pair.aps();
        let warmup = net.warmup;
        let end = net.sim_time;
        let mut driver = Simulator::new(net, seed, true, TraceOptions::default())?;
        let mut out = Vec::new();
        let branch_opts = TraceOptions {
            frames: false,
            segments: true,
        };
        while out.len() < self.max_pairs {
            let Some((t0, dev)) = driver.peek() else { break };
            if t0 > end {
                break;
            }
            let Some(i) = dev.filter(|d| t0 >= warmup && aps.contains(d)) else {
                driver.step_until(end);
                continue;
            };
            let j = pair.partner(i).expect("pair member");
            let mut c = driver.clone();
            c.clear_trace();
            c.set_trace_options(branch_opts);
            let mut u = c.clone();
            u.set_coordination(false);
            c.step_until(t0);
            u.step_until(t0);
            if c.txop_start(i) != Some(t0) || u.txop_start(i) != Some(t0) {
                driver.step_until(end);
                continue;
            }
            let horizon = t0 + self.horizon;
            let (Some((t1u, _)), Some((t1c, shared))) =
                (next_access(&mut u, i, t0, horizon), next_access(&mut c, i, t0, horizon))
            else {
                driver.step_until(end);
                continue;
            };
            let su = decompose(&u.trace().segments, [i, j], t0, t1u);
            let sc = decompose(&c.trace().segments, [i, j], t0, t1c);
            let components = GainComponents {
                t_fe: [su.fe, sc.fe],
                t_overhead_u: su.overhead + su.cotdma,
                t_overhead_c: sc.overhead,
                t_busy: [su.busy, sc.busy],
                t_cotdma: sc.cotdma,
            };
            out.push(PairSample {
                components,
                u: AccessIntervalMeasurement {
                    ap: i,
                    first_access_start: t0,
                    second_access_start: t1u,
                },
                c: AccessIntervalMeasurement {
                    ap: i,
                    first_access_start: t0,
                    second_access_start: t1c,
                },
                shared,
            });
            driver.step_until(end);
        }
        Ok(out)
    }
}

/// Per-level summary of the gain estimates, in µs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub congestion_level: usize,
    pub gain_eq1_us: f64,
    pub gain_eq2_us: f64,
    pub gain_eq3_us: f64,
    pub gain_measured_us: f64,
    pub n_pairs: usize,
    /// Pairs where the lower bound exceeded the exact gain.
    pub bound_violations: usize,
    /// Largest `|exact - measured|` over the pairs.
    pub max_exact_error_us: f64,
}

/// Averages the estimates over `samples`.
pub fn summarize(level: usize, samples: &[PairSample]) -> Result<GainRow, AnalyticError> {
    let n = samples.len().max(1) as f64;
    let mut row = GainRow {
        congestion_level: level,
        gain_eq1_us: 0.0,
        gain_eq2_us: 0.0,
        gain_eq3_us: 0.0,
        gain_measured_us: 0.0,
        n_pairs: samples.len(),
        bound_violations: 0,
        max_exact_error_us: 0.0,
    };
    for s in samples {
        let c = &s.components;
        let e1 = access_delay_gain(c)?;
        let e2 = access_delay_gain_lower_bound(c)?;
        let e3 = access_delay_gain_approx(c.t_busy[U][I], c.t_cotdma);
        let m = s.measured_gain_us();
        row.gain_eq1_us += e1 / n;
        row.gain_eq2_us += e2 / n;
        row.gain_eq3_us += e3 / n;
        row.gain_measured_us += m / n;
        if e2 > e1 + 1e-9 {
            row.bound_violations += 1;
        }
        row.max_exact_error_us = row.max_exact_error_us.max((e1 - m).abs());
    }
    Ok(row)
}

pub fn write_gain_csv<W: Write>(rows: &[GainRow], mut w: W) -> io::Result<()> {
    writeln!(
        w,
        "congestion_level,gain_eq1_us,gain_eq2_us,gain_eq3_us,gain_measured_us"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{:.3},{:.3},{:.3},{:.3}",
            r.congestion_level, r.gain_eq1_us, r.gain_eq2_us, r.gain_eq3_us, r.gain_measured_us
        )?;
    }
    Ok(())
}
