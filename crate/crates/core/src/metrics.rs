//! Latency samples, per-group statistics and cross-iteration aggregation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::engine::SimTime;
use crate::traffic::{Mpdu, TrafficModel};
use crate::types::{Direction, FlowId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no samples")]
    Empty,
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("percentile fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("paired series differ in length ({0} vs {1})")]
    Unpaired(usize, usize),
}

/// Nearest-rank percentile: the value at rank `ceil(p * n)` of the sorted
/// samples.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(MetricsError::BadFraction(p));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (p * v.len() as f64).ceil() as usize;
    Ok(v[rank.clamp(1, v.len()) - 1])
}

/// Population standard deviation.
pub fn jitter(samples: &[f64]) -> Result<f64, MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::TooFew {
            need: 2,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

pub fn throughput_bps(payload_bytes: u64, window: SimTime) -> f64 {
    if window == SimTime::ZERO {
        return 0.0;
    }
    8.0 * payload_bytes as f64 / (window.as_ns() as f64 * 1e-9)
}

/// Reporting groups. `CoLl`, `CoNonLl`, `NonCoLl` and `NonCoNonLl`
/// partition all samples; the rest are views onto them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    CoLl,
    CoLlDl,
    CoLlUl,
    CoNonLl,
    CoVc,
    NonCoLl,
    NonCoNonLl,
    NonCoVc,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::CoLl,
        Group::CoLlDl,
        Group::CoLlUl,
        Group::CoNonLl,
        Group::CoVc,
        Group::NonCoLl,
        Group::NonCoNonLl,
        Group::NonCoVc,
    ];

    pub const PARTITION: [Group; 4] = [Group::CoLl, Group::CoNonLl, Group::NonCoLl, Group::NonCoNonLl];

    pub fn partition_of(co: bool, ll: bool) -> Group {
        match (co, ll) {
            (true, true) => Group::CoLl,
            (true, false) => Group::CoNonLl,
            (false, true) => Group::NonCoLl,
            (false, false) => Group::NonCoNonLl,
        }
    }

    pub fn contains(self, s: &FlowMeta) -> bool {
        match self {
            Group::CoLl => s.is_co_bss && s.is_ll,
            Group::CoLlDl => s.is_co_bss && s.is_ll && s.direction == Direction::DL,
            Group::CoLlUl => s.is_co_bss && s.is_ll && s.direction == Direction::UL,
            Group::CoNonLl => s.is_co_bss && !s.is_ll,
            Group::CoVc => s.is_co_bss && s.model == TrafficModel::VC,
            Group::NonCoLl => !s.is_co_bss && s.is_ll,
            Group::NonCoNonLl => !s.is_co_bss && !s.is_ll,
            Group::NonCoVc => !s.is_co_bss && s.model == TrafficModel::VC,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::CoLl => "co_ll",
            Group::CoLlDl => "co_ll_dl",
            Group::CoLlUl => "co_ll_ul",
            Group::CoNonLl => "co_non_ll",
            Group::CoVc => "co_vc",
            Group::NonCoLl => "non_co_ll",
            Group::NonCoNonLl => "non_co_non_ll",
            Group::NonCoVc => "non_co_vc",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Static labels of a flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowMeta {
    pub bss: usize,
    pub is_co_bss: bool,
    pub is_ll: bool,
    pub model: TrafficModel,
    pub direction: Direction,
}

/// One delivered application packet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub flow_id: FlowId,
    pub meta: FlowMeta,
    pub enqueue_time: SimTime,
    pub delivery_time: SimTime,
}

impl LatencySample {
    pub fn latency(&self) -> SimTime {
        self.delivery_time - self.enqueue_time
    }
}

#[derive(Debug, Clone)]
struct PendingPacket {
    enqueue: SimTime,
    delivered: Vec<bool>,
    resolved: usize,
    lost: bool,
}

/// Per-run collection of deliveries and losses.
#[derive(Debug, Clone)]
pub struct Collector {
    flows: Vec<FlowMeta>,
    warmup: SimTime,
    pending: HashMap<(usize, u64), PendingPacket>,
    samples: Vec<LatencySample>,
    delivered_bytes: u64,
    mpdu_losses: Vec<u64>,
    packet_drops: Vec<u64>,
}

impl Collector {
    pub fn new(flows: Vec<FlowMeta>, warmup: SimTime) -> Self {
        let n = flows.len();
        Collector {
            flows,
            warmup,
            pending: HashMap::new(),
            samples: Vec::new(),
            delivered_bytes: 0,
            mpdu_losses: vec![0; n],
            packet_drops: vec![0; n],
        }
    }

    pub fn flow_meta(&self, flow: FlowId) -> &FlowMeta {
        &self.flows[flow.0]
    }

    /// Registers an application packet split into `fragments` MPDUs.
    pub fn enqueue(&mut self, flow: FlowId, packet_id: u64, fragments: usize, at: SimTime) {
        self.pending.insert(
            (flow.0, packet_id),
            PendingPacket {
                enqueue: at,
                delivered: vec![false; fragments],
                resolved: 0,
                lost: false,
            },
        );
    }

    /// A packet rejected at a full queue.
    pub fn reject(&mut self, flow: FlowId) {
        self.packet_drops[flow.0] += 1;
    }

    /// Successful reception of one MPDU. Returns false for a duplicate.
    pub fn deliver(&mut self, m: &Mpdu, at: SimTime) -> bool {
        let key = (m.flow_id.0, m.packet_id);
        let Some(p) = self.pending.get_mut(&key) else {
            return false;
        };
        let slot = &mut p.delivered[m.fragment as usize];
        if *slot {
            return false;
        }
        *slot = true;
        p.resolved += 1;
        if at >= self.warmup {
            self.delivered_bytes += m.size_bytes as u64;
        }
        if p.resolved == p.delivered.len() {
            let p = self.pending.remove(&key).expect("present");
            if !p.lost && p.enqueue >= self.warmup {
                self.samples.push(LatencySample {
                    flow_id: m.flow_id,
                    meta: self.flows[m.flow_id.0],
                    enqueue_time: p.enqueue,
                    delivery_time: at,
                });
            }
        }
        true
    }

    /// An MPDU discarded at the retry limit; its packet yields no sample.
    pub fn drop_mpdu(&mut self, m: &Mpdu) {
        self.mpdu_losses[m.flow_id.0] += 1;
        let key = (m.flow_id.0, m.packet_id);
        if let Some(p) = self.pending.get_mut(&key) {
            p.lost = true;
            p.resolved += 1;
            if p.resolved == p.delivered.len() {
                self.pending.remove(&key);
            }
        }
    }

    pub fn samples(&self) -> &[LatencySample] {
        &self.samples
    }

    pub fn delivered_bytes(&self) -> u64 {
        self.delivered_bytes
    }

    pub fn mpdu_losses(&self, g: Group) -> u64 {
        self.flows
            .iter()
            .zip(&self.mpdu_losses)
            .filter(|(m, _)| g.contains(m))
            .map(|(_, l)| *l)
            .sum()
    }

    pub fn packet_drops(&self) -> u64 {
        self.packet_drops.iter().sum()
    }

    /// Builds the per-group report; `window` is the measured span.
    pub fn report(&self, seed: u64, window: SimTime, keep_samples: bool) -> RunReport {
        let mut groups = BTreeMap::new();
        let mut raw = BTreeMap::new();
        for g in Group::ALL {
            let lat: Vec<f64> = self
                .samples
                .iter()
                .filter(|s| g.contains(&s.meta))
                .map(|s| s.latency().as_us_f64())
                .collect();
            groups.insert(
                g,
                GroupStats {
                    p95_latency_us: percentile(&lat, 0.95).ok(),
                    p50_latency_us: percentile(&lat, 0.5).ok(),
                    jitter_us: jitter(&lat).ok(),
                    n_samples: lat.len(),
                    mpdu_loss_count: self.mpdu_losses(g),
                },
            );
            if keep_samples {
                raw.insert(g, lat);
            }
        }
        RunReport {
            seed,
            groups,
            network_throughput_bps: throughput_bps(self.delivered_bytes, window),
            packet_drops: self.packet_drops(),
            samples: raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub p95_latency_us: Option<f64>,
    pub p50_latency_us: Option<f64>,
    pub jitter_us: Option<f64>,
    pub n_samples: usize,
    pub mpdu_loss_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub groups: BTreeMap<Group, GroupStats>,
    pub network_throughput_bps: f64,
    pub packet_drops: u64,
    #[serde(skip)]
    pub samples: BTreeMap<Group, Vec<f64>>,
}

impl RunReport {
    pub fn metric(&self, g: Group, m: Metric) -> Option<f64> {
        let s = self.groups.get(&g)?;
        match m {
            Metric::P95LatencyUs => s.p95_latency_us,
            Metric::JitterUs => s.jitter_us,
            Metric::MpduLoss => Some(s.mpdu_loss_count as f64),
            Metric::ThroughputBps => Some(self.network_throughput_bps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    P95LatencyUs,
    JitterUs,
    MpduLoss,
    ThroughputBps,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::P95LatencyUs,
        Metric::JitterUs,
        Metric::MpduLoss,
        Metric::ThroughputBps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::P95LatencyUs => "p95_latency_us",
            Metric::JitterUs => "jitter_us",
            Metric::MpduLoss => "mpdu_loss",
            Metric::ThroughputBps => "throughput_bps",
        }
    }
}

/// Mean with a two-sided 95% Student-t interval. The interval is absent
/// for a single observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n: usize,
}

impl MeanCi {
    pub fn half_width(&self) -> Option<f64> {
        Some((self.ci_high? - self.ci_low?) / 2.0)
    }
}

pub fn mean_ci(xs: &[f64]) -> Result<MeanCi, MetricsError> {
    if xs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(MeanCi {
            mean,
            ci_low: None,
            ci_high: None,
            n,
        });
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let h = t * (var / n as f64).sqrt();
    Ok(MeanCi {
        mean,
        ci_low: Some(mean - h),
        ci_high: Some(mean + h),
        n,
    })
}

/// Interval for the mean of `a[k] - b[k]` over paired runs.
pub fn paired_diff_ci(a: &[f64], b: &[f64]) -> Result<MeanCi, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Unpaired(a.len(), b.len()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean_ci(&d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: Group,
    pub metric: Metric,
    pub value: MeanCi,
}

/// Cross-iteration summary of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub n_iter: usize,
}

impl Summary {
    pub fn get(&self, g: Group, m: Metric) -> Option<&MeanCi> {
        self.rows
            .iter()
            .find(|r| r.group == g && r.metric == m)
            .map(|r| &r.value)
    }
}

/// Per-iteration metrics averaged across reports. With `pooled`, latency
/// percentiles and jitter come from the union of all runs' samples.
pub fn aggregate(reports: &[RunReport], pooled: bool) -> Result<Summary, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut rows = Vec::new();
    for g in Group::ALL {
        for m in Metric::ALL {
            if m == Metric::ThroughputBps && g != Group::CoLl {
                continue;
            }
            let value = if pooled && matches!(m, Metric::P95LatencyUs | Metric::JitterUs) {
                let all: Vec<f64> = reports
                    .iter()
                    .flat_map(|r| r.samples.get(&g).into_iter().flatten().copied())
                    .collect();
                let v = match m {
                    Metric::P95LatencyUs => percentile(&all, 0.95),
                    _ => jitter(&all),
                };
                match v {
                    Ok(v) => MeanCi {
                        mean: v,
                        ci_low: None,
                        ci_high: None,
                        n: reports.len(),
                    },
                    Err(_) => continue,
                }
            } else {
                let xs: Vec<f64> = reports.iter().filter_map(|r| r.metric(g, m)).collect();
                match mean_ci(&xs) {
                    Ok(v) => v,
                    Err(_) => continue,
                }
            };
            rows.push(SummaryRow {
                group: g,
                metric: m,
                value,
            });
        }
    }
    Ok(Summary {
        rows,
        n_iter: reports.len(),
    })
}
