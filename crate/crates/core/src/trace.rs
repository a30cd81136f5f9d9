//! Frame, grant and decision logs plus the protocol conformance checker.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::mac::EdcaParams;
use crate::mapc::TxopAction;
use crate::types::{AccessCategory, DeviceId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameKind {
    Data,
    TbData,
    BlockAck,
    MultiBa,
    Trigger,
    Icf,
    Icr,
    MuRtsTxs,
    Cts,
    CfEnd,
}

impl FrameKind {
    pub fn name(self) -> &'static str {
        match self {
            FrameKind::Data => "data",
            FrameKind::TbData => "tb_data",
            FrameKind::BlockAck => "block_ack",
            FrameKind::MultiBa => "multi_sta_ba",
            FrameKind::Trigger => "trigger",
            FrameKind::Icf => "icf",
            FrameKind::Icr => "icr",
            FrameKind::MuRtsTxs => "mu_rts_txs",
            FrameKind::Cts => "cts",
            FrameKind::CfEnd => "cf_end",
        }
    }

    /// Frames that exist only because of AP coordination.
    pub fn is_coordination(self) -> bool {
        matches!(
            self,
            FrameKind::Icf | FrameKind::Icr | FrameKind::MuRtsTxs | FrameKind::Cts
        )
    }

    pub fn carries_data(self) -> bool {
        matches!(self, FrameKind::Data | FrameKind::TbData)
    }
}

impl fmt::Display for FrameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameOutcome {
    Delivered,
    /// Some receivers of an MU PPDU decoded it, others did not.
    Partial,
    Lost,
    /// Not individually resolved (acknowledgements, CF-End).
    Sent,
}

impl FrameOutcome {
    pub fn name(self) -> &'static str {
        match self {
            FrameOutcome::Delivered => "delivered",
            FrameOutcome::Partial => "partial",
            FrameOutcome::Lost => "lost",
            FrameOutcome::Sent => "sent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub start: SimTime,
    pub end: SimTime,
    pub device: DeviceId,
    pub kind: FrameKind,
    /// AC of the TXOP the frame belongs to.
    pub ac: Option<AccessCategory>,
    pub n_mpdus: usize,
    pub n_ll: usize,
    /// TXOP holder whose protection covers the frame.
    pub owner: Option<DeviceId>,
    pub txop_start: Option<SimTime>,
    /// Grant whose shared window contains the frame.
    pub grant: Option<u64>,
    pub exchange: u64,
    pub outcome: FrameOutcome,
    /// Physical and virtual carrier sense were idle when the frame began.
    pub cs_idle: bool,
    /// First frame of a TXOP, sent after winning contention.
    pub contention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrantRecord {
    pub id: u64,
    pub time: SimTime,
    pub sharing_ap: DeviceId,
    pub shared_ap: DeviceId,
    pub duration: SimTime,
    pub dl_ll_bytes: u64,
    pub ul_ll_bytes: u64,
    pub window_start: SimTime,
    pub window_end: SimTime,
    pub txop_start: SimTime,
    pub txop_end: SimTime,
    /// The shared AP answered with a CTS.
    pub confirmed: bool,
}

/// One evaluation of the TXOP action plan (holder) or of the shared-window
/// schedule (`window == true`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub time: SimTime,
    pub ap: DeviceId,
    pub window: bool,
    pub action: TxopAction,
    pub remaining: SimTime,
    /// Shortest exchange that would serve the head of the DL queue.
    pub dl_head_exchange: Option<SimTime>,
    /// Shortest triggered exchange that would serve one UL LL head.
    pub ul_head_exchange: Option<SimTime>,
}

impl Decision {
    pub fn dl_fits(&self) -> bool {
        self.dl_head_exchange.is_some_and(|x| x <= self.remaining)
    }

    pub fn ul_fits(&self) -> bool {
        self.ul_head_exchange.is_some_and(|x| x <= self.remaining)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxopRecord {
    pub device: DeviceId,
    pub ac: AccessCategory,
    pub start: SimTime,
    pub end: SimTime,
    pub ok: bool,
    pub shared: bool,
}

/// Labels of holder-side time inside a TXOP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    /// Own frame exchanges.
    Fe,
    /// ICF, SIFS, ICR, SIFS.
    Poll,
    /// MU-RTS TXS, SIFS, CTS, SIFS.
    Ctrl,
    /// CF-End or the unused tail of an expiring TXOP.
    Residual,
    /// Shared window used by the partner.
    CoTdma,
    /// Any part of a TXOP whose first exchange failed.
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub holder: DeviceId,
    pub kind: SegmentKind,
    pub start: SimTime,
    pub end: SimTime,
    pub txop_start: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub time: SimTime,
    pub device: DeviceId,
    /// The TXOP was not ended by a failed first exchange.
    pub ok: bool,
    pub shared: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOptions {
    /// Frames, decisions and TXOPs.
    pub frames: bool,
    /// Time segments and access records for the gain decomposition.
    pub segments: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub frames: Vec<FrameRecord>,
    pub grants: Vec<GrantRecord>,
    pub decisions: Vec<Decision>,
    pub txops: Vec<TxopRecord>,
    pub segments: Vec<Segment>,
    pub accesses: Vec<AccessRecord>,
}

impl Trace {
    pub fn coordination_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.kind.is_coordination()).count()
    }

    /// `time_us,device,event,ac,n_mpdus,airtime_us,outcome`
    pub fn write_frames<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "time_us,device,event,ac,n_mpdus,airtime_us,outcome")?;
        let mut idx: Vec<usize> = (0..self.frames.len()).collect();
        idx.sort_by_key(|&i| (self.frames[i].start, self.frames[i].device));
        for i in idx {
            let f = &self.frames[i];
            writeln!(
                w,
                "{:.3},{},{},{},{},{:.3},{}",
                f.start.as_us_f64(),
                f.device.0,
                f.kind,
                f.ac.map_or("-".to_string(), |a| a.to_string()),
                f.n_mpdus,
                (f.end - f.start).as_us_f64(),
                f.outcome.name()
            )?;
        }
        Ok(())
    }

    /// `time_us,sharing_ap,shared_ap,duration_us,dl_ll_bytes,ul_ll_bytes`
    pub fn write_grants<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "time_us,sharing_ap,shared_ap,duration_us,dl_ll_bytes,ul_ll_bytes")?;
        for g in self.grants.iter().filter(|g| g.confirmed) {
            writeln!(
                w,
                "{:.3},{},{},{:.3},{},{}",
                g.time.as_us_f64(),
                g.sharing_ap.0,
                g.shared_ap.0,
                g.duration.as_us_f64(),
                g.dl_ll_bytes,
                g.ul_ll_bytes
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariant {
    SingleShare,
    Containment,
    RoleLegality,
    PrioritySoundness,
    TxopLimit,
    CarrierSense,
    WorkConservation,
}

impl Invariant {
    pub const ALL: [Invariant; 7] = [
        Invariant::SingleShare,
        Invariant::Containment,
        Invariant::RoleLegality,
        Invariant::PrioritySoundness,
        Invariant::TxopLimit,
        Invariant::CarrierSense,
        Invariant::WorkConservation,
    ];
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub violations: BTreeMap<Invariant, usize>,
    pub examples: Vec<String>,
    pub frames_checked: usize,
    pub grants_checked: usize,
}

impl CheckReport {
    pub fn count(&self, inv: Invariant) -> usize {
        self.violations.get(&inv).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.violations.values().sum()
    }

    pub fn merge(&mut self, other: CheckReport) {
        for (k, v) in other.violations {
            *self.violations.entry(k).or_default() += v;
        }
        for e in other.examples {
            if self.examples.len() < 20 {
                self.examples.push(e);
            }
        }
        self.frames_checked += other.frames_checked;
        self.grants_checked += other.grants_checked;
    }

    fn flag(&mut self, inv: Invariant, msg: impl FnOnce() -> String) {
        *self.violations.entry(inv).or_default() += 1;
        if self.examples.len() < 20 {
            self.examples.push(format!("{inv:?}: {}", msg()));
        }
    }
}

/// Verifies a recorded trace against the protocol invariants. Needs a
/// trace recorded with [`TraceOptions::frames`].
pub fn check_trace(trace: &Trace, edca: &EdcaParams) -> CheckReport {
    let mut r = CheckReport {
        violations: Invariant::ALL.iter().map(|&i| (i, 0)).collect(),
        frames_checked: trace.frames.len(),
        grants_checked: trace.grants.len(),
        ..Default::default()
    };

    let mut per_txop: BTreeMap<(DeviceId, SimTime), usize> = BTreeMap::new();
    for g in &trace.grants {
        *per_txop.entry((g.sharing_ap, g.txop_start)).or_default() += 1;
        if g.window_end > g.txop_end {
            r.flag(Invariant::Containment, || format!("grant {} ends after its TXOP", g.id));
        }
    }
    for ((ap, t), n) in per_txop {
        if n > 1 {
            r.flag(Invariant::SingleShare, || {
                format!("{ap} issued {n} grants in TXOP at {t}")
            });
        }
    }

    let grants: BTreeMap<u64, &GrantRecord> = trace.grants.iter().map(|g| (g.id, g)).collect();
    for f in &trace.frames {
        if let Some(id) = f.grant {
            match grants.get(&id) {
                Some(g) => {
                    if f.start < g.window_start || f.end > g.window_end {
                        r.flag(Invariant::Containment, || {
                            format!(
                                "{} {} [{}, {}] outside window of grant {id}",
                                f.device, f.kind, f.start, f.end
                            )
                        });
                    }
                    if f.kind.carries_data() && f.n_ll != f.n_mpdus {
                        r.flag(Invariant::RoleLegality, || {
                            format!("{} sent {} non-LL MPDUs in grant {id}", f.device, f.n_mpdus - f.n_ll)
                        });
                    }
                }
                None => r.flag(Invariant::Containment, || format!("frame refers to unknown grant {id}")),
            }
        }
        if let (Some(ac), Some(ts)) = (f.ac, f.txop_start) {
            let limit = SimTime::from_us(edca.get(ac).txop_limit_us);
            if f.end > ts + limit {
                r.flag(Invariant::TxopLimit, || {
                    format!("{} {} ends {} past TXOP limit", f.device, f.kind, f.end - (ts + limit))
                });
            }
        }
        if f.contention && !f.cs_idle {
            r.flag(Invariant::CarrierSense, || {
                format!("{} started a TXOP at {} on a busy medium", f.device, f.start)
            });
        }
    }

    for d in trace.decisions.iter().filter(|d| !d.window) {
        match d.action {
            TxopAction::CoTdmaShare if d.dl_fits() || d.ul_fits() => r.flag(Invariant::PrioritySoundness, || {
                format!("{} shared at {} with own traffic pending", d.ap, d.time)
            }),
            TxopAction::CfEnd if d.dl_fits() || d.ul_fits() => r.flag(Invariant::WorkConservation, || {
                format!("{} ended TXOP at {} with traffic pending", d.ap, d.time)
            }),
            TxopAction::UlMuTx if d.dl_fits() => r.flag(Invariant::PrioritySoundness, || {
                format!("{} triggered UL at {} before its DL", d.ap, d.time)
            }),
            _ => {}
        }
    }
    r
}
