//! Network simulation: devices with EDCA contention, TXOP execution,
//! triggered UL, and the Co-TDMA polling/sharing sequences on a shared
//! medium.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{stream_id, EventHandle, EventQueue, RngStream, SimTime};
use crate::mac::{
    build_ampdu, cf_end_fits, data_budget, dl_mu_allocate, requeue_failed, trigger_ul_mu, EdcaAction, EdcaContender,
    EdcaParams, MacConfig, MacError, MediumTrigger,
};
use crate::mapc::{
    compute_shared_duration, txop_action_plan, CandidateInfo, InfoChannel, LlBacklog, MapcPair, PlanState, TxopAction,
};
use crate::metrics::{Collector, FlowMeta, RunReport};
use crate::phy::{self, ChannelState, Medium, PhyConfig, RxOutcome};
use crate::trace::{
    AccessRecord, Decision, FrameKind, FrameOutcome, FrameRecord, GrantRecord, Segment, SegmentKind, Trace,
    TraceOptions, TxopRecord,
};
use crate::traffic::{fragment, make_flow, FlowSpec, FlowState, Mpdu, TrafficError};
use crate::types::{AccessCategory, DeviceId, Direction, FlowId, Role};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid network: {0}")]
    Network(String),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub role: Role,
    pub bss: usize,
    /// The AP of the device's BSS (itself for an AP).
    pub ap: DeviceId,
    pub position: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDef {
    pub spec: FlowSpec,
    pub source: DeviceId,
    pub destination: DeviceId,
    pub bss: usize,
}

/// Everything a run needs besides the seed and the coordination switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub phy: PhyConfig,
    pub mac: MacConfig,
    pub edca: EdcaParams,
    pub devices: Vec<DeviceSpec>,
    pub flows: Vec<FlowDef>,
    /// `rx_dbm[a][b]`: power at `b` from `a`.
    pub rx_dbm: Vec<Vec<f64>>,
    pub mapc: Option<MapcPair>,
    /// BSSs reported as Co-BSS, in both systems.
    pub co_bss: Vec<usize>,
    pub ul_mu_in_baseline: bool,
    pub sim_time: SimTime,
    pub warmup: SimTime,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.devices.len();
        let bad = |m: String| Err(SimError::Network(m));
        if n == 0 {
            return bad("no devices".into());
        }
        if self.rx_dbm.len() != n || self.rx_dbm.iter().any(|r| r.len() != n) {
            return bad(format!("power matrix must be {n}x{n}"));
        }
        for (i, d) in self.devices.iter().enumerate() {
            let Some(ap) = self.devices.get(d.ap.0) else {
                return bad(format!("device {i} points to missing AP {}", d.ap));
            };
            if ap.role != Role::Ap || ap.bss != d.bss {
                return bad(format!("device {i} is not associated with an AP of BSS {}", d.bss));
            }
            if d.role == Role::Ap && d.ap.0 != i {
                return bad(format!("AP {i} must be its own AP"));
            }
        }
        for (f, fl) in self.flows.iter().enumerate() {
            fl.spec.validate()?;
            let (Some(s), Some(t)) = (self.devices.get(fl.source.0), self.devices.get(fl.destination.0)) else {
                return bad(format!("flow {f} has a missing endpoint"));
            };
            if s.bss != fl.bss || t.bss != fl.bss || fl.source == fl.destination {
                return bad(format!("flow {f} endpoints must be distinct devices of BSS {}", fl.bss));
            }
            let ap_side = match fl.spec.direction {
                Direction::DL => s,
                Direction::UL => t,
            };
            if ap_side.role != Role::Ap {
                return bad(format!("flow {f} direction does not match endpoint roles"));
            }
        }
        if let Some(p) = &self.mapc {
            for ap in p.aps() {
                if self.devices.get(ap.0).map(|d| d.role) != Some(Role::Ap) {
                    return bad(format!("MAPC member {ap} is not an AP"));
                }
            }
        }
        self.edca.validate().map_err(SimError::Network)?;
        if self.warmup >= self.sim_time {
            return bad("warm-up must be shorter than the simulated time".into());
        }
        Ok(())
    }

    pub fn flow_meta(&self) -> Vec<FlowMeta> {
        self.flows
            .iter()
            .map(|f| FlowMeta {
                bss: f.bss,
                is_co_bss: self.co_bss.contains(&f.bss),
                is_ll: f.spec.is_ll(),
                model: f.spec.model,
                direction: f.spec.direction,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Arrival(usize),
    Access(usize),
    Start(u64),
    End(u64),
    Resume(usize),
    Nav(usize),
}

#[derive(Debug, Clone)]
struct Ppdu {
    exchange: u64,
    tx: usize,
    kind: FrameKind,
    start: SimTime,
    end: SimTime,
    /// Addressed receivers with the MPDUs each one gets.
    parts: Vec<(usize, Vec<Mpdu>)>,
    nav_end: SimTime,
    owner: Option<usize>,
    txop_start: Option<SimTime>,
    ac: Option<AccessCategory>,
    grant: Option<u64>,
    /// Device that runs the exchange this frame belongs to.
    initiator: usize,
    /// TB PPDU airtime announced by a trigger.
    tb_airtime: SimTime,
    mba_airtime: SimTime,
    contention: bool,
    cs_idle: bool,
}

#[derive(Debug, Clone)]
struct Txop {
    ac: AccessCategory,
    start: SimTime,
    end: SimTime,
    first_ok: Option<bool>,
    candidate: Option<CandidateInfo>,
    shared: bool,
    confirmed: bool,
    cursor: SimTime,
    fresh: bool,
}

#[derive(Debug, Clone, Copy)]
struct Window {
    grant: u64,
    sharing: usize,
    start: SimTime,
    end: SimTime,
}

#[derive(Debug, Clone)]
enum Wait {
    None,
    Poll {
        snapshot: Option<CandidateInfo>,
    },
    Exchange {
        ok: bool,
    },
    Tb {
        pending: usize,
        delivered: bool,
        mba: SimTime,
    },
    MuRts,
    Window,
    WindowStart,
    Expire,
}

#[derive(Debug, Clone)]
struct Device {
    role: Role,
    bss: usize,
    queues: [VecDeque<Mpdu>; 3],
    edca: EdcaContender,
    rng: RngStream,
    access: Option<EventHandle>,
    resume: Option<EventHandle>,
    nav_until: SimTime,
    nav_ev: Option<EventHandle>,
    sensed_busy: bool,
    txop: Option<Txop>,
    window: Option<Window>,
    wait: Wait,
}

#[derive(Debug, Clone)]
struct Flow {
    state: FlowState,
    def_idx: usize,
    next_packet: u64,
}

/// Counters that do not belong to the latency report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub events: u64,
    pub txops: u64,
    pub failed_txops: u64,
    pub polls: u64,
    pub polls_answered: u64,
    pub grants: u64,
    pub grants_confirmed: u64,
    pub cf_ends: u64,
}

/// Result of one complete run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub trace: Trace,
    pub counters: RunCounters,
}

/// One simulation run. Cloning forks the complete state, including every
/// random stream.
#[derive(Debug, Clone)]
pub struct Simulator {
    net: Arc<NetworkConfig>,
    seed: u64,
    coordination: bool,
    opts: TraceOptions,
    q: EventQueue<Ev>,
    medium: Medium,
    dev: Vec<Device>,
    flows: Vec<Flow>,
    air: BTreeMap<u64, Ppdu>,
    on_air: Vec<u64>,
    next_id: u64,
    next_grant: u64,
    collector: Collector,
    trace: Trace,
    counters: RunCounters,
}

const VO: usize = AccessCategory::VO as usize;

impl Simulator {
    /// `coordination` enables Co-TDMA for the configured pair.
    pub fn new(net: Arc<NetworkConfig>, seed: u64, coordination: bool, opts: TraceOptions) -> Result<Self, SimError> {
        net.validate()?;
        if coordination && net.mapc.is_none() {
            return Err(SimError::Network("coordination requested without a MAPC pair".into()));
        }
        let medium = Medium::new(net.rx_dbm.clone(), &net.phy);
        let dev = net
            .devices
            .iter()
            .enumerate()
            .map(|(i, d)| Device {
                role: d.role,
                bss: d.bss,
                queues: Default::default(),
                edca: EdcaContender::new(net.edca, &net.mac),
                rng: RngStream::new(seed, stream_id(&[1, i as u64])),
                access: None,
                resume: None,
                nav_until: SimTime::ZERO,
                nav_ev: None,
                sensed_busy: false,
                txop: None,
                window: None,
                wait: Wait::None,
            })
            .collect();
        let mut q = EventQueue::new();
        let mut flows = Vec::with_capacity(net.flows.len());
        for (f, def) in net.flows.iter().enumerate() {
            let mut state = make_flow(def.spec.clone(), RngStream::new(seed, stream_id(&[2, f as u64])))?;
            let t0 = state.initial_offset();
            q.schedule(t0, Ev::Arrival(f)).expect("clock at zero");
            flows.push(Flow {
                state,
                def_idx: f,
                next_packet: 0,
            });
        }
        let collector = Collector::new(net.flow_meta(), net.warmup);
        Ok(Simulator {
            seed,
            coordination,
            opts,
            q,
            medium,
            dev,
            flows,
            air: BTreeMap::new(),
            on_air: Vec::new(),
            next_id: 0,
            next_grant: 0,
            collector,
            trace: Trace::default(),
            counters: RunCounters::default(),
            net,
        })
    }

    pub fn now(&self) -> SimTime {
        self.q.now()
    }

    pub fn network(&self) -> &NetworkConfig {
        &self.net
    }

    pub fn coordination(&self) -> bool {
        self.coordination
    }

    /// Switches Co-TDMA on or off from the current instant.
    pub fn set_coordination(&mut self, on: bool) {
        self.coordination = on && self.net.mapc.is_some();
    }

    pub fn set_trace_options(&mut self, opts: TraceOptions) {
        self.opts = opts;
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn clear_trace(&mut self) {
        self.trace = Trace::default();
    }

    pub fn counters(&self) -> &RunCounters {
        &self.counters
    }

    /// Start of the TXOP `d` currently holds.
    pub fn txop_start(&self, d: DeviceId) -> Option<SimTime> {
        self.dev.get(d.0)?.txop.as_ref().map(|t| t.start)
    }

    pub fn collector(&self) -> &Collector {
        &self.collector
    }

    /// Instant of the next event and, if it is a backoff expiry, the device.
    pub fn peek(&self) -> Option<(SimTime, Option<DeviceId>)> {
        self.q.peek().map(|(t, e)| {
            let d = match e {
                Ev::Access(d) => Some(DeviceId(*d)),
                _ => None,
            };
            (t, d)
        })
    }

    /// Fires the next event if it is due by `until`.
    pub fn step_until(&mut self, until: SimTime) -> bool {
        match self.q.pop_until(until) {
            Some((_, ev)) => {
                self.handle(ev);
                self.counters.events += 1;
                true
            }
            None => false,
        }
    }

    pub fn run_until(&mut self, t_end: SimTime) -> u64 {
        let mut n = 0;
        while self.step_until(t_end) {
            n += 1;
        }
        self.q.advance_to(t_end);
        n
    }

    /// Runs to the configured end time and builds the report without raw
    /// latency samples.
    pub fn run(self) -> RunOutput {
        self.run_keeping(false)
    }

    pub fn run_keeping(mut self, keep_samples: bool) -> RunOutput {
        let end = self.net.sim_time;
        self.run_until(end);
        self.finish(keep_samples)
    }

    pub fn report(&self, keep_samples: bool) -> RunReport {
        let window = self.net.sim_time - self.net.warmup;
        self.collector.report(self.seed, window, keep_samples)
    }

    pub fn finish(self, keep_samples: bool) -> RunOutput {
        RunOutput {
            report: self.report(keep_samples),
            trace: self.trace,
            counters: self.counters,
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Arrival(f) => self.on_arrival(f),
            Ev::Access(d) => self.on_access(d),
            Ev::Start(id) => self.on_start(id),
            Ev::End(id) => self.on_end(id),
            Ev::Resume(d) => {
                self.dev[d].resume = None;
                self.on_resume(d);
            }
            Ev::Nav(d) => {
                self.dev[d].nav_ev = None;
                self.refresh(d);
            }
        }
    }

    // ---- traffic -------------------------------------------------------

    fn on_arrival(&mut self, f: usize) {
        let now = self.now();
        let (size, gap) = self.flows[f].state.next_arrival();
        let def = &self.net.flows[self.flows[f].def_idx];
        let src = def.source.0;
        let ac = def.spec.ac;
        let frags: Vec<u32> = fragment(size, self.net.mac.fragment_threshold).collect();
        let pid = self.flows[f].next_packet;
        self.flows[f].next_packet += 1;
        let q = &mut self.dev[src].queues[ac.index()];
        if q.len() + frags.len() > self.net.mac.queue_limit_mpdus {
            self.collector.reject(FlowId(f));
        } else {
            for (k, &bytes) in frags.iter().enumerate() {
                q.push_back(Mpdu {
                    flow_id: FlowId(f),
                    packet_id: pid,
                    fragment: k as u16,
                    size_bytes: bytes,
                    arrival_time: now,
                    direction: def.spec.direction,
                    source: def.source,
                    destination: def.destination,
                    ac,
                    is_ll: def.spec.is_ll(),
                    retries: 0,
                });
            }
            self.collector.enqueue(FlowId(f), pid, frags.len(), now);
        }
        self.q.schedule_in(gap, Ev::Arrival(f));
        self.sync_traffic(src);
    }

    // ---- carrier sense and EDCA ----------------------------------------

    fn is_busy(&self, d: usize) -> bool {
        let dv = &self.dev[d];
        self.medium.channel_state(DeviceId(d)) == ChannelState::Busy
            || dv.nav_until > self.now()
            || dv.txop.is_some()
            || dv.window.is_some()
    }

    fn refresh(&mut self, d: usize) {
        let busy = self.is_busy(d);
        if busy == self.dev[d].sensed_busy {
            return;
        }
        self.dev[d].sensed_busy = busy;
        let trig = if busy { MediumTrigger::Busy } else { MediumTrigger::Idle };
        self.advance_edca(d, trig);
    }

    fn refresh_all(&mut self) {
        for d in 0..self.dev.len() {
            self.refresh(d);
        }
    }

    fn advance_edca(&mut self, d: usize, trig: MediumTrigger) {
        let now = self.now();
        let dv = &mut self.dev[d];
        let act = dv.edca.advance(trig, now, &mut dv.rng);
        self.apply(d, act);
    }

    fn apply(&mut self, d: usize, act: EdcaAction) {
        match act {
            EdcaAction::Keep => {}
            EdcaAction::Disarm => {
                if let Some(h) = self.dev[d].access.take() {
                    self.q.cancel(h);
                }
            }
            EdcaAction::Arm(t) => {
                if let Some(h) = self.dev[d].access.take() {
                    self.q.cancel(h);
                }
                let at = t.max(self.now());
                self.dev[d].access = Some(self.q.schedule(at, Ev::Access(d)).expect("not in the past"));
            }
            EdcaAction::Transmit(ac) => self.begin_txop(d, ac),
        }
    }

    fn sync_traffic(&mut self, d: usize) {
        for ac in AccessCategory::ALL {
            let nonempty = !self.dev[d].queues[ac.index()].is_empty();
            if nonempty != self.dev[d].edca.is_active(ac) {
                self.advance_edca(d, MediumTrigger::Traffic { ac, nonempty });
            }
        }
    }

    fn on_access(&mut self, d: usize) {
        self.dev[d].access = None;
        self.advance_edca(d, MediumTrigger::Timer);
    }

    /// Carrier sense at `d` counting only PPDUs that began strictly before
    /// now; a PPDU starting in the same instant cannot be detected yet.
    fn sensed_idle(&self, d: usize) -> bool {
        let now = self.now();
        if self.dev[d].nav_until > now {
            return false;
        }
        let mut energy = 0.0;
        for id in &self.on_air {
            let p = &self.air[id];
            if p.start >= now || p.tx == d {
                continue;
            }
            let dbm = self.medium.rx_power_dbm(DeviceId(p.tx), DeviceId(d));
            if dbm >= self.net.phy.pd_threshold_dbm {
                return false;
            }
            energy += 10f64.powf(dbm / 10.0);
        }
        energy < 10f64.powf(self.net.phy.ed_threshold_dbm / 10.0)
    }

    // ---- PPDU plumbing -------------------------------------------------

    fn new_exchange(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    /// Context shared by every frame of a TXOP or shared window.
    fn frame_ctx(&self, initiator: usize) -> (Option<usize>, Option<SimTime>, Option<AccessCategory>, Option<u64>) {
        let dv = &self.dev[initiator];
        if let Some(w) = dv.window {
            let tx = self.dev[w.sharing].txop.as_ref();
            return (Some(w.sharing), tx.map(|t| t.start), tx.map(|t| t.ac), Some(w.grant));
        }
        match &dv.txop {
            Some(t) => (Some(initiator), Some(t.start), Some(t.ac), None),
            None => (None, None, None, None),
        }
    }

    /// NAV carried by frames of `initiator`'s sequence; before the first
    /// exchange succeeds it only covers the response.
    fn nav_for(&self, initiator: usize, response_end: SimTime) -> SimTime {
        let dv = &self.dev[initiator];
        let holder = dv.window.map_or(initiator, |w| w.sharing);
        match &self.dev[holder].txop {
            Some(t) if t.first_ok == Some(true) => t.end,
            _ => response_end,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn send(
        &mut self,
        tx: usize,
        initiator: usize,
        kind: FrameKind,
        start: SimTime,
        airtime: SimTime,
        parts: Vec<(usize, Vec<Mpdu>)>,
        exchange: u64,
        nav_end: SimTime,
    ) -> u64 {
        let (owner, txop_start, ac, grant) = self.frame_ctx(initiator);
        let mut contention = false;
        if tx == initiator {
            if let Some(t) = self.dev[tx].txop.as_mut() {
                contention = t.fresh;
                t.fresh = false;
            }
        }
        self.next_id += 1;
        let id = self.next_id;
        let p = Ppdu {
            exchange,
            tx,
            kind,
            start,
            end: start + airtime,
            parts,
            nav_end,
            owner,
            txop_start,
            ac,
            grant,
            initiator,
            tb_airtime: SimTime::ZERO,
            mba_airtime: SimTime::ZERO,
            contention,
            cs_idle: true,
        };
        self.air.insert(id, p);
        if start == self.now() {
            self.on_start(id);
        } else {
            self.q.schedule(start, Ev::Start(id)).expect("future start");
        }
        id
    }

    fn on_start(&mut self, id: u64) {
        let now = self.now();
        let (tx, exchange) = {
            let p = &self.air[&id];
            (p.tx, p.exchange)
        };
        let cs_idle = self.sensed_idle(tx);
        let p = self.air.get_mut(&id).expect("scheduled");
        p.cs_idle = cs_idle;
        let end = p.end;
        self.medium.begin(now, id, DeviceId(tx), exchange);
        self.on_air.push(id);
        self.q.schedule(end, Ev::End(id)).expect("end after start");
        self.refresh_all();
    }

    fn on_end(&mut self, id: u64) {
        let now = self.now();
        let ended = self.medium.end(now, id).expect("PPDU on the air");
        self.on_air.retain(|&x| x != id);
        let p = self.air.remove(&id).expect("known PPDU");
        self.update_nav(&p, &ended.interferers);
        match p.kind {
            FrameKind::Data => self.end_data(p, &ended.interferers),
            FrameKind::TbData => self.end_tb(p, &ended.interferers),
            FrameKind::Trigger => self.end_trigger(p, &ended.interferers),
            FrameKind::Icf => self.end_icf(p, &ended.interferers),
            FrameKind::Icr => self.end_icr(p, &ended.interferers),
            FrameKind::MuRtsTxs => self.end_mu_rts(p, &ended.interferers),
            FrameKind::CfEnd => self.end_cf_end(p),
            FrameKind::BlockAck | FrameKind::MultiBa | FrameKind::Cts => self.log_frame(&p, FrameOutcome::Sent),
        }
        self.refresh_all();
    }

    fn update_nav(&mut self, p: &Ppdu, interferers: &[DeviceId]) {
        let now = self.now();
        for k in 0..self.dev.len() {
            if k == p.tx || Some(k) == p.owner || k == p.initiator || p.parts.iter().any(|(r, _)| *r == k) {
                continue;
            }
            if self.medium.resolve_reception(DeviceId(k), DeviceId(p.tx), interferers) != RxOutcome::Delivered {
                continue;
            }
            let dv = &mut self.dev[k];
            if p.kind == FrameKind::CfEnd {
                dv.nav_until = dv.nav_until.min(now);
                if let Some(h) = dv.nav_ev.take() {
                    self.q.cancel(h);
                }
            } else if p.nav_end > now && p.nav_end > dv.nav_until {
                dv.nav_until = p.nav_end;
                if let Some(h) = dv.nav_ev.take() {
                    self.q.cancel(h);
                }
                dv.nav_ev = Some(self.q.schedule(p.nav_end, Ev::Nav(k)).expect("future NAV"));
            }
        }
    }

    fn log_frame(&mut self, p: &Ppdu, outcome: FrameOutcome) {
        if !self.opts.frames {
            return;
        }
        let n_mpdus = p.parts.iter().map(|(_, m)| m.len()).sum();
        let n_ll = p.parts.iter().flat_map(|(_, m)| m).filter(|m| m.is_ll).count();
        self.trace.frames.push(FrameRecord {
            start: p.start,
            end: p.end,
            device: DeviceId(p.tx),
            kind: p.kind,
            ac: p.ac,
            n_mpdus,
            n_ll,
            owner: p.owner.map(DeviceId),
            txop_start: p.txop_start,
            grant: p.grant,
            exchange: p.exchange,
            outcome,
            cs_idle: p.cs_idle,
            contention: p.contention,
        });
    }

    fn resume_at(&mut self, d: usize, at: SimTime, wait: Wait) {
        self.dev[d].wait = wait;
        if let Some(h) = self.dev[d].resume.take() {
            self.q.cancel(h);
        }
        self.dev[d].resume = Some(self.q.schedule(at, Ev::Resume(d)).expect("future resume"));
    }

    fn deliver(&mut self, mpdus: &[Mpdu]) {
        let now = self.now();
        for m in mpdus {
            self.collector.deliver(m, now);
        }
    }

    /// Requeues failed MPDUs at their source; drops at the retry limit.
    fn fail(&mut self, src: usize, mpdus: Vec<Mpdu>) {
        let Some(ac) = mpdus.first().map(|m| m.ac) else {
            return;
        };
        let limit = self.net.mac.retry_limit;
        let dropped = requeue_failed(&mut self.dev[src].queues[ac.index()], mpdus, limit);
        if !dropped.is_empty() {
            for m in &dropped {
                self.collector.drop_mpdu(m);
            }
            self.advance_edca(src, MediumTrigger::RetryLimit { ac });
        }
        self.sync_traffic(src);
    }

    // ---- data exchanges ------------------------------------------------

    fn end_data(&mut self, p: Ppdu, interferers: &[DeviceId]) {
        let now = self.now();
        let sifs = self.net.mac.sifs();
        let ba = self.net.mac.block_ack(&self.net.phy);
        let mut delivered = 0;
        let mut responders = Vec::new();
        for (rx, mpdus) in &p.parts {
            if self
                .medium
                .resolve_reception(DeviceId(*rx), DeviceId(p.tx), interferers)
                == RxOutcome::Delivered
            {
                self.deliver(mpdus);
                responders.push(*rx);
                delivered += 1;
            } else {
                self.fail(p.tx, mpdus.clone());
            }
        }
        let outcome = match delivered {
            0 => FrameOutcome::Lost,
            n if n == p.parts.len() => FrameOutcome::Delivered,
            _ => FrameOutcome::Partial,
        };
        self.log_frame(&p, outcome);
        if responders.is_empty() {
            let t = now + self.net.mac.response_timeout(&self.net.phy);
            self.resume_at(p.initiator, t, Wait::Exchange { ok: false });
            return;
        }
        let ex = self.new_exchange();
        for rx in responders {
            self.send(
                rx,
                p.initiator,
                FrameKind::BlockAck,
                now + sifs,
                ba,
                Vec::new(),
                ex,
                p.nav_end,
            );
        }
        self.resume_at(p.initiator, now + sifs + ba + sifs, Wait::Exchange { ok: true });
    }

    fn end_trigger(&mut self, p: Ppdu, interferers: &[DeviceId]) {
        let now = self.now();
        let sifs = self.net.mac.sifs();
        let ex = self.new_exchange();
        let mut n = 0;
        let mut decoded = 0;
        for (sta, mpdus) in &p.parts {
            let ok = self
                .medium
                .resolve_reception(DeviceId(*sta), DeviceId(p.tx), interferers)
                == RxOutcome::Delivered
                && self.dev[*sta].txop.is_none()
                && !self.medium.is_transmitting(DeviceId(*sta));
            if ok {
                decoded += 1;
                let id = self.send(
                    *sta,
                    p.initiator,
                    FrameKind::TbData,
                    now + sifs,
                    p.tb_airtime,
                    vec![(p.tx, mpdus.clone())],
                    ex,
                    p.nav_end,
                );
                let _ = id;
                n += 1;
            } else {
                let q = &mut self.dev[*sta].queues[VO];
                for m in mpdus.iter().rev() {
                    q.push_front(m.clone());
                }
                self.sync_traffic(*sta);
            }
        }
        let outcome = match decoded {
            0 => FrameOutcome::Lost,
            k if k == p.parts.len() => FrameOutcome::Delivered,
            _ => FrameOutcome::Partial,
        };
        self.log_frame(&p, outcome);
        if n == 0 {
            let t = now + self.net.mac.response_timeout(&self.net.phy);
            self.resume_at(p.initiator, t, Wait::Exchange { ok: false });
        } else {
            self.dev[p.initiator].wait = Wait::Tb {
                pending: n,
                delivered: false,
                mba: p.mba_airtime,
            };
        }
    }

    fn end_tb(&mut self, p: Ppdu, interferers: &[DeviceId]) {
        let now = self.now();
        let (ap, mpdus) = p.parts[0].clone();
        let ok = self.medium.resolve_reception(DeviceId(ap), DeviceId(p.tx), interferers) == RxOutcome::Delivered;
        if ok {
            self.deliver(&mpdus);
        } else {
            self.fail(p.tx, mpdus);
        }
        self.log_frame(
            &p,
            if ok {
                FrameOutcome::Delivered
            } else {
                FrameOutcome::Lost
            },
        );
        let init = p.initiator;
        let Wait::Tb {
            pending,
            delivered,
            mba,
        } = &mut self.dev[init].wait
        else {
            return;
        };
        *pending -= 1;
        *delivered |= ok;
        if *pending > 0 {
            return;
        }
        let (any, mba) = (*delivered, *mba);
        if any {
            let sifs = self.net.mac.sifs();
            let ex = self.new_exchange();
            self.send(
                init,
                init,
                FrameKind::MultiBa,
                now + sifs,
                mba,
                Vec::new(),
                ex,
                p.nav_end,
            );
            self.resume_at(init, now + sifs + mba + sifs, Wait::Exchange { ok: true });
        } else {
            let t = now + self.net.mac.response_timeout(&self.net.phy);
            self.resume_at(init, t, Wait::Exchange { ok: false });
        }
    }

    /// Latest instant an exchange started by `d` may end.
    fn exchange_limit(&self, d: usize) -> SimTime {
        let dv = &self.dev[d];
        match (dv.window, &dv.txop) {
            (Some(w), _) => w.end.saturating_sub(self.net.mac.sifs()),
            (None, Some(t)) => t.end,
            (None, None) => self.now(),
        }
    }

    /// Shortest SU exchange serving the first eligible MPDU of `ac`.
    fn dl_head_exchange(&self, d: usize, ac: AccessCategory, ll_only: bool) -> Option<SimTime> {
        let m = self.dev[d].queues[ac.index()].iter().find(|m| !ll_only || m.is_ll)?;
        let phy = &self.net.phy;
        let air = phy::ru_airtime_unchecked(
            phy::psdu_octets([m.size_bytes]),
            phy.data_mcs,
            phy.full_band_ru().ok()?,
            phy,
        )
        .ok()?;
        Some(air + self.net.mac.sifs() + self.net.mac.block_ack(phy))
    }

    fn trigger_candidates(&self, ap: usize) -> impl Iterator<Item = usize> + '_ {
        let bss = self.dev[ap].bss;
        (0..self.dev.len()).filter(move |&k| {
            let dv = &self.dev[k];
            dv.role == Role::Sta && dv.bss == bss && dv.txop.is_none() && !self.medium.is_transmitting(DeviceId(k))
        })
    }

    /// Shortest single-user triggered exchange serving one UL LL head.
    fn ul_head_exchange(&self, ap: usize) -> Option<SimTime> {
        let phy = &self.net.phy;
        let mac = &self.net.mac;
        let fixed = mac.trigger(1, phy) + mac.sifs() + mac.sifs() + mac.multi_sta_ba(1, phy);
        self.trigger_candidates(ap)
            .filter_map(|k| self.dev[k].queues[VO].iter().find(|m| m.is_ll))
            .filter_map(|m| {
                phy::ru_airtime_unchecked(
                    phy::psdu_octets([m.size_bytes]),
                    phy.data_mcs,
                    phy.full_band_ru().ok()?,
                    phy,
                )
                .ok()
            })
            .min()
            .map(|t| t + fixed)
    }

    fn ul_mu_enabled(&self, ap: usize) -> bool {
        self.net.ul_mu_in_baseline || (self.coordination && self.net.mapc.is_some_and(|p| p.contains(DeviceId(ap))))
    }

    fn send_dl(&mut self, d: usize, ac: AccessCategory, ll_only: bool) -> bool {
        let now = self.now();
        let Some(budget) = data_budget(self.exchange_limit(d).saturating_sub(now), &self.net.mac, &self.net.phy) else {
            return false;
        };
        let filter = move |m: &Mpdu| !ll_only || m.is_ll;
        let phy = &self.net.phy;
        let q = &mut self.dev[d].queues[ac.index()];
        let plan = match dl_mu_allocate(q, &filter, budget, phy) {
            Ok(p) => Ok((p.per_destination, p.airtime)),
            Err(MacError::Oversize { .. }) => build_ampdu(q, &filter, budget, phy).map(|a| {
                let t = a.airtime;
                (vec![a], t)
            }),
            Err(e) => Err(e),
        };
        let Ok((ampdus, airtime)) = plan else {
            return false;
        };
        self.sync_traffic(d);
        let parts: Vec<(usize, Vec<Mpdu>)> = ampdus.into_iter().map(|a| (a.destination.0, a.mpdus)).collect();
        let resp_end = now + airtime + self.net.mac.sifs() + self.net.mac.block_ack(&self.net.phy);
        let nav = self.nav_for(d, resp_end);
        let ex = self.new_exchange();
        self.send(d, d, FrameKind::Data, now, airtime, parts, ex, nav);
        true
    }

    fn send_trigger(&mut self, ap: usize) -> bool {
        let now = self.now();
        let budget = self.exchange_limit(ap).saturating_sub(now);
        let cands: Vec<usize> = self.trigger_candidates(ap).collect();
        let plan = {
            let mut stas: Vec<(DeviceId, &mut VecDeque<Mpdu>)> = self
                .dev
                .iter_mut()
                .enumerate()
                .filter(|(k, _)| cands.contains(k))
                .map(|(k, dv)| (DeviceId(k), &mut dv.queues[VO]))
                .collect();
            trigger_ul_mu(&mut stas, true, budget, &self.net.phy, &self.net.mac)
        };
        let Some(plan) = plan else {
            return false;
        };
        for (sta, _) in &plan.per_sta {
            self.sync_traffic(sta.0);
        }
        let total = plan.total(&self.net.mac);
        let nav = self.nav_for(ap, now + total);
        let ex = self.new_exchange();
        let parts = plan.per_sta.into_iter().map(|(s, m)| (s.0, m)).collect();
        let id = self.send(ap, ap, FrameKind::Trigger, now, plan.trigger_airtime, parts, ex, nav);
        if let Some(p) = self.air.get_mut(&id) {
            p.tb_airtime = plan.tb_airtime;
            p.mba_airtime = plan.mba_airtime;
        }
        true
    }

    // ---- TXOP lifecycle ------------------------------------------------

    fn begin_txop(&mut self, d: usize, ac: AccessCategory) {
        let now = self.now();
        if self.dev[d].txop.is_some() || self.dev[d].window.is_some() || self.medium.is_transmitting(DeviceId(d)) {
            self.advance_edca(d, MediumTrigger::TxComplete { ac, success: false });
            return;
        }
        let limit = SimTime::from_us(self.net.edca.get(ac).txop_limit_us);
        self.dev[d].txop = Some(Txop {
            ac,
            start: now,
            end: now + limit,
            first_ok: None,
            candidate: None,
            shared: false,
            confirmed: false,
            cursor: now,
            fresh: true,
        });
        self.counters.txops += 1;
        self.refresh(d);
        let partner = self.partner(d);
        match partner {
            Some(p) if self.dev[d].role == Role::Ap => self.send_icf(d, p),
            _ => self.holder_next(d),
        }
    }

    fn partner(&self, d: usize) -> Option<usize> {
        if !self.coordination {
            return None;
        }
        self.net.mapc.and_then(|p| p.partner(DeviceId(d))).map(|p| p.0)
    }

    fn segment(&mut self, d: usize, kind: SegmentKind, end: SimTime) {
        let Some(t) = self.dev[d].txop.as_mut() else {
            return;
        };
        let start = t.cursor;
        t.cursor = end;
        if self.opts.segments && end > start {
            let txop_start = t.start;
            self.trace.segments.push(Segment {
                holder: DeviceId(d),
                kind,
                start,
                end,
                txop_start,
            });
        }
    }

    fn holder_next(&mut self, d: usize) {
        let now = self.now();
        let Some(t) = self.dev[d].txop.as_ref() else {
            return;
        };
        let ac = t.ac;
        let remaining = t.end.saturating_sub(now);
        if self.dev[d].role == Role::Sta {
            let fits = self.dl_head_exchange(d, ac, false).is_some_and(|x| x <= remaining);
            if !(fits && self.send_dl(d, ac, false)) {
                self.holder_finish(d);
            }
            return;
        }
        let dl_head = self.dl_head_exchange(d, ac, false);
        let ul_head = if self.ul_mu_enabled(d) {
            self.ul_head_exchange(d)
        } else {
            None
        };
        let dl_ready = dl_head.is_some_and(|x| x <= remaining);
        let ul_ready = ul_head.is_some_and(|x| x <= remaining);
        let t = self.dev[d].txop.as_ref().expect("holder");
        let responded = t.candidate.is_some_and(|c| c.responded);
        let already_shared = t.shared;
        let mut info = None;
        let mut share_duration = SimTime::ZERO;
        if responded && !already_shared && !dl_ready && !ul_ready {
            if let Some(p) = self.partner(d) {
                let c = match self.net.mapc.map(|m| m.info_channel) {
                    Some(InfoChannel::InBand) => t.candidate.expect("responded"),
                    _ => self.candidate_snapshot(p),
                };
                share_duration = compute_shared_duration(&c, remaining, &self.net.mac, &self.net.phy);
                info = Some(c);
            }
        }
        let action = txop_action_plan(&PlanState {
            dl_ready,
            ul_ll_ready: ul_ready,
            candidate_responded: responded,
            already_shared,
            share_duration,
        });
        if self.opts.frames {
            self.trace.decisions.push(Decision {
                time: now,
                ap: DeviceId(d),
                window: false,
                action,
                remaining,
                dl_head_exchange: dl_head,
                ul_head_exchange: ul_head,
            });
        }
        let sent = match action {
            TxopAction::DlTx => self.send_dl(d, ac, false),
            TxopAction::UlMuTx => self.send_trigger(d),
            TxopAction::CoTdmaShare => {
                self.send_mu_rts(d, info.expect("share needs info"), share_duration);
                true
            }
            TxopAction::CfEnd => false,
        };
        if !sent {
            self.holder_finish(d);
        }
    }

    /// CF-End when it fits and the medium is idle, otherwise let the TXOP
    /// run out.
    fn holder_finish(&mut self, d: usize) {
        let now = self.now();
        let Some(t) = self.dev[d].txop.as_ref() else {
            return;
        };
        let end = t.end;
        let idle = self.medium.channel_state(DeviceId(d)) == ChannelState::Idle;
        if idle && cf_end_fits(end.saturating_sub(now), &self.net.mac, &self.net.phy) {
            let air = self.net.mac.cf_end(&self.net.phy);
            let ex = self.new_exchange();
            self.counters.cf_ends += 1;
            self.send(d, d, FrameKind::CfEnd, now, air, Vec::new(), ex, now);
            self.dev[d].wait = Wait::None;
        } else {
            self.resume_at(d, end.max(now), Wait::Expire);
        }
    }

    fn end_cf_end(&mut self, p: Ppdu) {
        self.log_frame(&p, FrameOutcome::Sent);
        let now = self.now();
        self.segment(p.tx, SegmentKind::Residual, now);
        self.end_txop(p.tx);
    }

    fn end_txop(&mut self, d: usize) {
        let Some(t) = self.dev[d].txop.take() else {
            return;
        };
        let now = self.now();
        let ok = t.first_ok != Some(false);
        if !ok {
            self.counters.failed_txops += 1;
            if self.opts.segments {
                for s in self.trace.segments.iter_mut().rev() {
                    if s.holder.0 == d && s.txop_start == t.start {
                        s.kind = SegmentKind::Failed;
                    } else if s.start < t.start {
                        break;
                    }
                }
            }
        }
        if self.opts.frames {
            self.trace.txops.push(TxopRecord {
                device: DeviceId(d),
                ac: t.ac,
                start: t.start,
                end: now,
                ok,
                shared: t.confirmed,
            });
        }
        if self.opts.segments {
            self.trace.accesses.push(AccessRecord {
                time: t.start,
                device: DeviceId(d),
                ok,
                shared: t.confirmed,
            });
        }
        self.dev[d].wait = Wait::None;
        self.advance_edca(d, MediumTrigger::TxComplete { ac: t.ac, success: ok });
        self.sync_traffic(d);
        self.refresh(d);
    }

    fn on_resume(&mut self, d: usize) {
        let now = self.now();
        match std::mem::replace(&mut self.dev[d].wait, Wait::None) {
            Wait::Poll { snapshot } => self.after_poll(d, snapshot),
            Wait::Exchange { ok } => self.after_exchange(d, ok),
            Wait::MuRts => {
                if let Some(t) = self.dev[d].txop.as_mut() {
                    t.shared = true;
                }
                self.segment(d, SegmentKind::Ctrl, now);
                self.holder_next(d);
            }
            Wait::Window => self.holder_next(d),
            Wait::WindowStart => self.window_next(d),
            Wait::Expire => {
                self.segment(d, SegmentKind::Residual, now);
                self.end_txop(d);
            }
            Wait::Tb { .. } | Wait::None => {}
        }
    }

    fn after_exchange(&mut self, d: usize, ok: bool) {
        if self.dev[d].window.is_some() {
            if ok {
                self.window_next(d);
            } else {
                self.window_close(d);
            }
            return;
        }
        let now = self.now();
        let Some(first) = self.dev[d].txop.as_ref().map(|t| t.first_ok) else {
            return;
        };
        self.segment(d, SegmentKind::Fe, now);
        match first {
            None => {
                self.dev[d].txop.as_mut().expect("holder").first_ok = Some(ok);
                if !ok {
                    self.end_txop(d);
                    return;
                }
            }
            Some(_) if !ok => {
                self.holder_finish(d);
                return;
            }
            Some(_) => {}
        }
        self.holder_next(d);
    }

    // ---- coordination --------------------------------------------------

    fn can_respond(&self, k: usize) -> bool {
        let dv = &self.dev[k];
        dv.txop.is_none() && dv.window.is_none() && !self.medium.is_transmitting(DeviceId(k))
    }

    /// What the partner would report: its DL LL queue and its STAs' UL LL.
    fn candidate_snapshot(&self, ap: usize) -> CandidateInfo {
        let bss = self.dev[ap].bss;
        let ul = self
            .dev
            .iter()
            .filter(|dv| dv.role == Role::Sta && dv.bss == bss)
            .flat_map(|dv| dv.queues[VO].iter());
        CandidateInfo {
            ap_id: DeviceId(ap),
            dl_ll: LlBacklog::from_queue(&self.dev[ap].queues[VO]),
            ul_ll: LlBacklog::from_mpdus(ul),
            responded: true,
        }
    }

    fn send_icf(&mut self, d: usize, partner: usize) {
        let now = self.now();
        let mac = &self.net.mac;
        let phy = &self.net.phy;
        let icf = mac.icf(phy);
        let resp_end = now + icf + mac.sifs() + mac.icr(phy);
        let nav = self.nav_for(d, resp_end);
        let ex = self.new_exchange();
        self.counters.polls += 1;
        self.send(d, d, FrameKind::Icf, now, icf, vec![(partner, Vec::new())], ex, nav);
    }

    fn end_icf(&mut self, p: Ppdu, interferers: &[DeviceId]) {
        let now = self.now();
        let partner = p.parts[0].0;
        let heard = self
            .medium
            .resolve_reception(DeviceId(partner), DeviceId(p.tx), interferers)
            == RxOutcome::Delivered;
        let answers = heard && self.can_respond(partner);
        self.log_frame(
            &p,
            if heard {
                FrameOutcome::Delivered
            } else {
                FrameOutcome::Lost
            },
        );
        let mac = &self.net.mac;
        let phy = &self.net.phy;
        if answers {
            let (sifs, icr) = (mac.sifs(), mac.icr(phy));
            self.send(
                partner,
                p.tx,
                FrameKind::Icr,
                now + sifs,
                icr,
                vec![(p.tx, Vec::new())],
                p.exchange,
                p.nav_end,
            );
            self.resume_at(p.tx, now + sifs + icr + sifs, Wait::Poll { snapshot: None });
        } else {
            let t = now + mac.response_timeout(phy);
            self.resume_at(p.tx, t, Wait::Poll { snapshot: None });
        }
    }

    fn end_icr(&mut self, p: Ppdu, interferers: &[DeviceId]) {
        let holder = p.initiator;
        let ok = self
            .medium
            .resolve_reception(DeviceId(holder), DeviceId(p.tx), interferers)
            == RxOutcome::Delivered;
        self.log_frame(
            &p,
            if ok {
                FrameOutcome::Delivered
            } else {
                FrameOutcome::Lost
            },
        );
        if ok {
            let snap = self.candidate_snapshot(p.tx);
            if let Wait::Poll { snapshot } = &mut self.dev[holder].wait {
                *snapshot = Some(snap);
            }
        }
    }

    /// A missing ICR only rules out sharing; the TXOP itself goes on and
    /// its first data exchange decides whether the access succeeded.
    fn after_poll(&mut self, d: usize, snapshot: Option<CandidateInfo>) {
        let now = self.now();
        self.segment(d, SegmentKind::Poll, now);
        let partner = self.partner(d).unwrap_or(d);
        let answered = snapshot.is_some();
        let Some(t) = self.dev[d].txop.as_mut() else {
            return;
        };
        t.candidate = Some(snapshot.unwrap_or_else(|| CandidateInfo::silent(DeviceId(partner))));
        if answered {
            self.counters.polls_answered += 1;
            t.first_ok = Some(true);
        }
        self.holder_next(d);
    }

    fn send_mu_rts(&mut self, d: usize, info: CandidateInfo, duration: SimTime) {
        let now = self.now();
        let mac = &self.net.mac;
        let phy = &self.net.phy;
        let partner = info.ap_id.0;
        let air = mac.mu_rts_txs(phy);
        let ws = now + crate::mapc::handshake_airtime(mac, phy);
        let t = self.dev[d].txop.as_mut().expect("holder");
        t.shared = true;
        let (txop_start, txop_end) = (t.start, t.end);
        self.next_grant += 1;
        let id = self.next_grant;
        self.counters.grants += 1;
        self.trace.grants.push(GrantRecord {
            id,
            time: now,
            sharing_ap: DeviceId(d),
            shared_ap: info.ap_id,
            duration,
            dl_ll_bytes: info.dl_ll.bytes,
            ul_ll_bytes: info.ul_ll.bytes,
            window_start: ws,
            window_end: ws + duration,
            txop_start,
            txop_end,
            confirmed: false,
        });
        let nav = self.nav_for(d, ws);
        let ex = self.new_exchange();
        self.send(
            d,
            d,
            FrameKind::MuRtsTxs,
            now,
            air,
            vec![(partner, Vec::new())],
            ex,
            nav,
        );
        self.dev[d].wait = Wait::MuRts;
    }

    fn end_mu_rts(&mut self, p: Ppdu, interferers: &[DeviceId]) {
        let now = self.now();
        let partner = p.parts[0].0;
        let heard = self
            .medium
            .resolve_reception(DeviceId(partner), DeviceId(p.tx), interferers)
            == RxOutcome::Delivered;
        let answers = heard && self.can_respond(partner);
        self.log_frame(
            &p,
            if heard {
                FrameOutcome::Delivered
            } else {
                FrameOutcome::Lost
            },
        );
        let mac = &self.net.mac;
        let phy = &self.net.phy;
        let (sifs, cts) = (mac.sifs(), mac.cts(phy));
        if !answers {
            let t = now + mac.response_timeout(phy);
            self.resume_at(p.tx, t, Wait::MuRts);
            return;
        }
        let g = self
            .trace
            .grants
            .iter_mut()
            .rev()
            .find(|g| g.sharing_ap.0 == p.tx)
            .expect("grant issued");
        g.confirmed = true;
        let w = Window {
            grant: g.id,
            sharing: p.tx,
            start: g.window_start,
            end: g.window_end,
        };
        self.counters.grants_confirmed += 1;
        if let Some(t) = self.dev[p.tx].txop.as_mut() {
            t.confirmed = true;
        }
        self.send(
            partner,
            p.tx,
            FrameKind::Cts,
            now + sifs,
            cts,
            vec![(p.tx, Vec::new())],
            p.exchange,
            p.nav_end,
        );
        self.dev[partner].window = Some(w);
        self.dev[p.tx].wait = Wait::Window;
        self.resume_at(partner, w.start, Wait::WindowStart);
        self.refresh(partner);
    }

    /// Shared AP schedule: DL LL first, then triggered UL LL, each only if
    /// it ends one SIFS before the window does.
    fn window_next(&mut self, d: usize) {
        let now = self.now();
        if self.dev[d].window.is_none() {
            return;
        }
        let remaining = self.exchange_limit(d).saturating_sub(now);
        let dl_head = self.dl_head_exchange(d, AccessCategory::VO, true);
        let ul_head = self.ul_head_exchange(d);
        let action = if dl_head.is_some_and(|x| x <= remaining) {
            TxopAction::DlTx
        } else if ul_head.is_some_and(|x| x <= remaining) {
            TxopAction::UlMuTx
        } else {
            TxopAction::CfEnd
        };
        if self.opts.frames {
            self.trace.decisions.push(Decision {
                time: now,
                ap: DeviceId(d),
                window: true,
                action,
                remaining,
                dl_head_exchange: dl_head,
                ul_head_exchange: ul_head,
            });
        }
        let sent = match action {
            TxopAction::DlTx => self.send_dl(d, AccessCategory::VO, true),
            TxopAction::UlMuTx => self.send_trigger(d),
            _ => false,
        };
        if !sent {
            self.window_close(d);
        }
    }

    fn window_close(&mut self, d: usize) {
        let now = self.now();
        let Some(w) = self.dev[d].window.take() else {
            return;
        };
        let i = w.sharing;
        self.segment(i, SegmentKind::Ctrl, w.start);
        self.segment(i, SegmentKind::CoTdma, now.max(w.start));
        self.resume_at(i, now, Wait::Window);
        self.refresh(d);
    }
}
