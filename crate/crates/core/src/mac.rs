//! EDCA channel access and the MAC frame-exchange building blocks:
//! per-AC contention, A-MPDU aggregation, DL SU/MU allocation,
//! trigger-based UL MU planning, retransmission and CF-End truncation.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::phy::{
    self, control_airtime, psdu_octets, ru_airtime, PhyConfig, PhyError, RuSize, MAX_AMPDU_MPDUS, MAX_RUS,
};
use crate::traffic::Mpdu;
use crate::types::{AccessCategory, DeviceId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MacError {
    #[error("head MPDU does not fit the {budget} budget")]
    Oversize { budget: SimTime },
    #[error("no queued destination")]
    NoDestination,
    #[error(transparent)]
    Phy(#[from] PhyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdcaAcParams {
    pub aifsn: u32,
    pub cw_min: u32,
    pub cw_max: u32,
    pub txop_limit_us: u64,
}

impl EdcaAcParams {
    pub fn validate(&self) -> Result<(), String> {
        let pow2m1 = |x: u32| (x + 1).is_power_of_two();
        if !pow2m1(self.cw_min) || !pow2m1(self.cw_max) {
            return Err(format!(
                "contention windows must be 2^k - 1 (got {}, {})",
                self.cw_min, self.cw_max
            ));
        }
        if self.cw_min > self.cw_max {
            return Err(format!("cw_min {} > cw_max {}", self.cw_min, self.cw_max));
        }
        if self.aifsn < 1 {
            return Err("aifsn must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdcaParams {
    pub vo: EdcaAcParams,
    pub vi: EdcaAcParams,
    pub be: EdcaAcParams,
}

impl Default for EdcaParams {
    fn default() -> Self {
        EdcaParams {
            vo: EdcaAcParams {
                aifsn: 2,
                cw_min: 3,
                cw_max: 7,
                txop_limit_us: 2_080,
            },
            vi: EdcaAcParams {
                aifsn: 2,
                cw_min: 7,
                cw_max: 15,
                txop_limit_us: 4_096,
            },
            be: EdcaAcParams {
                aifsn: 3,
                cw_min: 15,
                cw_max: 1023,
                txop_limit_us: 2_528,
            },
        }
    }
}

impl EdcaParams {
    pub fn get(&self, ac: AccessCategory) -> &EdcaAcParams {
        match ac {
            AccessCategory::VO => &self.vo,
            AccessCategory::VI => &self.vi,
            AccessCategory::BE => &self.be,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for ac in AccessCategory::ALL {
            self.get(ac)
                .validate()
                .map_err(|e| format!("edca.{}: {e}", ac.to_string().to_lowercase()))?;
        }
        Ok(())
    }
}

/// MAC timing, limits and control-frame sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacConfig {
    pub slot_us: u64,
    pub sifs_us: u64,
    pub retry_limit: u8,
    pub queue_limit_mpdus: usize,
    pub fragment_threshold: u32,
    pub block_ack_octets: u64,
    pub multi_sta_ba_base_octets: u64,
    pub multi_sta_ba_per_sta_octets: u64,
    pub trigger_base_octets: u64,
    pub trigger_per_user_octets: u64,
    pub cf_end_octets: u64,
    pub icf_octets: u64,
    pub icr_octets: u64,
    pub mu_rts_txs_octets: u64,
    pub cts_octets: u64,
}

impl Default for MacConfig {
    fn default() -> Self {
        MacConfig {
            slot_us: 9,
            sifs_us: 16,
            retry_limit: 7,
            queue_limit_mpdus: 1024,
            fragment_threshold: crate::traffic::DEFAULT_FRAGMENT_THRESHOLD,
            block_ack_octets: 32,
            multi_sta_ba_base_octets: 22,
            multi_sta_ba_per_sta_octets: 20,
            trigger_base_octets: 28,
            trigger_per_user_octets: 6,
            cf_end_octets: 20,
            icf_octets: 34,
            icr_octets: 14,
            mu_rts_txs_octets: 34,
            cts_octets: 14,
        }
    }
}

impl MacConfig {
    pub fn slot(&self) -> SimTime {
        SimTime::from_us(self.slot_us)
    }

    pub fn sifs(&self) -> SimTime {
        SimTime::from_us(self.sifs_us)
    }

    pub fn aifs(&self, p: &EdcaAcParams) -> SimTime {
        self.sifs() + self.slot().mul(p.aifsn as u64)
    }

    /// Wait for a solicited response before declaring it missing.
    pub fn response_timeout(&self, phy: &PhyConfig) -> SimTime {
        self.sifs() + self.slot() + SimTime::from_us(phy.ctrl_preamble_us)
    }

    pub fn block_ack(&self, phy: &PhyConfig) -> SimTime {
        control_airtime(self.block_ack_octets, phy)
    }

    pub fn multi_sta_ba(&self, n: usize, phy: &PhyConfig) -> SimTime {
        control_airtime(
            self.multi_sta_ba_base_octets + self.multi_sta_ba_per_sta_octets * n as u64,
            phy,
        )
    }

    pub fn trigger(&self, n: usize, phy: &PhyConfig) -> SimTime {
        control_airtime(self.trigger_base_octets + self.trigger_per_user_octets * n as u64, phy)
    }

    pub fn cf_end(&self, phy: &PhyConfig) -> SimTime {
        control_airtime(self.cf_end_octets, phy)
    }

    pub fn icf(&self, phy: &PhyConfig) -> SimTime {
        control_airtime(self.icf_octets, phy)
    }

    pub fn icr(&self, phy: &PhyConfig) -> SimTime {
        control_airtime(self.icr_octets, phy)
    }

    pub fn mu_rts_txs(&self, phy: &PhyConfig) -> SimTime {
        control_airtime(self.mu_rts_txs_octets, phy)
    }

    pub fn cts(&self, phy: &PhyConfig) -> SimTime {
        control_airtime(self.cts_octets, phy)
    }
}

/// Event fed to an [`EdcaContender`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MediumTrigger {
    /// The device's combined (physical + virtual) carrier sense went idle.
    Idle,
    Busy,
    /// The backoff timer armed by a previous [`EdcaAction::Arm`] fired.
    Timer,
    TxComplete {
        ac: AccessCategory,
        success: bool,
    },
    /// The AC queue became nonempty (`true`) or empty (`false`).
    Traffic {
        ac: AccessCategory,
        nonempty: bool,
    },
    /// An MPDU was discarded at the retry limit.
    RetryLimit {
        ac: AccessCategory,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdcaAction {
    /// Backoff reached zero: start a TXOP for this AC.
    Transmit(AccessCategory),
    /// (Re)arm the device backoff timer at this instant.
    Arm(SimTime),
    /// No timer may be pending.
    Disarm,
    /// Leave any armed timer as is.
    Keep,
}

#[derive(Debug, Clone, Default)]
struct AcContention {
    cw: u32,
    counter: Option<u32>,
    active: bool,
    countdown_start: Option<SimTime>,
}

/// Per-device EDCA state machine (one backoff entity per AC).
#[derive(Debug, Clone)]
pub struct EdcaContender {
    params: EdcaParams,
    slot: SimTime,
    sifs: SimTime,
    acs: [AcContention; 3],
    medium_idle: bool,
    idle_since: SimTime,
    armed_at: Option<SimTime>,
    draws: u64,
}

impl EdcaContender {
    pub fn new(params: EdcaParams, mac: &MacConfig) -> Self {
        let mut acs: [AcContention; 3] = Default::default();
        for ac in AccessCategory::ALL {
            acs[ac.index()].cw = params.get(ac).cw_min;
        }
        EdcaContender {
            params,
            slot: mac.slot(),
            sifs: mac.sifs(),
            acs,
            medium_idle: true,
            idle_since: SimTime::ZERO,
            armed_at: None,
            draws: 0,
        }
    }

    pub fn cw(&self, ac: AccessCategory) -> u32 {
        self.acs[ac.index()].cw
    }

    pub fn counter(&self, ac: AccessCategory) -> Option<u32> {
        self.acs[ac.index()].counter
    }

    pub fn is_active(&self, ac: AccessCategory) -> bool {
        self.acs[ac.index()].active
    }

    pub fn armed_at(&self) -> Option<SimTime> {
        self.armed_at
    }

    /// Number of backoff counters drawn so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    fn aifs(&self, ac: AccessCategory) -> SimTime {
        self.sifs + self.slot.mul(self.params.get(ac).aifsn as u64)
    }

    fn draw<R: Rng + ?Sized>(&mut self, ac: AccessCategory, rng: &mut R) {
        let a = &mut self.acs[ac.index()];
        a.counter = Some(rng.gen_range(0..=a.cw));
        self.draws += 1;
    }

    fn fire_time(&self, ac: AccessCategory) -> Option<SimTime> {
        let a = &self.acs[ac.index()];
        if !a.active {
            return None;
        }
        Some(a.countdown_start? + self.slot.mul(a.counter? as u64))
    }

    fn freeze(&mut self, ac: AccessCategory, now: SimTime) {
        let slot = self.slot;
        let a = &mut self.acs[ac.index()];
        if let (Some(cs), Some(c)) = (a.countdown_start, a.counter) {
            if now > cs {
                let consumed = ((now - cs).as_ns() / slot.as_ns()) as u32;
                a.counter = Some(c - consumed.min(c));
            }
        }
        a.countdown_start = None;
    }

    fn start_countdown(&mut self, ac: AccessCategory, now: SimTime) {
        let start = (self.idle_since + self.aifs(ac)).max(now);
        self.acs[ac.index()].countdown_start = Some(start);
    }

    fn rearm(&mut self) -> EdcaAction {
        if !self.medium_idle {
            self.armed_at = None;
            return EdcaAction::Disarm;
        }
        let next = AccessCategory::ALL.iter().filter_map(|&ac| self.fire_time(ac)).min();
        self.armed_at = next;
        match next {
            Some(t) => EdcaAction::Arm(t),
            None => EdcaAction::Disarm,
        }
    }

    /// Advances the state machine. Backoff counters decrement only across
    /// idle slots after AIFS and stay frozen while the medium is busy.
    pub fn advance<R: Rng + ?Sized>(&mut self, trigger: MediumTrigger, now: SimTime, rng: &mut R) -> EdcaAction {
        match trigger {
            MediumTrigger::Idle => {
                if self.medium_idle {
                    return EdcaAction::Keep;
                }
                self.medium_idle = true;
                self.idle_since = now;
                for ac in AccessCategory::ALL {
                    if self.acs[ac.index()].active {
                        self.start_countdown(ac, now);
                    }
                }
                self.rearm()
            }
            MediumTrigger::Busy => {
                if !self.medium_idle {
                    return EdcaAction::Keep;
                }
                self.medium_idle = false;
                if self.armed_at == Some(now) {
                    // cannot sense a transmission that starts in the same slot
                    return EdcaAction::Keep;
                }
                for ac in AccessCategory::ALL {
                    self.freeze(ac, now);
                }
                self.armed_at = None;
                EdcaAction::Disarm
            }
            MediumTrigger::Timer => {
                self.armed_at = None;
                let winners: Vec<AccessCategory> = AccessCategory::ALL
                    .iter()
                    .copied()
                    .filter(|&ac| self.fire_time(ac) == Some(now))
                    .collect();
                let Some(&winner) = winners.iter().max() else {
                    return self.rearm();
                };
                for ac in winners.iter().copied().filter(|&ac| ac != winner) {
                    // internal collision: the lower-priority AC backs off
                    let p = *self.params.get(ac);
                    let a = &mut self.acs[ac.index()];
                    a.cw = (a.cw * 2 + 1).min(p.cw_max);
                    a.countdown_start = None;
                    self.draw(ac, rng);
                }
                for ac in AccessCategory::ALL {
                    self.freeze(ac, now);
                }
                self.acs[winner.index()].counter = None;
                self.medium_idle = false;
                EdcaAction::Transmit(winner)
            }
            MediumTrigger::TxComplete { ac, success } => {
                let p = *self.params.get(ac);
                let a = &mut self.acs[ac.index()];
                a.cw = if success {
                    p.cw_min
                } else {
                    (a.cw * 2 + 1).min(p.cw_max)
                };
                a.countdown_start = None;
                self.draw(ac, rng);
                if self.medium_idle && self.acs[ac.index()].active {
                    self.start_countdown(ac, now);
                }
                self.rearm()
            }
            MediumTrigger::Traffic { ac, nonempty } => {
                let was = self.acs[ac.index()].active;
                if nonempty == was {
                    return EdcaAction::Keep;
                }
                if nonempty {
                    self.acs[ac.index()].active = true;
                    if self.acs[ac.index()].counter.is_none() {
                        self.draw(ac, rng);
                    }
                    if self.medium_idle {
                        self.start_countdown(ac, now);
                    }
                } else {
                    self.freeze(ac, now);
                    self.acs[ac.index()].active = false;
                }
                self.rearm()
            }
            MediumTrigger::RetryLimit { ac } => {
                self.acs[ac.index()].cw = self.params.get(ac).cw_min;
                EdcaAction::Keep
            }
        }
    }
}

/// One aggregated transmission to a single receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct Ampdu {
    pub destination: DeviceId,
    pub mpdus: Vec<Mpdu>,
    pub airtime: SimTime,
}

fn take_indices(queue: &mut VecDeque<Mpdu>, idx: &[usize]) -> Vec<Mpdu> {
    let mut out = Vec::with_capacity(idx.len());
    let mut keep = VecDeque::with_capacity(queue.len() - idx.len());
    let mut it = idx.iter().peekable();
    for (i, m) in queue.drain(..).enumerate() {
        if it.peek() == Some(&&i) {
            it.next();
            out.push(m);
        } else {
            keep.push_back(m);
        }
    }
    *queue = keep;
    out
}

/// Picks, FIFO, up to 64 MPDUs for `dest` that fit `budget` on `ru`.
fn select_for(
    queue: &VecDeque<Mpdu>,
    dest: DeviceId,
    filter: &dyn Fn(&Mpdu) -> bool,
    budget: SimTime,
    ru: RuSize,
    phy: &PhyConfig,
) -> Result<(Vec<usize>, SimTime), MacError> {
    let cap = budget.min(phy.max_ppdu());
    let mut idx = Vec::new();
    let mut octets = 0u64;
    let mut airtime = SimTime::ZERO;
    for (i, m) in queue.iter().enumerate() {
        if idx.len() == MAX_AMPDU_MPDUS {
            break;
        }
        if m.destination != dest || !filter(m) {
            continue;
        }
        let next = octets + psdu_octets([m.size_bytes]);
        let t = phy::ru_airtime_unchecked(next, phy.data_mcs, ru, phy)?;
        if t > cap {
            break;
        }
        idx.push(i);
        octets = next;
        airtime = t;
    }
    if idx.is_empty() {
        return Err(MacError::Oversize { budget });
    }
    Ok((idx, airtime))
}

/// Dequeues up to 64 MPDUs, FIFO, addressed to the receiver of the first
/// eligible MPDU, keeping the airtime within `budget` and the PPDU cap.
pub fn build_ampdu(
    queue: &mut VecDeque<Mpdu>,
    filter: &dyn Fn(&Mpdu) -> bool,
    budget: SimTime,
    phy: &PhyConfig,
) -> Result<Ampdu, MacError> {
    let dest = queue
        .iter()
        .find(|m| filter(m))
        .map(|m| m.destination)
        .ok_or(MacError::NoDestination)?;
    let (idx, airtime) = select_for(queue, dest, filter, budget, phy.full_band_ru()?, phy)?;
    Ok(Ampdu {
        destination: dest,
        mpdus: take_indices(queue, &idx),
        airtime,
    })
}

/// A DL PPDU: SU (no RU map) or OFDMA with one 242-tone RU per receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct DlPlan {
    pub ru_map: Option<Vec<(u8, DeviceId)>>,
    pub per_destination: Vec<Ampdu>,
    pub airtime: SimTime,
}

/// Serves up to four receivers in head-of-queue order; a single receiver
/// degenerates to a full-band SU PPDU.
pub fn dl_mu_allocate(
    queue: &mut VecDeque<Mpdu>,
    filter: &dyn Fn(&Mpdu) -> bool,
    budget: SimTime,
    phy: &PhyConfig,
) -> Result<DlPlan, MacError> {
    let mut dests: Vec<DeviceId> = Vec::new();
    for m in queue.iter().filter(|m| filter(m)) {
        if !dests.contains(&m.destination) {
            dests.push(m.destination);
            if dests.len() == MAX_RUS {
                break;
            }
        }
    }
    match dests.len() {
        0 => Err(MacError::NoDestination),
        1 => {
            let a = build_ampdu(queue, filter, budget, phy)?;
            Ok(DlPlan {
                ru_map: None,
                airtime: a.airtime,
                per_destination: vec![a],
            })
        }
        _ => {
            let mut picks = Vec::new();
            for &d in &dests {
                if let Ok((idx, t)) = select_for(queue, d, filter, budget, RuSize::Tones242, phy) {
                    picks.push((d, idx, t));
                }
            }
            if picks.is_empty() {
                return Err(MacError::Oversize { budget });
            }
            let airtime = picks.iter().map(|p| p.2).max().unwrap_or_default();
            let mut all: Vec<(usize, DeviceId)> = picks
                .iter()
                .flat_map(|(d, idx, _)| idx.iter().map(move |&i| (i, *d)))
                .collect();
            all.sort_unstable();
            let flat: Vec<usize> = all.iter().map(|p| p.0).collect();
            let taken = take_indices(queue, &flat);
            let mut per_destination: Vec<Ampdu> = picks
                .iter()
                .map(|(d, _, t)| Ampdu {
                    destination: *d,
                    mpdus: Vec::new(),
                    airtime: *t,
                })
                .collect();
            for m in taken {
                let slot = per_destination
                    .iter_mut()
                    .find(|a| a.destination == m.destination)
                    .expect("picked destination");
                slot.mpdus.push(m);
            }
            let ru_map = per_destination
                .iter()
                .enumerate()
                .map(|(i, a)| (i as u8, a.destination))
                .collect();
            Ok(DlPlan {
                ru_map: Some(ru_map),
                per_destination,
                airtime,
            })
        }
    }
}

/// Trigger-based UL MU exchange: trigger, SIFS, equal-length TB PPDUs,
/// SIFS, multi-STA block-ack.
#[derive(Debug, Clone, PartialEq)]
pub struct UlMuPlan {
    pub trigger_airtime: SimTime,
    pub tb_airtime: SimTime,
    pub mba_airtime: SimTime,
    pub per_sta: Vec<(DeviceId, Vec<Mpdu>)>,
}

impl UlMuPlan {
    pub fn total(&self, mac: &MacConfig) -> SimTime {
        self.trigger_airtime + mac.sifs() + self.tb_airtime + mac.sifs() + self.mba_airtime
    }
}

/// Plans a trigger for at most four STAs with eligible backlog (oldest
/// head-of-line first) and dequeues what they will send. Returns `None`
/// when no STA is eligible or nothing fits `budget`.
pub fn trigger_ul_mu(
    stas: &mut [(DeviceId, &mut VecDeque<Mpdu>)],
    ll_only: bool,
    budget: SimTime,
    phy: &PhyConfig,
    mac: &MacConfig,
) -> Option<UlMuPlan> {
    let filter = move |m: &Mpdu| !ll_only || m.is_ll;
    let mut ranked: Vec<(SimTime, usize)> = stas
        .iter()
        .enumerate()
        .filter_map(|(i, (_, q))| q.iter().find(|m| filter(m)).map(|m| (m.arrival_time, i)))
        .collect();
    ranked.sort();
    let mut cap = MAX_RUS;
    // shrink the user set until every head MPDU fits; a lone user that
    // still does not fit is skipped
    loop {
        let eligible: Vec<(SimTime, usize)> = ranked.iter().copied().take(cap).collect();
        if eligible.is_empty() {
            return None;
        }
        let n = eligible.len();
        let ru = if n == 1 {
            phy.full_band_ru().ok()?
        } else {
            RuSize::Tones242
        };
        let trigger = mac.trigger(n, phy);
        let mba = mac.multi_sta_ba(n, phy);
        let overhead = trigger + mac.sifs() + mac.sifs() + mba;
        let tb_budget = budget.checked_sub(overhead)?;
        let mut picks = Vec::new();
        let mut failed = None;
        for &(_, i) in &eligible {
            let (sta, q) = &stas[i];
            let dest = q.iter().find(|m| filter(m)).map(|m| m.destination)?;
            match select_for(q, dest, &filter, tb_budget, ru, phy) {
                Ok((idx, t)) => picks.push((i, *sta, idx, t)),
                Err(_) => {
                    failed = Some(i);
                    break;
                }
            }
        }
        if let Some(f) = failed {
            if n > 1 {
                cap = n - 1;
            } else {
                ranked.retain(|&(_, i)| i != f);
            }
            continue;
        }
        let tb_airtime = picks.iter().map(|p| p.3).max()?;
        let per_sta = picks
            .into_iter()
            .map(|(i, sta, idx, _)| (sta, take_indices(stas[i].1, &idx)))
            .collect();
        return Some(UlMuPlan {
            trigger_airtime: trigger,
            tb_airtime,
            mba_airtime: mba,
            per_sta,
        });
    }
}

/// Requeues failed MPDUs at the head in their original order. MPDUs that
/// already used all retries are returned as dropped.
pub fn requeue_failed(queue: &mut VecDeque<Mpdu>, failed: Vec<Mpdu>, retry_limit: u8) -> Vec<Mpdu> {
    let mut dropped = Vec::new();
    for mut m in failed.into_iter().rev() {
        if m.retries >= retry_limit {
            dropped.push(m);
        } else {
            m.retries += 1;
            queue.push_front(m);
        }
    }
    dropped.reverse();
    dropped
}

/// A CF-End can be sent only when its airtime fits the TXOP remainder.
pub fn cf_end_fits(remaining: SimTime, mac: &MacConfig, phy: &PhyConfig) -> bool {
    mac.cf_end(phy) <= remaining
}

/// Airtime of a single DL exchange: PPDU, SIFS, block-ack.
pub fn dl_exchange_airtime(ppdu: SimTime, mac: &MacConfig, phy: &PhyConfig) -> SimTime {
    ppdu + mac.sifs() + mac.block_ack(phy)
}

/// Budget available for a PPDU that must be followed by SIFS + block-ack.
pub fn data_budget(remaining: SimTime, mac: &MacConfig, phy: &PhyConfig) -> Option<SimTime> {
    remaining.checked_sub(mac.sifs() + mac.block_ack(phy))
}

pub fn ru_airtime_for(mpdus: &[Mpdu], ru: RuSize, phy: &PhyConfig) -> Result<SimTime, PhyError> {
    ru_airtime(psdu_octets(mpdus.iter().map(|m| m.size_bytes)), phy.data_mcs, ru, phy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::RngStream;
    use crate::types::{Direction, FlowId};

    fn mpdu(dest: usize, size: u32, t: u64) -> Mpdu {
        Mpdu {
            flow_id: FlowId(dest),
            packet_id: t,
            fragment: 0,
            size_bytes: size,
            arrival_time: SimTime::from_us(t),
            direction: Direction::DL,
            source: DeviceId(0),
            destination: DeviceId(dest),
            ac: AccessCategory::VO,
            is_ll: true,
            retries: 0,
        }
    }

    fn queue(n: usize, dest: usize, size: u32) -> VecDeque<Mpdu> {
        (0..n).map(|i| mpdu(dest, size, i as u64)).collect()
    }

    const ALL: &dyn Fn(&Mpdu) -> bool = &|_| true;

    #[test]
    fn edca_param_invariants() {
        let p = EdcaParams::default();
        p.validate().unwrap();
        for ac in AccessCategory::ALL {
            assert!(p.get(ac).txop_limit_us > 0);
        }
        let mut bad = p;
        bad.vo.cw_min = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_queue_does_not_contend() {
        let mac = MacConfig::default();
        let mut e = EdcaContender::new(EdcaParams::default(), &mac);
        let mut rng = RngStream::new(1, 1);
        assert_eq!(
            e.advance(MediumTrigger::Busy, SimTime::ZERO, &mut rng),
            EdcaAction::Disarm
        );
        assert_eq!(
            e.advance(MediumTrigger::Idle, SimTime::from_us(100), &mut rng),
            EdcaAction::Disarm
        );
    }

    #[test]
    fn zero_backoff_transmits_after_aifs() {
        let mac = MacConfig::default();
        let mut e = EdcaContender::new(EdcaParams::default(), &mac);
        let mut rng = RngStream::new(1, 1);
        e.advance(MediumTrigger::Busy, SimTime::ZERO, &mut rng);
        e.advance(
            MediumTrigger::Traffic {
                ac: AccessCategory::VO,
                nonempty: true,
            },
            SimTime::ZERO,
            &mut rng,
        );
        e.acs[AccessCategory::VO.index()].counter = Some(0);
        let idle = SimTime::from_us(100);
        // VO AIFS = 16 + 2 * 9 = 34 us
        assert_eq!(
            e.advance(MediumTrigger::Idle, idle, &mut rng),
            EdcaAction::Arm(idle + SimTime::from_us(34))
        );
        assert_eq!(
            e.advance(MediumTrigger::Timer, idle + SimTime::from_us(34), &mut rng),
            EdcaAction::Transmit(AccessCategory::VO)
        );
    }

    #[test]
    fn fresh_backoff_draws_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mac = MacConfig::default();
        let params = EdcaParams::default();
        let mut rng = RngStream::new(2024, 7);
        for ac in AccessCategory::ALL {
            let k = params.get(ac).cw_min as usize + 1;
            let mut counts = vec![0u64; k];
            let rounds = 10_000;
            for _ in 0..rounds {
                let mut e = EdcaContender::new(params, &mac);
                e.advance(MediumTrigger::Traffic { ac, nonempty: true }, SimTime::ZERO, &mut rng);
                counts[e.counter(ac).unwrap() as usize] += 1;
            }
            let expected = rounds as f64 / k as f64;
            let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
            let critical = ChiSquared::new((k - 1) as f64).unwrap().inverse_cdf(0.99);
            assert!(stat < critical, "{ac}: chi2 {stat} >= {critical}");
        }
    }

    #[test]
    fn busy_freezes_remaining_slots() {
        let mac = MacConfig::default();
        let mut e = EdcaContender::new(EdcaParams::default(), &mac);
        let mut rng = RngStream::new(1, 1);
        e.advance(
            MediumTrigger::Traffic {
                ac: AccessCategory::BE,
                nonempty: true,
            },
            SimTime::ZERO,
            &mut rng,
        );
        e.advance(MediumTrigger::Busy, SimTime::ZERO, &mut rng);
        e.acs[AccessCategory::BE.index()].counter = Some(10);
        // BE AIFS = 16 + 27 = 43 us; busy after 43 + 4.5 slots
        e.advance(MediumTrigger::Idle, SimTime::ZERO, &mut rng);
        let t = SimTime::from_ns(43_000 + 40_500);
        assert_eq!(e.advance(MediumTrigger::Busy, t, &mut rng), EdcaAction::Disarm);
        assert_eq!(e.counter(AccessCategory::BE), Some(6));
        // next idle period: AIFS + 6 slots
        let t2 = SimTime::from_ms(1);
        assert_eq!(
            e.advance(MediumTrigger::Idle, t2, &mut rng),
            EdcaAction::Arm(t2 + SimTime::from_us(43 + 54))
        );
    }

    #[test]
    fn simultaneous_expiry_collides_and_doubles_cw() {
        // two devices with counter 0 fire in the same slot; neither can sense
        // the other, both transmit, both fail, both double CW and redraw
        let mac = MacConfig::default();
        let mut rng = RngStream::new(5, 5);
        let mut devs: Vec<EdcaContender> = (0..2)
            .map(|_| EdcaContender::new(EdcaParams::default(), &mac))
            .collect();
        let fire = SimTime::from_us(34);
        for e in devs.iter_mut() {
            e.advance(MediumTrigger::Busy, SimTime::ZERO, &mut rng);
            e.advance(
                MediumTrigger::Traffic {
                    ac: AccessCategory::VO,
                    nonempty: true,
                },
                SimTime::ZERO,
                &mut rng,
            );
            e.acs[AccessCategory::VO.index()].counter = Some(0);
            assert_eq!(
                e.advance(MediumTrigger::Idle, SimTime::ZERO, &mut rng),
                EdcaAction::Arm(fire)
            );
        }
        // device 0 fires first and starts transmitting; device 1 senses busy
        // in the same slot and keeps its timer
        assert_eq!(
            devs[0].advance(MediumTrigger::Timer, fire, &mut rng),
            EdcaAction::Transmit(AccessCategory::VO)
        );
        assert_eq!(devs[1].advance(MediumTrigger::Busy, fire, &mut rng), EdcaAction::Keep);
        assert_eq!(
            devs[1].advance(MediumTrigger::Timer, fire, &mut rng),
            EdcaAction::Transmit(AccessCategory::VO)
        );
        for e in devs.iter_mut() {
            e.advance(
                MediumTrigger::TxComplete {
                    ac: AccessCategory::VO,
                    success: false,
                },
                fire,
                &mut rng,
            );
            assert_eq!(e.cw(AccessCategory::VO), 7);
            assert!(e.counter(AccessCategory::VO).unwrap() <= 7);
        }
    }

    #[test]
    fn internal_collision_favours_higher_priority() {
        let mac = MacConfig::default();
        let mut e = EdcaContender::new(EdcaParams::default(), &mac);
        let mut rng = RngStream::new(1, 1);
        e.advance(MediumTrigger::Busy, SimTime::ZERO, &mut rng);
        for ac in [AccessCategory::VO, AccessCategory::VI] {
            e.advance(MediumTrigger::Traffic { ac, nonempty: true }, SimTime::ZERO, &mut rng);
            e.acs[ac.index()].counter = Some(0);
        }
        let a = e.advance(MediumTrigger::Idle, SimTime::ZERO, &mut rng);
        assert_eq!(a, EdcaAction::Arm(SimTime::from_us(34)));
        assert_eq!(
            e.advance(MediumTrigger::Timer, SimTime::from_us(34), &mut rng),
            EdcaAction::Transmit(AccessCategory::VO)
        );
        assert_eq!(e.cw(AccessCategory::VI), 15);
    }

    #[test]
    fn ampdu_caps_at_64() {
        let phy = PhyConfig::default();
        let mut q = queue(100, 1, 100);
        let a = build_ampdu(&mut q, ALL, SimTime::from_ms(5), &phy).unwrap();
        assert_eq!(a.mpdus.len(), 64);
        assert_eq!(q.len(), 36);
        assert_eq!(a.mpdus[0].packet_id, 0);
        let mut one = queue(1, 1, 100);
        assert_eq!(
            build_ampdu(&mut one, ALL, SimTime::from_ms(5), &phy)
                .unwrap()
                .mpdus
                .len(),
            1
        );
    }

    #[test]
    fn ampdu_respects_budget() {
        let phy = PhyConfig::default();
        // 2412-byte payload -> 2452 PSDU octets -> 5 symbols = 68 us each
        let one = ru_airtime(psdu_octets([2412]), 7, RuSize::Tones996, &phy).unwrap();
        let two = ru_airtime(psdu_octets([2412, 2412]), 7, RuSize::Tones996, &phy).unwrap();
        assert_eq!(one, SimTime::from_ns(44_000 + 5 * 13_600));
        assert!(two > SimTime::from_us(150));
        let mut q = queue(3, 1, 2412);
        let a = build_ampdu(&mut q, ALL, SimTime::from_us(150), &phy).unwrap();
        assert_eq!(a.mpdus.len(), 1);
        let mut q = queue(3, 1, 2412);
        assert!(matches!(
            build_ampdu(&mut q, ALL, SimTime::from_us(100), &phy),
            Err(MacError::Oversize { .. })
        ));
        assert_eq!(q.len(), 3);
    }

    #[test]
    fn dl_mu_allocation() {
        let phy = PhyConfig::default();
        let mut q = queue(3, 1, 200);
        let p = dl_mu_allocate(&mut q, ALL, SimTime::from_ms(2), &phy).unwrap();
        assert!(p.ru_map.is_none());
        assert_eq!(p.per_destination[0].mpdus.len(), 3);

        let mut q: VecDeque<Mpdu> = (0..6).map(|d| mpdu(d + 1, 200, d as u64)).collect();
        let p = dl_mu_allocate(&mut q, ALL, SimTime::from_ms(2), &phy).unwrap();
        let ru = p.ru_map.unwrap();
        assert_eq!(ru.len(), 4);
        assert_eq!(ru.iter().map(|r| r.1 .0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(q.len(), 2);

        let mut empty = VecDeque::new();
        assert_eq!(
            dl_mu_allocate(&mut empty, ALL, SimTime::from_ms(2), &phy),
            Err(MacError::NoDestination)
        );
    }

    fn ul_queue(sta: usize, n: usize, ll: bool, t0: u64) -> VecDeque<Mpdu> {
        (0..n)
            .map(|i| {
                let mut m = mpdu(0, 50, t0 + i as u64);
                m.source = DeviceId(sta);
                m.is_ll = ll;
                m.direction = Direction::UL;
                m
            })
            .collect()
    }

    #[test]
    fn ul_mu_trigger_groups_and_filters() {
        let phy = PhyConfig::default();
        let mac = MacConfig::default();
        let mut a = ul_queue(1, 2, true, 0);
        let mut b = ul_queue(2, 1, true, 5);
        let mut stas = vec![(DeviceId(1), &mut a), (DeviceId(2), &mut b)];
        let plan = trigger_ul_mu(&mut stas, true, SimTime::from_ms(2), &phy, &mac).unwrap();
        assert_eq!(plan.per_sta.len(), 2);
        assert!(plan.total(&mac) <= SimTime::from_ms(2));
        assert!(a.is_empty() && b.is_empty());

        let mut be = ul_queue(1, 3, false, 0);
        let mut stas = vec![(DeviceId(1), &mut be)];
        assert!(trigger_ul_mu(&mut stas, true, SimTime::from_ms(2), &phy, &mac).is_none());

        let mut qs: Vec<VecDeque<Mpdu>> = (0..5).map(|i| ul_queue(i + 1, 1, true, i as u64)).collect();
        let mut stas: Vec<(DeviceId, &mut VecDeque<Mpdu>)> =
            qs.iter_mut().enumerate().map(|(i, q)| (DeviceId(i + 1), q)).collect();
        let plan = trigger_ul_mu(&mut stas, true, SimTime::from_ms(2), &phy, &mac).unwrap();
        assert_eq!(plan.per_sta.len(), 4);
        assert_eq!(qs[4].len(), 1);
    }

    #[test]
    fn retry_limit_drops() {
        let mut q = VecDeque::new();
        let mut fresh = mpdu(1, 10, 0);
        fresh.retries = 2;
        let mut old = mpdu(1, 10, 1);
        old.retries = 7;
        let dropped = requeue_failed(&mut q, vec![fresh, old], 7);
        assert_eq!(dropped.len(), 1);
        assert_eq!(q.len(), 1);
        assert_eq!(q[0].retries, 3);
    }

    #[test]
    fn cf_end_fit() {
        let phy = PhyConfig::default();
        let mac = MacConfig::default();
        assert!(cf_end_fits(SimTime::from_ms(1), &mac, &phy));
        assert!(!cf_end_fits(SimTime::from_us(10), &mac, &phy));
    }
}
