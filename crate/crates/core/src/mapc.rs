//! Co-TDMA coordination between one pair of APs: polling information,
//! the per-TXOP action plan and the shared-window duration rule.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::mac::MacConfig;
use crate::phy::{psdu_octets, ru_airtime_unchecked, PhyConfig, RuSize, MAX_AMPDU_MPDUS};
use crate::traffic::Mpdu;
use crate::types::DeviceId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapcError {
    #[error("a coordination pair needs two distinct APs, got {0} and {1}")]
    SameAp(DeviceId, DeviceId),
    #[error("APs {0} and {1} belong to the same BSS")]
    SameBss(DeviceId, DeviceId),
}

/// How the sharing AP learns the partner's LL backlog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoChannel {
    /// Snapshot carried by the ICR.
    InBand,
    /// Read from the partner at decision time over a wired link.
    #[default]
    Backhaul,
}

/// The two coordination-capable APs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapcPair {
    aps: [DeviceId; 2],
    pub info_channel: InfoChannel,
}

impl MapcPair {
    pub fn new(
        a: DeviceId,
        b: DeviceId,
        bss_of: impl Fn(DeviceId) -> usize,
        info_channel: InfoChannel,
    ) -> Result<Self, MapcError> {
        if a == b {
            return Err(MapcError::SameAp(a, b));
        }
        if bss_of(a) == bss_of(b) {
            return Err(MapcError::SameBss(a, b));
        }
        Ok(MapcPair {
            aps: [a, b],
            info_channel,
        })
    }

    pub fn aps(&self) -> [DeviceId; 2] {
        self.aps
    }

    pub fn contains(&self, ap: DeviceId) -> bool {
        self.aps.contains(&ap)
    }

    pub fn partner(&self, ap: DeviceId) -> Option<DeviceId> {
        match self.aps {
            [a, b] if a == ap => Some(b),
            [a, b] if b == ap => Some(a),
            _ => None,
        }
    }
}

/// LL backlog in one direction, summarised for duration planning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LlBacklog {
    pub bytes: u64,
    pub mpdus: u32,
    pub psdu_octets: u64,
    pub head_psdu_octets: u64,
    pub stations: u32,
}

impl LlBacklog {
    pub fn from_mpdus<'a, I: IntoIterator<Item = &'a Mpdu>>(mpdus: I) -> Self {
        let mut b = LlBacklog::default();
        let mut seen: Vec<DeviceId> = Vec::new();
        for m in mpdus.into_iter().filter(|m| m.is_ll) {
            let p = psdu_octets([m.size_bytes]);
            if b.mpdus == 0 {
                b.head_psdu_octets = p;
            }
            b.bytes += m.size_bytes as u64;
            b.mpdus += 1;
            b.psdu_octets += p;
            let peer = match m.direction {
                crate::types::Direction::DL => m.destination,
                crate::types::Direction::UL => m.source,
            };
            if !seen.contains(&peer) {
                seen.push(peer);
            }
        }
        b.stations = seen.len() as u32;
        b
    }

    pub fn from_queue(q: &VecDeque<Mpdu>) -> Self {
        Self::from_mpdus(q.iter())
    }

    pub fn is_empty(&self) -> bool {
        self.mpdus == 0
    }
}

/// What the sharing AP knows about a candidate shared AP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateInfo {
    pub ap_id: DeviceId,
    pub dl_ll: LlBacklog,
    pub ul_ll: LlBacklog,
    pub responded: bool,
}

impl CandidateInfo {
    pub fn silent(ap_id: DeviceId) -> Self {
        CandidateInfo {
            ap_id,
            dl_ll: LlBacklog::default(),
            ul_ll: LlBacklog::default(),
            responded: false,
        }
    }

    pub fn dl_ll_backlog_bytes(&self) -> u64 {
        self.dl_ll.bytes
    }

    pub fn ul_ll_backlog_bytes(&self) -> u64 {
        self.ul_ll.bytes
    }
}

/// Next step of a TXOP holder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxopAction {
    DlTx,
    UlMuTx,
    CoTdmaShare,
    CfEnd,
}

/// Inputs to one plan evaluation. `dl_ready` and `ul_ll_ready` mean an
/// exchange of that kind fits the remaining TXOP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanState {
    pub dl_ready: bool,
    pub ul_ll_ready: bool,
    pub candidate_responded: bool,
    pub already_shared: bool,
    pub share_duration: SimTime,
}

/// Strict priority: own DL, then triggered UL LL, then one Co-TDMA share,
/// then CF-End.
pub fn txop_action_plan(s: &PlanState) -> TxopAction {
    if s.dl_ready {
        TxopAction::DlTx
    } else if s.ul_ll_ready {
        TxopAction::UlMuTx
    } else if s.candidate_responded && !s.already_shared && s.share_duration > SimTime::ZERO {
        TxopAction::CoTdmaShare
    } else {
        TxopAction::CfEnd
    }
}

/// MU-RTS TXS, SIFS, CTS, SIFS.
pub fn handshake_airtime(mac: &MacConfig, phy: &PhyConfig) -> SimTime {
    mac.mu_rts_txs(phy) + mac.sifs() + mac.cts(phy) + mac.sifs()
}

fn data_airtime(psdu: u64, ru: RuSize, phy: &PhyConfig) -> SimTime {
    ru_airtime_unchecked(psdu, phy.data_mcs, ru, phy).unwrap_or(SimTime::MAX)
}

/// Splits `b` into the fewest PPDUs respecting the aggregation and
/// duration caps; returns (exchanges, total PPDU airtime).
fn ppdus_for(b: &LlBacklog, ru: RuSize, phy: &PhyConfig) -> (u64, SimTime) {
    if b.is_empty() {
        return (0, SimTime::ZERO);
    }
    let mut n = (b.mpdus as u64).div_ceil(MAX_AMPDU_MPDUS as u64).max(1);
    loop {
        let per = b.psdu_octets.div_ceil(n);
        let t = data_airtime(per, ru, phy);
        if t <= phy.max_ppdu() || per <= b.head_psdu_octets {
            return (n, t.mul(n));
        }
        n += 1;
    }
}

fn dl_time(b: &LlBacklog, mac: &MacConfig, phy: &PhyConfig) -> SimTime {
    let ru = if b.stations > 1 {
        RuSize::Tones242
    } else {
        phy.full_band_ru().unwrap_or(RuSize::Tones996)
    };
    let (n, air) = ppdus_for(b, ru, phy);
    air + (mac.sifs() + mac.block_ack(phy) + mac.sifs()).mul(n)
}

fn ul_time(b: &LlBacklog, mac: &MacConfig, phy: &PhyConfig) -> SimTime {
    let users = b.stations.max(1) as usize;
    let (ru, per_user) = if users > 1 {
        let per = LlBacklog {
            psdu_octets: b.psdu_octets.div_ceil(users as u64),
            mpdus: b.mpdus.div_ceil(users as u32),
            ..*b
        };
        (RuSize::Tones242, per)
    } else {
        (phy.full_band_ru().unwrap_or(RuSize::Tones996), *b)
    };
    let (n, air) = ppdus_for(&per_user, ru, phy);
    let fixed = mac.trigger(users, phy) + mac.sifs() + mac.sifs() + mac.multi_sta_ba(users, phy) + mac.sifs();
    air + fixed.mul(n)
}

/// Shortest exchange the shared AP could run in the window.
pub fn minimal_ll_exchange(info: &CandidateInfo, mac: &MacConfig, phy: &PhyConfig) -> Option<SimTime> {
    let one = |b: &LlBacklog| LlBacklog {
        bytes: 0,
        mpdus: 1,
        psdu_octets: b.head_psdu_octets,
        head_psdu_octets: b.head_psdu_octets,
        stations: 1,
    };
    if !info.dl_ll.is_empty() {
        Some(dl_time(&one(&info.dl_ll), mac, phy))
    } else if !info.ul_ll.is_empty() {
        Some(ul_time(&one(&info.ul_ll), mac, phy))
    } else {
        None
    }
}

/// Shared window length: airtime for the partner's DL LL exchanges plus
/// its triggered UL LL exchanges, each closed by a block-ack and SIFS,
/// clipped to what remains after the MU-RTS TXS/CTS handshake. Zero when
/// the partner did not respond, has no LL backlog, or the remainder cannot
/// hold one minimal exchange.
pub fn compute_shared_duration(info: &CandidateInfo, remaining: SimTime, mac: &MacConfig, phy: &PhyConfig) -> SimTime {
    if !info.responded {
        return SimTime::ZERO;
    }
    let Some(min_ex) = minimal_ll_exchange(info, mac, phy) else {
        return SimTime::ZERO;
    };
    let Some(avail) = remaining.checked_sub(handshake_airtime(mac, phy)) else {
        return SimTime::ZERO;
    };
    if avail < min_ex {
        return SimTime::ZERO;
    }
    let need = dl_time(&info.dl_ll, mac, phy) + ul_time_if(&info.ul_ll, mac, phy);
    need.min(avail)
}

fn ul_time_if(b: &LlBacklog, mac: &MacConfig, phy: &PhyConfig) -> SimTime {
    if b.is_empty() {
        SimTime::ZERO
    } else {
        ul_time(b, mac, phy)
    }
}

/// A Co-TDMA allocation inside the sharing AP's TXOP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedTxopGrant {
    pub sharing_ap: DeviceId,
    pub shared_ap: DeviceId,
    /// Instant the MU-RTS TXS starts.
    pub start_time: SimTime,
    /// Window length after the handshake.
    pub duration: SimTime,
    pub dl_ll_bytes: u64,
    pub ul_ll_bytes: u64,
}

impl SharedTxopGrant {
    pub fn window_start(&self, mac: &MacConfig, phy: &PhyConfig) -> SimTime {
        self.start_time + handshake_airtime(mac, phy)
    }

    pub fn window_end(&self, mac: &MacConfig, phy: &PhyConfig) -> SimTime {
        self.window_start(mac, phy) + self.duration
    }
}
