//! Abstract PHY: PPDU airtime from the fixed rate configuration, indoor
//! path loss, carrier sensing and collision/capture resolution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::types::DeviceId;

/// Maximum number of MPDUs in one A-MPDU.
pub const MAX_AMPDU_MPDUS: usize = 64;
/// Maximum number of RUs in one MU PPDU.
pub const MAX_RUS: usize = 4;

/// A-MPDU delimiter + QoS MAC header with HT control + FCS.
pub const MPDU_OVERHEAD_OCTETS: u64 = 4 + 30 + 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhyError {
    #[error("PPDU of {duration} exceeds the {max} cap")]
    Oversize { duration: SimTime, max: SimTime },
    #[error("unsupported MCS index {0}")]
    UnknownMcs(u8),
    #[error("{0} MPDUs exceed the A-MPDU limit of 64")]
    TooManyMpdus(u32),
    #[error("distance must be positive, got {0} m")]
    Distance(f64),
    #[error("unsupported bandwidth {0} MHz")]
    Bandwidth(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhyConfig {
    pub data_mcs: u8,
    pub ctrl_mcs: u8,
    pub tx_power_dbm: f64,
    pub gi_ns: u64,
    pub band_ghz: f64,
    pub bandwidth_mhz: u32,
    pub n_ss: u32,
    pub max_ppdu_us: u64,
    pub pd_threshold_dbm: f64,
    pub ed_threshold_dbm: f64,
    pub capture_margin_db: f64,
    pub data_preamble_us: u64,
    pub ctrl_preamble_us: u64,
    pub wall_loss_db: f64,
}

impl Default for PhyConfig {
    fn default() -> Self {
        PhyConfig {
            data_mcs: 7,
            ctrl_mcs: 0,
            tx_power_dbm: 21.0,
            gi_ns: 800,
            band_ghz: 5.0,
            bandwidth_mhz: 80,
            n_ss: 1,
            max_ppdu_us: 5484,
            pd_threshold_dbm: -82.0,
            ed_threshold_dbm: -62.0,
            capture_margin_db: 10.0,
            data_preamble_us: 44,
            ctrl_preamble_us: 20,
            wall_loss_db: 7.0,
        }
    }
}

impl PhyConfig {
    pub fn max_ppdu(&self) -> SimTime {
        SimTime::from_us(self.max_ppdu_us)
    }

    /// HE data symbol: 12.8 us plus guard interval.
    pub fn data_symbol(&self) -> SimTime {
        SimTime::from_ns(12_800 + self.gi_ns)
    }

    pub fn full_band_ru(&self) -> Result<RuSize, PhyError> {
        match self.bandwidth_mhz {
            20 => Ok(RuSize::Tones242),
            40 => Ok(RuSize::Tones484),
            80 => Ok(RuSize::Tones996),
            160 => Ok(RuSize::Tones2x996),
            bw => Err(PhyError::Bandwidth(bw)),
        }
    }
}

/// Resource unit sizes; the full-band case is the SU allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuSize {
    Tones242,
    Tones484,
    Tones996,
    Tones2x996,
}

impl RuSize {
    pub fn data_subcarriers(self) -> u64 {
        match self {
            RuSize::Tones242 => 234,
            RuSize::Tones484 => 468,
            RuSize::Tones996 => 980,
            RuSize::Tones2x996 => 1960,
        }
    }
}

/// (coded bits per subcarrier, code rate numerator, code rate denominator)
fn he_mcs(mcs: u8) -> Result<(u64, u64, u64), PhyError> {
    Ok(match mcs {
        0 => (1, 1, 2),
        1 => (2, 1, 2),
        2 => (2, 3, 4),
        3 => (4, 1, 2),
        4 => (4, 3, 4),
        5 => (6, 2, 3),
        6 => (6, 3, 4),
        7 => (6, 5, 6),
        8 => (8, 3, 4),
        9 => (8, 5, 6),
        10 => (10, 3, 4),
        11 => (10, 5, 6),
        m => return Err(PhyError::UnknownMcs(m)),
    })
}

// Non-HT (duplicate) rates used for control frames: 6, 9, 12, ... 54 Mb/s.
fn legacy_mcs(mcs: u8) -> Result<(u64, u64, u64), PhyError> {
    Ok(match mcs {
        0 => (1, 1, 2),
        1 => (1, 3, 4),
        2 => (2, 1, 2),
        3 => (2, 3, 4),
        4 => (4, 1, 2),
        5 => (4, 3, 4),
        6 => (6, 2, 3),
        7 => (6, 3, 4),
        m => return Err(PhyError::UnknownMcs(m)),
    })
}

/// PSDU size of an A-MPDU carrying MPDUs with the given payloads.
pub fn psdu_octets<I: IntoIterator<Item = u32>>(payloads: I) -> u64 {
    payloads
        .into_iter()
        .map(|p| (p as u64 + MPDU_OVERHEAD_OCTETS).div_ceil(4) * 4)
        .sum()
}

/// Airtime of an HE PPDU on the given RU, without the max-duration check.
pub fn ru_airtime_unchecked(psdu_octets: u64, mcs: u8, ru: RuSize, config: &PhyConfig) -> Result<SimTime, PhyError> {
    let (bpscs, num, den) = he_mcs(mcs)?;
    let bits = psdu_octets * 8;
    let per_symbol = ru.data_subcarriers() * bpscs * num * config.n_ss as u64;
    let n_sym = (bits * den).div_ceil(per_symbol);
    Ok(SimTime::from_us(config.data_preamble_us) + config.data_symbol().mul(n_sym))
}

/// Airtime of an HE PPDU on the given RU; errors when over the PPDU cap.
pub fn ru_airtime(psdu_octets: u64, mcs: u8, ru: RuSize, config: &PhyConfig) -> Result<SimTime, PhyError> {
    let d = ru_airtime_unchecked(psdu_octets, mcs, ru, config)?;
    if d > config.max_ppdu() {
        return Err(PhyError::Oversize {
            duration: d,
            max: config.max_ppdu(),
        });
    }
    Ok(d)
}

/// Full-band SU PPDU airtime: preamble + ceil(bits / bits-per-symbol)
/// symbols. `payload_octets` is the PSDU length.
pub fn ppdu_airtime(payload_octets: u64, mcs: u8, n_mpdus: u32, config: &PhyConfig) -> Result<SimTime, PhyError> {
    if n_mpdus as usize > MAX_AMPDU_MPDUS {
        return Err(PhyError::TooManyMpdus(n_mpdus));
    }
    ru_airtime(payload_octets, mcs, config.full_band_ru()?, config)
}

/// Control frame airtime (non-HT duplicate at `ctrl_mcs`, 4 us symbols,
/// 16 service + 6 tail bits).
pub fn control_airtime(frame_octets: u64, config: &PhyConfig) -> SimTime {
    let (bpscs, num, den) = legacy_mcs(config.ctrl_mcs).unwrap_or((1, 1, 2));
    let bits = 16 + 6 + frame_octets * 8;
    let per_symbol = 48 * bpscs * num;
    let n_sym = (bits * den).div_ceil(per_symbol);
    SimTime::from_us(config.ctrl_preamble_us) + SimTime::from_us(4).mul(n_sym)
}

/// Enterprise breakpoint path loss at 5 GHz:
/// `40.05 + 20 log10(min(d, 10)) + 35 log10(max(d, 10) / 10) + wall_loss * walls`.
pub fn path_loss_db(distance_m: f64, n_walls: u32, config: &PhyConfig) -> Result<f64, PhyError> {
    if !(distance_m > 0.0) {
        return Err(PhyError::Distance(distance_m));
    }
    let near = distance_m.min(10.0);
    let far = distance_m.max(10.0) / 10.0;
    Ok(40.05 + 20.0 * near.log10() + 35.0 * far.log10() + config.wall_loss_db * n_walls as f64)
}

fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

/// Received power `rx[a][b]` at `b` from `a`, in dBm; the diagonal is
/// infinite.
pub fn rx_power_matrix<W>(positions: &[(f64, f64)], walls: W, config: &PhyConfig) -> Result<Vec<Vec<f64>>, PhyError>
where
    W: Fn(usize, usize) -> u32,
{
    let n = positions.len();
    let mut rx = vec![vec![f64::INFINITY; n]; n];
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let (dx, dy) = (positions[a].0 - positions[b].0, positions[a].1 - positions[b].1);
            // co-located devices are treated as 1 m apart
            let d = (dx * dx + dy * dy).sqrt().max(1.0);
            rx[a][b] = config.tx_power_dbm - path_loss_db(d, walls(a, b), config)?;
        }
    }
    Ok(rx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelState {
    Idle,
    Busy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RxOutcome {
    Delivered,
    Collided,
    /// Desired signal below the preamble detection threshold.
    Undetected,
}

#[derive(Debug, Clone)]
struct ActiveTx {
    id: u64,
    tx: DeviceId,
    exchange: u64,
    overlaps: Vec<DeviceId>,
}

/// A PPDU removed from the air, with every foreign transmitter that
/// overlapped it in time.
#[derive(Debug, Clone)]
pub struct EndedTx {
    pub id: u64,
    pub tx: DeviceId,
    pub interferers: Vec<DeviceId>,
}

/// Shared wireless medium: received power between every pair of devices,
/// the set of PPDUs on the air and per-device busy-time accounting.
#[derive(Debug, Clone)]
pub struct Medium {
    rx_dbm: Vec<Vec<f64>>,
    rx_mw: Vec<Vec<f64>>,
    pd_dbm: f64,
    ed_mw: f64,
    capture_db: f64,
    active: Vec<ActiveTx>,
    busy_since: Vec<Option<crate::engine::SimTime>>,
    busy_total: Vec<SimTime>,
}

impl Medium {
    /// `rx_dbm[a][b]` is the power device `b` receives from device `a`.
    pub fn new(rx_dbm: Vec<Vec<f64>>, config: &PhyConfig) -> Self {
        let n = rx_dbm.len();
        let rx_mw = rx_dbm
            .iter()
            .map(|row| row.iter().map(|&p| dbm_to_mw(p)).collect())
            .collect();
        Medium {
            rx_dbm,
            rx_mw,
            pd_dbm: config.pd_threshold_dbm,
            ed_mw: dbm_to_mw(config.ed_threshold_dbm),
            capture_db: config.capture_margin_db,
            active: Vec::new(),
            busy_since: vec![None; n],
            busy_total: vec![SimTime::ZERO; n],
        }
    }

    /// Builds the medium from positions and wall counts.
    pub fn from_geometry<W>(positions: &[(f64, f64)], walls: W, config: &PhyConfig) -> Result<Self, PhyError>
    where
        W: Fn(usize, usize) -> u32,
    {
        Ok(Medium::new(rx_power_matrix(positions, walls, config)?, config))
    }

    pub fn n_devices(&self) -> usize {
        self.rx_dbm.len()
    }

    pub fn rx_power_dbm(&self, from: DeviceId, to: DeviceId) -> f64 {
        self.rx_dbm[from.0][to.0]
    }

    /// True when `to` detects a preamble transmitted by `from`.
    pub fn detects(&self, from: DeviceId, to: DeviceId) -> bool {
        self.rx_dbm[from.0][to.0] >= self.pd_dbm
    }

    pub fn channel_state(&self, device: DeviceId) -> ChannelState {
        let mut energy = 0.0;
        for a in &self.active {
            if a.tx == device || self.rx_dbm[a.tx.0][device.0] >= self.pd_dbm {
                return ChannelState::Busy;
            }
            energy += self.rx_mw[a.tx.0][device.0];
        }
        if energy >= self.ed_mw {
            ChannelState::Busy
        } else {
            ChannelState::Idle
        }
    }

    pub fn is_transmitting(&self, device: DeviceId) -> bool {
        self.active.iter().any(|a| a.tx == device)
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// Puts a PPDU on the air. PPDUs sharing an `exchange` id are parts of
    /// one OFDMA transmission and do not interfere with each other.
    pub fn begin(&mut self, now: SimTime, id: u64, tx: DeviceId, exchange: u64) {
        let mut overlaps = Vec::new();
        for a in &mut self.active {
            if a.exchange != exchange {
                a.overlaps.push(tx);
                overlaps.push(a.tx);
            }
        }
        self.active.push(ActiveTx {
            id,
            tx,
            exchange,
            overlaps,
        });
        self.refresh_busy(now);
    }

    pub fn end(&mut self, now: SimTime, id: u64) -> Option<EndedTx> {
        let pos = self.active.iter().position(|a| a.id == id)?;
        let a = self.active.swap_remove(pos);
        self.refresh_busy(now);
        Some(EndedTx {
            id: a.id,
            tx: a.tx,
            interferers: a.overlaps,
        })
    }

    fn refresh_busy(&mut self, now: SimTime) {
        for d in 0..self.n_devices() {
            let busy = self.channel_state(DeviceId(d)) == ChannelState::Busy;
            match (busy, self.busy_since[d]) {
                (true, None) => self.busy_since[d] = Some(now),
                (false, Some(s)) => {
                    self.busy_total[d] += now - s;
                    self.busy_since[d] = None;
                }
                _ => {}
            }
        }
    }

    /// Total time `device` has sensed the medium busy up to `now`.
    pub fn busy_time(&self, device: DeviceId, now: SimTime) -> SimTime {
        let open = self.busy_since[device.0].map_or(SimTime::ZERO, |s| now - s);
        self.busy_total[device.0] + open
    }

    /// Outcome at `receiver` for a PPDU from `desired` overlapped by the
    /// listed transmitters. Capture needs the desired power to exceed the
    /// aggregate interference by the capture margin.
    pub fn resolve_reception(&self, receiver: DeviceId, desired: DeviceId, interferers: &[DeviceId]) -> RxOutcome {
        if receiver == desired || !self.detects(desired, receiver) {
            return RxOutcome::Undetected;
        }
        if interferers.is_empty() {
            return RxOutcome::Delivered;
        }
        if interferers.contains(&receiver) {
            // half duplex
            return RxOutcome::Collided;
        }
        let interference: f64 = interferers.iter().map(|i| self.rx_mw[i.0][receiver.0]).sum();
        let sir_db = self.rx_dbm[desired.0][receiver.0] - 10.0 * interference.log10();
        if sir_db >= self.capture_db {
            RxOutcome::Delivered
        } else {
            RxOutcome::Collided
        }
    }
}
