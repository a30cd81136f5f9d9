//! Application traffic generators: real-time mobile gaming (RTMG), VR,
//! video conferencing (VC) and CBR background, each mapped to an EDCA AC.
//!
//! Only the per-model means are fixed; size and inter-arrival shapes are
//! configurable [`DistShape`]s.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{RngStream, SimTime};
use crate::types::{AccessCategory, DeviceId, Direction, FlowId};

/// Largest MPDU payload; application packets above it are fragmented.
pub const DEFAULT_FRAGMENT_THRESHOLD: u32 = 11_454;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrafficError {
    #[error("unknown traffic model `{0}`")]
    UnknownModel(String),
    #[error("flow means must be positive (size {size} B, IAT {iat_us} us)")]
    NonPositiveMean { size: f64, iat_us: f64 },
    #[error("invalid distribution parameter: {0}")]
    BadShape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrafficModel {
    #[serde(alias = "rtmg")]
    RTMG,
    #[serde(alias = "vr")]
    VR,
    #[serde(alias = "vc")]
    VC,
    #[serde(alias = "background", alias = "bg")]
    BACKGROUND,
}

impl TrafficModel {
    /// RTMG and VR carry low-latency traffic.
    pub fn is_ll(self) -> bool {
        matches!(self, TrafficModel::RTMG | TrafficModel::VR)
    }

    pub fn access_category(self) -> AccessCategory {
        match self {
            TrafficModel::RTMG | TrafficModel::VR => AccessCategory::VO,
            TrafficModel::VC => AccessCategory::VI,
            TrafficModel::BACKGROUND => AccessCategory::BE,
        }
    }
}

impl fmt::Display for TrafficModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrafficModel::RTMG => "RTMG",
            TrafficModel::VR => "VR",
            TrafficModel::VC => "VC",
            TrafficModel::BACKGROUND => "BACKGROUND",
        })
    }
}

impl FromStr for TrafficModel {
    type Err = TrafficError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "RTMG" => Ok(TrafficModel::RTMG),
            "VR" => Ok(TrafficModel::VR),
            "VC" => Ok(TrafficModel::VC),
            "BACKGROUND" | "BG" => Ok(TrafficModel::BACKGROUND),
            _ => Err(TrafficError::UnknownModel(s.to_string())),
        }
    }
}

/// Shape of a positive random quantity around its configured mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistShape {
    Constant,
    /// Normal truncated symmetrically at two standard deviations, so the
    /// mean is preserved.
    TruncatedNormal {
        cv: f64,
    },
    LogNormal {
        cv: f64,
    },
    Exponential,
}

impl DistShape {
    fn validate(&self) -> Result<(), TrafficError> {
        match *self {
            DistShape::TruncatedNormal { cv } if !(0.0..0.5).contains(&cv) => Err(TrafficError::BadShape(format!(
                "truncated normal cv {cv} must be in [0, 0.5)"
            ))),
            DistShape::LogNormal { cv } if !(cv >= 0.0) => {
                Err(TrafficError::BadShape(format!("lognormal cv {cv} must be >= 0")))
            }
            _ => Ok(()),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> f64 {
        match *self {
            DistShape::Constant => mean,
            DistShape::TruncatedNormal { cv } => {
                if cv == 0.0 {
                    return mean;
                }
                let sd = cv * mean;
                let n = Normal::new(mean, sd).expect("validated");
                loop {
                    let x = n.sample(rng);
                    if (x - mean).abs() <= 2.0 * sd {
                        return x;
                    }
                }
            }
            DistShape::LogNormal { cv } => {
                if cv == 0.0 {
                    return mean;
                }
                let s2 = (1.0 + cv * cv).ln();
                let mu = mean.ln() - s2 / 2.0;
                LogNormal::new(mu, s2.sqrt()).expect("validated").sample(rng)
            }
            DistShape::Exponential => {
                let u: f64 = rng.gen();
                -mean * (1.0 - u).ln()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub model: TrafficModel,
    pub direction: Direction,
    pub ac: AccessCategory,
    pub mean_pkt_bytes: f64,
    pub mean_iat_us: f64,
    pub size_dist: DistShape,
    pub iat_dist: DistShape,
}

impl FlowSpec {
    /// Default flow for a model and direction, with the reference means.
    pub fn default_for(model: TrafficModel, direction: Direction) -> FlowSpec {
        use Direction::*;
        use DistShape::*;
        use TrafficModel::*;
        let (bytes, iat_ms, size_dist, iat_dist) = match (model, direction) {
            (RTMG, DL) => (80.0, 23.06, TruncatedNormal { cv: 0.25 }, TruncatedNormal { cv: 0.25 }),
            (RTMG, UL) => (50.0, 30.49, TruncatedNormal { cv: 0.25 }, TruncatedNormal { cv: 0.25 }),
            (VR, DL) => (166_660.0, 33.33, LogNormal { cv: 0.1 }, Constant),
            (VR, UL) => (190.0, 10.81, Constant, Constant),
            (VC, _) => (7_810.0, 33.33, LogNormal { cv: 0.2 }, Constant),
            (BACKGROUND, _) => (200_000.0, 8.0, Constant, Constant),
        };
        FlowSpec {
            model,
            direction,
            ac: model.access_category(),
            mean_pkt_bytes: bytes,
            mean_iat_us: iat_ms * 1_000.0,
            size_dist,
            iat_dist,
        }
    }

    pub fn is_ll(&self) -> bool {
        self.model.is_ll()
    }

    pub fn validate(&self) -> Result<(), TrafficError> {
        if !(self.mean_pkt_bytes > 0.0) || !(self.mean_iat_us > 0.0) {
            return Err(TrafficError::NonPositiveMean {
                size: self.mean_pkt_bytes,
                iat_us: self.mean_iat_us,
            });
        }
        self.size_dist.validate()?;
        self.iat_dist.validate()
    }
}

/// Long-run offered load `8 * mean size / mean IAT`, in bit/s.
pub fn mean_offered_load_bps(spec: &FlowSpec) -> f64 {
    if spec.mean_pkt_bytes <= 0.0 || spec.mean_iat_us <= 0.0 {
        return 0.0;
    }
    8.0 * spec.mean_pkt_bytes / (spec.mean_iat_us * 1e-6)
}

/// Stateful packet generator for one flow.
#[derive(Debug, Clone)]
pub struct FlowState {
    spec: FlowSpec,
    rng: RngStream,
}

pub fn make_flow(spec: FlowSpec, rng: RngStream) -> Result<FlowState, TrafficError> {
    spec.validate()?;
    Ok(FlowState { spec, rng })
}

impl FlowState {
    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    /// Next packet size (>= 1 octet) and the gap until the arrival after it.
    pub fn next_arrival(&mut self) -> (u32, SimTime) {
        let size = self.spec.size_dist.sample(self.spec.mean_pkt_bytes, &mut self.rng);
        let iat = self.spec.iat_dist.sample(self.spec.mean_iat_us, &mut self.rng);
        ((size.round() as u32).max(1), SimTime::from_us_f64(iat))
    }

    /// Random start offset in `[0, mean IAT)` so periodic flows of
    /// different devices do not align.
    pub fn initial_offset(&mut self) -> SimTime {
        let u: f64 = self.rng.gen();
        SimTime::from_us_f64(u * self.spec.mean_iat_us)
    }
}

/// Splits an application packet into MPDU payload sizes whose sum is the
/// original size.
pub fn fragment(size_bytes: u32, threshold: u32) -> impl Iterator<Item = u32> {
    let threshold = threshold.max(1);
    let full = size_bytes / threshold;
    let rest = size_bytes % threshold;
    std::iter::repeat_n(threshold, full as usize).chain((rest > 0).then_some(rest))
}

/// One MAC data unit waiting in (or travelling through) a device queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mpdu {
    pub flow_id: FlowId,
    pub packet_id: u64,
    /// Index of this fragment within its application packet.
    pub fragment: u16,
    pub size_bytes: u32,
    /// Enqueue instant of the application packet; starts the latency clock.
    pub arrival_time: SimTime,
    pub direction: Direction,
    pub source: DeviceId,
    pub destination: DeviceId,
    pub ac: AccessCategory,
    pub is_ll: bool,
    pub retries: u8,
}

/// Writer for the `time_us,flow_id,model,direction,size_bytes` trace.
pub struct ArrivalTrace<W: Write> {
    out: W,
}

impl<W: Write> ArrivalTrace<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "time_us,flow_id,model,direction,size_bytes")?;
        Ok(ArrivalTrace { out })
    }

    pub fn record(&mut self, time: SimTime, flow: FlowId, spec: &FlowSpec, size: u32) -> std::io::Result<()> {
        writeln!(
            self.out,
            "{:.3},{},{},{},{}",
            time.as_us_f64(),
            flow.0,
            spec.model,
            spec.direction,
            size
        )
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(model: TrafficModel, dir: Direction) -> FlowState {
        make_flow(FlowSpec::default_for(model, dir), RngStream::new(11, 3)).unwrap()
    }

    #[test]
    fn ac_mapping() {
        for (m, ac) in [
            (TrafficModel::RTMG, AccessCategory::VO),
            (TrafficModel::VR, AccessCategory::VO),
            (TrafficModel::VC, AccessCategory::VI),
            (TrafficModel::BACKGROUND, AccessCategory::BE),
        ] {
            for d in [Direction::DL, Direction::UL] {
                let s = FlowSpec::default_for(m, d);
                assert_eq!(s.ac, ac);
                assert_eq!(s.is_ll(), matches!(m, TrafficModel::RTMG | TrafficModel::VR));
            }
        }
    }

    #[test]
    fn background_is_cbr() {
        let mut f = flow(TrafficModel::BACKGROUND, Direction::DL);
        for _ in 0..5 {
            assert_eq!(f.next_arrival(), (200_000, SimTime::from_ms(8)));
        }
    }

    #[test]
    fn vr_periodicity() {
        let mut dl = flow(TrafficModel::VR, Direction::DL);
        let (size, iat) = dl.next_arrival();
        assert_eq!(iat, SimTime::from_us(33_330));
        assert!((size as f64 - 166_660.0).abs() < 0.6 * 166_660.0);
        let mut ul = flow(TrafficModel::VR, Direction::UL);
        assert_eq!(ul.next_arrival(), (190, SimTime::from_us(10_810)));
    }

    #[test]
    fn vc_has_fixed_cadence() {
        let mut f = flow(TrafficModel::VC, Direction::UL);
        for _ in 0..20 {
            assert_eq!(f.next_arrival().1, SimTime::from_us(33_330));
        }
    }

    #[test]
    fn zero_mean_rejected_and_model_parse() {
        let mut s = FlowSpec::default_for(TrafficModel::RTMG, Direction::DL);
        s.mean_iat_us = 0.0;
        assert!(matches!(
            make_flow(s, RngStream::new(1, 1)),
            Err(TrafficError::NonPositiveMean { .. })
        ));
        assert!(matches!(
            "bogus".parse::<TrafficModel>(),
            Err(TrafficError::UnknownModel(_))
        ));
        assert_eq!("vr".parse::<TrafficModel>().unwrap(), TrafficModel::VR);
    }

    #[test]
    fn offered_load_arithmetic() {
        let vr = FlowSpec::default_for(TrafficModel::VR, Direction::DL);
        // 8 * 166 660 / 0.03333 s
        assert!((mean_offered_load_bps(&vr) - 40_002_400.24).abs() < 1.0);
        let rtmg = FlowSpec::default_for(TrafficModel::RTMG, Direction::DL);
        assert!((mean_offered_load_bps(&rtmg) - 27_753.69).abs() < 0.01);
        let mut zero = rtmg.clone();
        zero.mean_pkt_bytes = 0.0;
        assert_eq!(mean_offered_load_bps(&zero), 0.0);
    }

    #[test]
    fn empirical_means_converge() {
        for model in [
            TrafficModel::RTMG,
            TrafficModel::VR,
            TrafficModel::VC,
            TrafficModel::BACKGROUND,
        ] {
            for dir in [Direction::DL, Direction::UL] {
                let spec = FlowSpec::default_for(model, dir);
                let mut f = make_flow(spec.clone(), RngStream::new(2024, 99)).unwrap();
                let n = 100_000;
                let (mut s, mut t) = (0.0, 0.0);
                for _ in 0..n {
                    let (size, iat) = f.next_arrival();
                    s += size as f64;
                    t += iat.as_us_f64();
                }
                let (ms, mt) = (s / n as f64, t / n as f64);
                assert!((ms / spec.mean_pkt_bytes - 1.0).abs() < 0.02, "{model} {dir} size {ms}");
                assert!((mt / spec.mean_iat_us - 1.0).abs() < 0.02, "{model} {dir} iat {mt}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn fragmentation_conserves_octets(size in 1u32..1_000_000, thr in 1u32..20_000) {
            let parts: Vec<u32> = fragment(size, thr).collect();
            proptest::prop_assert_eq!(parts.iter().map(|&p| p as u64).sum::<u64>(), size as u64);
            proptest::prop_assert!(parts.iter().all(|&p| p >= 1 && p <= thr));
        }
    }
}
