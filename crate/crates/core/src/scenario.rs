//! Scenario configuration and the enterprise topology builder.
//!
//! A configuration is TOML. Every key is optional except `scenario`;
//! unknown keys are rejected.
//!
//! ```toml
//! scenario = "RTMG"
//! system = "coordinated"
//! n_vc_stas = 3
//!
//! [topology]
//! room_size_m = 20.0
//! cluster_radius_m = 5.0
//! ```

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{stream_id, RngStream, SimTime};
use crate::mac::{EdcaParams, MacConfig};
use crate::mapc::{InfoChannel, MapcPair};
use crate::phy::{rx_power_matrix, PhyConfig};
use crate::sim::{DeviceSpec, FlowDef, NetworkConfig};
use crate::traffic::{DistShape, FlowSpec, TrafficModel};
use crate::types::{DeviceId, Direction, Role};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("`{key}`: {msg}")]
    Invalid { key: &'static str, msg: String },
}

fn invalid(key: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, msg: msg.into() }
}

/// Which low-latency application the LL STA of every BSS runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(alias = "rtmg")]
    RTMG,
    #[serde(alias = "vr")]
    VR,
}

impl Scenario {
    pub fn model(self) -> TrafficModel {
        match self {
            Scenario::RTMG => TrafficModel::RTMG,
            Scenario::VR => TrafficModel::VR,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.model().fmt(f)
    }
}

impl FromStr for Scenario {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "RTMG" => Ok(Scenario::RTMG),
            "VR" => Ok(Scenario::VR),
            _ => Err(invalid("scenario", format!("unknown scenario `{s}` (RTMG or VR)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum System {
    #[default]
    Coordinated,
    Uncoordinated,
}

impl System {
    pub const ALL: [System; 2] = [System::Coordinated, System::Uncoordinated];

    pub fn name(self) -> &'static str {
        match self {
            System::Coordinated => "coordinated",
            System::Uncoordinated => "uncoordinated",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "coordinated" | "c" => Ok(System::Coordinated),
            "uncoordinated" | "u" => Ok(System::Uncoordinated),
            _ => Err(invalid("system", format!("unknown system `{s}`"))),
        }
    }
}

/// Rooms in a row, one BSS per room with its AP at the room centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub room_size_m: f64,
    pub cluster_radius_m: f64,
    /// Walls crossed per room boundary between two devices.
    pub walls_between_rooms: u32,
    /// Fixed STA placement; by default placement follows the run seed.
    pub placement_seed: Option<u64>,
    /// Explicit positions, indexed like the built device list.
    pub positions: Option<Vec<(f64, f64)>>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            room_size_m: 20.0,
            cluster_radius_m: 5.0,
            walls_between_rooms: 0,
            placement_seed: None,
            positions: None,
        }
    }
}

/// Partial override of a model's default flow parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowOverride {
    pub mean_pkt_bytes: Option<f64>,
    pub mean_iat_us: Option<f64>,
    pub size_dist: Option<DistShape>,
    pub iat_dist: Option<DistShape>,
}

/// Per-model, per-direction overrides: `[traffic.vc.dl]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirOverride {
    pub dl: FlowOverride,
    pub ul: FlowOverride,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficOverrides {
    pub rtmg: DirOverride,
    pub vr: DirOverride,
    pub vc: DirOverride,
    pub background: DirOverride,
}

impl TrafficOverrides {
    pub fn spec(&self, model: TrafficModel, dir: Direction) -> FlowSpec {
        let by_model = match model {
            TrafficModel::RTMG => &self.rtmg,
            TrafficModel::VR => &self.vr,
            TrafficModel::VC => &self.vc,
            TrafficModel::BACKGROUND => &self.background,
        };
        let o = match dir {
            Direction::DL => &by_model.dl,
            Direction::UL => &by_model.ul,
        };
        let mut s = FlowSpec::default_for(model, dir);
        if let Some(v) = o.mean_pkt_bytes {
            s.mean_pkt_bytes = v;
        }
        if let Some(v) = o.mean_iat_us {
            s.mean_iat_us = v;
        }
        if let Some(v) = o.size_dist {
            s.size_dist = v;
        }
        if let Some(v) = o.iat_dist {
            s.iat_dist = v;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub system: System,
    #[serde(default = "default_vc")]
    pub n_vc_stas: usize,
    #[serde(default = "default_n_bss")]
    pub n_bss: usize,
    /// AP indices (0-based BSS numbers) of the coordinating pair.
    #[serde(default)]
    pub mapc_pair: Option<(usize, usize)>,
    #[serde(default)]
    pub info_channel: InfoChannel,
    /// Whether APs outside the pair also trigger UL MU.
    #[serde(default = "yes")]
    pub ul_mu_in_baseline: bool,
    #[serde(default = "default_sim_time")]
    pub sim_time_us: u64,
    #[serde(default = "default_warmup")]
    pub warmup_us: u64,
    #[serde(default = "default_iterations")]
    pub n_iterations: usize,
    #[serde(default)]
    pub topology: TopologyConfig,
    #[serde(default)]
    pub phy: PhyConfig,
    #[serde(default)]
    pub mac: MacConfig,
    #[serde(default)]
    pub edca: EdcaParams,
    #[serde(default)]
    pub traffic: TrafficOverrides,
}

fn default_vc() -> usize {
    2
}
fn default_n_bss() -> usize {
    4
}
fn yes() -> bool {
    true
}
fn default_sim_time() -> u64 {
    5_000_000
}
fn default_warmup() -> u64 {
    250_000
}
fn default_iterations() -> usize {
    50
}

/// Pair used when none is configured: the first two rooms.
pub const DEFAULT_PAIR: (usize, usize) = (0, 1);

impl ScenarioConfig {
    pub fn new(scenario: Scenario, system: System, n_vc_stas: usize) -> Self {
        ScenarioConfig {
            scenario,
            system,
            n_vc_stas,
            n_bss: default_n_bss(),
            mapc_pair: None,
            info_channel: InfoChannel::default(),
            ul_mu_in_baseline: true,
            sim_time_us: default_sim_time(),
            warmup_us: default_warmup(),
            n_iterations: default_iterations(),
            topology: TopologyConfig::default(),
            phy: PhyConfig::default(),
            mac: MacConfig::default(),
            edca: EdcaParams::default(),
            traffic: TrafficOverrides::default(),
        }
    }

    /// Parses and validates TOML text.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let c: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_bss < 2 {
            return Err(invalid("n_bss", "at least two BSSs are needed"));
        }
        if let Some((a, b)) = self.mapc_pair {
            if self.system == System::Uncoordinated {
                return Err(invalid("mapc_pair", "only valid with system = \"coordinated\""));
            }
            if a == b || a >= self.n_bss || b >= self.n_bss {
                return Err(invalid(
                    "mapc_pair",
                    format!("needs two distinct APs below {}", self.n_bss),
                ));
            }
        }
        if self.warmup_us >= self.sim_time_us {
            return Err(invalid("warmup_us", "must be shorter than sim_time_us"));
        }
        if self.n_iterations == 0 {
            return Err(invalid("n_iterations", "must be positive"));
        }
        let t = &self.topology;
        if !(t.room_size_m > 0.0) || !(t.cluster_radius_m >= 0.0) || t.cluster_radius_m > t.room_size_m / 2.0 {
            return Err(invalid("topology", "cluster radius must fit inside the room"));
        }
        if let Some(p) = &t.positions {
            if p.len() != self.n_devices() {
                return Err(invalid(
                    "topology.positions",
                    format!("expected {} positions, got {}", self.n_devices(), p.len()),
                ));
            }
        }
        self.edca.validate().map_err(|m| invalid("edca", m))?;
        for model in [self.scenario.model(), TrafficModel::VC, TrafficModel::BACKGROUND] {
            for dir in [Direction::DL, Direction::UL] {
                self.traffic
                    .spec(model, dir)
                    .validate()
                    .map_err(|e| invalid("traffic", e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn stas_per_bss(&self) -> usize {
        self.n_vc_stas + 2
    }

    pub fn n_devices(&self) -> usize {
        self.n_bss * (1 + self.stas_per_bss())
    }

    /// The designated pair, whether or not it coordinates in this system.
    pub fn pair(&self) -> (usize, usize) {
        self.mapc_pair.unwrap_or(DEFAULT_PAIR)
    }
}

/// Which STA slot a device fills inside its BSS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StaKind {
    Background,
    Vc,
    Ll,
}

/// A built network plus what the builder knows about it.
#[derive(Debug, Clone)]
pub struct BuiltScenario {
    pub network: NetworkConfig,
    pub coordination: bool,
    pub ap_of_bss: Vec<DeviceId>,
    pub sta_kinds: BTreeMap<DeviceId, (usize, StaKind)>,
    pub warnings: Vec<String>,
}

/// Builds devices, positions, power matrix and flows. The same
/// `(config, seed)` always yields the same network.
pub fn build_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<BuiltScenario, ConfigError> {
    cfg.validate()?;
    build_for_system(cfg, cfg.system, seed)
}

/// Builds the network of `cfg` as run by `system`. Both systems share the
/// designated pair, topology and flows; only the coordinated one wires the
/// pair.
pub fn build_for_system(cfg: &ScenarioConfig, system: System, seed: u64) -> Result<BuiltScenario, ConfigError> {
    let t = &cfg.topology;
    let mut devices = Vec::with_capacity(cfg.n_devices());
    let mut ap_of_bss = Vec::with_capacity(cfg.n_bss);
    let mut sta_kinds = BTreeMap::new();
    let mut rng = RngStream::new(t.placement_seed.unwrap_or(seed), stream_id(&[3]));
    for b in 0..cfg.n_bss {
        let centre = ((b as f64 + 0.5) * t.room_size_m, 0.5 * t.room_size_m);
        let ap = DeviceId(devices.len());
        ap_of_bss.push(ap);
        devices.push(DeviceSpec {
            role: Role::Ap,
            bss: b,
            ap,
            position: centre,
        });
        let kinds = std::iter::once(StaKind::Background)
            .chain(std::iter::repeat_n(StaKind::Vc, cfg.n_vc_stas))
            .chain(std::iter::once(StaKind::Ll));
        for kind in kinds {
            // uniform over the disc
            let r = t.cluster_radius_m * rng.gen::<f64>().sqrt();
            let th = TAU * rng.gen::<f64>();
            sta_kinds.insert(DeviceId(devices.len()), (b, kind));
            devices.push(DeviceSpec {
                role: Role::Sta,
                bss: b,
                ap,
                position: (centre.0 + r * th.cos(), centre.1 + r * th.sin()),
            });
        }
    }
    if let Some(p) = &t.positions {
        for (d, &xy) in devices.iter_mut().zip(p) {
            d.position = xy;
        }
    }
    let room = |x: f64| (x / t.room_size_m).floor() as i64;
    let pos: Vec<(f64, f64)> = devices.iter().map(|d| d.position).collect();
    let walls = |a: usize, b: usize| (room(pos[a].0) - room(pos[b].0)).unsigned_abs() as u32 * t.walls_between_rooms;
    let rx_dbm = rx_power_matrix(&pos, walls, &cfg.phy).map_err(|e| invalid("topology", e.to_string()))?;

    let mut flows = Vec::new();
    for (&sta, &(bss, kind)) in &sta_kinds {
        let model = match kind {
            StaKind::Background => TrafficModel::BACKGROUND,
            StaKind::Vc => TrafficModel::VC,
            StaKind::Ll => cfg.scenario.model(),
        };
        let ap = ap_of_bss[bss];
        for (dir, s, d) in [(Direction::DL, ap, sta), (Direction::UL, sta, ap)] {
            flows.push(FlowDef {
                spec: cfg.traffic.spec(model, dir),
                source: s,
                destination: d,
                bss,
            });
        }
    }

    let (a, b) = cfg.pair();
    let coordination = system == System::Coordinated;
    let mut warnings = Vec::new();
    let (pa, pb) = (ap_of_bss[a], ap_of_bss[b]);
    let weakest = rx_dbm[pa.0][pb.0].min(rx_dbm[pb.0][pa.0]);
    if weakest < cfg.phy.pd_threshold_dbm {
        let w = format!(
            "paired APs {pa} and {pb} do not detect each other ({weakest:.1} dBm < PD {} dBm)",
            cfg.phy.pd_threshold_dbm
        );
        log::warn!("{w}");
        warnings.push(w);
    }
    let mapc = if coordination {
        let bss_of = |d: DeviceId| devices[d.0].bss;
        Some(MapcPair::new(pa, pb, bss_of, cfg.info_channel).map_err(|e| invalid("mapc_pair", e.to_string()))?)
    } else {
        None
    };
    let network = NetworkConfig {
        phy: cfg.phy.clone(),
        mac: cfg.mac.clone(),
        edca: cfg.edca,
        devices,
        flows,
        rx_dbm,
        mapc,
        co_bss: vec![a, b],
        ul_mu_in_baseline: cfg.ul_mu_in_baseline,
        sim_time: SimTime::from_us(cfg.sim_time_us),
        warmup: SimTime::from_us(cfg.warmup_us),
    };
    network.validate().map_err(|e| invalid("network", e.to_string()))?;
    Ok(BuiltScenario {
        network,
        coordination,
        ap_of_bss,
        sta_kinds,
        warnings,
    })
}
