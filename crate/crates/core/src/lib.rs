//! Discrete-event simulator of co-channel Wi-Fi BSSs in which one pair of
//! APs shares TXOPs for low-latency traffic (Co-TDMA).
//!
//! A run is built from a [`scenario::ScenarioConfig`] and a seed and is
//! fully deterministic. [`experiment`] sweeps congestion levels over the
//! coordinated and uncoordinated systems on paired seeds and writes the
//! reports; [`analytic`] decomposes the sharing AP's access interval.
//!
//! ```
//! use std::sync::Arc;
//! use cotdma::scenario::{build_scenario, Scenario, ScenarioConfig, System};
//! use cotdma::sim::Simulator;
//! use cotdma::trace::TraceOptions;
//!
//! let mut cfg = ScenarioConfig::new(Scenario::RTMG, System::Coordinated, 2);
//! cfg.sim_time_us = 200_000;
//! cfg.warmup_us = 20_000;
//! let built = build_scenario(&cfg, 1).unwrap();
//! let out = Simulator::new(Arc::new(built.network), 1, true, TraceOptions::default())
//!     .unwrap()
//!     .run();
//! assert!(out.counters.txops > 0);
//! ```

// NaN-rejecting guards are written as `!(x >= 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod engine;
pub mod experiment;
pub mod mac;
pub mod mapc;
pub mod metrics;
pub mod phy;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod traffic;
pub mod types;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/coordination.md")]
    mod coordination {}
    #[doc = include_str!("../../../book/src/outputs.md")]
    mod outputs {}
    #[doc = include_str!("../../../book/src/gain.md")]
    mod gain {}
    #[doc = include_str!("../../../book/src/library.md")]
    mod library {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
