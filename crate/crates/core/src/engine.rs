//! Deterministic discrete-event kernel: virtual clock, ordered event queue
//! and seeded random streams.
//!
//! Events fire in nondecreasing time order. Events scheduled for the same
//! instant fire in the order they were scheduled.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in integer nanoseconds. Used for both instants and spans.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_ns(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_us(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000_000)
    }

    /// Rounds to the nearest nanosecond; negative inputs clamp to zero.
    pub fn from_us_f64(us: f64) -> Self {
        SimTime((us * 1_000.0).round().max(0.0) as u64)
    }

    pub const fn as_ns(self) -> u64 {
        self.0
    }

    pub fn as_us_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

    pub fn checked_sub(self, rhs: SimTime) -> Option<SimTime> {
        self.0.checked_sub(rhs.0).map(SimTime)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, k: u64) -> SimTime {
        SimTime(self.0 * k)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_sub(rhs.0).expect("simulated time subtraction underflow"))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}us", self.as_us_f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("causality violation: event at {at} scheduled while clock is at {now}")]
    Causality { at: SimTime, now: SimTime },
}

/// Handle returned by [`EventQueue::schedule`]; allows cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle {
    time: SimTime,
    seq: u64,
}

impl EventHandle {
    pub fn fire_time(&self) -> SimTime {
        self.time
    }
}

/// Time-ordered queue with FIFO tiebreak and O(log n) cancellation.
#[derive(Debug, Clone)]
pub struct EventQueue<E> {
    pending: BTreeMap<(SimTime, u64), E>,
    now: SimTime,
    next_seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            pending: BTreeMap::new(),
            now: SimTime::ZERO,
            next_seq: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn schedule(&mut self, at: SimTime, payload: E) -> Result<EventHandle, EngineError> {
        if at < self.now {
            return Err(EngineError::Causality { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert((at, seq), payload);
        Ok(EventHandle { time: at, seq })
    }

    /// Schedules `delay` after the current instant. Never violates causality.
    pub fn schedule_in(&mut self, delay: SimTime, payload: E) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, payload)
            .expect("relative schedule cannot precede now")
    }

    /// Returns true iff the event was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.pending.remove(&(handle.time, handle.seq)).is_some()
    }

    pub fn is_pending(&self, handle: EventHandle) -> bool {
        self.pending.contains_key(&(handle.time, handle.seq))
    }

    pub fn peek(&self) -> Option<(SimTime, &E)> {
        self.pending.iter().next().map(|(&(t, _), e)| (t, e))
    }

    /// Pops the earliest event if it fires at or before `until`, advancing
    /// the clock to its fire time.
    pub fn pop_until(&mut self, until: SimTime) -> Option<(SimTime, E)> {
        let (&(t, _), _) = self.pending.iter().next()?;
        if t > until {
            return None;
        }
        let ((t, _), e) = self.pending.pop_first()?;
        self.now = t;
        Some((t, e))
    }

    /// Moves the clock forward without firing anything.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Fires every event with `fire_time <= t_end` through `handler`, then
    /// leaves the clock at `t_end`. Returns the number of events fired.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut EventQueue<E>, SimTime, E),
    {
        let mut fired = 0;
        while let Some((t, e)) = self.pop_until(t_end) {
            handler(self, t, e);
            fired += 1;
        }
        self.advance_to(t_end);
        fired
    }
}

/// Reproducible random stream keyed by `(seed, stream_id)`.
///
/// Streams are independent ChaCha8 streams over the same key, so adding a
/// device never shifts the draws of another.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Stable stream identifier from a label tuple (splitmix64 mixing).
pub fn stream_id(labels: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &l in labels {
        h ^= l.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
