//! Simulated UWB two-way ranging: payload format, link model, pair scheduling and a
//! discrete-event network that produces range samples with drops and gaps.

use std::io::{self, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Current payload version.
pub const WIRE_VERSION: u8 = 1;

/// Encoded frame size in bytes.
pub const FRAME_LEN: usize = 39;

/// Byte layout (little-endian):
///
/// | offset | size | field |
/// |-------:|-----:|-------|
/// | 0  | 1 | version |
/// | 1  | 1 | sender_id |
/// | 2  | 4 | sequence (u32) |
/// | 6  | 4 | vx (f32) |
/// | 10 | 4 | vy (f32) |
/// | 14 | 4 | ax (f32) |
/// | 18 | 4 | ay (f32) |
/// | 22 | 4 | yaw_rate (f32) |
/// | 26 | 4 | height (f32) |
/// | 30 | 8 | timestamp_us (u64) |
/// | 38 | 1 | XOR of bytes 1..38 |
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangingMessage {
    pub version: u8,
    pub sender_id: u8,
    pub sequence: u32,
    pub vx: f32,
    pub vy: f32,
    pub ax: f32,
    pub ay: f32,
    pub yaw_rate: f32,
    pub height: f32,
    pub timestamp_us: u64,
}

impl Default for RangingMessage {
    fn default() -> Self {
        Self {
            version: WIRE_VERSION,
            sender_id: 0,
            sequence: 0,
            vx: 0.0,
            vy: 0.0,
            ax: 0.0,
            ay: 0.0,
            yaw_rate: 0.0,
            height: 0.0,
            timestamp_us: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("frame is {got} bytes, expected {FRAME_LEN}")]
    Length { got: usize },
    #[error("unknown payload version {0}")]
    Version(u8),
    #[error("checksum mismatch: frame says {stored:#04x}, computed {computed:#04x}")]
    Checksum { stored: u8, computed: u8 },
}

fn checksum(bytes: &[u8]) -> u8 {
    bytes[1..FRAME_LEN - 1].iter().fold(0, |acc, b| acc ^ b)
}

pub fn encode_message(m: &RangingMessage) -> [u8; FRAME_LEN] {
    let mut b = [0u8; FRAME_LEN];
    b[0] = m.version;
    b[1] = m.sender_id;
    b[2..6].copy_from_slice(&m.sequence.to_le_bytes());
    let floats = [m.vx, m.vy, m.ax, m.ay, m.yaw_rate, m.height];
    for (i, f) in floats.iter().enumerate() {
        let at = 6 + 4 * i;
        b[at..at + 4].copy_from_slice(&f.to_le_bytes());
    }
    b[30..38].copy_from_slice(&m.timestamp_us.to_le_bytes());
    b[38] = checksum(&b);
    b
}

pub fn decode_message(bytes: &[u8]) -> Result<RangingMessage, WireError> {
    if bytes.len() != FRAME_LEN {
        return Err(WireError::Length { got: bytes.len() });
    }
    if bytes[0] != WIRE_VERSION {
        return Err(WireError::Version(bytes[0]));
    }
    let computed = checksum(bytes);
    if computed != bytes[38] {
        return Err(WireError::Checksum {
            stored: bytes[38],
            computed,
        });
    }
    let f =
        |at: usize| f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
    let mut ts = [0u8; 8];
    ts.copy_from_slice(&bytes[30..38]);
    Ok(RangingMessage {
        version: bytes[0],
        sender_id: bytes[1],
        sequence: u32::from_le_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]),
        vx: f(6),
        vy: f(10),
        ax: f(14),
        ay: f(18),
        yaw_rate: f(22),
        height: f(26),
        timestamp_us: u64::from_le_bytes(ts),
    })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RangingError {
    #[error("invalid link model: {0}")]
    InvalidLink(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("true range must be finite and ≥ 0, got {0}")]
    InvalidRange(f64),
    #[error("agent {0} is outside the schedule")]
    UnknownAgent(u8),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    /// Standard deviation of the additive range error (m).
    pub range_sigma: f64,
    /// Probability that one exchange is lost.
    pub drop_probability: f64,
    /// Pair exchange rate with two agents (Hz).
    pub nominal_rate: f64,
    /// Upper end of a stalled interval (s).
    pub max_gap_clamp: f64,
    /// Probability that the next interval is stalled.
    pub burst_probability: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            range_sigma: 0.15,
            drop_probability: 0.02,
            nominal_rate: 25.0,
            max_gap_clamp: 0.47,
            burst_probability: 0.01,
        }
    }
}

impl LinkModel {
    pub fn ideal(nominal_rate: f64) -> Self {
        Self {
            range_sigma: 0.0,
            drop_probability: 0.0,
            nominal_rate,
            max_gap_clamp: 2.0 / nominal_rate,
            burst_probability: 0.0,
        }
    }

    pub fn nominal_interval(&self) -> f64 {
        1.0 / self.nominal_rate
    }

    pub fn validate(&self) -> Result<(), RangingError> {
        let bad = |msg: String| Err(RangingError::InvalidLink(msg));
        if !(self.range_sigma >= 0.0 && self.range_sigma.is_finite()) {
            return bad(format!("range_sigma must be ≥ 0, got {}", self.range_sigma));
        }
        if !(0.0..1.0).contains(&self.drop_probability) {
            return bad(format!(
                "drop_probability must be in [0, 1), got {}",
                self.drop_probability
            ));
        }
        if !(0.0..=1.0).contains(&self.burst_probability) {
            return bad(format!(
                "burst_probability must be in [0, 1], got {}",
                self.burst_probability
            ));
        }
        if !(self.nominal_rate > 0.0 && self.nominal_rate.is_finite()) {
            return bad(format!(
                "nominal_rate must be > 0, got {}",
                self.nominal_rate
            ));
        }
        if self.burst_probability > 0.0 && self.max_gap_clamp < 2.0 * self.nominal_interval() {
            return bad(format!(
                "max_gap_clamp {} is below twice the nominal interval",
                self.max_gap_clamp
            ));
        }
        Ok(())
    }

    /// Mean of the interval distribution drawn by [`gap_injector`].
    pub fn mean_interval(&self, nominal: f64) -> f64 {
        let p = self.burst_probability;
        (1.0 - p) * nominal + p * 0.5 * (2.0 * nominal + self.max_gap_clamp.max(2.0 * nominal))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TwrOutcome {
    Range(f64),
    Dropped,
}

impl TwrOutcome {
    pub fn range(&self) -> Option<f64> {
        match self {
            TwrOutcome::Range(r) => Some(*r),
            TwrOutcome::Dropped => None,
        }
    }
}

/// One two-way ranging exchange.
pub fn twr_round<R: Rng + ?Sized>(
    link: &LinkModel,
    true_range: f64,
    rng: &mut R,
) -> Result<TwrOutcome, RangingError> {
    if !(true_range >= 0.0 && true_range.is_finite()) {
        return Err(RangingError::InvalidRange(true_range));
    }
    if link.drop_probability > 0.0 && rng.random::<f64>() < link.drop_probability {
        return Ok(TwrOutcome::Dropped);
    }
    let z: f64 = rng.sample(StandardNormal);
    Ok(TwrOutcome::Range(true_range + link.range_sigma * z))
}

/// Interval to the next slot given its nominal length: nominal, or with probability
/// `burst_probability` uniform in `[2·nominal, max_gap_clamp]`.
pub fn gap_with_nominal<R: Rng + ?Sized>(link: &LinkModel, nominal: f64, rng: &mut R) -> f64 {
    if link.burst_probability > 0.0 && rng.random::<f64>() < link.burst_probability {
        let hi = link.max_gap_clamp.max(2.0 * nominal);
        rng.random_range(2.0 * nominal..=hi)
    } else {
        nominal
    }
}

/// Interval to the next exchange of a two-agent link.
pub fn gap_injector<R: Rng + ?Sized>(link: &LinkModel, rng: &mut R) -> f64 {
    gap_with_nominal(link, link.nominal_interval(), rng)
}

/// Order in which agent pairs take their turn within one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SlotOrdering {
    /// (0,1), (0,2), …, (1,2), …
    #[default]
    Lexicographic,
    /// Round-robin tournament order, so consecutive slots share as few agents as possible.
    Spread,
}

/// Extra pair interval per additional agent, as a fraction of the two-agent interval.
/// Calibrated so that 25 Hz with two agents becomes 16 Hz with three.
pub const PER_AGENT_OVERHEAD: f64 = 0.5625;

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub n_agents: u8,
    pub ordering: SlotOrdering,
}

impl ScheduleConfig {
    pub fn new(n_agents: u8, ordering: SlotOrdering) -> Result<Self, RangingError> {
        if n_agents < 2 {
            return Err(RangingError::InvalidSchedule(format!(
                "need at least 2 agents, got {n_agents}"
            )));
        }
        Ok(Self { n_agents, ordering })
    }

    pub fn n_pairs(&self) -> usize {
        let n = self.n_agents as usize;
        n * (n - 1) / 2
    }

    /// Time between two exchanges of the same pair.
    pub fn pair_interval(&self, link: &LinkModel) -> f64 {
        link.nominal_interval() * (1.0 + PER_AGENT_OVERHEAD * (self.n_agents as f64 - 2.0))
    }

    /// Nominal length of one slot.
    pub fn slot_interval(&self, link: &LinkModel) -> f64 {
        self.pair_interval(link) / self.n_pairs() as f64
    }

    /// All pairs of one cycle, in slot order.
    pub fn cycle(&self) -> Vec<(u8, u8)> {
        let n = self.n_agents;
        match self.ordering {
            SlotOrdering::Lexicographic => (0..n)
                .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
                .collect(),
            SlotOrdering::Spread => {
                // circle method; a phantom agent pads odd counts
                let m = if n.is_multiple_of(2) { n } else { n + 1 };
                let mut ring: Vec<u8> = (0..m).collect();
                let mut out = Vec::new();
                for _ in 0..m - 1 {
                    for k in 0..(m / 2) as usize {
                        let (a, b) = (ring[k], ring[m as usize - 1 - k]);
                        if a < n && b < n {
                            out.push((a.min(b), a.max(b)));
                        }
                    }
                    ring[1..].rotate_right(1);
                }
                out
            }
        }
    }
}

/// Pair that owns slot `slot` (0-based, counted from the start of the simulation).
pub fn schedule_step(sched: &ScheduleConfig, slot: u64) -> (u8, u8) {
    let cycle = sched.cycle();
    cycle[(slot % cycle.len() as u64) as usize]
}

/// One scheduled exchange and what came of it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExchangeEvent {
    pub t: f64,
    pub initiator: u8,
    pub responder: u8,
    pub outcome: TwrOutcome,
}

pub const TRACE_CSV_HEADER: &str = "t,initiator,responder,range_m,dropped";

pub fn write_trace_csv<W: Write>(mut out: W, events: &[ExchangeEvent]) -> io::Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for e in events {
        match e.outcome {
            TwrOutcome::Range(r) => {
                writeln!(out, "{:.6},{},{},{:.6},0", e.t, e.initiator, e.responder, r)?
            }
            TwrOutcome::Dropped => writeln!(out, "{:.6},{},{},,1", e.t, e.initiator, e.responder)?,
        }
    }
    Ok(())
}

/// Single-threaded event loop over the shared ranging channel.
///
/// The channel serves one pair per slot. A stalled slot delays every later exchange.
#[derive(Debug, Clone)]
pub struct NetworkSimulator {
    pub schedule: ScheduleConfig,
    pub link: LinkModel,
    rng: ChaCha8Rng,
    next_time: f64,
    slot: u64,
    sequence: Vec<u32>,
}

impl NetworkSimulator {
    pub fn new(
        schedule: ScheduleConfig,
        link: LinkModel,
        rng: ChaCha8Rng,
    ) -> Result<Self, RangingError> {
        link.validate()?;
        let n = schedule.n_agents as usize;
        let first = schedule.slot_interval(&link);
        Ok(Self {
            schedule,
            link,
            rng,
            next_time: first,
            slot: 0,
            sequence: vec![0; n],
        })
    }

    /// Shifts the schedule so the first exchange happens one slot after `t0`.
    pub fn starting_at(mut self, t0: f64) -> Self {
        self.next_time = t0 + self.schedule.slot_interval(&self.link);
        self
    }

    /// Time of the next pending exchange.
    pub fn next_time(&self) -> f64 {
        self.next_time
    }

    /// Pops the pending exchange. `true_range(t, a, b)` supplies the geometry.
    pub fn pop<F>(&mut self, mut true_range: F) -> Result<ExchangeEvent, RangingError>
    where
        F: FnMut(f64, u8, u8) -> f64,
    {
        let t = self.next_time;
        let (initiator, responder) = schedule_step(&self.schedule, self.slot);
        let outcome = twr_round(
            &self.link,
            true_range(t, initiator, responder),
            &mut self.rng,
        )?;
        let nominal = self.schedule.slot_interval(&self.link);
        self.next_time = t + gap_with_nominal(&self.link, nominal, &mut self.rng);
        self.slot += 1;
        Ok(ExchangeEvent {
            t,
            initiator,
            responder,
            outcome,
        })
    }

    /// All exchanges with time ≤ `t_end`.
    pub fn run_until<F>(
        &mut self,
        t_end: f64,
        mut true_range: F,
    ) -> Result<Vec<ExchangeEvent>, RangingError>
    where
        F: FnMut(f64, u8, u8) -> f64,
    {
        let mut out = Vec::new();
        while self.next_time <= t_end {
            out.push(self.pop(&mut true_range)?);
        }
        Ok(out)
    }

    /// Stamps a fresh sequence number on a message from `sender`.
    pub fn stamp(&mut self, mut msg: RangingMessage) -> Result<RangingMessage, RangingError> {
        let seq = self
            .sequence
            .get_mut(msg.sender_id as usize)
            .ok_or(RangingError::UnknownAgent(msg.sender_id))?;
        msg.sequence = *seq;
        *seq = seq.wrapping_add(1);
        Ok(msg)
    }
}
