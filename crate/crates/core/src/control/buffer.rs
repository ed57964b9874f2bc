//! Time-stamped history of what the follower knew, with interpolation and the integrals needed
//! to refer old relative positions to the current body frame.

use std::collections::VecDeque;

use super::ControlError;
use crate::geometry::{rotation_2d, wrap_angle, Vec2};

/// One entry of the follower's history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelaySample {
    pub t: f64,
    /// Estimated position of the leader in the follower's horizontal frame.
    pub p_hat: Vec2,
    /// Estimated heading difference leader − follower.
    pub delta_psi_hat: f64,
    /// Follower velocity in its own horizontal frame.
    pub v1: Vec2,
    pub r1: f64,
    /// Leader velocity, acceleration and yaw rate in the leader's horizontal frame.
    pub v2: Vec2,
    pub a2: Vec2,
    pub r2: f64,
}

impl DelaySample {
    fn lerp(&self, other: &DelaySample, t: f64) -> DelaySample {
        let w = if other.t > self.t {
            (t - self.t) / (other.t - self.t)
        } else {
            0.0
        };
        let mix = |a: f64, b: f64| a + (b - a) * w;
        let mixv = |a: Vec2, b: Vec2| a + (b - a) * w;
        DelaySample {
            t,
            p_hat: mixv(self.p_hat, other.p_hat),
            delta_psi_hat: wrap_angle(
                self.delta_psi_hat + wrap_angle(other.delta_psi_hat - self.delta_psi_hat) * w,
            ),
            v1: mixv(self.v1, other.v1),
            r1: mix(self.r1, other.r1),
            v2: mixv(self.v2, other.v2),
            a2: mixv(self.a2, other.a2),
            r2: mix(self.r2, other.r2),
        }
    }
}

/// Ring of samples covering at least `horizon` seconds back from the newest one.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayBuffer {
    samples: VecDeque<DelaySample>,
    pub horizon: f64,
}

impl DelayBuffer {
    pub fn new(horizon: f64) -> Result<Self, ControlError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ControlError::InvalidConfig(format!(
                "buffer horizon must be > 0, got {horizon}"
            )));
        }
        Ok(Self {
            samples: VecDeque::new(),
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn oldest(&self) -> Option<f64> {
        self.samples.front().map(|s| s.t)
    }

    pub fn newest(&self) -> Option<f64> {
        self.samples.back().map(|s| s.t)
    }

    /// Appends a sample and forgets whatever is older than the horizon requires.
    pub fn push(&mut self, sample: DelaySample) -> Result<(), ControlError> {
        if let Some(last) = self.newest() {
            if !(sample.t > last) {
                return Err(ControlError::NonMonotonicTime {
                    last,
                    got: sample.t,
                });
            }
        }
        self.samples.push_back(sample);
        let cutoff = sample.t - self.horizon;
        // keep one sample at or before the cutoff so the window stays bracketed
        while self.samples.len() > 2 && self.samples[1].t <= cutoff {
            self.samples.pop_front();
        }
        Ok(())
    }

    pub fn covers(&self, t1: f64, t2: f64) -> bool {
        match (self.oldest(), self.newest()) {
            (Some(a), Some(b)) => t1 >= a && t2 <= b && t1 <= t2,
            _ => false,
        }
    }

    fn check(&self, t1: f64, t2: f64) -> Result<(), ControlError> {
        if self.covers(t1, t2) {
            Ok(())
        } else {
            Err(ControlError::OutOfHorizon {
                t1,
                t2,
                oldest: self.oldest().unwrap_or(f64::NAN),
                newest: self.newest().unwrap_or(f64::NAN),
            })
        }
    }

    /// Index of the last sample with time ≤ t.
    fn bracket(&self, t: f64) -> usize {
        let idx = self.samples.partition_point(|s| s.t <= t);
        idx.saturating_sub(1)
    }

    /// Linearly interpolated sample at time `t`.
    pub fn at(&self, t: f64) -> Result<DelaySample, ControlError> {
        self.check(t, t)?;
        let i = self.bracket(t);
        let a = &self.samples[i];
        Ok(match self.samples.get(i + 1) {
            Some(b) => a.lerp(b, t),
            None => DelaySample { t, ..*a },
        })
    }

    /// Samples in `[t1, t2]` with interpolated end points.
    fn window(&self, t1: f64, t2: f64) -> Result<Vec<DelaySample>, ControlError> {
        self.check(t1, t2)?;
        let mut out = vec![self.at(t1)?];
        let start = self.bracket(t1) + 1;
        out.extend(
            self.samples
                .iter()
                .skip(start)
                .take_while(|s| s.t < t2)
                .copied(),
        );
        if t2 > t1 {
            out.push(self.at(t2)?);
        }
        Ok(out)
    }
}

/// Own heading change `∫ r1 dt` from `t1` to `t2` (trapezoidal).
pub fn heading_change_integral(
    buffer: &DelayBuffer,
    t1: f64,
    t2: f64,
) -> Result<f64, ControlError> {
    let w = buffer.window(t1, t2)?;
    Ok(w.windows(2)
        .map(|s| 0.5 * (s[0].r1 + s[1].r1) * (s[1].t - s[0].t))
        .sum())
}

/// Own displacement from `t1` to `t2` expressed in the horizontal frame at `t1`.
pub fn displacement_integral(buffer: &DelayBuffer, t1: f64, t2: f64) -> Result<Vec2, ControlError> {
    let w = buffer.window(t1, t2)?;
    let mut heading = 0.0;
    let mut prev = w[0].v1;
    let mut out = Vec2::zeros();
    for s in w.windows(2) {
        let dt = s[1].t - s[0].t;
        heading += 0.5 * (s[0].r1 + s[1].r1) * dt;
        let next = rotation_2d(heading) * s[1].v1;
        out += (prev + next) * (0.5 * dt);
        prev = next;
    }
    Ok(out)
}

/// Quantities the controller needs at time `t_n`, referred to the current body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayedState {
    /// Vector from the follower to the leader's position `τ` ago, current frame.
    pub e: Vec2,
    /// Heading difference between the leader at `t_n − τ` and the follower now.
    pub delta_psi_bar: f64,
    pub v2_bar: Vec2,
    pub a2_bar: Vec2,
    pub r2_bar: f64,
    pub v1: Vec2,
    pub r1: f64,
}

/// `e = R(−∫r1)·(p(t_n − τ) − Δp)`.
pub fn delayed_error(
    buffer: &DelayBuffer,
    t_n: f64,
    tau: f64,
) -> Result<DelayedState, ControlError> {
    let t_old = t_n - tau;
    if !buffer.covers(t_old, t_n) {
        return Err(ControlError::WarmingUp {
            needed: tau,
            available: buffer
                .newest()
                .zip(buffer.oldest())
                .map_or(0.0, |(b, a)| b - a),
        });
    }
    let old = buffer.at(t_old)?;
    let now = buffer.at(t_n)?;
    let turn = heading_change_integral(buffer, t_old, t_n)?;
    let dp = displacement_integral(buffer, t_old, t_n)?;
    Ok(DelayedState {
        e: rotation_2d(-turn) * (old.p_hat - dp),
        delta_psi_bar: wrap_angle(old.delta_psi_hat - turn),
        v2_bar: old.v2,
        a2_bar: old.a2,
        r2_bar: old.r2,
        v1: now.v1,
        r1: now.r1,
    })
}
