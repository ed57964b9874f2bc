//! Delayed-trajectory leader following: the follower steers towards where the leader was
//! `τ` seconds ago, using only body-frame quantities and the relative-position estimate.

mod buffer;
mod closed_loop;

pub use buffer::{
    delayed_error, displacement_integral, heading_change_integral, DelayBuffer, DelaySample,
    DelayedState,
};
pub use closed_loop::{
    run_leader_follower, FollowerOutcome, FollowerSetup, FollowerStatus, InitialHistory,
    LeaderFollowerResult, LeaderFollowerSetup, OwnSensing, TrackingRow, TRACKING_CSV_HEADER,
};

use thiserror::Error;

use crate::geometry::{rotation_2d, rotation_2d_derivative, skew_2d, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("query [{t1}, {t2}] outside buffered history [{oldest}, {newest}]")]
    OutOfHorizon {
        t1: f64,
        t2: f64,
        oldest: f64,
        newest: f64,
    },
    #[error("history covers {available:.2} s of the {needed:.2} s delay")]
    WarmingUp { needed: f64, available: f64 },
    #[error("sample time {got} is not after {last}")]
    NonMonotonicTime { last: f64, got: f64 },
    #[error("time step must be > 0, got {0}")]
    InvalidTimeStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    /// Delay `τ` behind the leader (s).
    pub tau_delay: f64,
    pub kp: f64,
    pub kd: f64,
    /// First-order velocity time constants per body axis (s).
    pub tau_plant: Vec2,
    /// Command norm limit (m/s).
    pub v_max: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            tau_delay: 4.0,
            kp: 1.0,
            kd: 2.0,
            tau_plant: Vec2::new(0.5, 0.5),
            v_max: 1.5,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ControlError::InvalidConfig(format!(
                    "{name} must be > 0, got {v}"
                )))
            }
        };
        positive("tau_delay", self.tau_delay)?;
        positive("kp", self.kp)?;
        positive("kd", self.kd)?;
        positive("tau_plant.x", self.tau_plant.x)?;
        positive("tau_plant.y", self.tau_plant.y)?;
        positive("v_max", self.v_max)
    }

    /// Diagonal of `D⁻¹ = −diag(τx, τy)`.
    pub fn d_inverse(&self) -> Vec2 {
        -self.tau_plant
    }
}

/// Output of one evaluation of the control law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NdiOutput {
    /// Velocity command before saturation, body frame.
    pub command: Vec2,
    pub e_dot: Vec2,
    /// Virtual input `i = −Kp e − Kd ė`.
    pub virtual_input: Vec2,
}

/// Model rate of the tracking error: `ė = −v1 + R̄ v̄2 − S1 e`.
pub fn error_rate(x: &DelayedState) -> Vec2 {
    -x.v1 + rotation_2d(x.delta_psi_bar) * x.v2_bar - skew_2d(x.r1) * x.e
}

/// Dynamic-inversion velocity command that makes `ë = −Kp e − Kd ė`.
pub fn ndi_control(x: &DelayedState, config: &ControllerConfig) -> NdiOutput {
    let e_dot = error_rate(x);
    let virtual_input = -x.e * config.kp - e_dot * config.kd;
    let r_bar = rotation_2d(x.delta_psi_bar);
    let dr_bar = rotation_2d_derivative(x.delta_psi_bar);
    let tau_inv = Vec2::new(1.0 / config.tau_plant.x, 1.0 / config.tau_plant.y);
    let b = -skew_2d(x.r1) * e_dot
        + dr_bar * x.v2_bar * (x.r2_bar - x.r1)
        + x.v1.component_mul(&tau_inv)
        + r_bar * (x.a2_bar - skew_2d(x.r2_bar) * x.v2_bar);
    let command = (virtual_input - b).component_mul(&config.d_inverse());
    NdiOutput {
        command,
        e_dot,
        virtual_input,
    }
}

/// Scales `v` down to norm `v_max` if it is longer; direction is kept.
pub fn saturate_command(v: Vec2, v_max: f64) -> Vec2 {
    let n = v.norm();
    if n > v_max {
        v * (v_max / n)
    } else {
        v
    }
}

/// Simulated follower: first-order velocity lag in its own horizontal frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowerPlant {
    /// Inertial position.
    pub position: Vec2,
    /// Velocity in the follower's horizontal frame.
    pub velocity: Vec2,
    pub heading: f64,
    /// Held constant over each step.
    pub yaw_rate: f64,
    pub tau_plant: Vec2,
}

impl FollowerPlant {
    pub fn at_rest(position: Vec2, heading: f64, tau_plant: Vec2) -> Self {
        Self {
            position,
            velocity: Vec2::zeros(),
            heading,
            yaw_rate: 0.0,
            tau_plant,
        }
    }

    /// Body-frame acceleration input `a1 = v̇ + S1 v` for a command held at `command`.
    pub fn acceleration(&self, command: Vec2) -> Vec2 {
        let v_dot = (command - self.velocity).component_div(&self.tau_plant);
        v_dot + skew_2d(self.yaw_rate) * self.velocity
    }

    pub fn inertial_velocity(&self) -> Vec2 {
        rotation_2d(self.heading) * self.velocity
    }
}

/// Advances the plant by `dt` with the command held, using the exact solution of the lag.
pub fn follower_plant_step(
    plant: &FollowerPlant,
    command: Vec2,
    dt: f64,
) -> Result<FollowerPlant, ControlError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(ControlError::InvalidTimeStep(dt));
    }
    let decay = Vec2::new(
        (-dt / plant.tau_plant.x).exp(),
        (-dt / plant.tau_plant.y).exp(),
    );
    let gap = plant.velocity - command;
    let velocity = command + gap.component_mul(&decay);
    // ∫ v dt over the step, body frame
    let travelled = command * dt
        + gap
            .component_mul(&(Vec2::repeat(1.0) - decay))
            .component_mul(&plant.tau_plant);
    let mid_heading = plant.heading + 0.5 * plant.yaw_rate * dt;
    Ok(FollowerPlant {
        position: plant.position + rotation_2d(mid_heading) * travelled,
        velocity,
        heading: plant.heading + plant.yaw_rate * dt,
        ..*plant
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn delayed(e: Vec2, dpsi: f64, v1: Vec2, r1: f64, v2: Vec2, a2: Vec2, r2: f64) -> DelayedState {
        DelayedState {
            e,
            delta_psi_bar: dpsi,
            v2_bar: v2,
            a2_bar: a2,
            r2_bar: r2,
            v1,
            r1,
        }
    }

    #[test]
    fn equilibrium_gives_zero_command() {
        let x = delayed(
            Vec2::zeros(),
            0.3,
            Vec2::zeros(),
            0.0,
            Vec2::zeros(),
            Vec2::zeros(),
            0.0,
        );
        let out = ndi_control(&x, &ControllerConfig::default());
        assert_eq!(out.command, Vec2::zeros());
    }

    #[test]
    fn d_inverse_of_default_plant() {
        assert_eq!(
            ControllerConfig::default().d_inverse(),
            Vec2::new(-0.5, -0.5)
        );
    }

    #[test]
    fn config_validation() {
        assert!(ControllerConfig::default().validate().is_ok());
        let bad = ControllerConfig {
            kd: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ControllerConfig {
            tau_plant: Vec2::new(0.5, -1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn saturation_examples() {
        assert_eq!(
            saturate_command(Vec2::new(0.3, 0.4), 1.5),
            Vec2::new(0.3, 0.4)
        );
        assert_eq!(
            saturate_command(Vec2::new(3.0, 0.0), 1.5),
            Vec2::new(1.5, 0.0)
        );
        let s = saturate_command(Vec2::new(3.0, 4.0), 1.5);
        assert!((s - Vec2::new(0.9, 1.2)).norm() < 1e-12);
    }

    #[test]
    fn plant_holds_velocity_at_equilibrium() {
        let mut p = FollowerPlant::at_rest(Vec2::zeros(), 0.2, Vec2::new(0.5, 0.5));
        p.velocity = Vec2::new(0.7, -0.2);
        let next = follower_plant_step(&p, p.velocity, 0.1).unwrap();
        assert!((next.velocity - p.velocity).norm() < 1e-15);
        assert!(follower_plant_step(&p, p.velocity, 0.0).is_err());
    }

    #[test]
    fn plant_step_response_is_exponential() {
        let tau = Vec2::new(0.5, 0.8);
        let mut p = FollowerPlant::at_rest(Vec2::zeros(), 0.0, tau);
        let c = Vec2::new(1.0, -2.0);
        let dt = 0.01;
        for k in 1..=300 {
            p = follower_plant_step(&p, c, dt).unwrap();
            let t = k as f64 * dt;
            let expected = Vec2::new(
                c.x * (1.0 - (-t / tau.x).exp()),
                c.y * (1.0 - (-t / tau.y).exp()),
            );
            assert!((p.velocity - expected).norm() < 1e-9);
            // position is the integral of the response
            let pos = Vec2::new(
                c.x * (t - tau.x * (1.0 - (-t / tau.x).exp())),
                c.y * (t - tau.y * (1.0 - (-t / tau.y).exp())),
            );
            assert!((p.position - pos).norm() < 1e-9);
        }
    }

    #[test]
    fn small_steps_match_euler_to_first_order() {
        let mut p = FollowerPlant::at_rest(Vec2::new(1.0, 2.0), 0.4, Vec2::new(0.5, 0.5));
        p.velocity = Vec2::new(0.3, 0.1);
        p.yaw_rate = 0.2;
        let c = Vec2::new(1.0, 0.5);
        let gap = |dt: f64| {
            let exact = follower_plant_step(&p, c, dt).unwrap();
            let euler_v = p.velocity + (c - p.velocity).component_div(&p.tau_plant) * dt;
            (exact.velocity - euler_v).norm()
        };
        // the difference is second order, so halving dt quarters it
        let ratio = gap(1e-3) / gap(5e-4);
        assert!((ratio - 4.0).abs() < 0.05, "{ratio}");
    }

    /// Rate of the full delayed state under the plant model, for finite differencing.
    fn propagate(x: &DelayedState, cmd: Vec2, tau: Vec2, h: f64) -> DelayedState {
        let v1_dot = (cmd - x.v1).component_div(&tau);
        let e_dot = error_rate(x);
        let v2_dot = x.a2_bar - skew_2d(x.r2_bar) * x.v2_bar;
        DelayedState {
            e: x.e + e_dot * h,
            delta_psi_bar: x.delta_psi_bar + (x.r2_bar - x.r1) * h,
            v2_bar: x.v2_bar + v2_dot * h,
            v1: x.v1 + v1_dot * h,
            ..*x
        }
    }

    fn arb_vec(s: f64) -> impl Strategy<Value = Vec2> {
        (-s..s, -s..s).prop_map(|(a, b)| Vec2::new(a, b))
    }

    proptest! {
        #[test]
        fn closed_loop_error_acceleration_is_virtual_input(
            e in arb_vec(3.0), v1 in arb_vec(1.5), v2 in arb_vec(1.5), a2 in arb_vec(1.0),
            dpsi in -3.0..3.0f64, r1 in -0.5..0.5f64, r2 in -0.5..0.5f64,
            kp in 0.2..3.0f64, kd in 0.2..3.0f64, tx in 0.2..1.0f64, ty in 0.2..1.0f64,
        ) {
            let cfg = ControllerConfig { kp, kd, tau_plant: Vec2::new(tx, ty), ..Default::default() };
            let x = delayed(e, dpsi, v1, r1, v2, a2, r2);
            let out = ndi_control(&x, &cfg);
            // central difference of ė along the model with the command held
            let h = 1e-5;
            let plus = propagate(&x, out.command, cfg.tau_plant, h);
            let minus = propagate(&x, out.command, cfg.tau_plant, -h);
            let e_ddot = (error_rate(&plus) - error_rate(&minus)) / (2.0 * h);
            prop_assert!((e_ddot - out.virtual_input).norm() < 1e-6 * (1.0 + out.virtual_input.norm()),
                "{e_ddot} vs {}", out.virtual_input);
        }

        #[test]
        fn saturation_keeps_direction(v in arb_vec(10.0), vmax in 0.1..5.0f64) {
            let s = saturate_command(v, vmax);
            prop_assert!(crate::geometry::cross2(&v, &s).abs() < 1e-9);
            prop_assert!(v.dot(&s) >= 0.0);
            prop_assert!(s.norm() <= vmax + 1e-12);
        }
    }
}
