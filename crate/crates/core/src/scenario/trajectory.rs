//! Analytic agent trajectories with exact time derivatives.

use std::f64::consts::PI;

use crate::geometry::{rotation_2d, wrap_angle, InputVector, RelativeState, Vec2};

/// Planar path shape in the inertial frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathProfile {
    Stationary {
        position: Vec2,
    },
    Linear {
        start: Vec2,
        velocity: Vec2,
    },
    /// `center + radius·[cos(ωt + phase), sin(ωt + phase)]`.
    Circular {
        center: Vec2,
        radius: f64,
        omega: f64,
        phase: f64,
    },
    /// Figure-eight `[ax·sin ωt, ay·sin 2ωt]` with a superposed circular wobble that adds
    /// frequent short turns: `wobble·[cos kωt, sin kωt]`.
    FigureEight {
        center: Vec2,
        half_width: f64,
        half_height: f64,
        omega: f64,
        wobble: f64,
        wobble_harmonic: f64,
    },
}

/// Heading of the agent over time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadingProfile {
    Constant(f64),
    /// `mean + amplitude·sin(ωt)`.
    Sinusoid {
        mean: f64,
        amplitude: f64,
        omega: f64,
    },
}

impl HeadingProfile {
    /// Heading and yaw rate at time `t`.
    pub fn at(&self, t: f64) -> (f64, f64) {
        match *self {
            HeadingProfile::Constant(psi) => (psi, 0.0),
            HeadingProfile::Sinusoid {
                mean,
                amplitude,
                omega,
            } => {
                let (s, c) = (omega * t).sin_cos();
                (mean + amplitude * s, amplitude * omega * c)
            }
        }
    }
}

/// Inertial-frame kinematics of one agent at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentKinematics {
    pub position: Vec2,
    pub velocity: Vec2,
    pub acceleration: Vec2,
    pub heading: f64,
    pub yaw_rate: f64,
}

impl AgentKinematics {
    /// Velocity expressed in the agent's horizontal frame.
    pub fn velocity_h(&self) -> Vec2 {
        rotation_2d(-self.heading) * self.velocity
    }

    /// Acceleration of the horizontal frame expressed in that frame.
    pub fn acceleration_h(&self) -> Vec2 {
        rotation_2d(-self.heading) * self.acceleration
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub path: PathProfile,
    pub heading: HeadingProfile,
}

impl Trajectory {
    pub fn stationary(position: Vec2) -> Self {
        Self {
            path: PathProfile::Stationary { position },
            heading: HeadingProfile::Constant(0.0),
        }
    }

    pub fn linear(start: Vec2, velocity: Vec2) -> Self {
        Self {
            path: PathProfile::Linear { start, velocity },
            heading: HeadingProfile::Constant(0.0),
        }
    }

    pub fn circular(radius: f64, omega: f64, phase: f64) -> Self {
        Self {
            path: PathProfile::Circular {
                center: Vec2::zeros(),
                radius,
                omega,
                phase,
            },
            heading: HeadingProfile::Constant(0.0),
        }
    }

    /// Default turning course used for leader-follower runs: a 7 m × 5 m figure-eight with a
    /// 0.4 m wobble, one lap per 40 s.
    pub fn turning_course() -> Self {
        Self {
            path: PathProfile::FigureEight {
                center: Vec2::zeros(),
                half_width: 3.5,
                half_height: 2.5,
                omega: 2.0 * PI / 40.0,
                wobble: 0.4,
                wobble_harmonic: 5.0,
            },
            heading: HeadingProfile::Sinusoid {
                mean: 0.3,
                amplitude: 0.4,
                omega: 2.0 * PI / 25.0,
            },
        }
    }

    pub fn with_heading(mut self, heading: HeadingProfile) -> Self {
        self.heading = heading;
        self
    }

    pub fn sample(&self, t: f64) -> AgentKinematics {
        let (position, velocity, acceleration) = match self.path {
            PathProfile::Stationary { position } => (position, Vec2::zeros(), Vec2::zeros()),
            PathProfile::Linear { start, velocity } => {
                (start + velocity * t, velocity, Vec2::zeros())
            }
            PathProfile::Circular {
                center,
                radius,
                omega,
                phase,
            } => {
                let (s, c) = (omega * t + phase).sin_cos();
                (
                    center + Vec2::new(c, s) * radius,
                    Vec2::new(-s, c) * (radius * omega),
                    Vec2::new(c, s) * (-radius * omega * omega),
                )
            }
            PathProfile::FigureEight {
                center,
                half_width,
                half_height,
                omega,
                wobble,
                wobble_harmonic,
            } => {
                let w = omega;
                let k = wobble_harmonic * omega;
                let (s1, c1) = (w * t).sin_cos();
                let (s2, c2) = (2.0 * w * t).sin_cos();
                let (sk, ck) = (k * t).sin_cos();
                let pos = center
                    + Vec2::new(half_width * s1, half_height * s2)
                    + Vec2::new(ck, sk) * wobble;
                let vel = Vec2::new(half_width * w * c1, 2.0 * half_height * w * c2)
                    + Vec2::new(-sk, ck) * (wobble * k);
                let acc = Vec2::new(-half_width * w * w * s1, -4.0 * half_height * w * w * s2)
                    - Vec2::new(ck, sk) * (wobble * k * k);
                (pos, vel, acc)
            }
        };
        let (heading, yaw_rate) = self.heading.at(t);
        AgentKinematics {
            position,
            velocity,
            acceleration,
            heading,
            yaw_rate,
        }
    }
}

/// Relative state and inputs of `tracked` as seen from `host`.
pub fn relative_truth(
    host: &AgentKinematics,
    tracked: &AgentKinematics,
) -> (RelativeState, InputVector) {
    let p = rotation_2d(-host.heading) * (tracked.position - host.position);
    let state = RelativeState {
        p,
        delta_psi: wrap_angle(tracked.heading - host.heading),
        v1: host.velocity_h(),
        v2: tracked.velocity_h(),
    };
    let input = InputVector {
        a1: host.acceleration_h(),
        a2: tracked.acceleration_h(),
        r1: host.yaw_rate,
        r2: tracked.yaw_rate,
    };
    (state, input)
}
