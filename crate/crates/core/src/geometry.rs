//! Planar frame algebra and the relative-state model shared by every other module.
//!
//! All vectors live in a horizontal frame `H_i`: a frame attached to agent `i` whose z-axis
//! stays aligned with the inertial down axis, so it differs from the inertial frame only by the
//! agent's heading. The relative state is expressed from the point of view of the host
//! (agent 1) tracking agent 2.

use std::f64::consts::PI;

use nalgebra::{Matrix2, SMatrix, SVector, Vector2, Vector3};
use thiserror::Error;

/// Planar vector (metres, m/s or m/s² depending on context).
pub type Vec2 = Vector2<f64>;
/// 2×2 matrix.
pub type Mat2 = Matrix2<f64>;
/// Dimension of the relative state.
pub const STATE_DIM: usize = 7;
/// Flat relative-state vector `[px, py, dpsi, v1x, v1y, v2x, v2y]`.
pub type StateVector = SVector<f64, STATE_DIM>;
/// Square matrix over the relative state.
pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Pitch angles closer than this to ±π/2 are rejected by [`body_rates_to_heading_rate`].
pub const GIMBAL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("pitch {pitch} rad is within {GIMBAL_TOLERANCE} rad of the gimbal singularity")]
    GimbalSingularity { pitch: f64 },
}

/// Which observation model a filter or analysis uses.
///
/// `A` observes the heading difference in addition to range and both velocities; `B` does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SystemVariant {
    A,
    B,
}

impl SystemVariant {
    pub fn name(self) -> &'static str {
        match self {
            SystemVariant::A => "A",
            SystemVariant::B => "B",
        }
    }

    /// Number of scalar measurements in the observation vector.
    pub fn measurement_dim(self) -> usize {
        match self {
            SystemVariant::A => 6,
            SystemVariant::B => 5,
        }
    }
}

impl std::fmt::Display for SystemVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SystemVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(SystemVariant::A),
            "B" | "b" => Ok(SystemVariant::B),
            other => Err(format!(
                "unknown system variant `{other}` (expected A or B)"
            )),
        }
    }
}

/// Wraps an angle to (−π, π].
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    // rem_euclid maps −π to π already; only exact 2π-multiples of −π can land on −π here
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Rotation from `H2` to `H1` for a heading difference `delta_psi`.
pub fn rotation_2d(delta_psi: f64) -> Mat2 {
    let (s, c) = delta_psi.sin_cos();
    Mat2::new(c, -s, s, c)
}

/// Derivative of [`rotation_2d`] with respect to the angle.
pub fn rotation_2d_derivative(delta_psi: f64) -> Mat2 {
    let (s, c) = delta_psi.sin_cos();
    Mat2::new(-s, -c, c, -s)
}

/// Planar cross-product matrix for a yaw rate.
pub fn skew_2d(rate: f64) -> Mat2 {
    Mat2::new(0.0, -rate, rate, 0.0)
}

/// z-component of the 3D cross product of two planar vectors.
pub fn cross2(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn check_finite(values: &[f64], what: &'static str) -> Result<(), GeometryError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GeometryError::NonFinite(what))
    }
}

/// Relative state of agent 2 as seen from agent 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeState {
    /// Position of agent 2 relative to agent 1, in `H1`.
    pub p: Vec2,
    /// Heading difference ψ2 − ψ1, kept in (−π, π].
    pub delta_psi: f64,
    /// Velocity of agent 1 in `H1`.
    pub v1: Vec2,
    /// Velocity of agent 2 in `H2`.
    pub v2: Vec2,
}

impl RelativeState {
    pub fn new(p: Vec2, delta_psi: f64, v1: Vec2, v2: Vec2) -> Result<Self, GeometryError> {
        check_finite(
            &[p.x, p.y, delta_psi, v1.x, v1.y, v2.x, v2.y],
            "relative state",
        )?;
        Ok(Self {
            p,
            delta_psi: wrap_angle(delta_psi),
            v1,
            v2,
        })
    }

    pub fn zeros() -> Self {
        Self {
            p: Vec2::zeros(),
            delta_psi: 0.0,
            v1: Vec2::zeros(),
            v2: Vec2::zeros(),
        }
    }

    pub fn to_vector(&self) -> StateVector {
        StateVector::from_column_slice(&[
            self.p.x,
            self.p.y,
            self.delta_psi,
            self.v1.x,
            self.v1.y,
            self.v2.x,
            self.v2.y,
        ])
    }

    /// Builds a state from a flat vector, wrapping the heading entry.
    pub fn from_vector(x: &StateVector) -> Result<Self, GeometryError> {
        Self::new(
            Vec2::new(x[0], x[1]),
            x[2],
            Vec2::new(x[3], x[4]),
            Vec2::new(x[5], x[6]),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Inputs of the relative dynamics: horizontal-frame accelerations and heading rates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InputVector {
    pub a1: Vec2,
    pub a2: Vec2,
    pub r1: f64,
    pub r2: f64,
}

impl InputVector {
    pub fn new(a1: Vec2, a2: Vec2, r1: f64, r2: f64) -> Result<Self, GeometryError> {
        check_finite(&[a1.x, a1.y, a2.x, a2.y, r1, r2], "input vector")?;
        Ok(Self { a1, a2, r1, r2 })
    }

    pub fn zeros() -> Self {
        Self::default()
    }
}

/// One IMU sample: attitude angles, gyro rates and specific force in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttitudeSample {
    pub roll: f64,
    pub pitch: f64,
    pub gyro_pitch_rate: f64,
    pub gyro_yaw_rate: f64,
    pub specific_force: Vector3<f64>,
}

/// Heading rate of the horizontal frame from body-frame gyro rates.
pub fn body_rates_to_heading_rate(att: &AttitudeSample) -> Result<f64, GeometryError> {
    if att.pitch.abs() > std::f64::consts::FRAC_PI_2 - GIMBAL_TOLERANCE {
        return Err(GeometryError::GimbalSingularity { pitch: att.pitch });
    }
    let (sin_roll, cos_roll) = att.roll.sin_cos();
    let cos_pitch = att.pitch.cos();
    Ok(sin_roll / cos_pitch * att.gyro_pitch_rate + cos_roll / cos_pitch * att.gyro_yaw_rate)
}

/// Horizontal-frame acceleration from the body-frame specific force.
///
/// Applies the first two rows of the body-to-horizontal rotation (roll then pitch).
pub fn specific_force_to_horizontal_accel(att: &AttitudeSample) -> Vec2 {
    let (sr, cr) = att.roll.sin_cos();
    let (sp, cp) = att.pitch.sin_cos();
    let s = &att.specific_force;
    Vec2::new(
        cp * s.x + sr * sp * s.y + cr * sp * s.z,
        cr * s.y - sr * s.z,
    )
}

/// Continuous-time relative dynamics `ẋ = f(x, u)`.
pub fn state_derivative(x: &RelativeState, u: &InputVector) -> StateVector {
    derivative_of_vector(&x.to_vector(), u)
}

/// [`state_derivative`] evaluated on a raw (unwrapped) state vector.
pub fn derivative_of_vector(x: &StateVector, u: &InputVector) -> StateVector {
    let p = Vec2::new(x[0], x[1]);
    let v1 = Vec2::new(x[3], x[4]);
    let v2 = Vec2::new(x[5], x[6]);
    let s1 = skew_2d(u.r1);
    let s2 = skew_2d(u.r2);
    let p_dot = -v1 + rotation_2d(x[2]) * v2 - s1 * p;
    let v1_dot = u.a1 - s1 * v1;
    let v2_dot = u.a2 - s2 * v2;
    StateVector::from_column_slice(&[
        p_dot.x,
        p_dot.y,
        u.r2 - u.r1,
        v1_dot.x,
        v1_dot.y,
        v2_dot.x,
        v2_dot.y,
    ])
}

/// Jacobian of the relative dynamics with respect to the state.
pub fn state_jacobian(x: &StateVector, u: &InputVector) -> StateMatrix {
    let v2 = Vec2::new(x[5], x[6]);
    let s1 = skew_2d(u.r1);
    let s2 = skew_2d(u.r2);
    let rot = rotation_2d(x[2]);
    let d_rot_v2 = rotation_2d_derivative(x[2]) * v2;

    let mut j = StateMatrix::zeros();
    j.fixed_view_mut::<2, 2>(0, 0).copy_from(&(-s1));
    j.fixed_view_mut::<2, 1>(0, 2).copy_from(&d_rot_v2);
    j.fixed_view_mut::<2, 2>(0, 3)
        .copy_from(&(-Mat2::identity()));
    j.fixed_view_mut::<2, 2>(0, 5).copy_from(&rot);
    j.fixed_view_mut::<2, 2>(3, 3).copy_from(&(-s1));
    j.fixed_view_mut::<2, 2>(5, 5).copy_from(&(-s2));
    j
}

/// Observation with a heading-difference measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementA {
    /// Range in metres. Noisy ranges may be negative; see the scenario module.
    pub range: f64,
    pub delta_psi_meas: f64,
    pub v1_meas: Vec2,
    pub v2_meas: Vec2,
}

/// Observation without heading information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementB {
    pub range: f64,
    pub v1_meas: Vec2,
    pub v2_meas: Vec2,
}

impl MeasurementA {
    /// Half the squared range, the output used by the observability analysis.
    pub fn half_squared_range(&self) -> f64 {
        0.5 * self.range * self.range
    }

    pub fn to_vector(&self) -> SVector<f64, 6> {
        SVector::<f64, 6>::from_column_slice(&[
            self.range,
            self.delta_psi_meas,
            self.v1_meas.x,
            self.v1_meas.y,
            self.v2_meas.x,
            self.v2_meas.y,
        ])
    }
}

impl MeasurementB {
    pub fn half_squared_range(&self) -> f64 {
        0.5 * self.range * self.range
    }

    pub fn to_vector(&self) -> SVector<f64, 5> {
        SVector::<f64, 5>::from_column_slice(&[
            self.range,
            self.v1_meas.x,
            self.v1_meas.y,
            self.v2_meas.x,
            self.v2_meas.y,
        ])
    }
}

/// Either kind of observation, tagged with its variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measurement {
    A(MeasurementA),
    B(MeasurementB),
}

impl Measurement {
    pub fn variant(&self) -> SystemVariant {
        match self {
            Measurement::A(_) => SystemVariant::A,
            Measurement::B(_) => SystemVariant::B,
        }
    }

    pub fn range(&self) -> f64 {
        match self {
            Measurement::A(m) => m.range,
            Measurement::B(m) => m.range,
        }
    }
}

pub fn observe_a(x: &RelativeState) -> MeasurementA {
    MeasurementA {
        range: x.p.norm(),
        delta_psi_meas: x.delta_psi,
        v1_meas: x.v1,
        v2_meas: x.v2,
    }
}

pub fn observe_b(x: &RelativeState) -> MeasurementB {
    MeasurementB {
        range: x.p.norm(),
        v1_meas: x.v1,
        v2_meas: x.v2,
    }
}

pub fn observe(x: &RelativeState, variant: SystemVariant) -> Measurement {
    match variant {
        SystemVariant::A => Measurement::A(observe_a(x)),
        SystemVariant::B => Measurement::B(observe_b(x)),
    }
}
