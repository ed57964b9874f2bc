//! Discrete-time extended Kalman filter over the relative dynamics.
//!
//! The same filter serves both observation models: [`SystemVariant::A`] additionally observes
//! the heading difference, [`SystemVariant::B`] relies on range and velocities only. The range
//! channel observes `‖p‖` directly.

use std::io::{self, Write};

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

use crate::geometry::{
    derivative_of_vector, state_jacobian, wrap_angle, InputVector, Measurement, RelativeState,
    StateMatrix, StateVector, SystemVariant, STATE_DIM,
};

/// Predictions longer than this are treated as stale data.
pub const MAX_PREDICT_DT: f64 = 2.0;
/// Below this estimated range the range row of the observation Jacobian is singular and skipped.
pub const MIN_RANGE_FOR_UPDATE: f64 = 1e-3;
const PSD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EkfError {
    #[error("prediction step dt = {0} s outside (0, {MAX_PREDICT_DT}]")]
    InvalidTimeStep(f64),
    #[error("{0} is not symmetric positive semi-definite")]
    NotPositiveSemiDefinite(&'static str),
    #[error("measurement noise is for variant {noise} but the filter runs variant {filter}")]
    NoiseVariantMismatch {
        noise: SystemVariant,
        filter: SystemVariant,
    },
    #[error("measurement of variant {got} fed to a variant {expected} filter")]
    MeasurementMismatch {
        expected: SystemVariant,
        got: SystemVariant,
    },
    #[error("nominal time step must be positive, got {0}")]
    InvalidNominalStep(f64),
    #[error("filter state became non-finite")]
    NonFinite,
    #[error("innovation covariance is singular")]
    SingularInnovation,
}

/// Integration scheme used for the state prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Integrator {
    /// Single forward-Euler step.
    Euler,
    /// Classic fourth-order Runge-Kutta with the input held over the step.
    #[default]
    Rk4,
}

impl std::str::FromStr for Integrator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euler" => Ok(Integrator::Euler),
            "rk4" => Ok(Integrator::Rk4),
            other => Err(format!(
                "unknown integrator `{other}` (expected euler or rk4)"
            )),
        }
    }
}

/// Measurement-noise covariance, sized for its variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeasurementNoise {
    /// Order: range, heading difference, v1, v2.
    A(SMatrix<f64, 6, 6>),
    /// Order: range, v1, v2.
    B(SMatrix<f64, 5, 5>),
}

impl MeasurementNoise {
    pub fn variant(&self) -> SystemVariant {
        match self {
            MeasurementNoise::A(_) => SystemVariant::A,
            MeasurementNoise::B(_) => SystemVariant::B,
        }
    }

    /// Diagonal noise from per-channel variances.
    ///
    /// `heading_variance` is ignored for variant B.
    pub fn diagonal(
        variant: SystemVariant,
        range_variance: f64,
        heading_variance: f64,
        velocity_variance: f64,
    ) -> Self {
        match variant {
            SystemVariant::A => MeasurementNoise::A(SMatrix::<f64, 6, 6>::from_diagonal(
                &SVector::<f64, 6>::from_column_slice(&[
                    range_variance,
                    heading_variance,
                    velocity_variance,
                    velocity_variance,
                    velocity_variance,
                    velocity_variance,
                ]),
            )),
            SystemVariant::B => MeasurementNoise::B(SMatrix::<f64, 5, 5>::from_diagonal(
                &SVector::<f64, 5>::from_column_slice(&[
                    range_variance,
                    velocity_variance,
                    velocity_variance,
                    velocity_variance,
                    velocity_variance,
                ]),
            )),
        }
    }

    fn is_psd(&self) -> bool {
        match self {
            MeasurementNoise::A(m) => is_psd(m),
            MeasurementNoise::B(m) => is_psd(m),
        }
    }
}

fn is_psd<const N: usize>(m: &SMatrix<f64, N, N>) -> bool {
    if !m.iter().all(|v| v.is_finite()) {
        return false;
    }
    let scale = m.abs().max().max(1.0);
    if (m - m.transpose()).abs().max() > PSD_TOLERANCE * scale {
        return false;
    }
    let eig = nalgebra::DMatrix::from_iterator(N, N, m.iter().copied()).symmetric_eigenvalues();
    eig.iter().all(|&l| l >= -PSD_TOLERANCE * scale)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfConfig {
    pub variant: SystemVariant,
    pub dt_nominal: f64,
    pub process_noise: StateMatrix,
    pub measurement_noise: MeasurementNoise,
    pub initial_covariance: StateMatrix,
    pub initial_state: RelativeState,
    pub integrator: Integrator,
}

/// Variance given to channels that carry no simulated noise.
pub const NOISELESS_CHANNEL_VARIANCE: f64 = 0.1 * 0.1;

impl EkfConfig {
    /// Default tuning: Q = 1e-4·I, noiseless channels at 0.1², P0 = diag(1, 1, 1, 0.01, …).
    pub fn with_defaults(
        variant: SystemVariant,
        initial_state: RelativeState,
        range_sigma: f64,
    ) -> Self {
        let range_variance = if range_sigma > 0.0 {
            range_sigma * range_sigma
        } else {
            NOISELESS_CHANNEL_VARIANCE
        };
        Self {
            variant,
            dt_nominal: 0.02,
            process_noise: StateMatrix::identity() * 1e-4,
            measurement_noise: MeasurementNoise::diagonal(
                variant,
                range_variance,
                NOISELESS_CHANNEL_VARIANCE,
                NOISELESS_CHANNEL_VARIANCE,
            ),
            initial_covariance: StateMatrix::from_diagonal(&StateVector::from_column_slice(&[
                1.0, 1.0, 1.0, 0.01, 0.01, 0.01, 0.01,
            ])),
            initial_state,
            integrator: Integrator::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EkfError> {
        if !(self.dt_nominal > 0.0) {
            return Err(EkfError::InvalidNominalStep(self.dt_nominal));
        }
        if self.measurement_noise.variant() != self.variant {
            return Err(EkfError::NoiseVariantMismatch {
                noise: self.measurement_noise.variant(),
                filter: self.variant,
            });
        }
        if !is_psd(&self.process_noise) {
            return Err(EkfError::NotPositiveSemiDefinite("process noise"));
        }
        if !self.measurement_noise.is_psd() {
            return Err(EkfError::NotPositiveSemiDefinite("measurement noise"));
        }
        if !is_psd(&self.initial_covariance) {
            return Err(EkfError::NotPositiveSemiDefinite("initial covariance"));
        }
        if !self.initial_state.is_finite() {
            return Err(EkfError::NonFinite);
        }
        Ok(())
    }
}

/// A filter value. Every step returns a new instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfInstance {
    pub state: RelativeState,
    pub covariance: StateMatrix,
    pub config: EkfConfig,
    pub last_update_time: f64,
    /// Set when the last update skipped the range channel because `‖p̂‖` was near zero.
    pub range_skipped: bool,
}

pub fn initialize(config: EkfConfig) -> Result<EkfInstance, EkfError> {
    config.validate()?;
    Ok(EkfInstance {
        state: config.initial_state,
        covariance: config.initial_covariance,
        config,
        last_update_time: 0.0,
        range_skipped: false,
    })
}

/// Propagates a state vector over one step and returns the Jacobian of that map.
pub fn propagate(
    x: &StateVector,
    u: &InputVector,
    dt: f64,
    integrator: Integrator,
) -> (StateVector, StateMatrix) {
    let eye = StateMatrix::identity();
    match integrator {
        Integrator::Euler => {
            let next = x + derivative_of_vector(x, u) * dt;
            (next, eye + state_jacobian(x, u) * dt)
        }
        Integrator::Rk4 => {
            // Stage Jacobians are chained so the returned matrix is the exact derivative of the map.
            let k1 = derivative_of_vector(x, u);
            let dk1 = state_jacobian(x, u);
            let x2 = x + k1 * (dt / 2.0);
            let k2 = derivative_of_vector(&x2, u);
            let dk2 = state_jacobian(&x2, u) * (eye + dk1 * (dt / 2.0));
            let x3 = x + k2 * (dt / 2.0);
            let k3 = derivative_of_vector(&x3, u);
            let dk3 = state_jacobian(&x3, u) * (eye + dk2 * (dt / 2.0));
            let x4 = x + k3 * dt;
            let k4 = derivative_of_vector(&x4, u);
            let dk4 = state_jacobian(&x4, u) * (eye + dk3 * dt);
            let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
            let jac = eye + (dk1 + dk2 * 2.0 + dk3 * 2.0 + dk4) * (dt / 6.0);
            (next, jac)
        }
    }
}

fn symmetrize(p: &StateMatrix) -> StateMatrix {
    let mut s = (p + p.transpose()) * 0.5;
    for i in 0..STATE_DIM {
        if s[(i, i)] < 0.0 {
            s[(i, i)] = 0.0;
        }
    }
    s
}

impl EkfInstance {
    pub fn variant(&self) -> SystemVariant {
        self.config.variant
    }

    pub fn covariance_trace(&self) -> f64 {
        self.covariance.trace()
    }

    pub fn predict(&self, u: &InputVector, dt: f64) -> Result<EkfInstance, EkfError> {
        if !(dt > 0.0 && dt <= MAX_PREDICT_DT) {
            return Err(EkfError::InvalidTimeStep(dt));
        }
        let (next, f) = propagate(&self.state.to_vector(), u, dt, self.config.integrator);
        let state = RelativeState::from_vector(&next).map_err(|_| EkfError::NonFinite)?;
        let covariance =
            symmetrize(&(f * self.covariance * f.transpose() + self.config.process_noise * dt));
        if !covariance.iter().all(|v| v.is_finite()) {
            return Err(EkfError::NonFinite);
        }
        Ok(EkfInstance {
            state,
            covariance,
            last_update_time: self.last_update_time + dt,
            ..*self
        })
    }

    pub fn update(&self, z: &Measurement) -> Result<EkfInstance, EkfError> {
        if z.variant() != self.config.variant {
            return Err(EkfError::MeasurementMismatch {
                expected: self.config.variant,
                got: z.variant(),
            });
        }
        let x = self.state.to_vector();
        let p = self.state.p;
        let range_hat = p.norm();
        let use_range = range_hat >= MIN_RANGE_FOR_UPDATE;
        let mut range_row = SMatrix::<f64, 1, STATE_DIM>::zeros();
        if use_range {
            range_row[0] = p.x / range_hat;
            range_row[1] = p.y / range_hat;
        }

        let next = match (z, &self.config.measurement_noise) {
            (Measurement::A(m), MeasurementNoise::A(noise)) => {
                let heading_innovation = wrap_angle(m.delta_psi_meas - x[2]);
                let vel = [
                    m.v1_meas.x - x[3],
                    m.v1_meas.y - x[4],
                    m.v2_meas.x - x[5],
                    m.v2_meas.y - x[6],
                ];
                if use_range {
                    let mut h = SMatrix::<f64, 6, STATE_DIM>::zeros();
                    h.fixed_view_mut::<1, STATE_DIM>(0, 0).copy_from(&range_row);
                    h[(1, 2)] = 1.0;
                    for k in 0..4 {
                        h[(2 + k, 3 + k)] = 1.0;
                    }
                    let y = SVector::<f64, 6>::from_column_slice(&[
                        m.range - range_hat,
                        heading_innovation,
                        vel[0],
                        vel[1],
                        vel[2],
                        vel[3],
                    ]);
                    correct(&x, &self.covariance, &h, &y, noise)?
                } else {
                    let mut h = SMatrix::<f64, 5, STATE_DIM>::zeros();
                    h[(0, 2)] = 1.0;
                    for k in 0..4 {
                        h[(1 + k, 3 + k)] = 1.0;
                    }
                    let y = SVector::<f64, 5>::from_column_slice(&[
                        heading_innovation,
                        vel[0],
                        vel[1],
                        vel[2],
                        vel[3],
                    ]);
                    let sub = noise.fixed_view::<5, 5>(1, 1).into_owned();
                    correct(&x, &self.covariance, &h, &y, &sub)?
                }
            }
            (Measurement::B(m), MeasurementNoise::B(noise)) => {
                let vel = [
                    m.v1_meas.x - x[3],
                    m.v1_meas.y - x[4],
                    m.v2_meas.x - x[5],
                    m.v2_meas.y - x[6],
                ];
                if use_range {
                    let mut h = SMatrix::<f64, 5, STATE_DIM>::zeros();
                    h.fixed_view_mut::<1, STATE_DIM>(0, 0).copy_from(&range_row);
                    for k in 0..4 {
                        h[(1 + k, 3 + k)] = 1.0;
                    }
                    let y = SVector::<f64, 5>::from_column_slice(&[
                        m.range - range_hat,
                        vel[0],
                        vel[1],
                        vel[2],
                        vel[3],
                    ]);
                    correct(&x, &self.covariance, &h, &y, noise)?
                } else {
                    let mut h = SMatrix::<f64, 4, STATE_DIM>::zeros();
                    for k in 0..4 {
                        h[(k, 3 + k)] = 1.0;
                    }
                    let y = SVector::<f64, 4>::from_column_slice(&vel);
                    let sub = noise.fixed_view::<4, 4>(1, 1).into_owned();
                    correct(&x, &self.covariance, &h, &y, &sub)?
                }
            }
            // Config validation ties the noise variant to the filter variant.
            _ => {
                return Err(EkfError::NoiseVariantMismatch {
                    noise: self.config.measurement_noise.variant(),
                    filter: self.config.variant,
                })
            }
        };

        let (state_vec, covariance) = next;
        let state = RelativeState::from_vector(&state_vec).map_err(|_| EkfError::NonFinite)?;
        Ok(EkfInstance {
            state,
            covariance,
            range_skipped: !use_range,
            ..*self
        })
    }
}

/// Joseph-form Kalman correction.
fn correct<const M: usize>(
    x: &StateVector,
    p: &StateMatrix,
    h: &SMatrix<f64, M, STATE_DIM>,
    innovation: &SVector<f64, M>,
    noise: &SMatrix<f64, M, M>,
) -> Result<(StateVector, StateMatrix), EkfError> {
    let s = h * p * h.transpose() + noise;
    let s_inv = s.try_inverse().ok_or(EkfError::SingularInnovation)?;
    let gain = p * h.transpose() * s_inv;
    let x_new = x + gain * innovation;
    let i_kh = StateMatrix::identity() - gain * h;
    let p_new = symmetrize(&(i_kh * p * i_kh.transpose() + gain * noise * gain.transpose()));
    if !x_new.iter().all(|v| v.is_finite()) || !p_new.iter().all(|v| v.is_finite()) {
        return Err(EkfError::NonFinite);
    }
    Ok((x_new, p_new))
}

/// One row of a filter trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub state: RelativeState,
    pub covariance_trace: f64,
}

pub const TRACE_CSV_HEADER: &str = "t,px,py,dpsi,v1x,v1y,v2x,v2y,p_trace";

pub fn write_trace_csv<W: Write>(mut out: W, rows: &[TraceRow]) -> io::Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for r in rows {
        let s = &r.state;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.t, s.p.x, s.p.y, s.delta_psi, s.v1.x, s.v1.y, s.v2.x, s.v2.y, r.covariance_trace
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{observe, Vec2};
    use proptest::prelude::*;

    fn config(variant: SystemVariant, x0: RelativeState) -> EkfConfig {
        EkfConfig::with_defaults(variant, x0, 0.0)
    }

    #[test]
    fn prediction_at_rest_matches_linear_flow() {
        let ekf = initialize(config(SystemVariant::B, RelativeState::zeros())).unwrap();
        let next = ekf.predict(&InputVector::zeros(), 0.5).unwrap();
        assert_eq!(next.state, RelativeState::zeros());
        // at rest the flow is p(t) = p0 + (v2 - v1)·t, everything else constant
        let mut f = StateMatrix::identity();
        for i in 0..2 {
            f[(i, 3 + i)] = -0.5;
            f[(i, 5 + i)] = 0.5;
        }
        let expected = f * ekf.covariance * f.transpose() + ekf.config.process_noise * 0.5;
        assert!((next.covariance - expected).abs().max() < 1e-14);
    }

    #[test]
    fn euler_step_moves_position_against_own_velocity() {
        let x0 =
            RelativeState::new(Vec2::zeros(), 0.0, Vec2::new(1.0, 0.0), Vec2::zeros()).unwrap();
        for integrator in [Integrator::Euler, Integrator::Rk4] {
            let cfg = EkfConfig {
                integrator,
                ..config(SystemVariant::A, x0)
            };
            let next = initialize(cfg)
                .unwrap()
                .predict(&InputVector::zeros(), 0.02)
                .unwrap();
            assert!((next.state.p - Vec2::new(-0.02, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn predict_rejects_bad_dt() {
        let ekf = initialize(config(SystemVariant::A, RelativeState::zeros())).unwrap();
        for dt in [0.0, -0.1, 2.5, f64::NAN] {
            assert!(matches!(
                ekf.predict(&InputVector::zeros(), dt),
                Err(EkfError::InvalidTimeStep(_))
            ));
        }
    }

    #[test]
    fn zero_innovation_keeps_state_and_shrinks_covariance() {
        let x0 = RelativeState::new(
            Vec2::new(2.0, 1.0),
            0.4,
            Vec2::new(0.3, 0.1),
            Vec2::new(-0.2, 0.5),
        )
        .unwrap();
        for variant in [SystemVariant::A, SystemVariant::B] {
            let ekf = initialize(config(variant, x0)).unwrap();
            let next = ekf.update(&observe(&x0, variant)).unwrap();
            assert!((next.state.to_vector() - x0.to_vector()).norm() < 1e-14);
            assert!(next.covariance.trace() < ekf.covariance.trace());
            assert!(!next.range_skipped);
        }
    }

    #[test]
    fn near_zero_range_skips_range_row() {
        let x0 =
            RelativeState::new(Vec2::new(1e-4, 0.0), 0.0, Vec2::zeros(), Vec2::zeros()).unwrap();
        let ekf = initialize(config(SystemVariant::B, x0)).unwrap();
        let next = ekf.update(&observe(&x0, SystemVariant::B)).unwrap();
        assert!(next.range_skipped);
        assert_eq!(next.state.p, x0.p);
    }

    #[test]
    fn measurement_variant_must_match() {
        let ekf = initialize(config(SystemVariant::A, RelativeState::zeros())).unwrap();
        let z = observe(&RelativeState::zeros(), SystemVariant::B);
        assert!(matches!(
            ekf.update(&z),
            Err(EkfError::MeasurementMismatch { .. })
        ));
    }

    #[test]
    fn rejects_non_psd_matrices() {
        let mut cfg = config(SystemVariant::A, RelativeState::zeros());
        cfg.process_noise[(0, 0)] = -1.0;
        assert!(matches!(
            initialize(cfg),
            Err(EkfError::NotPositiveSemiDefinite(_))
        ));

        let mut cfg = config(SystemVariant::A, RelativeState::zeros());
        cfg.initial_covariance[(0, 1)] = 0.5;
        assert!(initialize(cfg).is_err());

        let cfg = EkfConfig {
            measurement_noise: MeasurementNoise::diagonal(SystemVariant::B, 1.0, 1.0, 1.0),
            ..config(SystemVariant::A, RelativeState::zeros())
        };
        assert!(matches!(
            initialize(cfg),
            Err(EkfError::NoiseVariantMismatch { .. })
        ));
    }

    #[test]
    fn case_one_initial_error() {
        let truth =
            RelativeState::new(Vec2::new(1.0, 1.0), 0.0, Vec2::new(1.0, 0.0), Vec2::zeros())
                .unwrap();
        let guess = RelativeState {
            p: Vec2::new(0.1, 0.1),
            delta_psi: 1.0,
            ..truth
        };
        let ekf = initialize(config(SystemVariant::A, guess)).unwrap();
        let err = truth.to_vector() - ekf.state.to_vector();
        assert!((err[0] - 0.9).abs() < 1e-12);
        assert!((err[1] - 0.9).abs() < 1e-12);
        assert!((err[2] + 1.0).abs() < 1e-12);

        let exact = initialize(config(SystemVariant::A, truth)).unwrap();
        assert_eq!(exact.state, truth);
    }

    #[test]
    fn frozen_filter_stays_put() {
        let x0 =
            RelativeState::new(Vec2::new(2.0, -1.0), 0.3, Vec2::zeros(), Vec2::zeros()).unwrap();
        let cfg = EkfConfig {
            process_noise: StateMatrix::zeros(),
            initial_covariance: StateMatrix::zeros(),
            ..config(SystemVariant::B, x0)
        };
        let mut ekf = initialize(cfg).unwrap();
        for _ in 0..50 {
            ekf = ekf.predict(&InputVector::zeros(), 0.02).unwrap();
            ekf = ekf.update(&observe(&x0, SystemVariant::B)).unwrap();
        }
        assert!((ekf.state.to_vector() - x0.to_vector()).norm() < 1e-12);
    }

    #[test]
    fn heading_innovation_wraps() {
        let x0 =
            RelativeState::new(Vec2::new(2.0, 1.0), 3.1, Vec2::zeros(), Vec2::zeros()).unwrap();
        let ekf = initialize(config(SystemVariant::A, x0)).unwrap();
        let mut z = match observe(&x0, SystemVariant::A) {
            Measurement::A(m) => m,
            _ => unreachable!(),
        };
        z.delta_psi_meas = -3.1;
        let next = ekf.update(&Measurement::A(z)).unwrap();
        // the short way round from 3.1 to −3.1 passes through π
        let moved = wrap_angle(next.state.delta_psi - 3.1);
        assert!(moved > 0.0 && moved < 0.1, "moved {moved}");
    }

    #[test]
    fn trace_csv_layout() {
        let rows = [TraceRow {
            t: 0.5,
            state: RelativeState::new(
                Vec2::new(1.0, 2.0),
                0.25,
                Vec2::new(3.0, 4.0),
                Vec2::new(5.0, 6.0),
            )
            .unwrap(),
            covariance_trace: 0.125,
        }];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "t,px,py,dpsi,v1x,v1y,v2x,v2y,p_trace\n0.5,1,2,0.25,3,4,5,6,0.125\n"
        );
    }

    fn arb_state() -> impl Strategy<Value = RelativeState> {
        prop::array::uniform7(-3.0f64..3.0).prop_map(|a| {
            RelativeState::new(
                Vec2::new(a[0], a[1]),
                a[2],
                Vec2::new(a[3], a[4]),
                Vec2::new(a[5], a[6]),
            )
            .unwrap()
        })
    }

    fn arb_input() -> impl Strategy<Value = InputVector> {
        prop::array::uniform6(-1.0f64..1.0).prop_map(|a| {
            InputVector::new(Vec2::new(a[0], a[1]), Vec2::new(a[2], a[3]), a[4], a[5]).unwrap()
        })
    }

    proptest! {
        #[test]
        fn propagation_jacobian_matches_finite_differences(
            x in arb_state(), u in arb_input(), dt in 0.01f64..0.2, rk4 in any::<bool>(),
        ) {
            let integrator = if rk4 { Integrator::Rk4 } else { Integrator::Euler };
            let xv = x.to_vector();
            let (_, f) = propagate(&xv, &u, dt, integrator);
            let h = 1e-6;
            for k in 0..STATE_DIM {
                let mut xp = xv;
                let mut xm = xv;
                xp[k] += h;
                xm[k] -= h;
                let col = (propagate(&xp, &u, dt, integrator).0 - propagate(&xm, &u, dt, integrator).0) / (2.0 * h);
                for i in 0..STATE_DIM {
                    let scale = f[(i, k)].abs().max(1.0);
                    prop_assert!((col[i] - f[(i, k)]).abs() <= 1e-5 * scale,
                        "entry ({i},{k}): fd {} vs {}", col[i], f[(i, k)]);
                }
            }
        }

        #[test]
        fn covariance_stays_symmetric(x in arb_state(), u in arb_input(), noise in prop::array::uniform6(-0.5f64..0.5)) {
            for variant in [SystemVariant::A, SystemVariant::B] {
                let mut ekf = initialize(config(variant, x)).unwrap();
                let mut truth = x;
                for step in 0..20 {
                    ekf = ekf.predict(&u, 0.05).unwrap();
                    truth.p += Vec2::new(noise[step % 6], noise[(step + 1) % 6]) * 0.1;
                    ekf = ekf.update(&observe(&truth, variant)).unwrap();
                    let p = ekf.covariance;
                    prop_assert!((p - p.transpose()).abs().max() <= 1e-10);
                    prop_assert!((0..STATE_DIM).all(|i| p[(i, i)] >= 0.0));
                }
            }
        }
    }
}
