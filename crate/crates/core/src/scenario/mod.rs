//! Kinematic truth generation, sensor corruption, single-run simulation and error metrics.

mod monte_carlo;
mod trajectory;

pub use monte_carlo::{
    compare_percentage, disturbance_sweep, monte_carlo_amae, AmaeCell, AmaeStudy, AmaeTable,
    DisturbanceCell, FilterTuning, RangeVariance, AMAE_CSV_HEADER, STANDARD_SIGMAS,
};
pub use trajectory::{relative_truth, AgentKinematics, HeadingProfile, PathProfile, Trajectory};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::ekf::{initialize, EkfConfig, EkfError, TraceRow};
use crate::geometry::{
    wrap_angle, InputVector, Measurement, MeasurementA, MeasurementB, RelativeState, SystemVariant,
    Vec2,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("filter failed at t = {t:.3} s: {source}")]
    Filter {
        t: f64,
        #[source]
        source: EkfError,
    },
    #[error("percentage comparison needs a positive baseline, got {0}")]
    NonPositiveBaseline(f64),
}

/// Zero-mean Gaussian noise levels per channel. All default to zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseModel {
    pub sigma_range: f64,
    pub sigma_velocity: f64,
    pub sigma_accel: f64,
    pub sigma_yaw_rate: f64,
    pub sigma_heading: f64,
}

impl NoiseModel {
    pub fn range_only(sigma_range: f64) -> Self {
        Self {
            sigma_range,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let all = [
            self.sigma_range,
            self.sigma_velocity,
            self.sigma_accel,
            self.sigma_yaw_rate,
            self.sigma_heading,
        ];
        if all.iter().all(|s| s.is_finite() && *s >= 0.0) {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(format!(
                "noise sigmas must be ≥ 0, got {all:?}"
            )))
        }
    }
}

/// Gaussian bump added to the heading-difference measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisturbanceModel {
    /// Peak value in radians.
    pub amplitude: f64,
    /// Inverse width ε (1/s).
    pub width: f64,
    /// Time of the peak.
    pub center: f64,
    pub enabled: bool,
}

impl Default for DisturbanceModel {
    fn default() -> Self {
        Self {
            amplitude: 0.0,
            width: 1.0,
            center: 5.0,
            enabled: false,
        }
    }
}

impl DisturbanceModel {
    pub fn with_amplitude(amplitude: f64) -> Self {
        Self {
            amplitude,
            enabled: amplitude != 0.0,
            ..Self::default()
        }
    }
}

/// `A·exp(−(ε(t − t0))²)`, or zero when disabled.
pub fn heading_disturbance(t: f64, d: &DisturbanceModel) -> f64 {
    if !d.enabled {
        return 0.0;
    }
    let z = d.width * (t - d.center);
    d.amplitude * (-z * z).exp()
}

/// Adds one zero-mean Gaussian draw. The result is not clamped at zero.
pub fn inject_range_noise<R: Rng + ?Sized>(range_true: f64, sigma: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    range_true + sigma * z
}

/// How the filter's initial estimate is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialEstimate {
    /// Start exactly at the true relative state.
    Truth,
    /// Start with the given position and heading difference; velocities from truth.
    PositionHeading { p: Vec2, delta_psi: f64 },
}

/// Interval during which no measurement reaches the filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outage {
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub duration: f64,
    /// Filter and measurement rate (Hz).
    pub rate: f64,
    /// Agent 1, which runs the filter.
    pub host: Trajectory,
    /// Agent 2, whose relative position is estimated.
    pub tracked: Trajectory,
    pub noise: NoiseModel,
    pub disturbance: DisturbanceModel,
    pub seed: u64,
    /// Random stream within `seed`; Monte Carlo runs use their run index.
    pub stream: u64,
    pub initial_estimate: InitialEstimate,
    pub outages: Vec<Outage>,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(ScenarioError::Invalid(format!(
                "rate must be > 0, got {}",
                self.rate
            )));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(ScenarioError::Invalid(format!(
                "duration must be > 0, got {}",
                self.duration
            )));
        }
        self.noise.validate()?;
        if self.disturbance.enabled && !(self.disturbance.width > 0.0) {
            return Err(ScenarioError::Invalid(
                "disturbance width must be > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn time_step(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn steps(&self) -> usize {
        (self.duration * self.rate).round() as usize
    }

    pub fn truth_at(&self, t: f64) -> (RelativeState, InputVector) {
        relative_truth(&self.host.sample(t), &self.tracked.sample(t))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    fn in_outage(&self, t: f64) -> bool {
        self.outages.iter().any(|o| t >= o.start && t < o.end)
    }
}

/// The two concentric counter-rotating circles: agent 2 at radius `rho2`, agent 1 one metre
/// inside it, a quarter turn ahead and flying the other way. 20 s at 20 Hz, truth-initialized.
pub fn circular_trajectory_pair(rho2: f64, omega2: f64) -> Result<Scenario, ScenarioError> {
    if !(rho2 > 1.0) {
        return Err(ScenarioError::Invalid(format!(
            "rho2 must exceed 1 m, got {rho2}"
        )));
    }
    Ok(Scenario {
        duration: 20.0,
        rate: 20.0,
        host: Trajectory::circular(rho2 - 1.0, -omega2, PI / 2.0),
        tracked: Trajectory::circular(rho2, omega2, 0.0),
        noise: NoiseModel::default(),
        disturbance: DisturbanceModel::default(),
        seed: 0,
        stream: 0,
        initial_estimate: InitialEstimate::Truth,
        outages: Vec::new(),
    })
}

/// Default circle pair: radius 4 m, one lap in 20 s.
pub fn default_circular_pair() -> Scenario {
    circular_trajectory_pair(4.0, 2.0 * PI / 20.0).expect("default radius is valid")
}

/// Noise-free straight-line cases where only one of the two variants is observable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitCase {
    /// Host moving, tracked agent stationary.
    HostMoving = 1,
    /// Host stationary, tracked agent moving.
    TrackedMoving = 2,
    /// Both moving in parallel, host twice as fast.
    Parallel = 3,
}

impl LimitCase {
    pub fn from_number(n: u32) -> Option<Self> {
        match n {
            1 => Some(LimitCase::HostMoving),
            2 => Some(LimitCase::TrackedMoving),
            3 => Some(LimitCase::Parallel),
            _ => None,
        }
    }
}

pub fn limit_case_scenario(case: LimitCase) -> Scenario {
    let (v1, v2, duration) = match case {
        LimitCase::HostMoving => (Vec2::new(1.0, 0.0), Vec2::zeros(), 20.0),
        LimitCase::TrackedMoving => (Vec2::zeros(), Vec2::new(1.0, 0.0), 20.0),
        LimitCase::Parallel => (Vec2::new(2.0, 0.0), Vec2::new(1.0, 0.0), 100.0),
    };
    Scenario {
        duration,
        rate: 50.0,
        host: Trajectory::linear(Vec2::zeros(), v1),
        tracked: Trajectory::linear(Vec2::new(1.0, 1.0), v2),
        noise: NoiseModel::default(),
        disturbance: DisturbanceModel::default(),
        seed: 0,
        stream: 0,
        initial_estimate: InitialEstimate::PositionHeading {
            p: Vec2::new(0.1, 0.1),
            delta_psi: 1.0,
        },
        outages: Vec::new(),
    }
}

/// One recorded filter step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSample {
    pub t: f64,
    pub truth: RelativeState,
    pub estimate: RelativeState,
    /// `‖p̂ − p‖`.
    pub pos_err: f64,
    /// `|wrap(Δψ̂ − Δψ)|`.
    pub dpsi_err: f64,
    pub covariance_trace: f64,
    /// Whether a measurement was applied at this step.
    pub updated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub variant: SystemVariant,
    pub samples: Vec<RunSample>,
    pub mae_p: f64,
    pub mae_dpsi: f64,
}

impl RunResult {
    pub fn trace_rows(&self) -> Vec<TraceRow> {
        self.samples
            .iter()
            .map(|s| TraceRow {
                t: s.t,
                state: s.estimate,
                covariance_trace: s.covariance_trace,
            })
            .collect()
    }

    /// The sample closest to time `t`.
    pub fn sample_at(&self, t: f64) -> Option<&RunSample> {
        self.samples
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }

    pub fn final_sample(&self) -> Option<&RunSample> {
        self.samples.last()
    }

    /// Mean position error over samples with `from ≤ t < to`.
    pub fn mean_pos_err_between(&self, from: f64, to: f64) -> f64 {
        let (sum, n) = self
            .samples
            .iter()
            .filter(|s| s.t >= from && s.t < to)
            .fold((0.0, 0usize), |(acc, n), s| (acc + s.pos_err, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }
}

/// Thresholds used to call a run converged: final position error below 5 cm and final heading
/// error below 0.05 rad.
pub const CONVERGED_POS_ERR: f64 = 0.05;
pub const CONVERGED_DPSI_ERR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceSummary {
    pub p_converged: bool,
    pub dpsi_converged: bool,
    pub final_pos_err: f64,
    pub final_dpsi_err: f64,
}

pub fn convergence_summary(run: &RunResult) -> ConvergenceSummary {
    let last = run.final_sample().copied();
    let final_pos_err = last.map_or(f64::NAN, |s| s.pos_err);
    let final_dpsi_err = last.map_or(f64::NAN, |s| s.dpsi_err);
    ConvergenceSummary {
        p_converged: final_pos_err < CONVERGED_POS_ERR,
        dpsi_converged: final_dpsi_err < CONVERGED_DPSI_ERR,
        final_pos_err,
        final_dpsi_err,
    }
}

fn noisy_input<R: Rng + ?Sized>(u: &InputVector, noise: &NoiseModel, rng: &mut R) -> InputVector {
    if noise.sigma_accel == 0.0 && noise.sigma_yaw_rate == 0.0 {
        return *u;
    }
    let mut g = || -> f64 { rng.sample(StandardNormal) };
    InputVector {
        a1: u.a1 + Vec2::new(g(), g()) * noise.sigma_accel,
        a2: u.a2 + Vec2::new(g(), g()) * noise.sigma_accel,
        r1: u.r1 + g() * noise.sigma_yaw_rate,
        r2: u.r2 + g() * noise.sigma_yaw_rate,
    }
}

fn measure<R: Rng + ?Sized>(
    truth: &RelativeState,
    t: f64,
    variant: SystemVariant,
    scenario: &Scenario,
    rng: &mut R,
) -> Measurement {
    // The range draw comes first so that runs differing only in σ_R share their noise sequence.
    let range = inject_range_noise(truth.p.norm(), scenario.noise.sigma_range, rng);
    let noise = &scenario.noise;
    let (v1_meas, v2_meas) = if noise.sigma_velocity == 0.0 {
        (truth.v1, truth.v2)
    } else {
        let mut g = || -> f64 { rng.sample(StandardNormal) };
        (
            truth.v1 + Vec2::new(g(), g()) * noise.sigma_velocity,
            truth.v2 + Vec2::new(g(), g()) * noise.sigma_velocity,
        )
    };
    match variant {
        SystemVariant::A => {
            let heading_noise = if noise.sigma_heading == 0.0 {
                0.0
            } else {
                noise.sigma_heading * rng.sample::<f64, _>(StandardNormal)
            };
            Measurement::A(MeasurementA {
                range,
                delta_psi_meas: wrap_angle(
                    truth.delta_psi + heading_disturbance(t, &scenario.disturbance) + heading_noise,
                ),
                v1_meas,
                v2_meas,
            })
        }
        SystemVariant::B => Measurement::B(MeasurementB {
            range,
            v1_meas,
            v2_meas,
        }),
    }
}

/// Runs the filter along the scenario truth.
///
/// Inputs are sampled from truth at the start of each step and held; measurements are taken at
/// the end of the step. The initial state of `ekf_config` is replaced according to
/// `scenario.initial_estimate`.
pub fn run_simulation(
    scenario: &Scenario,
    ekf_config: &EkfConfig,
) -> Result<RunResult, ScenarioError> {
    scenario.validate()?;
    let variant = ekf_config.variant;
    let mut rng = scenario.rng();
    let dt = scenario.time_step();
    let (truth0, _) = scenario.truth_at(0.0);
    let x0 = match scenario.initial_estimate {
        InitialEstimate::Truth => truth0,
        InitialEstimate::PositionHeading { p, delta_psi } => RelativeState {
            p,
            delta_psi: wrap_angle(delta_psi),
            ..truth0
        },
    };
    let config = EkfConfig {
        initial_state: x0,
        ..*ekf_config
    };
    let mut ekf = initialize(config).map_err(|source| ScenarioError::Filter { t: 0.0, source })?;

    let n = scenario.steps();
    let mut samples = Vec::with_capacity(n);
    for k in 1..=n {
        let t_prev = (k - 1) as f64 * dt;
        let t = k as f64 * dt;
        let (_, u_true) = scenario.truth_at(t_prev);
        let u = noisy_input(&u_true, &scenario.noise, &mut rng);
        ekf = ekf
            .predict(&u, dt)
            .map_err(|source| ScenarioError::Filter { t, source })?;
        let (truth, _) = scenario.truth_at(t);
        let updated = !scenario.in_outage(t);
        if updated {
            let z = measure(&truth, t, variant, scenario, &mut rng);
            ekf = ekf
                .update(&z)
                .map_err(|source| ScenarioError::Filter { t, source })?;
        }
        samples.push(RunSample {
            t,
            truth,
            estimate: ekf.state,
            pos_err: (ekf.state.p - truth.p).norm(),
            dpsi_err: wrap_angle(ekf.state.delta_psi - truth.delta_psi).abs(),
            covariance_trace: ekf.covariance_trace(),
            updated,
        });
    }
    let count = samples.len().max(1) as f64;
    let mae_p = samples.iter().map(|s| s.pos_err).sum::<f64>() / count;
    let mae_dpsi = samples.iter().map(|s| s.dpsi_err).sum::<f64>() / count;
    Ok(RunResult {
        variant,
        samples,
        mae_p,
        mae_dpsi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ekf::EkfConfig;

    #[test]
    fn circular_pair_initial_positions() {
        let s = default_circular_pair();
        let p2 = s.tracked.sample(0.0).position;
        let p1 = s.host.sample(0.0).position;
        assert!((p2 - Vec2::new(4.0, 0.0)).norm() < 1e-12);
        assert!((p1 - Vec2::new(0.0, 3.0)).norm() < 1e-12);
        let p2_end = s.tracked.sample(20.0).position;
        assert!((p2_end - p2).norm() < 1e-12);
        // headings fixed at zero
        assert_eq!(s.host.sample(3.0).heading, 0.0);
        assert_eq!(s.tracked.sample(3.0).yaw_rate, 0.0);
    }

    #[test]
    fn circular_pair_matches_closed_form() {
        let s = default_circular_pair();
        let w = 2.0 * PI / 20.0;
        for i in 0..50 {
            let t = 0.37 * i as f64;
            let p1 = s.host.sample(t).position;
            let expected = Vec2::new(-3.0 * (-w * t).sin(), 3.0 * (-w * t).cos());
            assert!((p1 - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn circular_pair_rejects_small_radius() {
        assert!(circular_trajectory_pair(1.0, 0.3).is_err());
    }

    #[test]
    fn limit_case_setup() {
        let c1 = limit_case_scenario(LimitCase::HostMoving);
        for t in [0.0, 5.0, 19.0] {
            let (x, u) = c1.truth_at(t);
            assert_eq!(x.delta_psi, 0.0);
            assert_eq!((u.r1, u.r2), (0.0, 0.0));
        }
        let (x0, _) = c1.truth_at(0.0);
        assert_eq!(x0.p, Vec2::new(1.0, 1.0));
        let InitialEstimate::PositionHeading { p, delta_psi } = c1.initial_estimate else {
            panic!("case 1 starts with an offset estimate");
        };
        assert!((x0.p.x - p.x - 0.9).abs() < 1e-12);
        assert!((x0.p.y - p.y - 0.9).abs() < 1e-12);
        assert!((delta_psi - x0.delta_psi - 1.0).abs() < 1e-12);

        let (x3, _) = limit_case_scenario(LimitCase::Parallel).truth_at(1.0);
        assert_eq!(x3.v1, Vec2::new(2.0, 0.0));
        assert_eq!(x3.v2, Vec2::new(1.0, 0.0));
    }

    #[test]
    fn disturbance_shape() {
        let d = DisturbanceModel {
            amplitude: 1.0,
            width: 1.0,
            center: 5.0,
            enabled: true,
        };
        assert_eq!(heading_disturbance(5.0, &d), 1.0);
        assert!(heading_disturbance(15.0, &d) < 1e-40);
        assert!(heading_disturbance(-5.0, &d) < 1e-40);
        let off = DisturbanceModel {
            enabled: false,
            ..d
        };
        assert_eq!(heading_disturbance(5.0, &off), 0.0);
        let wide = DisturbanceModel {
            amplitude: 0.7,
            width: 0.25,
            center: 2.0,
            enabled: true,
        };
        assert_eq!(heading_disturbance(2.0, &wide), 0.7);
    }

    #[test]
    fn range_noise_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(inject_range_noise(3.0, 0.0, &mut rng), 3.0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| inject_range_noise(5.0, 1.0, &mut rng))
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 5.0).abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn runs_are_deterministic() {
        let mut s = default_circular_pair();
        s.noise.sigma_range = 0.5;
        s.seed = 7;
        let cfg = EkfConfig::with_defaults(SystemVariant::B, RelativeState::zeros(), 0.5);
        let a = run_simulation(&s, &cfg).unwrap();
        let b = run_simulation(&s, &cfg).unwrap();
        assert_eq!(a, b);
        s.stream = 1;
        let c = run_simulation(&s, &cfg).unwrap();
        assert_ne!(a.mae_p, c.mae_p);
    }

    #[test]
    fn mae_is_mean_position_error() {
        let mut s = default_circular_pair();
        s.noise.sigma_range = 0.3;
        let cfg = EkfConfig::with_defaults(SystemVariant::A, RelativeState::zeros(), 0.3);
        let run = run_simulation(&s, &cfg).unwrap();
        assert_eq!(run.samples.len(), 400);
        let mean = run.samples.iter().map(|s| s.pos_err).sum::<f64>() / 400.0;
        assert!((run.mae_p - mean).abs() < 1e-15);
    }

    #[test]
    fn outages_suppress_updates() {
        let mut s = default_circular_pair();
        s.outages.push(Outage {
            start: 5.0,
            end: 5.5,
        });
        let cfg = EkfConfig::with_defaults(SystemVariant::B, RelativeState::zeros(), 0.0);
        let run = run_simulation(&s, &cfg).unwrap();
        let skipped: Vec<f64> = run
            .samples
            .iter()
            .filter(|s| !s.updated)
            .map(|s| s.t)
            .collect();
        assert_eq!(skipped.len(), 10);
        assert!(skipped.iter().all(|t| (5.0..5.5).contains(t)));
    }

    #[test]
    fn rejects_invalid_scenarios() {
        let cfg = EkfConfig::with_defaults(SystemVariant::B, RelativeState::zeros(), 0.0);
        let mut s = default_circular_pair();
        s.rate = 0.0;
        assert!(run_simulation(&s, &cfg).is_err());
        let mut s = default_circular_pair();
        s.noise.sigma_range = -1.0;
        assert!(run_simulation(&s, &cfg).is_err());
    }
}
