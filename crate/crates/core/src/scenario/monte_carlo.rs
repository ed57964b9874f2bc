//! Monte Carlo accuracy studies over range-noise levels.

use std::io::{self, Write};

use rayon::prelude::*;

use super::{run_simulation, DisturbanceModel, NoiseModel, Scenario, ScenarioError};
use crate::ekf::{EkfConfig, Integrator, MeasurementNoise};
use crate::geometry::{RelativeState, StateMatrix, StateVector, SystemVariant};

/// Range-noise levels of the standard accuracy table (m).
pub const STANDARD_SIGMAS: [f64; 8] = [0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

pub const AMAE_CSV_HEADER: &str = "variant,sigma_range,amae_m,n_runs,n_failed";

/// Range variance the filter assumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RangeVariance {
    /// Same variance whatever the injected noise.
    Fixed(f64),
    /// `max(σ², floor)` for the injected σ.
    MatchNoise { floor: f64 },
    /// `base + gain·σ²`.
    Affine { base: f64, gain: f64 },
}

/// Filter noise parameters for a study, independent of the injected noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterTuning {
    /// Process-noise spectral density for position, heading difference and velocities.
    pub q_position: f64,
    pub q_heading: f64,
    pub q_velocity: f64,
    pub range_variance: RangeVariance,
    pub heading_variance: f64,
    pub velocity_variance: f64,
    /// Initial covariance diagonal for position, heading difference and velocities.
    pub p0_position: f64,
    pub p0_heading: f64,
    pub p0_velocity: f64,
    pub integrator: Integrator,
}

impl Default for FilterTuning {
    fn default() -> Self {
        Self {
            q_position: 1e-4,
            q_heading: 1e-4,
            q_velocity: 1e-4,
            range_variance: RangeVariance::MatchNoise { floor: 0.01 },
            heading_variance: 0.01,
            velocity_variance: 0.01,
            p0_position: 1.0,
            p0_heading: 1.0,
            p0_velocity: 0.01,
            integrator: Integrator::Rk4,
        }
    }
}

impl FilterTuning {
    /// Tuning used for the circular-pair accuracy table and the disturbance sweep.
    ///
    /// The filter starts at the true state with a tight covariance. Its assumed range variance
    /// grows only weakly with the injected noise, so the gain stays high at large noise levels.
    pub fn accuracy_table() -> Self {
        Self {
            q_position: 8.7e-4,
            q_heading: 1.5e-4,
            q_velocity: 5e-5,
            range_variance: RangeVariance::Affine {
                base: 0.087,
                gain: 0.00345,
            },
            heading_variance: 0.0017,
            velocity_variance: 0.029,
            p0_position: 1.26e-3,
            p0_heading: 1.4e-4,
            p0_velocity: 3.7e-4,
            integrator: Integrator::Euler,
        }
    }

    pub fn ekf_config(
        &self,
        variant: SystemVariant,
        initial_state: RelativeState,
        sigma_range: f64,
        dt: f64,
    ) -> EkfConfig {
        let range_variance = match self.range_variance {
            RangeVariance::Fixed(v) => v,
            RangeVariance::MatchNoise { floor } => (sigma_range * sigma_range).max(floor),
            RangeVariance::Affine { base, gain } => base + gain * sigma_range * sigma_range,
        };
        let diag = |p: f64, h: f64, v: f64| {
            StateMatrix::from_diagonal(&StateVector::from_column_slice(&[p, p, h, v, v, v, v]))
        };
        EkfConfig {
            variant,
            dt_nominal: dt,
            process_noise: diag(self.q_position, self.q_heading, self.q_velocity),
            measurement_noise: MeasurementNoise::diagonal(
                variant,
                range_variance,
                self.heading_variance,
                self.velocity_variance,
            ),
            initial_covariance: diag(self.p0_position, self.p0_heading, self.p0_velocity),
            initial_state,
            integrator: self.integrator,
        }
    }
}

/// Description of one Monte Carlo accuracy study.
#[derive(Debug, Clone, PartialEq)]
pub struct AmaeStudy {
    /// Scenario template; its noise, stream and seed are overwritten per run.
    pub base: Scenario,
    pub sigmas: Vec<f64>,
    pub variants: Vec<SystemVariant>,
    pub runs: usize,
    pub seed: u64,
    pub tuning: FilterTuning,
}

impl AmaeStudy {
    pub fn new(base: Scenario, runs: usize, seed: u64) -> Self {
        Self {
            base,
            sigmas: STANDARD_SIGMAS.to_vec(),
            variants: vec![SystemVariant::A, SystemVariant::B],
            runs,
            seed,
            tuning: FilterTuning::accuracy_table(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmaeCell {
    pub variant: SystemVariant,
    pub sigma_range: f64,
    /// Mean over successful runs of each run's mean absolute position error (m).
    pub amae: f64,
    pub n_runs: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmaeTable {
    pub cells: Vec<AmaeCell>,
}

impl AmaeTable {
    pub fn get(&self, variant: SystemVariant, sigma: f64) -> Option<&AmaeCell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.sigma_range == sigma)
    }

    /// AMAE values of one variant in sigma order.
    pub fn column(&self, variant: SystemVariant) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.variant == variant)
            .map(|c| c.amae)
            .collect()
    }

    pub fn total_failed(&self) -> usize {
        self.cells.iter().map(|c| c.n_failed).sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{AMAE_CSV_HEADER}")?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{:.6},{},{}",
                c.variant, c.sigma_range, c.amae, c.n_runs, c.n_failed
            )?;
        }
        Ok(())
    }
}

/// Runs every (variant, σ) cell of the study.
///
/// Run `i` uses random stream `i` of the study seed for every cell, so cells differ only in
/// the noise scale and the variant. Results do not depend on the thread count.
pub fn monte_carlo_amae(study: &AmaeStudy) -> Result<AmaeTable, ScenarioError> {
    if study.runs == 0 {
        return Err(ScenarioError::Invalid("runs must be ≥ 1".into()));
    }
    if study.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(ScenarioError::Invalid(format!(
            "bad sigma list {:?}",
            study.sigmas
        )));
    }
    study.base.validate()?;
    let (x0, _) = study.base.truth_at(0.0);
    let dt = study.base.time_step();

    let mut cells = Vec::new();
    for &variant in &study.variants {
        for &sigma in &study.sigmas {
            let config = study.tuning.ekf_config(variant, x0, sigma, dt);
            let maes: Vec<Option<f64>> = (0..study.runs)
                .into_par_iter()
                .map(|run| {
                    let scenario = Scenario {
                        noise: NoiseModel {
                            sigma_range: sigma,
                            ..study.base.noise
                        },
                        seed: study.seed,
                        stream: run as u64,
                        ..study.base.clone()
                    };
                    run_simulation(&scenario, &config)
                        .ok()
                        .map(|r| r.mae_p)
                        .filter(|m| m.is_finite())
                })
                .collect();
            let ok: Vec<f64> = maes.iter().flatten().copied().collect();
            let n_failed = maes.len() - ok.len();
            let amae = if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().sum::<f64>() / ok.len() as f64
            };
            cells.push(AmaeCell {
                variant,
                sigma_range: sigma,
                amae,
                n_runs: study.runs,
                n_failed,
            });
        }
    }
    Ok(AmaeTable { cells })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisturbanceCell {
    pub amplitude: f64,
    pub sigma_range: f64,
    pub amae_a: f64,
    pub amae_b: f64,
}

/// Repeats the accuracy study for each heading-disturbance amplitude.
pub fn disturbance_sweep(
    study: &AmaeStudy,
    amplitudes: &[f64],
    template: DisturbanceModel,
) -> Result<Vec<DisturbanceCell>, ScenarioError> {
    let mut out = Vec::new();
    for &amplitude in amplitudes {
        let mut s = study.clone();
        s.variants = vec![SystemVariant::A, SystemVariant::B];
        s.base.disturbance = DisturbanceModel {
            amplitude,
            enabled: amplitude != 0.0,
            ..template
        };
        let table = monte_carlo_amae(&s)?;
        for &sigma in &s.sigmas {
            let amae_a = table
                .get(SystemVariant::A, sigma)
                .map_or(f64::NAN, |c| c.amae);
            let amae_b = table
                .get(SystemVariant::B, sigma)
                .map_or(f64::NAN, |c| c.amae);
            out.push(DisturbanceCell {
                amplitude,
                sigma_range: sigma,
                amae_a,
                amae_b,
            });
        }
    }
    Ok(out)
}

/// Relative difference of `b` with respect to `a`, in percent.
pub fn compare_percentage(a: f64, b: f64) -> Result<f64, ScenarioError> {
    if !(a > 0.0) {
        return Err(ScenarioError::NonPositiveBaseline(a));
    }
    Ok(100.0 * (b - a) / a)
}
