//! Experiment configuration file. Every section is optional; missing keys take the defaults
//! below, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use rangeloc::control::ControllerConfig;
use rangeloc::ekf::Integrator;
use rangeloc::geometry::Vec2;
use rangeloc::ranging::{LinkModel, SlotOrdering};
use rangeloc::scenario::{FilterTuning, RangeVariance, STANDARD_SIGMAS};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    LimitCase,
    Table1Sweep,
    DisturbanceSweep,
    ObservabilityScan,
    UnobservableSearch,
    LeaderFollower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<Experiment>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub limit_case: LimitCaseSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub disturbance: DisturbanceSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub observability: ObservabilitySection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub leader_follower: LeaderFollowerSection,
    #[serde(default)]
    pub controller: ControllerSection,
    #[serde(default)]
    pub link: LinkSection,
}

fn default_seed() -> u64 {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: default_seed(),
            out: None,
            limit_case: LimitCaseSection::default(),
            sweep: SweepSection::default(),
            disturbance: DisturbanceSection::default(),
            filter: FilterSection::default(),
            observability: ObservabilitySection::default(),
            search: SearchSection::default(),
            leader_follower: LeaderFollowerSection::default(),
            controller: ControllerSection::default(),
            link: LinkSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantChoice {
    A,
    B,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitCaseSection {
    /// 1: host moving, 2: tracked agent moving, 3: parallel motion.
    pub case: u32,
    pub variant: VariantChoice,
}

impl Default for LimitCaseSection {
    fn default() -> Self {
        Self {
            case: 1,
            variant: VariantChoice::Both,
        }
    }
}

/// Circle-pair Monte Carlo study shared by both sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub runs: usize,
    /// Injected range-noise standard deviations (m).
    pub sigmas: Vec<f64>,
    /// Radius of the tracked agent's circle (m); the host flies one metre inside.
    pub radius: f64,
    /// Lap time (s).
    pub period: f64,
    pub duration: f64,
    pub rate: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            runs: 1000,
            sigmas: STANDARD_SIGMAS.to_vec(),
            radius: 4.0,
            period: 20.0,
            duration: 20.0,
            rate: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceSection {
    /// Peak heading errors to sweep (rad).
    pub amplitudes: Vec<f64>,
    pub width: f64,
    pub center: f64,
}

impl Default for DisturbanceSection {
    fn default() -> Self {
        Self {
            amplitudes: vec![0.0, 0.25, 0.5, 1.0, 1.5],
            width: 1.0,
            center: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegratorChoice {
    Euler,
    Rk4,
}

/// Filter tuning for the sweeps. The assumed range variance is `base + gain·σ²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub q_position: f64,
    pub q_heading: f64,
    pub q_velocity: f64,
    pub range_variance_base: f64,
    pub range_variance_gain: f64,
    pub heading_variance: f64,
    pub velocity_variance: f64,
    pub p0_position: f64,
    pub p0_heading: f64,
    pub p0_velocity: f64,
    pub integrator: IntegratorChoice,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self::from_tuning(&FilterTuning::accuracy_table())
    }
}

impl FilterSection {
    fn from_tuning(t: &FilterTuning) -> Self {
        let (base, gain) = match t.range_variance {
            RangeVariance::Fixed(v) => (v, 0.0),
            RangeVariance::Affine { base, gain } => (base, gain),
            RangeVariance::MatchNoise { floor } => (floor, 1.0),
        };
        Self {
            q_position: t.q_position,
            q_heading: t.q_heading,
            q_velocity: t.q_velocity,
            range_variance_base: base,
            range_variance_gain: gain,
            heading_variance: t.heading_variance,
            velocity_variance: t.velocity_variance,
            p0_position: t.p0_position,
            p0_heading: t.p0_heading,
            p0_velocity: t.p0_velocity,
            integrator: match t.integrator {
                Integrator::Euler => IntegratorChoice::Euler,
                Integrator::Rk4 => IntegratorChoice::Rk4,
            },
        }
    }

    pub fn tuning(&self) -> FilterTuning {
        FilterTuning {
            q_position: self.q_position,
            q_heading: self.q_heading,
            q_velocity: self.q_velocity,
            range_variance: RangeVariance::Affine {
                base: self.range_variance_base,
                gain: self.range_variance_gain,
            },
            heading_variance: self.heading_variance,
            velocity_variance: self.velocity_variance,
            p0_position: self.p0_position,
            p0_heading: self.p0_heading,
            p0_velocity: self.p0_velocity,
            integrator: match self.integrator {
                IntegratorChoice::Euler => Integrator::Euler,
                IntegratorChoice::Rk4 => Integrator::Rk4,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservabilityPreset {
    /// Host hovering.
    HostStatic,
    /// Velocities parallel, no acceleration.
    ParallelVelocities,
    /// Explicit velocities, heading difference and accelerations from this section.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservabilitySection {
    pub preset: ObservabilityPreset,
    /// Add a host acceleration of `[0.3, 0.3]` to the preset.
    pub host_acceleration: bool,
    pub px_range: [f64; 2],
    pub py_range: [f64; 2],
    pub resolution: usize,
    /// Points with `|det M_B|` below this count as unobservable.
    pub threshold: f64,
    pub delta_psi: f64,
    pub v1: [f64; 2],
    pub v2: [f64; 2],
    pub a1: [f64; 2],
    pub a2: [f64; 2],
}

impl Default for ObservabilitySection {
    fn default() -> Self {
        Self {
            preset: ObservabilityPreset::HostStatic,
            host_acceleration: false,
            px_range: [-5.0, 5.0],
            py_range: [-5.0, 5.0],
            resolution: 201,
            threshold: 1.0,
            delta_psi: 0.0,
            v1: [1.0, 0.0],
            v2: [0.0, 1.0],
            a1: [0.0, 0.0],
            a2: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub restarts: usize,
    pub max_iterations: usize,
    pub target: f64,
    pub condition_tol: f64,
    pub max_speed: f64,
    pub max_accel: f64,
    pub max_position: f64,
    /// Half-width of the grid scanned around the configuration found (m).
    pub grid_span: f64,
    pub grid_resolution: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            restarts: 20,
            max_iterations: 20_000,
            target: 1e-6,
            condition_tol: 0.1,
            max_speed: 2.0,
            max_accel: 2.0,
            max_position: 10.0,
            grid_span: 2.0,
            grid_resolution: 201,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingChoice {
    Lexicographic,
    Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeaderFollowerSection {
    /// Engaged flight time (s).
    pub duration: f64,
    pub dt: f64,
    /// One follower per entry, each with its own delay behind the leader (s).
    pub delays: Vec<f64>,
    /// Start offset of each follower from the leader's position one delay before engagement (m).
    pub start_offset: [f64; 2],
    /// Fly circles before engaging instead of hovering.
    pub warmup: bool,
    /// Feed the controllers the true relative state.
    pub perfect_state: bool,
    pub ordering: OrderingChoice,
}

impl Default for LeaderFollowerSection {
    fn default() -> Self {
        Self {
            duration: 200.0,
            dt: 0.01,
            delays: vec![5.0],
            start_offset: [0.5, 0.5],
            warmup: true,
            perfect_state: false,
            ordering: OrderingChoice::Lexicographic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub kp: f64,
    pub kd: f64,
    pub tau_plant: [f64; 2],
    pub v_max: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let c = ControllerConfig::default();
        Self {
            kp: c.kp,
            kd: c.kd,
            tau_plant: [c.tau_plant.x, c.tau_plant.y],
            v_max: c.v_max,
        }
    }
}

impl ControllerSection {
    pub fn config(&self, tau_delay: f64) -> ControllerConfig {
        ControllerConfig {
            tau_delay,
            kp: self.kp,
            kd: self.kd,
            tau_plant: Vec2::new(self.tau_plant[0], self.tau_plant[1]),
            v_max: self.v_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSection {
    pub range_sigma: f64,
    pub drop_probability: f64,
    pub nominal_rate: f64,
    pub max_gap_clamp: f64,
    pub burst_probability: f64,
}

impl Default for LinkSection {
    fn default() -> Self {
        let l = LinkModel::default();
        Self {
            range_sigma: l.range_sigma,
            drop_probability: l.drop_probability,
            nominal_rate: l.nominal_rate,
            max_gap_clamp: l.max_gap_clamp,
            burst_probability: l.burst_probability,
        }
    }
}

impl LinkSection {
    pub fn model(&self) -> LinkModel {
        LinkModel {
            range_sigma: self.range_sigma,
            drop_probability: self.drop_probability,
            nominal_rate: self.nominal_rate,
            max_gap_clamp: self.max_gap_clamp,
            burst_probability: self.burst_probability,
        }
    }
}

impl OrderingChoice {
    pub fn ordering(self) -> SlotOrdering {
        match self {
            OrderingChoice::Lexicographic => SlotOrdering::Lexicographic,
            OrderingChoice::Spread => SlotOrdering::Spread,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Checks every parameter the chosen experiment will use, before anything runs.
    pub fn validate(&self) -> Result<Experiment> {
        let Some(kind) = self.experiment else {
            bail!("no experiment given; set `experiment` in the config or pass --experiment");
        };
        let positive = |name: &str, v: f64| -> Result<()> {
            if !(v > 0.0 && v.is_finite()) {
                bail!("{name} must be a positive number, got {v}");
            }
            Ok(())
        };
        let non_negative = |name: &str, v: f64| -> Result<()> {
            if !(v >= 0.0 && v.is_finite()) {
                bail!("{name} must be ≥ 0, got {v}");
            }
            Ok(())
        };
        match kind {
            Experiment::LimitCase => {
                if !(1..=3).contains(&self.limit_case.case) {
                    bail!(
                        "limit_case.case must be 1, 2 or 3, got {}",
                        self.limit_case.case
                    );
                }
            }
            Experiment::Table1Sweep | Experiment::DisturbanceSweep => {
                let s = &self.sweep;
                if s.runs == 0 {
                    bail!("sweep.runs must be ≥ 1");
                }
                if s.sigmas.is_empty() {
                    bail!("sweep.sigmas is empty");
                }
                for &sigma in &s.sigmas {
                    non_negative("sweep.sigmas entry", sigma)?;
                }
                if !(s.radius > 1.0 && s.radius.is_finite()) {
                    bail!("sweep.radius must exceed 1 m, got {}", s.radius);
                }
                positive("sweep.period", s.period)?;
                positive("sweep.duration", s.duration)?;
                positive("sweep.rate", s.rate)?;
                let f = &self.filter;
                for (name, v) in [
                    ("filter.q_position", f.q_position),
                    ("filter.q_heading", f.q_heading),
                    ("filter.q_velocity", f.q_velocity),
                    ("filter.range_variance_gain", f.range_variance_gain),
                    ("filter.p0_position", f.p0_position),
                    ("filter.p0_heading", f.p0_heading),
                    ("filter.p0_velocity", f.p0_velocity),
                ] {
                    non_negative(name, v)?;
                }
                positive("filter.range_variance_base", f.range_variance_base)?;
                positive("filter.heading_variance", f.heading_variance)?;
                positive("filter.velocity_variance", f.velocity_variance)?;
                if kind == Experiment::DisturbanceSweep {
                    let d = &self.disturbance;
                    if d.amplitudes.is_empty() {
                        bail!("disturbance.amplitudes is empty");
                    }
                    if d.amplitudes.iter().any(|a| !a.is_finite()) {
                        bail!("disturbance.amplitudes must be finite");
                    }
                    positive("disturbance.width", d.width)?;
                    if !d.center.is_finite() {
                        bail!("disturbance.center must be finite");
                    }
                }
            }
            Experiment::ObservabilityScan => {
                let o = &self.observability;
                if o.resolution < 2 {
                    bail!("observability.resolution must be ≥ 2, got {}", o.resolution);
                }
                for (name, r) in [
                    ("observability.px_range", o.px_range),
                    ("observability.py_range", o.py_range),
                ] {
                    if !(r[0].is_finite() && r[1].is_finite() && r[1] > r[0]) {
                        bail!("{name} must be increasing, got {r:?}");
                    }
                }
                non_negative("observability.threshold", o.threshold)?;
            }
            Experiment::UnobservableSearch => {
                let s = &self.search;
                if s.restarts == 0 || s.max_iterations == 0 {
                    bail!("search.restarts and search.max_iterations must be ≥ 1");
                }
                positive("search.target", s.target)?;
                positive("search.condition_tol", s.condition_tol)?;
                positive("search.max_speed", s.max_speed)?;
                positive("search.max_accel", s.max_accel)?;
                positive("search.max_position", s.max_position)?;
                positive("search.grid_span", s.grid_span)?;
                if s.grid_resolution < 2 {
                    bail!("search.grid_resolution must be ≥ 2");
                }
            }
            Experiment::LeaderFollower => {
                let lf = &self.leader_follower;
                positive("leader_follower.duration", lf.duration)?;
                positive("leader_follower.dt", lf.dt)?;
                if lf.delays.is_empty() {
                    bail!("leader_follower.delays is empty");
                }
                for &d in &lf.delays {
                    positive("leader_follower.delays entry", d)?;
                }
                for d in &lf.delays {
                    self.controller.config(*d).validate()?;
                }
                self.link.model().validate()?;
            }
        }
        Ok(kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            ExperimentConfig::parse("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::default();
        c.experiment = Some(Experiment::DisturbanceSweep);
        c.seed = 99;
        c.sweep.sigmas = vec![0.0, 0.5];
        let back = ExperimentConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn default_filter_section_is_the_accuracy_preset() {
        assert_eq!(
            FilterSection::default().tuning(),
            FilterTuning::accuracy_table()
        );
    }

    #[test]
    fn unknown_keys_name_the_field_and_line() {
        let err = ExperimentConfig::parse("experiment = \"limit-case\"\n[sweep]\nrunz = 3\n")
            .unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("runz"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn bad_values_are_rejected_before_running() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_err());
        c.experiment = Some(Experiment::LimitCase);
        c.limit_case.case = 4;
        assert!(c.validate().is_err());
        c.limit_case.case = 2;
        assert_eq!(c.validate().unwrap(), Experiment::LimitCase);
        c.experiment = Some(Experiment::LeaderFollower);
        c.link.drop_probability = 1.5;
        assert!(c.validate().is_err());
    }
}
