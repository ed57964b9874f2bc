//! Full leader-follower loop: ranging network, one filter, history buffer, controller and plant
//! per follower.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    delayed_error, follower_plant_step, ndi_control, saturate_command, ControlError,
    ControllerConfig, DelayBuffer, DelaySample, FollowerPlant,
};
use crate::ekf::{initialize, EkfInstance};
use crate::geometry::{
    rotation_2d, wrap_angle, InputVector, Measurement, MeasurementB, RelativeState, SystemVariant,
    Vec2,
};
use crate::ranging::{
    decode_message, encode_message, ExchangeEvent, LinkModel, NetworkSimulator, RangingMessage,
    ScheduleConfig, SlotOrdering, TwrOutcome,
};
use crate::scenario::{relative_truth, AgentKinematics, FilterTuning, HeadingProfile, Trajectory};

/// Errors of the follower's own velocity and yaw-rate sensing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OwnSensing {
    /// White noise per axis (m/s).
    pub velocity_sigma: f64,
    /// Spread of a constant per-axis bias drawn once per run (m/s).
    pub velocity_bias_sigma: f64,
    pub yaw_rate_sigma: f64,
    pub yaw_rate_bias_sigma: f64,
}

impl OwnSensing {
    pub fn perfect() -> Self {
        Self {
            velocity_sigma: 0.0,
            velocity_bias_sigma: 0.0,
            yaw_rate_sigma: 0.0,
            yaw_rate_bias_sigma: 0.0,
        }
    }
}

impl Default for OwnSensing {
    fn default() -> Self {
        Self {
            velocity_sigma: 0.05,
            velocity_bias_sigma: 0.03,
            yaw_rate_sigma: 0.01,
            yaw_rate_bias_sigma: 0.005,
        }
    }
}

/// How the history needed before engagement at `t = 0` comes about.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialHistory {
    /// The follower hovered at its start pose; history is filled from truth.
    Hover,
    /// The follower flies circles of `radius` at `speed` for `τ + extra` seconds before engaging.
    Warmup { extra: f64, radius: f64, speed: f64 },
}

impl Default for InitialHistory {
    fn default() -> Self {
        InitialHistory::Warmup {
            extra: 10.0,
            radius: 1.5,
            speed: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FollowerSetup {
    pub controller: ControllerConfig,
    /// Inertial start position.
    pub start_position: Vec2,
    /// Heading over time; the follower does not control its yaw.
    pub heading: HeadingProfile,
    /// Feed the controller the true relative state instead of the filter estimate.
    pub perfect_state: bool,
    pub sensing: OwnSensing,
    pub tuning: FilterTuning,
    /// Initial filter error in position and heading difference.
    pub initial_error: (Vec2, f64),
}

impl FollowerSetup {
    pub fn new(tau_delay: f64, start_position: Vec2) -> Self {
        Self {
            controller: ControllerConfig {
                tau_delay,
                ..ControllerConfig::default()
            },
            start_position,
            heading: HeadingProfile::Sinusoid {
                mean: 0.0,
                amplitude: 0.5,
                omega: 2.0 * std::f64::consts::PI / 30.0,
            },
            perfect_state: false,
            sensing: OwnSensing::default(),
            tuning: FilterTuning::default(),
            initial_error: (Vec2::new(1.0, -1.0), 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderFollowerSetup {
    pub leader: Trajectory,
    pub followers: Vec<FollowerSetup>,
    pub link: LinkModel,
    pub ordering: SlotOrdering,
    /// Engaged flight time after warm-up (s).
    pub duration: f64,
    /// Simulation and control step (s).
    pub dt: f64,
    pub seed: u64,
    pub history: InitialHistory,
}

impl LeaderFollowerSetup {
    pub fn new(followers: Vec<FollowerSetup>, seed: u64) -> Self {
        Self {
            leader: Trajectory::turning_course(),
            followers,
            link: LinkModel::default(),
            ordering: SlotOrdering::Lexicographic,
            duration: 200.0,
            dt: 0.01,
            seed,
            history: InitialHistory::default(),
        }
    }

    fn validate(&self) -> Result<(), ControlError> {
        if self.followers.is_empty() || self.followers.len() > 254 {
            return Err(ControlError::InvalidConfig(
                "need between 1 and 254 followers".into(),
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(ControlError::InvalidTimeStep(self.dt));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(ControlError::InvalidConfig(format!(
                "duration must be > 0, got {}",
                self.duration
            )));
        }
        if let InitialHistory::Warmup {
            extra,
            radius,
            speed,
        } = self.history
        {
            if !(extra >= 0.0 && radius > 0.0 && speed > 0.0) {
                return Err(ControlError::InvalidConfig(
                    "warm-up needs extra ≥ 0, radius > 0, speed > 0".into(),
                ));
            }
        }
        self.link
            .validate()
            .map_err(|e| ControlError::InvalidConfig(e.to_string()))?;
        for f in &self.followers {
            f.controller.validate()?;
        }
        Ok(())
    }

    fn max_delay(&self) -> f64 {
        self.followers
            .iter()
            .map(|f| f.controller.tau_delay)
            .fold(0.0, f64::max)
    }
}

pub const TRACKING_CSV_HEADER: &str = "t,ex,ey,track_err_m,loc_err_m,cmd_x,cmd_y,saturated";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingRow {
    pub t: f64,
    /// Error vector the controller worked with.
    pub e: Vec2,
    /// Distance between the follower and the leader's true position `τ` ago.
    pub track_err: f64,
    /// `‖p̂ − p‖`.
    pub loc_err: f64,
    pub command: Vec2,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FollowerStatus {
    Completed,
    Aborted { t: f64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FollowerOutcome {
    pub id: u8,
    pub tau_delay: f64,
    pub rows: Vec<TrackingRow>,
    pub status: FollowerStatus,
}

impl FollowerOutcome {
    pub fn tracking_mae(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.track_err))
    }

    pub fn localization_mae(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.loc_err))
    }

    pub fn saturated_fraction(&self) -> f64 {
        mean(
            self.rows
                .iter()
                .map(|r| if r.saturated { 1.0 } else { 0.0 }),
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{TRACKING_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{:.3},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                r.t,
                r.e.x,
                r.e.y,
                r.track_err,
                r.loc_err,
                r.command.x,
                r.command.y,
                u8::from(r.saturated)
            )?;
        }
        Ok(())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderFollowerResult {
    pub followers: Vec<FollowerOutcome>,
    pub exchanges: Vec<ExchangeEvent>,
}

impl LeaderFollowerResult {
    pub fn any_aborted(&self) -> bool {
        self.followers
            .iter()
            .any(|f| matches!(f.status, FollowerStatus::Aborted { .. }))
    }
}

fn kinematics(plant: &FollowerPlant, accel_h: Vec2) -> AgentKinematics {
    AgentKinematics {
        position: plant.position,
        velocity: plant.inertial_velocity(),
        acceleration: rotation_2d(plant.heading) * accel_h,
        heading: plant.heading,
        yaw_rate: plant.yaw_rate,
    }
}

fn leader_message(k: &AgentKinematics, t: f64) -> RangingMessage {
    let v = k.velocity_h();
    let a = k.acceleration_h();
    RangingMessage {
        sender_id: 0,
        vx: v.x as f32,
        vy: v.y as f32,
        ax: a.x as f32,
        ay: a.y as f32,
        yaw_rate: k.yaw_rate as f32,
        height: 1.5,
        timestamp_us: (t.max(0.0) * 1e6) as u64,
        ..RangingMessage::default()
    }
}

struct Follower {
    setup: FollowerSetup,
    plant: FollowerPlant,
    ekf: Option<EkfInstance>,
    buffer: DelayBuffer,
    rng: ChaCha8Rng,
    velocity_bias: Vec2,
    yaw_rate_bias: f64,
    leader_msg: Option<RangingMessage>,
    pending_range: Option<f64>,
    command: Vec2,
    outcome: FollowerOutcome,
}

impl Follower {
    fn aborted(&self) -> bool {
        matches!(self.outcome.status, FollowerStatus::Aborted { .. })
    }

    fn abort(&mut self, t: f64, reason: String) {
        self.outcome.status = FollowerStatus::Aborted { t, reason };
    }

    fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

/// Runs the closed loop from the start of the warm-up to `duration` seconds after engagement.
///
/// Agent 0 is the leader; follower `i` is agent `i + 1`. Logged rows cover the engaged part
/// only.
pub fn run_leader_follower(
    setup: &LeaderFollowerSetup,
) -> Result<LeaderFollowerResult, ControlError> {
    setup.validate()?;
    let dt = setup.dt;
    let horizon = setup.max_delay() + 2.0;
    let t_start = match setup.history {
        InitialHistory::Hover => 0.0,
        InitialHistory::Warmup { extra, .. } => -(setup.max_delay() + extra),
    };

    let n_agents = (setup.followers.len() + 1) as u8;
    let schedule = ScheduleConfig::new(n_agents, setup.ordering)
        .map_err(|e| ControlError::InvalidConfig(e.to_string()))?;
    let mut net_rng = ChaCha8Rng::seed_from_u64(setup.seed);
    net_rng.set_stream(0);
    let mut network = NetworkSimulator::new(schedule, setup.link, net_rng)
        .map_err(|e| ControlError::InvalidConfig(e.to_string()))?
        .starting_at(t_start);
    let mut exchanges = Vec::new();

    let mut followers = Vec::with_capacity(setup.followers.len());
    for (i, fs) in setup.followers.iter().enumerate() {
        let id = (i + 1) as u8;
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
        rng.set_stream(id as u64);
        let (psi0, r0) = fs.heading.at(t_start);
        let mut plant = FollowerPlant::at_rest(fs.start_position, psi0, fs.controller.tau_plant);
        plant.yaw_rate = r0;
        let mut f = Follower {
            setup: fs.clone(),
            plant,
            ekf: None,
            buffer: DelayBuffer::new(horizon)?,
            rng,
            velocity_bias: Vec2::zeros(),
            yaw_rate_bias: 0.0,
            leader_msg: None,
            pending_range: None,
            command: Vec2::zeros(),
            outcome: FollowerOutcome {
                id,
                tau_delay: fs.controller.tau_delay,
                rows: Vec::new(),
                status: FollowerStatus::Completed,
            },
        };
        let s = fs.sensing;
        f.velocity_bias = Vec2::new(f.gaussian(), f.gaussian()) * s.velocity_bias_sigma;
        f.yaw_rate_bias = f.gaussian() * s.yaw_rate_bias_sigma;

        let leader0 = setup.leader.sample(t_start);
        let (truth0, _) = relative_truth(&kinematics(&f.plant, Vec2::zeros()), &leader0);
        if !fs.perfect_state {
            let (dp, dpsi) = fs.initial_error;
            let x0 = RelativeState {
                p: truth0.p + dp,
                delta_psi: wrap_angle(truth0.delta_psi + dpsi),
                ..truth0
            };
            let cfg = fs
                .tuning
                .ekf_config(SystemVariant::B, x0, setup.link.range_sigma, dt);
            f.ekf = Some(initialize(cfg).map_err(|e| ControlError::InvalidConfig(e.to_string()))?);
        }
        if setup.history == InitialHistory::Hover {
            // the follower has been hovering at its start pose; fill the delay with truth
            let steps = (horizon / dt).ceil() as usize;
            for k in (1..=steps).rev() {
                let t = -(k as f64) * dt;
                let leader = setup.leader.sample(t);
                let (truth, input) = relative_truth(&kinematics(&f.plant, Vec2::zeros()), &leader);
                f.buffer.push(DelaySample {
                    t,
                    p_hat: truth.p,
                    delta_psi_hat: truth.delta_psi,
                    v1: Vec2::zeros(),
                    r1: 0.0,
                    v2: truth.v2,
                    a2: input.a2,
                    r2: input.r2,
                })?;
            }
        }
        followers.push(f);
    }

    let steps = ((setup.duration - t_start) / dt).round() as usize;
    for k in 0..=steps {
        let t = t_start + k as f64 * dt;
        let leader = setup.leader.sample(t);

        // deliver every exchange that completed by now
        let positions: Vec<Vec2> = followers.iter().map(|f| f.plant.position).collect();
        let events = network
            .run_until(t, |te, a, b| {
                let pos = |id: u8| {
                    if id == 0 {
                        setup.leader.sample(te).position
                    } else {
                        positions[id as usize - 1]
                    }
                };
                (pos(a) - pos(b)).norm()
            })
            .map_err(|e| ControlError::InvalidConfig(e.to_string()))?;
        for ev in &events {
            let id = if ev.initiator == 0 {
                ev.responder
            } else if ev.responder == 0 {
                ev.initiator
            } else {
                continue;
            };
            let TwrOutcome::Range(r) = ev.outcome else {
                continue;
            };
            let f = &mut followers[id as usize - 1];
            let msg = network
                .stamp(leader_message(&setup.leader.sample(ev.t), ev.t))
                .map_err(|e| ControlError::InvalidConfig(e.to_string()))?;
            // the message goes over the air as a frame
            f.leader_msg = decode_message(&encode_message(&msg)).ok();
            f.pending_range = Some(r);
        }
        exchanges.extend(events);

        for f in followers.iter_mut() {
            if f.aborted() {
                continue;
            }
            step_follower(f, setup, &leader, t, dt);
        }
    }

    Ok(LeaderFollowerResult {
        followers: followers.into_iter().map(|f| f.outcome).collect(),
        exchanges,
    })
}

fn step_follower(
    f: &mut Follower,
    setup: &LeaderFollowerSetup,
    leader: &AgentKinematics,
    t: f64,
    dt: f64,
) {
    let (psi, r) = f.setup.heading.at(t);
    f.plant.heading = psi;
    f.plant.yaw_rate = r;
    let accel_h = f.plant.acceleration(f.command);
    let (truth, _) = relative_truth(&kinematics(&f.plant, accel_h), leader);

    let s = f.setup.sensing;
    let noise_v = Vec2::new(f.gaussian(), f.gaussian()) * s.velocity_sigma;
    let v1_meas = f.plant.velocity + f.velocity_bias + noise_v;
    let r1_meas = r + f.yaw_rate_bias + f.gaussian() * s.yaw_rate_sigma;

    let (v2, a2, r2) = match f.leader_msg {
        Some(m) => (
            Vec2::new(m.vx as f64, m.vy as f64),
            Vec2::new(m.ax as f64, m.ay as f64),
            m.yaw_rate as f64,
        ),
        None => (Vec2::zeros(), Vec2::zeros(), 0.0),
    };

    let (p_hat, dpsi_hat) = if f.setup.perfect_state {
        f.pending_range = None;
        (truth.p, truth.delta_psi)
    } else {
        let Some(ekf) = f.ekf.as_ref() else {
            f.abort(t, "filter missing".into());
            return;
        };
        let u = InputVector {
            a1: accel_h,
            a2,
            r1: r1_meas,
            r2,
        };
        let mut next = match ekf.predict(&u, dt) {
            Ok(e) => e,
            Err(e) => return f.abort(t, format!("filter prediction failed: {e}")),
        };
        if let Some(range) = f.pending_range.take() {
            let z = Measurement::B(MeasurementB {
                range,
                v1_meas,
                v2_meas: v2,
            });
            next = match next.update(&z) {
                Ok(e) => e,
                Err(e) => return f.abort(t, format!("filter update failed: {e}")),
            };
        }
        let est = (next.state.p, next.state.delta_psi);
        f.ekf = Some(next);
        est
    };

    let sample = DelaySample {
        t,
        p_hat,
        delta_psi_hat: dpsi_hat,
        v1: v1_meas,
        r1: r1_meas,
        v2,
        a2,
        r2,
    };
    if let Err(e) = f.buffer.push(sample) {
        return f.abort(t, e.to_string());
    }

    let cfg = f.setup.controller;
    let (command, e_used, saturated) = if t >= 0.0 {
        match delayed_error(&f.buffer, t, cfg.tau_delay) {
            Ok(x) => {
                let raw = ndi_control(&x, &cfg).command;
                let cmd = saturate_command(raw, cfg.v_max);
                (cmd, x.e, cmd != raw)
            }
            Err(e) => return f.abort(t, format!("no usable history at engagement: {e}")),
        }
    } else {
        (
            warmup_command(setup, &f.plant, f.setup.start_position),
            Vec2::zeros(),
            false,
        )
    };
    if !(command.x.is_finite() && command.y.is_finite()) {
        return f.abort(t, "non-finite command".into());
    }
    if !(p_hat.x.is_finite() && p_hat.y.is_finite()) {
        return f.abort(t, "non-finite estimate".into());
    }

    if t >= 0.0 {
        let target = setup.leader.sample(t - cfg.tau_delay).position;
        f.outcome.rows.push(TrackingRow {
            t,
            e: e_used,
            track_err: (target - f.plant.position).norm(),
            loc_err: (p_hat - truth.p).norm(),
            command,
            saturated,
        });
    }

    f.command = command;
    match follower_plant_step(&f.plant, command, dt) {
        Ok(p) => f.plant = p,
        Err(e) => f.abort(t, e.to_string()),
    }
}

/// Circle around the start point, commanded in the body frame.
fn warmup_command(setup: &LeaderFollowerSetup, plant: &FollowerPlant, center: Vec2) -> Vec2 {
    let InitialHistory::Warmup { radius, speed, .. } = setup.history else {
        return Vec2::zeros();
    };
    // steer onto the circle through the start point, centred one radius to the left
    let c = center + Vec2::new(-radius, 0.0);
    let rel = plant.position - c;
    let dist = rel.norm().max(1e-9);
    let tangent = Vec2::new(-rel.y, rel.x) / dist;
    let radial = -rel / dist * (dist - radius);
    rotation_2d(-plant.heading) * (tangent * speed + radial)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ideal_setup(tau: f64, offset: Vec2) -> LeaderFollowerSetup {
        let leader = Trajectory::turning_course();
        let start = leader.sample(-tau).position + offset;
        let mut f = FollowerSetup::new(tau, start);
        f.perfect_state = true;
        f.sensing = OwnSensing::perfect();
        f.controller.v_max = 1e3;
        let mut s = LeaderFollowerSetup::new(vec![f], 1);
        s.link = LinkModel::ideal(25.0);
        s.history = InitialHistory::Hover;
        s.duration = 15.0;
        s
    }

    #[test]
    fn ideal_loop_converges_from_two_metres() {
        let res = run_leader_follower(&ideal_setup(4.0, Vec2::new(2.0, 0.0))).unwrap();
        let f = &res.followers[0];
        assert_eq!(f.status, FollowerStatus::Completed);
        assert!(
            (f.rows[0].track_err - 2.0).abs() < 0.05,
            "{}",
            f.rows[0].track_err
        );
        let late = f
            .rows
            .iter()
            .filter(|r| r.t >= 10.0)
            .map(|r| r.track_err)
            .fold(0.0, f64::max);
        assert!(late < 0.05, "{late}");
    }

    #[test]
    fn error_decays_inside_critically_damped_envelope() {
        // ë = −e − 2ė has the solution (e0 + (ė0 + e0)t)e^{−t}; the floor covers the
        // zero-order hold and the unmodelled change of the own yaw rate
        let res = run_leader_follower(&ideal_setup(4.0, Vec2::new(0.0, 2.0))).unwrap();
        let rows = &res.followers[0].rows;
        let e0 = rows[0].e.norm();
        let envelope = |t: f64| (e0 + 3.0 * (1.0 + e0) * t) * (-t).exp() + 0.02;
        for r in rows {
            assert!(r.e.norm() <= envelope(r.t), "t={} e={}", r.t, r.e.norm());
        }
    }

    #[test]
    fn rejects_bad_setups() {
        let mut s = ideal_setup(4.0, Vec2::zeros());
        s.dt = 0.0;
        assert!(run_leader_follower(&s).is_err());
        let mut s = ideal_setup(4.0, Vec2::zeros());
        s.followers.clear();
        assert!(run_leader_follower(&s).is_err());
    }

    #[test]
    fn tracking_csv_layout() {
        let out = FollowerOutcome {
            id: 1,
            tau_delay: 4.0,
            rows: vec![TrackingRow {
                t: 0.5,
                e: Vec2::new(1.0, -2.0),
                track_err: 0.25,
                loc_err: 0.125,
                command: Vec2::new(0.5, 0.0),
                saturated: true,
            }],
            status: FollowerStatus::Completed,
        };
        let mut buf = Vec::new();
        out.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            format!("{TRACKING_CSV_HEADER}\n0.500,1.000000,-2.000000,0.250000,0.125000,0.500000,0.000000,1\n")
        );
    }
}
