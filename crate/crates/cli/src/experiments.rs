//! One runner per experiment kind. Each writes `summary.csv` plus its traces into the output
//! directory and reports how many runs failed or aborted.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use rangeloc::control::{
    run_leader_follower, FollowerSetup, FollowerStatus, InitialHistory, LeaderFollowerSetup,
    OwnSensing,
};
use rangeloc::ekf::{write_trace_csv, EkfConfig};
use rangeloc::geometry::{InputVector, RelativeState, SystemVariant, Vec2};
use rangeloc::observability::{
    check_intuitive_conditions_b, find_unobservable_configuration, presets,
    scan_observability_grid, GridScan, SearchBounds, SearchOptions,
};
use rangeloc::ranging;
use rangeloc::scenario::{
    circular_trajectory_pair, compare_percentage, convergence_summary, disturbance_sweep,
    limit_case_scenario, monte_carlo_amae, run_simulation, AmaeStudy, DisturbanceModel, LimitCase,
    NoiseModel, Scenario, Trajectory,
};

use crate::config::{Experiment, ExperimentConfig, ObservabilityPreset, VariantChoice};

/// What a finished experiment leaves behind besides its files.
#[derive(Debug, Default)]
pub struct Report {
    /// Runs that failed or aborted.
    pub failures: usize,
    /// One-line human summary.
    pub headline: String,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

pub fn run(kind: Experiment, config: &ExperimentConfig, out: &Path) -> Result<Report> {
    match kind {
        Experiment::LimitCase => limit_case(config, out),
        Experiment::Table1Sweep => table1_sweep(config, out),
        Experiment::DisturbanceSweep => disturbance(config, out),
        Experiment::ObservabilityScan => observability_scan(config, out),
        Experiment::UnobservableSearch => unobservable_search(config, out),
        Experiment::LeaderFollower => leader_follower(config, out),
    }
}

fn variants(choice: VariantChoice) -> Vec<SystemVariant> {
    match choice {
        VariantChoice::A => vec![SystemVariant::A],
        VariantChoice::B => vec![SystemVariant::B],
        VariantChoice::Both => vec![SystemVariant::A, SystemVariant::B],
    }
}

fn limit_case(config: &ExperimentConfig, out: &Path) -> Result<Report> {
    let n = config.limit_case.case;
    let case = LimitCase::from_number(n).context("limit case out of range")?;
    let scenario = Scenario {
        seed: config.seed,
        ..limit_case_scenario(case)
    };
    let mut summary = create(out, "summary.csv")?;
    writeln!(
        summary,
        "case,variant,p_converged,dpsi_converged,final_pos_err_m,final_dpsi_err_rad,flags"
    )?;
    let mut headline = Vec::new();
    for variant in variants(config.limit_case.variant) {
        let (x0, _) = scenario.truth_at(0.0);
        let cfg = EkfConfig::with_defaults(variant, x0, scenario.noise.sigma_range);
        let run = run_simulation(&scenario, &cfg)?;
        write_trace_csv(
            create(out, &format!("trace_case{n}_{variant}.csv"))?,
            &run.trace_rows(),
        )?;
        let s = convergence_summary(&run);
        let flags = format!(
            "dpsi_converged={},p_converged={}",
            s.dpsi_converged, s.p_converged
        );
        writeln!(
            summary,
            "{n},{variant},{},{},{},{},\"{flags}\"",
            s.p_converged, s.dpsi_converged, s.final_pos_err, s.final_dpsi_err
        )?;
        headline.push(format!("{variant}: {flags}"));
    }
    Ok(Report {
        failures: 0,
        headline: headline.join("; "),
    })
}

fn sweep_study(config: &ExperimentConfig) -> Result<AmaeStudy> {
    let s = &config.sweep;
    let base = Scenario {
        duration: s.duration,
        rate: s.rate,
        ..circular_trajectory_pair(s.radius, 2.0 * PI / s.period)?
    };
    let mut study = AmaeStudy::new(base, s.runs, config.seed);
    study.sigmas = s.sigmas.clone();
    study.tuning = config.filter.tuning();
    Ok(study)
}

/// Trace of the first realization of every cell, for plotting.
fn write_first_run_traces(study: &AmaeStudy, out: &Path, prefix: &str) -> Result<()> {
    let dir = out.join("traces");
    fs::create_dir_all(&dir)?;
    let (x0, _) = study.base.truth_at(0.0);
    let dt = study.base.time_step();
    for &variant in &study.variants {
        for &sigma in &study.sigmas {
            let scenario = Scenario {
                noise: NoiseModel {
                    sigma_range: sigma,
                    ..study.base.noise
                },
                seed: study.seed,
                stream: 0,
                ..study.base.clone()
            };
            let cfg = study.tuning.ekf_config(variant, x0, sigma, dt);
            // a failed realization is already counted in the table
            if let Ok(run) = run_simulation(&scenario, &cfg) {
                let name = format!("{prefix}{variant}_sigma{sigma}_run0.csv");
                write_trace_csv(create(&dir, &name)?, &run.trace_rows())?;
            }
        }
    }
    Ok(())
}

fn table1_sweep(config: &ExperimentConfig, out: &Path) -> Result<Report> {
    let study = sweep_study(config)?;
    let table = monte_carlo_amae(&study)?;
    table.write_csv(create(out, "summary.csv")?)?;
    write_first_run_traces(&study, out, "")?;
    let col = |v| {
        table
            .column(v)
            .iter()
            .map(|x| format!("{:.1}", x * 100.0))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok(Report {
        failures: table.total_failed(),
        headline: format!(
            "AMAE (cm) A: {}; B: {}",
            col(SystemVariant::A),
            col(SystemVariant::B)
        ),
    })
}

fn disturbance(config: &ExperimentConfig, out: &Path) -> Result<Report> {
    let study = sweep_study(config)?;
    let d = &config.disturbance;
    let template = DisturbanceModel {
        width: d.width,
        center: d.center,
        ..DisturbanceModel::default()
    };
    let cells = disturbance_sweep(&study, &d.amplitudes, template)?;
    let mut summary = create(out, "summary.csv")?;
    writeln!(
        summary,
        "amplitude_rad,sigma_range,amae_a_m,amae_b_m,b_vs_a_percent"
    )?;
    let mut b_better = 0;
    for c in &cells {
        writeln!(
            summary,
            "{},{},{:.6},{:.6},{}",
            c.amplitude,
            c.sigma_range,
            c.amae_a,
            c.amae_b,
            // undefined against a zero baseline
            compare_percentage(c.amae_a, c.amae_b).map_or(String::new(), |p| format!("{p:.3}"))
        )?;
        b_better += usize::from(c.amae_b < c.amae_a);
    }
    drop(summary);
    for &amplitude in &d.amplitudes {
        let mut s = study.clone();
        s.variants = vec![SystemVariant::A, SystemVariant::B];
        s.base.disturbance = DisturbanceModel {
            amplitude,
            enabled: amplitude != 0.0,
            ..template
        };
        write_first_run_traces(&s, out, &format!("Ad{amplitude}_"))?;
    }
    let failures = cells
        .iter()
        .filter(|c| !(c.amae_a.is_finite() && c.amae_b.is_finite()))
        .count();
    Ok(Report {
        failures,
        headline: format!("B below A in {b_better} of {} cells", cells.len()),
    })
}

fn write_grid_summary(out: &Path, label: &str, scan: &GridScan, threshold: f64) -> Result<()> {
    scan.write_csv(create(out, "grid.csv")?)?;
    let mut summary = create(out, "summary.csv")?;
    writeln!(
        summary,
        "configuration,resolution,threshold,unobservable_fraction,zero_crossing_fraction"
    )?;
    writeln!(
        summary,
        "{label},{},{threshold},{:.6},{:.6}",
        scan.resolution,
        scan.unobservable_fraction(threshold),
        scan.zero_crossing_fraction()
    )?;
    Ok(())
}

fn observability_scan(config: &ExperimentConfig, out: &Path) -> Result<Report> {
    let o = &config.observability;
    let v = |a: [f64; 2]| Vec2::new(a[0], a[1]);
    let (mut x, mut u) = match o.preset {
        ObservabilityPreset::HostStatic => presets::host_static(),
        ObservabilityPreset::ParallelVelocities => presets::parallel_velocities(),
        ObservabilityPreset::Custom => (
            RelativeState {
                p: Vec2::zeros(),
                delta_psi: o.delta_psi,
                v1: v(o.v1),
                v2: v(o.v2),
            },
            InputVector {
                a1: v(o.a1),
                a2: v(o.a2),
                r1: 0.0,
                r2: 0.0,
            },
        ),
    };
    if o.host_acceleration {
        (x, u) = presets::with_host_acceleration((x, u));
    }
    let scan = scan_observability_grid(
        &x,
        &u,
        (o.px_range[0], o.px_range[1]),
        (o.py_range[0], o.py_range[1]),
        o.resolution,
    )?;
    let label = format!(
        "{:?}{}",
        o.preset,
        if o.host_acceleration {
            "+host_acceleration"
        } else {
            ""
        }
    );
    write_grid_summary(out, &label, &scan, o.threshold)?;
    Ok(Report {
        failures: 0,
        headline: format!(
            "{:.1} % of the grid below threshold {}",
            100.0 * scan.unobservable_fraction(o.threshold),
            o.threshold
        ),
    })
}

fn unobservable_search(config: &ExperimentConfig, out: &Path) -> Result<Report> {
    let s = &config.search;
    let bounds = SearchBounds {
        max_speed: s.max_speed,
        max_accel: s.max_accel,
        max_position: s.max_position,
    };
    let options = SearchOptions {
        restarts: s.restarts,
        max_iterations: s.max_iterations,
        target: s.target,
        condition_tol: s.condition_tol,
    };
    let found = find_unobservable_configuration(config.seed, &bounds, &options)?;
    let (x, u) = (found.state, found.input);
    let conditions = check_intuitive_conditions_b(&x, &u, s.condition_tol);

    let mut cfg = create(out, "configuration.csv")?;
    writeln!(
        cfg,
        "px,py,delta_psi,v1x,v1y,v2x,v2y,a1x,a1y,a2x,a2y,measure,restart,intuitive_conditions_met"
    )?;
    writeln!(
        cfg,
        "{},{},{},{},{},{},{},{},{},{},{},{:e},{},{}",
        x.p.x,
        x.p.y,
        x.delta_psi,
        x.v1.x,
        x.v1.y,
        x.v2.x,
        x.v2.y,
        u.a1.x,
        u.a1.y,
        u.a2.x,
        u.a2.y,
        found.measure,
        found.restart,
        conditions.all()
    )?;
    drop(cfg);

    let span = s.grid_span;
    let scan = scan_observability_grid(
        &x,
        &u,
        (x.p.x - span, x.p.x + span),
        (x.p.y - span, x.p.y + span),
        s.grid_resolution,
    )?;
    write_grid_summary(out, "search", &scan, s.target)?;
    Ok(Report {
        failures: 0,
        headline: format!(
            "|det M_B| = {:.2e} on restart {} with all intuitive conditions {}",
            found.measure,
            found.restart,
            if conditions.all() { "met" } else { "NOT met" }
        ),
    })
}

fn leader_follower(config: &ExperimentConfig, out: &Path) -> Result<Report> {
    let lf = &config.leader_follower;
    let leader = Trajectory::turning_course();
    let offset = Vec2::new(lf.start_offset[0], lf.start_offset[1]);
    let followers = lf
        .delays
        .iter()
        .map(|&tau| {
            let mut f = FollowerSetup::new(tau, leader.sample(-tau).position + offset);
            f.controller = config.controller.config(tau);
            if lf.perfect_state {
                f.perfect_state = true;
                f.sensing = OwnSensing::perfect();
            }
            f
        })
        .collect();
    let mut setup = LeaderFollowerSetup::new(followers, config.seed);
    setup.duration = lf.duration;
    setup.dt = lf.dt;
    setup.link = config.link.model();
    setup.ordering = lf.ordering.ordering();
    if !lf.warmup {
        setup.history = InitialHistory::Hover;
    }
    let result = run_leader_follower(&setup)?;

    let mut summary = create(out, "summary.csv")?;
    writeln!(summary, "follower,tau_delay_s,status,aborted_at_s,localization_mae_m,tracking_mae_m,saturated_fraction")?;
    let mut headline = Vec::new();
    for f in &result.followers {
        let (status, at) = match &f.status {
            FollowerStatus::Completed => ("completed".to_string(), String::new()),
            FollowerStatus::Aborted { t, reason } => (
                format!("aborted: {}", reason.replace(',', ";")),
                t.to_string(),
            ),
        };
        writeln!(
            summary,
            "{},{},{status},{at},{:.6},{:.6},{:.6}",
            f.id,
            f.tau_delay,
            f.localization_mae(),
            f.tracking_mae(),
            f.saturated_fraction()
        )?;
        f.write_csv(create(out, &format!("follower_{}.csv", f.id))?)?;
        headline.push(format!(
            "follower {} (τ={} s): localization {:.1} cm, tracking {:.1} cm",
            f.id,
            f.tau_delay,
            100.0 * f.localization_mae(),
            100.0 * f.tracking_mae()
        ));
    }
    ranging::write_trace_csv(create(out, "exchanges.csv")?, &result.exchanges)?;
    let failures = result
        .followers
        .iter()
        .filter(|f| matches!(f.status, FollowerStatus::Aborted { .. }))
        .count();
    Ok(Report {
        failures,
        headline: headline.join("; "),
    })
}
