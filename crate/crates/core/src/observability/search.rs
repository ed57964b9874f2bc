//! Nelder-Mead search for configurations that satisfy the intuitive conditions but still
//! make `M_B` singular.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_intuitive_conditions_b, det_mb, ObservabilityError};
use crate::geometry::{cross2, rotation_2d, InputVector, RelativeState, Vec2};

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Downhill simplex with reflection 1, expansion 2, contraction 0.5 and shrink 0.5.
///
/// Stops when the spread of function values drops below `ftol` or after `max_iter` iterations.
pub fn nelder_mead<F>(
    f: F,
    x0: &DVector<f64>,
    step: f64,
    ftol: f64,
    max_iter: usize,
) -> NelderMeadResult
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = x0.len();
    let mut simplex: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.clone());
    for i in 0..n {
        let mut v = x0.clone();
        v[i] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(&f).collect();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        if (values[n] - values[0]).abs() <= ftol {
            break;
        }
        let centroid = simplex[..n]
            .iter()
            .fold(DVector::zeros(n), |acc, v| acc + v)
            / n as f64;
        let worst = simplex[n].clone();
        let reflected = &centroid + (&centroid - &worst);
        let fr = f(&reflected);
        if fr < values[0] {
            let expanded = &centroid + (&reflected - &centroid) * 2.0;
            let fe = f(&expanded);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
            continue;
        }
        let (candidate, fc) = if fr < values[n] {
            let c = &centroid + (&reflected - &centroid) * 0.5;
            let fc = f(&c);
            (c, fc)
        } else {
            let c = &centroid + (&worst - &centroid) * 0.5;
            let fc = f(&c);
            (c, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = candidate;
            values[n] = fc;
            continue;
        }
        let best = simplex[0].clone();
        for i in 1..=n {
            simplex[i] = &best + (&simplex[i] - &best) * 0.5;
            values[i] = f(&simplex[i]);
        }
    }
    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap_or(0);
    NelderMeadResult {
        x: simplex[best].clone(),
        value: values[best],
        iterations,
    }
}

/// Box the search stays in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchBounds {
    pub max_speed: f64,
    pub max_accel: f64,
    pub max_position: f64,
}

impl Default for SearchBounds {
    fn default() -> Self {
        Self {
            max_speed: 2.0,
            max_accel: 2.0,
            max_position: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub restarts: usize,
    pub max_iterations: usize,
    /// A configuration counts as unobservable when `|det M_B|` is below this.
    pub target: f64,
    /// Tolerance for the intuitive conditions.
    pub condition_tol: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            restarts: 20,
            max_iterations: 20_000,
            target: 1e-6,
            condition_tol: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnobservableConfig {
    pub state: RelativeState,
    pub input: InputVector,
    /// `|det M_B|` at the returned configuration.
    pub measure: f64,
    /// Restart on which it was found (0-based).
    pub restart: usize,
}

fn unpack(v: &DVector<f64>) -> (RelativeState, InputVector) {
    let x = RelativeState {
        p: Vec2::new(v[0], v[1]),
        delta_psi: v[2],
        v1: Vec2::new(v[3], v[4]),
        v2: Vec2::new(v[5], v[6]),
    };
    let u = InputVector {
        a1: Vec2::new(v[7], v[8]),
        a2: Vec2::new(v[9], v[10]),
        r1: 0.0,
        r2: 0.0,
    };
    (x, u)
}

fn shortfall(value: f64, min: f64) -> f64 {
    (min - value).max(0.0)
}

fn excess(value: f64, max: f64) -> f64 {
    (value - max).max(0.0)
}

/// Penalty that keeps every vector clearly non-zero, the velocities clearly non-parallel and
/// everything inside the bounds.
fn penalty(x: &RelativeState, u: &InputVector, bounds: &SearchBounds, margin: f64) -> f64 {
    let rv2 = rotation_2d(x.delta_psi) * x.v2;
    let sine = if x.v1.norm() > 0.0 && rv2.norm() > 0.0 {
        (cross2(&x.v1, &rv2) / (x.v1.norm() * rv2.norm())).abs()
    } else {
        0.0
    };
    let terms = [
        shortfall(x.p.norm(), margin),
        shortfall(x.v1.norm(), margin),
        shortfall(x.v2.norm(), margin),
        shortfall(u.a1.norm(), margin),
        shortfall(u.a2.norm(), margin),
        shortfall(sine, margin),
        excess(x.p.norm(), bounds.max_position),
        excess(x.v1.norm(), bounds.max_speed),
        excess(x.v2.norm(), bounds.max_speed),
        excess(u.a1.norm(), bounds.max_accel),
        excess(u.a2.norm(), bounds.max_accel),
    ];
    terms.iter().map(|t| t * t).sum()
}

/// `det M_B` is affine in `a2`; one exact step along the steeper axis drives it to rounding
/// level.
fn polish(x: &RelativeState, u: &InputVector) -> InputVector {
    let d0 = det_mb(x, u);
    let slope = |e: Vec2| det_mb(x, &InputVector { a2: u.a2 + e, ..*u }) - d0;
    let (sx, sy) = (slope(Vec2::x()), slope(Vec2::y()));
    let (dir, s) = if sx.abs() >= sy.abs() {
        (Vec2::x(), sx)
    } else {
        (Vec2::y(), sy)
    };
    if s == 0.0 {
        return *u;
    }
    InputVector {
        a2: u.a2 - dir * (d0 / s),
        ..*u
    }
}

/// Searches for a configuration with `|det M_B| < target` that passes all three intuitive
/// conditions, restarting from random points inside `bounds`.
pub fn find_unobservable_configuration(
    seed: u64,
    bounds: &SearchBounds,
    options: &SearchOptions,
) -> Result<UnobservableConfig, ObservabilityError> {
    let b = bounds;
    if !(b.max_speed > 0.0 && b.max_accel > 0.0 && b.max_position > 0.0) {
        return Err(ObservabilityError::InvalidBounds(format!("{b:?}")));
    }
    let tol = options.condition_tol;
    let margin = 2.0 * tol;
    if margin >= b.max_speed.min(b.max_accel).min(b.max_position) {
        return Err(ObservabilityError::InvalidBounds(format!(
            "condition tolerance {tol} leaves no room inside {b:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objective = |v: &DVector<f64>| {
        let (x, u) = unpack(v);
        det_mb(&x, &u).abs() + 1e3 * penalty(&x, &u, b, margin)
    };
    let mut best = f64::INFINITY;
    for restart in 0..options.restarts {
        let mut draw = |s: f64| {
            let r = rng.random_range(0.3..0.9) * s;
            let a: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            [r * a.cos(), r * a.sin()]
        };
        let p = draw(b.max_position * 0.5);
        let v1 = draw(b.max_speed);
        let v2 = draw(b.max_speed);
        let a1 = draw(b.max_accel);
        let a2 = draw(b.max_accel);
        let dpsi = rng.random_range(-3.0..3.0);
        let x0 = DVector::from_vec(vec![
            p[0], p[1], dpsi, v1[0], v1[1], v2[0], v2[1], a1[0], a1[1], a2[0], a2[1],
        ]);
        let result = nelder_mead(objective, &x0, 0.3, 1e-16, options.max_iterations);
        let (x, u) = unpack(&result.x);
        let x = RelativeState::new(x.p, x.delta_psi, x.v1, x.v2)
            .map_err(|e| ObservabilityError::InvalidBounds(e.to_string()))?;
        let u = polish(&x, &u);
        let measure = det_mb(&x, &u).abs();
        best = best.min(measure);
        if measure < options.target
            && check_intuitive_conditions_b(&x, &u, tol).all()
            && penalty(&x, &u, b, tol) == 0.0
        {
            return Ok(UnobservableConfig {
                state: x,
                input: u,
                measure,
                restart,
            });
        }
    }
    Err(ObservabilityError::SearchFailed {
        restarts: options.restarts,
        best,
    })
}
