//! Observability tests for both system variants.
//!
//! Variant A loses observability when the relative velocity `−v1 + R v2` is a multiple of `p`.
//! Variant B needs the 3×3 matrix `M_B` built from the first three Lie-gradient rows of the
//! half-squared range to be non-singular.

mod lie;
mod search;

pub use lie::{
    lie_derivatives, numeric_observability_matrix, numeric_observability_rank, RANK_CUTOFF,
};
pub use search::{
    find_unobservable_configuration, nelder_mead, NelderMeadResult, SearchBounds, SearchOptions,
    UnobservableConfig,
};

use std::io::{self, Write};

use nalgebra::{DMatrix, Matrix3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{
    cross2, rotation_2d, rotation_2d_derivative, InputVector, Mat2, RelativeState, SystemVariant,
    Vec2,
};

/// Threshold below which the raw cross-product measure is called unobservable in the
/// standard colour maps.
pub const DEFAULT_THRESHOLD: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservabilityError {
    #[error("Lie derivative order must be 0, 1 or 2, got {0}")]
    InvalidOrder(usize),
    #[error("grid resolution must be ≥ 2, got {0}")]
    InvalidResolution(usize),
    #[error("invalid grid range [{0}, {1}]")]
    InvalidRange(f64, f64),
    #[error("invalid search bounds: {0}")]
    InvalidBounds(String),
    #[error(
        "no unobservable configuration found after {restarts} restarts (best measure {best:.3e})"
    )]
    SearchFailed { restarts: usize, best: f64 },
}

/// Whether the raw measure or the one divided by the magnitudes of its two factors is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeasureScale {
    #[default]
    Raw,
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservabilityReport {
    pub system: SystemVariant,
    /// Signed cross product; compare its absolute value with the threshold.
    pub measure: f64,
    pub observable: bool,
    pub threshold: f64,
}

impl ObservabilityReport {
    fn new(system: SystemVariant, measure: f64, threshold: f64) -> Self {
        Self {
            system,
            measure,
            observable: measure.abs() >= threshold,
            threshold,
        }
    }
}

fn relative_velocity(x: &RelativeState) -> Vec2 {
    -x.v1 + rotation_2d(x.delta_psi) * x.v2
}

/// Rows `pᵀ` and `(−v1 + R v2)ᵀ`.
pub fn build_ma(x: &RelativeState) -> Mat2 {
    let w = relative_velocity(x);
    Mat2::new(x.p.x, x.p.y, w.x, w.y)
}

/// Variant A test: `p × (−v1 + R v2)` must be non-zero.
pub fn check_observability_a(x: &RelativeState, tol: f64) -> ObservabilityReport {
    ObservabilityReport::new(SystemVariant::A, cross2(&x.p, &relative_velocity(x)), tol)
}

/// The matrix `M_B` assembled row by row: gradients of `L⁰`, `L¹` and `L²` of the
/// half-squared range with respect to `[p, Δψ]`, with the own-rotation terms already removed.
pub fn build_mb(x: &RelativeState, u: &InputVector) -> Matrix3<f64> {
    let r = rotation_2d(x.delta_psi);
    let dr = rotation_2d_derivative(x.delta_psi);
    let w = relative_velocity(x);
    let w_dot = -u.a1 + r * u.a2;
    let last = -2.0 * x.v1.dot(&(dr * x.v2)) + x.p.dot(&(dr * u.a2));
    Matrix3::new(
        x.p.x,
        x.p.y,
        0.0,
        w.x,
        w.y,
        x.p.dot(&(dr * x.v2)),
        w_dot.x,
        w_dot.y,
        last,
    )
}

/// Left-hand side of the factored determinant, a row vector that must not be parallel to `p`.
fn det_lhs(x: &RelativeState, u: &InputVector) -> Vec2 {
    let r = rotation_2d(x.delta_psi);
    let dr = rotation_2d_derivative(x.delta_psi);
    let (p, v1, v2, a1, a2) = (x.p, x.v1, x.v2, u.a1, u.a2);
    // pᵀ R' (−a2 v1ᵀ + v2 a1ᵀ)
    let first = (-(p.dot(&(dr * a2))) * v1) + (p.dot(&(dr * v2))) * a1;
    // 2 v1ᵀ R' (v2 v1ᵀ − v2 v2ᵀ Rᵀ)
    let k = 2.0 * v1.dot(&(dr * v2));
    let second = k * (v1 - r * v2);
    first + second
}

/// Closed-form `|M_B|`.
pub fn det_mb(x: &RelativeState, u: &InputVector) -> f64 {
    let lhs = det_lhs(x, u);
    let a_p = Vec2::new(-x.p.y, x.p.x);
    lhs.dot(&a_p)
}

/// `|lhs × p|`, which equals `|det_mb|`.
pub fn observability_measure_b(x: &RelativeState, u: &InputVector) -> f64 {
    cross2(&det_lhs(x, u), &x.p).abs()
}

/// The measure divided by `‖lhs‖·‖p‖`, i.e. the sine of the angle between them.
pub fn observability_measure_b_normalized(x: &RelativeState, u: &InputVector) -> f64 {
    let lhs = det_lhs(x, u);
    let scale = lhs.norm() * x.p.norm();
    if scale == 0.0 {
        0.0
    } else {
        cross2(&lhs, &x.p).abs() / scale
    }
}

pub fn check_observability_b(
    x: &RelativeState,
    u: &InputVector,
    threshold: f64,
    scale: MeasureScale,
) -> ObservabilityReport {
    let measure = match scale {
        MeasureScale::Raw => det_mb(x, u),
        MeasureScale::Normalized => observability_measure_b_normalized(x, u).copysign(det_mb(x, u)),
    };
    ObservabilityReport::new(SystemVariant::B, measure, threshold)
}

/// The three simple necessary conditions for variant B.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntuitiveConditions {
    pub nonzero_position: bool,
    pub both_moving: bool,
    pub not_parallel: bool,
}

impl IntuitiveConditions {
    pub fn all(&self) -> bool {
        self.nonzero_position && self.both_moving && self.not_parallel
    }
}

/// Whether `v1` and `R v2` are parallel, treating near-zero `v1` as parallel to anything.
fn velocities_parallel(v1: &Vec2, rv2: &Vec2, tol: f64) -> bool {
    if v1.norm() <= tol || rv2.norm() <= tol {
        return true;
    }
    (cross2(v1, rv2) / (v1.norm() * rv2.norm())).abs() <= tol
}

pub fn check_intuitive_conditions_b(
    x: &RelativeState,
    u: &InputVector,
    tol: f64,
) -> IntuitiveConditions {
    let moving = |v: &Vec2, a: &Vec2| v.norm() > tol || a.norm() > tol;
    let accelerating = u.a1.norm() > tol || u.a2.norm() > tol;
    let rv2 = rotation_2d(x.delta_psi) * x.v2;
    IntuitiveConditions {
        nonzero_position: x.p.norm() > tol,
        both_moving: moving(&x.v1, &u.a1) && moving(&x.v2, &u.a2),
        not_parallel: accelerating || !velocities_parallel(&x.v1, &rv2, tol),
    }
}

/// Observability measure of variant B over a rectangle of relative positions.
#[derive(Debug, Clone, PartialEq)]
pub struct GridScan {
    pub px_range: (f64, f64),
    pub py_range: (f64, f64),
    pub resolution: usize,
    /// `|measure|`; row index follows px, column index follows py.
    pub values: DMatrix<f64>,
    /// Signed determinant at the same points.
    pub signed: DMatrix<f64>,
}

fn axis(range: (f64, f64), n: usize, i: usize) -> f64 {
    range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64
}

impl GridScan {
    pub fn px(&self, i: usize) -> f64 {
        axis(self.px_range, self.resolution, i)
    }

    pub fn py(&self, j: usize) -> f64 {
        axis(self.py_range, self.resolution, j)
    }

    /// Fraction of grid points with `|measure| < threshold`.
    pub fn unobservable_fraction(&self, threshold: f64) -> f64 {
        let n = self.values.iter().filter(|v| **v < threshold).count();
        n as f64 / self.values.len() as f64
    }

    /// Fraction of grid cells whose four corners do not share one sign of the determinant,
    /// i.e. cells crossed by the zero set.
    pub fn zero_crossing_fraction(&self) -> f64 {
        let n = self.resolution;
        let mut crossing = 0;
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                let c = [
                    self.signed[(i, j)],
                    self.signed[(i + 1, j)],
                    self.signed[(i, j + 1)],
                    self.signed[(i + 1, j + 1)],
                ];
                let pos = c.iter().any(|v| *v > 0.0);
                let neg = c.iter().any(|v| *v < 0.0);
                let zero = c.contains(&0.0);
                if (pos && neg) || zero {
                    crossing += 1;
                }
            }
        }
        crossing as f64 / ((n - 1) * (n - 1)) as f64
    }

    /// CSV with header `px,py,measure`, row-major.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "px,py,measure")?;
        for i in 0..self.resolution {
            for j in 0..self.resolution {
                writeln!(out, "{},{},{}", self.px(i), self.py(j), self.values[(i, j)])?;
            }
        }
        Ok(())
    }
}

/// Sweeps `p` over the rectangle with velocities, heading difference and inputs held fixed.
pub fn scan_observability_grid(
    x: &RelativeState,
    u: &InputVector,
    px_range: (f64, f64),
    py_range: (f64, f64),
    resolution: usize,
) -> Result<GridScan, ObservabilityError> {
    if resolution < 2 {
        return Err(ObservabilityError::InvalidResolution(resolution));
    }
    for (lo, hi) in [px_range, py_range] {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(ObservabilityError::InvalidRange(lo, hi));
        }
    }
    let n = resolution;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let px = axis(px_range, n, i);
            (0..n)
                .map(|j| {
                    let state = RelativeState {
                        p: Vec2::new(px, axis(py_range, n, j)),
                        ..*x
                    };
                    det_mb(&state, u)
                })
                .collect()
        })
        .collect();
    let signed = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    Ok(GridScan {
        px_range,
        py_range,
        resolution,
        values: signed.abs(),
        signed,
    })
}

/// Example configurations used by the colour-map experiment.
pub mod presets {
    use super::*;

    /// Agent 1 hovering, agent 2 flying: violates "both moving".
    pub fn host_static() -> (RelativeState, InputVector) {
        (
            RelativeState {
                p: Vec2::new(2.0, 1.0),
                delta_psi: 0.4,
                v1: Vec2::zeros(),
                v2: Vec2::new(1.0, 0.5),
            },
            InputVector::zeros(),
        )
    }

    /// Parallel velocities without acceleration: violates "not parallel".
    pub fn parallel_velocities() -> (RelativeState, InputVector) {
        let delta_psi = 0.4;
        let v2 = Vec2::new(0.5, 0.0);
        (
            RelativeState {
                p: Vec2::new(2.0, 1.0),
                delta_psi,
                v1: rotation_2d(delta_psi) * v2 * 2.0,
                v2,
            },
            InputVector::zeros(),
        )
    }

    /// Adds a host acceleration of `[0.3, 0.3]` to a preset.
    pub fn with_host_acceleration(
        cfg: (RelativeState, InputVector),
    ) -> (RelativeState, InputVector) {
        let (x, u) = cfg;
        (
            x,
            InputVector {
                a1: Vec2::new(0.3, 0.3),
                ..u
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state(p: [f64; 2], dpsi: f64, v1: [f64; 2], v2: [f64; 2]) -> RelativeState {
        RelativeState::new(Vec2::from(p), dpsi, Vec2::from(v1), Vec2::from(v2)).unwrap()
    }

    #[test]
    fn ma_by_substitution() {
        let x = state([1.0, 1.0], 0.0, [1.0, 0.0], [0.0, 0.0]);
        assert_eq!(build_ma(&x), Mat2::new(1.0, 1.0, -1.0, 0.0));
        let r = check_observability_a(&x, 1e-6);
        // p_x·w_y − p_y·w_x = 1·0 − 1·(−1), which is also det(M_A)
        assert_eq!(r.measure, 1.0);
        assert_eq!(r.measure, build_ma(&x).determinant());
        assert!(r.observable);
    }

    #[test]
    fn ma_second_row_vanishes_for_matched_velocities() {
        let v2 = Vec2::new(0.3, -0.8);
        let x = RelativeState {
            p: Vec2::new(2.0, -1.0),
            delta_psi: 1.1,
            v1: rotation_2d(1.1) * v2,
            v2,
        };
        assert!(build_ma(&x).row(1).norm() < 1e-15);
    }

    #[test]
    fn flying_straight_at_target_is_unobservable_for_a() {
        let x = state([3.0, 4.0], 0.2, [0.6, 0.8], [0.0, 0.0]);
        let r = check_observability_a(&x, 1e-9);
        assert!(r.measure.abs() < 1e-15);
        assert!(!r.observable);
        assert_eq!(
            check_observability_a(&RelativeState::zeros(), 1e-9).measure,
            0.0
        );
    }

    #[test]
    fn static_tracked_agent_zeroes_det() {
        let x = state([1.0, 2.0], 0.7, [0.5, -0.3], [0.0, 0.0]);
        let u = InputVector {
            a1: Vec2::new(0.2, 0.1),
            ..InputVector::zeros()
        };
        assert_eq!(det_mb(&x, &u), 0.0);
    }

    #[test]
    fn intuitive_presets() {
        let (x, u) = presets::host_static();
        let c = check_intuitive_conditions_b(&x, &u, 0.1);
        assert!(!c.both_moving && c.nonzero_position);
        let (x, u) = presets::parallel_velocities();
        let c = check_intuitive_conditions_b(&x, &u, 0.1);
        assert!(c.both_moving && !c.not_parallel);
        let (x, u) = presets::with_host_acceleration(presets::parallel_velocities());
        assert!(check_intuitive_conditions_b(&x, &u, 0.1).all());
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        let (x, u) = presets::host_static();
        assert_eq!(
            scan_observability_grid(&x, &u, (-5.0, 5.0), (-5.0, 5.0), 1),
            Err(ObservabilityError::InvalidResolution(1))
        );
        assert!(scan_observability_grid(&x, &u, (5.0, -5.0), (-5.0, 5.0), 10).is_err());
    }

    #[test]
    fn grid_csv_layout() {
        let (x, u) = presets::with_host_acceleration(presets::host_static());
        let scan = scan_observability_grid(&x, &u, (0.0, 1.0), (-1.0, 1.0), 2).unwrap();
        let mut buf = Vec::new();
        scan.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "px,py,measure");
        assert!(lines[1].starts_with("0,-1,"));
        assert!(lines[2].starts_with("0,1,"));
        assert!(lines[3].starts_with("1,-1,"));
        assert_eq!(scan.values.nrows() * scan.values.ncols(), 4);
    }

    fn arb_config() -> impl Strategy<Value = (RelativeState, InputVector)> {
        let v = || (-2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, b)| Vec2::new(a, b));
        (
            v(),
            -3.1..3.1f64,
            v(),
            v(),
            v(),
            v(),
            -1.0..1.0f64,
            -1.0..1.0f64,
        )
            .prop_map(|(p, dpsi, v1, v2, a1, a2, r1, r2)| {
                (
                    RelativeState {
                        p: p * 3.0,
                        delta_psi: dpsi,
                        v1,
                        v2,
                    },
                    InputVector { a1, a2, r1, r2 },
                )
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn closed_form_matches_assembled_determinant((x, u) in arb_config()) {
            let det = build_mb(&x, &u).determinant();
            let closed = det_mb(&x, &u);
            prop_assert!((det - closed).abs() <= 1e-9 * (1.0 + det.abs()), "{det} vs {closed}");
        }

        #[test]
        fn measure_equals_abs_det((x, u) in arb_config()) {
            let m = observability_measure_b(&x, &u);
            let d = det_mb(&x, &u).abs();
            prop_assert!((m - d).abs() <= 1e-9 * (1.0 + d));
        }

        #[test]
        fn det_ignores_host_yaw_rate((x, u) in arb_config(), r1 in -5.0..5.0f64) {
            let changed = InputVector { r1, ..u };
            prop_assert_eq!(det_mb(&x, &u), det_mb(&x, &changed));
        }

        #[test]
        fn scaled_parallel_velocities_zero_det(
            (x, _u) in arb_config(),
            s in -3.0..3.0f64,
        ) {
            let v1 = rotation_2d(x.delta_psi) * x.v2 * s;
            let x = RelativeState { v1, ..x };
            let u = InputVector::zeros();
            let scale = 1.0 + x.p.norm_squared() * x.v2.norm_squared() * (1.0 + s * s);
            prop_assert!(det_mb(&x, &u).abs() <= 1e-12 * scale);
        }

        #[test]
        fn normalized_measure_is_a_sine((x, u) in arb_config()) {
            let m = observability_measure_b_normalized(&x, &u);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
        }
    }
}
