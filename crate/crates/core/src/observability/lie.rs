//! Numeric observability matrix from analytic Lie derivatives and finite-difference gradients.

use nalgebra::DMatrix;

use super::ObservabilityError;
use crate::geometry::{
    rotation_2d, rotation_2d_derivative, skew_2d, InputVector, RelativeState, StateVector,
    SystemVariant, Vec2, STATE_DIM,
};

/// Central-difference step for the gradients.
const FD_STEP: f64 = 1e-5;

/// Singular values below this fraction of the largest one count as zero.
pub const RANK_CUTOFF: f64 = 1e-6;

struct Parts {
    p: Vec2,
    dpsi: f64,
    v1: Vec2,
    v2: Vec2,
}

fn split(x: &StateVector) -> Parts {
    Parts {
        p: Vec2::new(x[0], x[1]),
        dpsi: x[2],
        v1: Vec2::new(x[3], x[4]),
        v2: Vec2::new(x[5], x[6]),
    }
}

/// `L⁰`, `L¹`, `L²` of every output along the dynamics with constant input, stacked per order.
///
/// Output order: half-squared range, then (variant A only) heading difference, then `v1`, `v2`.
/// The entry for order `k` lists every output's `k`-th derivative.
pub fn lie_derivatives(x: &StateVector, u: &InputVector, variant: SystemVariant) -> [Vec<f64>; 3] {
    let Parts { p, dpsi, v1, v2 } = split(x);
    let r = rotation_2d(dpsi);
    let dr = rotation_2d_derivative(dpsi);
    let s1 = skew_2d(u.r1);
    let s2 = skew_2d(u.r2);
    let dpsi_dot = u.r2 - u.r1;

    let p_dot = -v1 + r * v2 - s1 * p;
    let v1_dot = u.a1 - s1 * v1;
    let v2_dot = u.a2 - s2 * v2;
    let w = -v1 + r * v2;
    let w_dot = -v1_dot + dr * v2 * dpsi_dot + r * v2_dot;

    let h0 = 0.5 * p.dot(&p);
    // d/dt ½pᵀp = pᵀṗ, and pᵀ S1 p = 0
    let h1 = p.dot(&w);
    let h2 = p_dot.dot(&w) + p.dot(&w_dot);

    let v1_dd = -s1 * v1_dot;
    let v2_dd = -s2 * v2_dot;

    let mut l0 = vec![h0];
    let mut l1 = vec![h1];
    let mut l2 = vec![h2];
    if variant == SystemVariant::A {
        l0.push(dpsi);
        l1.push(dpsi_dot);
        l2.push(0.0);
    }
    l0.extend([v1.x, v1.y, v2.x, v2.y]);
    l1.extend([v1_dot.x, v1_dot.y, v2_dot.x, v2_dot.y]);
    l2.extend([v1_dd.x, v1_dd.y, v2_dd.x, v2_dd.y]);
    [l0, l1, l2]
}

/// Stacked gradients of `L⁰h … L^order h` with respect to the state.
pub fn numeric_observability_matrix(
    x: &RelativeState,
    u: &InputVector,
    variant: SystemVariant,
    order: usize,
) -> Result<DMatrix<f64>, ObservabilityError> {
    if order > 2 {
        return Err(ObservabilityError::InvalidOrder(order));
    }
    let x0 = x.to_vector();
    let stacked = |xv: &StateVector| -> Vec<f64> {
        lie_derivatives(xv, u, variant)
            .into_iter()
            .take(order + 1)
            .flatten()
            .collect()
    };
    let rows = stacked(&x0).len();
    let mut o = DMatrix::zeros(rows, STATE_DIM);
    for j in 0..STATE_DIM {
        let mut plus = x0;
        let mut minus = x0;
        plus[j] += FD_STEP;
        minus[j] -= FD_STEP;
        let (fp, fm) = (stacked(&plus), stacked(&minus));
        for i in 0..rows {
            o[(i, j)] = (fp[i] - fm[i]) / (2.0 * FD_STEP);
        }
    }
    Ok(o)
}

/// Numerical rank of the observability matrix up to the given Lie derivative order.
pub fn numeric_observability_rank(
    x: &RelativeState,
    u: &InputVector,
    variant: SystemVariant,
    order: usize,
) -> Result<usize, ObservabilityError> {
    let o = numeric_observability_matrix(x, u, variant, order)?;
    let sv = o.singular_values();
    let max = sv.max();
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|s| **s > RANK_CUTOFF * max).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::derivative_of_vector;
    use crate::observability::{check_observability_a, det_mb};
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_config(rng: &mut ChaCha8Rng) -> (RelativeState, InputVector) {
        let mut v = |s: f64| Vec2::new(rng.random_range(-s..s), rng.random_range(-s..s));
        let p = v(5.0);
        let v1 = v(2.0);
        let v2 = v(2.0);
        let a1 = v(1.0);
        let a2 = v(1.0);
        let dpsi = rng.random_range(-3.0..3.0);
        let r1 = rng.random_range(-1.0..1.0);
        let r2 = rng.random_range(-1.0..1.0);
        (
            RelativeState {
                p,
                delta_psi: dpsi,
                v1,
                v2,
            },
            InputVector { a1, a2, r1, r2 },
        )
    }

    #[test]
    fn lie_derivatives_are_time_derivatives() {
        // integrate the state forward with RK4 and difference the outputs in time
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-4;
        let rk4 = |x: &StateVector, u: &InputVector, dt: f64| {
            let k1 = derivative_of_vector(x, u);
            let k2 = derivative_of_vector(&(x + k1 * (dt / 2.0)), u);
            let k3 = derivative_of_vector(&(x + k2 * (dt / 2.0)), u);
            let k4 = derivative_of_vector(&(x + k3 * dt), u);
            x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
        };
        for _ in 0..50 {
            let (x, u) = random_config(&mut rng);
            let x0 = x.to_vector();
            let xp = rk4(&x0, &u, h);
            let xm = rk4(&x0, &u, -h);
            for variant in [SystemVariant::A, SystemVariant::B] {
                let [l0, l1, l2] = lie_derivatives(&x0, &u, variant);
                let [p0, p1, _] = lie_derivatives(&xp, &u, variant);
                let [m0, m1, _] = lie_derivatives(&xm, &u, variant);
                for i in 0..l0.len() {
                    let d0 = (p0[i] - m0[i]) / (2.0 * h);
                    let d1 = (p1[i] - m1[i]) / (2.0 * h);
                    assert!(
                        (d0 - l1[i]).abs() < 1e-6 * (1.0 + l1[i].abs()),
                        "order 1 output {i}"
                    );
                    assert!(
                        (d1 - l2[i]).abs() < 1e-6 * (1.0 + l2[i].abs()),
                        "order 2 output {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn case_one_is_full_rank_for_a() {
        let x = RelativeState {
            p: Vec2::new(1.0, 1.0),
            delta_psi: 0.0,
            v1: Vec2::new(1.0, 0.0),
            v2: Vec2::zeros(),
        };
        let rank =
            numeric_observability_rank(&x, &InputVector::zeros(), SystemVariant::A, 1).unwrap();
        assert_eq!(rank, 7);
    }

    #[test]
    fn b_needs_second_order_and_a_moving_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let (x, u) = random_config(&mut rng);
            assert!(numeric_observability_rank(&x, &u, SystemVariant::B, 1).unwrap() <= 6);
        }
        let x = RelativeState {
            p: Vec2::new(1.0, 1.0),
            delta_psi: 0.3,
            v1: Vec2::new(1.0, 0.0),
            v2: Vec2::zeros(),
        };
        let u = InputVector {
            a1: Vec2::new(0.2, -0.1),
            ..InputVector::zeros()
        };
        assert!(numeric_observability_rank(&x, &u, SystemVariant::B, 2).unwrap() < 7);
    }

    #[test]
    fn rejects_high_order() {
        let x = RelativeState::zeros();
        assert_eq!(
            numeric_observability_rank(&x, &InputVector::zeros(), SystemVariant::B, 3),
            Err(ObservabilityError::InvalidOrder(3))
        );
    }

    #[test]
    fn position_heading_block_determinant_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let (x, u) = random_config(&mut rng);
            let o = numeric_observability_matrix(&x, &u, SystemVariant::B, 2).unwrap();
            // rows 0, 5, 10 are the range derivatives; columns 0..3 are p and Δψ
            let block = Matrix3::from_fn(|i, j| o[(5 * i, j)]);
            let d = det_mb(&x, &u);
            assert!(
                (block.determinant() - d).abs() < 1e-6 * (1.0 + d.abs()),
                "{} vs {d}",
                block.determinant()
            );
        }
    }

    #[test]
    fn a_classification_agrees_with_rank() {
        let tol = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut agree = 0;
        let total = 1000;
        let mut drawn = 0;
        while drawn < total {
            let (mut x, u) = random_config(&mut rng);
            if drawn % 2 == 1 {
                // land on the unobservable set: −v1 + R v2 = c·p
                let c: f64 = rng.random_range(-1.0..1.0);
                x.v1 = rotation_2d(x.delta_psi) * x.v2 - x.p * c;
            } else if check_observability_a(&x, tol).measure.abs() <= 10.0 * tol {
                continue;
            }
            drawn += 1;
            let analytic = check_observability_a(&x, tol).observable;
            let numeric = numeric_observability_rank(&x, &u, SystemVariant::A, 1).unwrap() == 7;
            if analytic == numeric {
                agree += 1;
            }
        }
        assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
    }

    #[test]
    fn b_classification_agrees_with_rank() {
        let tol = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut agree = 0;
        let total = 1000;
        let mut drawn = 0;
        while drawn < total {
            let (mut x, mut u) = random_config(&mut rng);
            if drawn % 2 == 1 {
                // tracked agent at rest
                x.v2 = Vec2::zeros();
                u.a2 = Vec2::zeros();
            } else if det_mb(&x, &u).abs() <= 10.0 * tol {
                continue;
            }
            drawn += 1;
            let analytic = det_mb(&x, &u).abs() >= tol;
            let numeric = numeric_observability_rank(&x, &u, SystemVariant::B, 2).unwrap() == 7;
            if analytic == numeric {
                agree += 1;
            }
        }
        assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
    }
}
