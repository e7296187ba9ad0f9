//! Dense least-squares kernels shared by every solver.
//!
//! All linear solves go through one routine: a column-pivoted QR with a
//! complete orthogonal second stage, which returns the minimum-norm
//! least-squares solution at any rank. Boundary-system Jacobians are
//! routinely rank-deficient (trailing softmax rows flatten out), so the
//! rank-deficient path is the common case, not the exception.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Pivots below this fraction of the leading pivot count as zero.
pub const RANK_REL_TOL: f64 = 1e-12;

/// Minimum-norm least-squares solution of `A x = b` and the effective rank.
///
/// Column-pivoted QR orders the diagonal of R by decreasing magnitude; the
/// rank is the number of pivots above `RANK_REL_TOL` relative to the first.
/// The rank-deficient case routes through QR of the leading block's
/// transpose, which selects the minimum-norm member of the solution set.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(Error::Shape(format!(
            "matrix has {m} rows but right-hand side has {}",
            b.len()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(
            "least-squares system contains non-finite values".into(),
        ));
    }
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let k = m.min(n);
    let lead = r[(0, 0)].abs();
    let rank = if lead == 0.0 {
        0
    } else {
        (0..k)
            .filter(|&i| r[(i, i)].abs() > RANK_REL_TOL * lead)
            .count()
    };
    if rank == 0 {
        return Ok((DVector::zeros(n), 0));
    }
    let qtb = qr.q().transpose() * b;
    let c = qtb.rows(0, rank).into_owned();
    // T is the full-row-rank leading block of R; the minimum-norm y with
    // T y = c is Q2 z where T^T = Q2 R2 and R2^T z = c.
    let t = r.rows(0, rank).into_owned();
    let qr2 = t.transpose().qr();
    let z = qr2
        .r()
        .transpose()
        .solve_lower_triangular(&c)
        .ok_or_else(|| Error::Singular("triangular factor lost rank mid-solve".into()))?;
    let mut y = qr2.q() * z;
    qr.p().inv_permute_rows(&mut y);
    Ok((y, rank))
}

/// Solves the damped normal equations `(J^T J + mu I) h = -J^T phi` by QR
/// on the stacked system `[J; sqrt(mu) I] h = [-phi; 0]`, which avoids
/// squaring the condition number.
pub fn solve_damped(j: &DMatrix<f64>, phi: &DVector<f64>, mu: f64) -> Result<DVector<f64>> {
    if !(mu >= 0.0) {
        return Err(Error::Domain(format!(
            "damping must be non-negative, got {mu}"
        )));
    }
    if mu == 0.0 {
        return Ok(lstsq_min_norm(j, &(-phi))?.0);
    }
    let (m, n) = j.shape();
    if phi.len() != m {
        return Err(Error::Shape(format!(
            "Jacobian has {m} rows but residual has {}",
            phi.len()
        )));
    }
    let mut aug = DMatrix::zeros(m + n, n);
    aug.view_mut((0, 0), (m, n)).copy_from(j);
    let root = mu.sqrt();
    for i in 0..n {
        aug[(m + i, i)] = root;
    }
    let mut rhs = DVector::zeros(m + n);
    rhs.rows_mut(0, m).copy_from(&(-phi));
    Ok(lstsq_min_norm(&aug, &rhs)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn square_full_rank_matches_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = random_matrix(&mut rng, 4, 4) + DMatrix::identity(4, 4) * 0.5;
            let b = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let (x, rank) = lstsq_min_norm(&a, &b).unwrap();
            assert_eq!(rank, 4);
            let oracle = a.clone().lu().solve(&b).unwrap();
            assert_relative_eq!(x, oracle, epsilon = 1e-9);
        }
    }

    #[test]
    fn overdetermined_satisfies_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = random_matrix(&mut rng, 7, 3);
            let b = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
            let (x, rank) = lstsq_min_norm(&a, &b).unwrap();
            assert_eq!(rank, 3);
            let grad = a.transpose() * (&a * &x - &b);
            assert!(
                grad.norm() < 1e-9,
                "normal equations violated: {}",
                grad.norm()
            );
        }
    }

    #[test]
    fn rank_deficient_picks_minimum_norm() {
        // Second column is zero: x_2 is free and must come back 0.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = DVector::from_column_slice(&[2.0, 3.0]);
        let (x, rank) = lstsq_min_norm(&a, &b).unwrap();
        assert_eq!(rank, 1);
        assert_relative_eq!(x[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 0.0, epsilon = 1e-12);

        // Duplicated columns: solutions satisfy x_1 + x_2 = 2, minimum
        // norm splits the mass evenly.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_column_slice(&[2.0, 2.0]);
        let (x, rank) = lstsq_min_norm(&a, &b).unwrap();
        assert_eq!(rank, 1);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn wide_system_picks_minimum_norm() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_column_slice(&[2.0]);
        let (x, rank) = lstsq_min_norm(&a, &b).unwrap();
        assert_eq!(rank, 1);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn minimum_norm_beats_other_solutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            // Rank-2 matrix in R^{4x4} built from an outer product pair.
            let u = random_matrix(&mut rng, 4, 2);
            let v = random_matrix(&mut rng, 2, 4);
            let a = &u * &v;
            let x_true = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let b = &a * &x_true;
            let (x, rank) = lstsq_min_norm(&a, &b).unwrap();
            assert_eq!(rank, 2);
            assert!((&a * &x - &b).norm() < 1e-9);
            assert!(x.norm() <= x_true.norm() + 1e-9);
        }
    }

    #[test]
    fn zero_matrix_returns_zero_solution() {
        let a = DMatrix::zeros(3, 2);
        let b = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let (x, rank) = lstsq_min_norm(&a, &b).unwrap();
        assert_eq!(rank, 0);
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_non_finite_input() {
        let a = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        let b = DVector::from_column_slice(&[1.0]);
        assert!(lstsq_min_norm(&a, &b).is_err());
    }

    #[test]
    fn damped_solve_satisfies_damped_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let j = random_matrix(&mut rng, 5, 3);
            let phi = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            let mu = rng.random_range(1e-6..10.0);
            let h = solve_damped(&j, &phi, mu).unwrap();
            let lhs = j.transpose() * &j * &h + &h * mu;
            let rhs = -(j.transpose() * &phi);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-9);
        }
    }

    #[test]
    fn damped_solve_handles_singular_jacobian() {
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let phi = DVector::from_column_slice(&[1.0, -3.0]);
        let h = solve_damped(&j, &phi, 1e-3).unwrap();
        assert!(h.iter().all(|v| v.is_finite()));
        let lhs = j.transpose() * &j * &h + &h * 1e-3;
        let rhs = -(j.transpose() * &phi);
        assert_relative_eq!(lhs, rhs, epsilon = 1e-9);
    }

    #[test]
    fn damped_solve_rejects_negative_mu() {
        let j = DMatrix::identity(2, 2);
        let phi = DVector::from_column_slice(&[1.0, 1.0]);
        assert!(solve_damped(&j, &phi, -1.0).is_err());
    }
}
